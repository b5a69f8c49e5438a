"""Configuration schema and the parameter grid shared by every module."""
import json
import os
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, DomainError

SYSTEMS = ('ising', 'tasep', 'oracle', 'external')


class ParamGrid(BaseModel):
    """Uniform cell-centered discretization of the rectangle [t1_min, t1_max] x [t2_min, t2_max].

    Cell (i, j) has center (t1_min + (i + 1/2) dx, t2_min + (j + 1/2) dy) and flat
    index c = i * ny + j. Field arrays are shaped (nx, ny) with axis 0 along t1.
    """
    model_config = ConfigDict(frozen=True)

    bounds: Tuple[float, float, float, float] = (-2.0, 2.0, -2.0, 2.0)
    nx: int = Field(32, ge=4)
    ny: int = Field(32, ge=4)

    @field_validator('bounds')
    @classmethod
    def _ordered(cls, v):
        if not (v[0] < v[1] and v[2] < v[3]):
            raise ValueError(f"bounds must satisfy t1_min < t1_max and t2_min < t2_max, got {v}")
        if not all(np.isfinite(v)):
            raise ValueError('bounds must be finite')
        return v

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return (self.bounds[1] - self.bounds[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.bounds[3] - self.bounds[2]) / self.ny

    @property
    def spacing(self) -> Tuple[float, float]:
        return (self.dx, self.dy)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def volume(self) -> float:
        return (self.bounds[1] - self.bounds[0]) * (self.bounds[3] - self.bounds[2])

    @property
    def t1(self) -> np.ndarray:
        return self.bounds[0] + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def t2(self) -> np.ndarray:
        return self.bounds[2] + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.t1, self.t2, indexing='ij')

    @property
    def points(self) -> np.ndarray:
        """Cell centers as an (n_cells, 2) array in flat-index order."""
        T1, T2 = self.mesh
        return np.column_stack([T1.ravel(), T2.ravel()])

    def center(self, c: int) -> np.ndarray:
        i, j = divmod(int(c), self.ny)
        return np.array([self.t1[i], self.t2[j]])

    def index(self, i: int, j: int) -> int:
        return int(i) * self.ny + int(j)

    def contains(self, point, tol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float)
        b = self.bounds
        return bool(b[0] - tol <= p[0] <= b[1] + tol and b[2] - tol <= p[1] <= b[3] + tol)

    def nearest(self, points) -> np.ndarray:
        """Flat index of the nearest cell center for each point (points clipped into the grid)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        i = np.clip(np.floor((p[:, 0] - self.bounds[0]) / self.dx), 0, self.nx - 1).astype(int)
        j = np.clip(np.floor((p[:, 1] - self.bounds[2]) / self.dy), 0, self.ny - 1).astype(int)
        return i * self.ny + j

    def normalize(self, points) -> np.ndarray:
        """Affine map of the grid rectangle onto [-1, 1]^2."""
        p = np.asarray(points, dtype=float)
        lo = np.array([self.bounds[0], self.bounds[2]])
        hi = np.array([self.bounds[1], self.bounds[3]])
        return 2.0 * (p - lo) / (hi - lo) - 1.0

    def sidecar(self) -> dict:
        return {'bounds': list(self.bounds), 'nx': self.nx, 'ny': self.ny}


class SamplerParams(BaseModel):
    """One sampler call: parameter point, chain length and seed."""
    model_config = ConfigDict(frozen=True)

    point: Tuple[float, float]
    sweeps: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)


class SamplerSpec(BaseModel):
    side: int = Field(32, ge=2)
    sweeps: int = Field(1000, ge=1)
    sites: int = Field(256, ge=2)
    # TASEP move attempts = move_factor * sites**2
    move_factor: float = Field(8.0, ge=8.0)
    bins: int = Field(8, ge=1)
    n_spins: int = Field(64, ge=2)
    replicas: int = Field(64, ge=2)
    external_path: Optional[str] = None
    dump_pgm: bool = False

    @field_validator('n_spins')
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError('n_spins must be even')
        return v


class PosteriorSpec(BaseModel):
    method: Literal['features', 'oracle', 'smoothed'] = 'features'
    # None picks the default from the >=5-cells rule
    n_eff: Optional[float] = Field(None, gt=0)
    weighting: Literal['uniform', 'inverse-variance'] = 'inverse-variance'
    sigma: float = Field(0.1, gt=0)


class TrainConfig(BaseModel):
    hidden: int = Field(128, ge=1)
    depth: int = Field(3, ge=1)
    activation: Literal['softplus', 'relu'] = 'softplus'
    iterations: int = Field(2000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = Field(0, ge=0)
    # None means one grid spacing per axis
    h: Optional[float] = Field(None, gt=0)
    log_every: int = Field(100, ge=1)


class GeometrySpec(BaseModel):
    mode: Literal['analytic', 'finite-diff'] = 'analytic'
    h: Optional[float] = Field(None, gt=0)
    eps_factor: float = Field(1e-6, gt=0)
    endpoints: List[Tuple[Tuple[float, float], Tuple[float, float]]] = Field(default_factory=list)
    n_points: int = Field(32, ge=3)
    iterations: int = Field(2000, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    phase_quantile: float = Field(0.95, gt=0, lt=1)


class EvaluationSpec(BaseModel):
    compare_reference: bool = True
    mean_as_stat: bool = True
    hessian: bool = True
    baseline_iterations: int = Field(2000, ge=0)


class ExperimentConfig(BaseModel):
    system: Literal['ising', 'tasep', 'oracle', 'external']
    grid: ParamGrid = Field(default_factory=ParamGrid)
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)
    posterior: PosteriorSpec = Field(default_factory=PosteriorSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    geometry: GeometrySpec = Field(default_factory=GeometrySpec)
    evaluation: EvaluationSpec = Field(default_factory=EvaluationSpec)
    out: Optional[str] = None
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @model_validator(mode='after')
    def _system_domain(self):
        b = self.grid.bounds
        if self.system == 'ising' and b[0] <= 0:
            raise ValueError(f"Ising temperatures must be positive, grid starts at T={b[0]}")
        if self.system == 'tasep' and (b[0] < 0 or b[2] < 0 or b[1] > 1 or b[3] > 1):
            raise ValueError(f"TASEP rates must lie in (0, 1], grid bounds are {b}")
        if self.system == 'tasep' and self.sampler.sites % self.sampler.bins:
            raise ValueError(f"bins={self.sampler.bins} must divide sites={self.sampler.sites}")
        if self.system == 'external':
            path = self.sampler.external_path
            if not path:
                raise ValueError('system "external" requires sampler.external_path')
            if not os.path.exists(path):
                raise ValueError(f"external feature file not found: {path}")
        if self.posterior.method == 'oracle' and self.system != 'oracle':
            raise ValueError('posterior.method "oracle" is only available for system "oracle"')
        for a, bpt in self.geometry.endpoints:
            if not (self.grid.contains(a) and self.grid.contains(bpt)):
                raise ValueError(f"geodesic endpoints {a} -> {bpt} lie outside the grid")
        return self


def load_config(path) -> ExperimentConfig:
    """Read and validate an experiment JSON file; every failure becomes ConfigError."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}")


def grid_from_sidecar(data: dict) -> ParamGrid:
    try:
        return ParamGrid(bounds=tuple(data['bounds']), nx=data['nx'], ny=data['ny'])
    except (KeyError, ValidationError) as e:
        raise DomainError(f"invalid grid description: {e}")
