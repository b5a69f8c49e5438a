"""End-to-end experiment: sample -> posterior -> train -> metric -> geodesic -> phase map -> evaluate.

Every stage reads its inputs from files written by earlier stages in the output
directory, so any suffix of the pipeline can be rerun on its own and produces
byte-identical artifacts.
"""
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from .artifacts import read_json, sidecar_path, write_json
from .errors import ConfigError, DomainError, StageError
from .geometry import (
    dump_metric,
    dump_path,
    dump_phase_map,
    feature_path_length,
    geodesic,
    hessian_field,
    linear_path,
    load_metric,
    min_eigenvalue_report,
    path_curvature,
    path_length,
    phase_map,
)
from .groundtruth import (
    ScalarField,
    dump_scalar_field,
    evaluate_reconstruction,
    hessian_relative_error,
    load_scalar_field,
    mean_as_stat,
    onsager_energy_slice,
    reference_for,
)
from .models import ExperimentConfig, load_config
from .phase import STAGES, temp_phase
from .posterior import (
    build_feature_table,
    default_n_eff,
    dump_feature_table,
    dump_posterior,
    ingest_features,
    load_posterior,
    oracle_posterior_from_table,
    posterior_from_features,
    smoothed_target,
)
from .potential import dump_loss_history, load_model, save_model, train_potential
from .samplers import dump_pgm, oracle_hessian, sample_microstate
from .utils import resolve_threads, seed_for, sha256_file

logger = logging.getLogger(__name__)

FEATURES = 'features.csv'
POSTERIOR = 'posterior.csv'
MODEL = 'model.json'
LOSS = 'loss.csv'
POTENTIAL = 'potential.csv'
METRIC = 'metric.csv'
PHASE_MAP = 'phase_map.csv'
GEODESICS = 'geodesics.json'
REPORT = 'report.json'
MANIFEST = 'manifest.json'
CONFIG_COPY = 'config.json'

# stage that writes each artifact a later stage reads
PRODUCED_BY = {
    FEATURES: 'sample',
    POSTERIOR: 'posterior',
    MODEL: 'train',
    POTENTIAL: 'train',
    METRIC: 'metric',
}


class Run:
    """Resolved configuration plus output directory and thread count for one pipeline run."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.stage: Optional[str] = None

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            producer = PRODUCED_BY[name]
            raise ConfigError(f"stage '{self.stage}' needs {p}, which is written by stage '{producer}'; "
                              f"run `fisherlat {producer}` or `fisherlat run --stage {producer}` first")
        return p


def prepare_run(config_path, seed: Optional[int] = None, out: Optional[str] = None,
                threads: Optional[int] = None) -> Run:
    """Load the config and apply CLI overrides: flags beat config values, config beats environment."""
    cfg = load_config(config_path)
    update = {}
    if seed is not None:
        update['seed'] = int(seed)
    out_dir = out or cfg.out or os.getenv('FISHERLAT_OUT') or 'fisherlat-out'
    update['out'] = str(out_dir)
    cfg = cfg.model_copy(update=update)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    return Run(cfg, out_path, resolve_threads(threads))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_sample(run: Run):
    cfg = run.cfg
    if cfg.system == 'external':
        table = ingest_features(cfg.sampler.external_path, cfg.grid)
    else:
        table = build_feature_table(cfg.grid, cfg.system, cfg.sampler, cfg.sampler.replicas, cfg.seed,
                                    run.threads)
        if cfg.sampler.dump_pgm and cfg.system in ('ising', 'tasep'):
            c = cfg.grid.index(cfg.grid.nx // 2, cfg.grid.ny // 2)
            state = sample_microstate(cfg.system, cfg.grid.center(c), cfg.sampler, seed_for(cfg.seed, c, 'sample'))
            dump_pgm(state, run.path(f"sample_{c}.pgm"))
    dump_feature_table(table, run.path(FEATURES))
    logger.info(f"Wrote {table.grid.n_cells} cells x {int(table.replicas.max())} replicas to {FEATURES}")


def _load_table(run: Run):
    return ingest_features(run.require(FEATURES), run.cfg.grid)


def stage_posterior(run: Run):
    cfg = run.cfg
    spec = cfg.posterior
    if spec.method == 'smoothed':
        field = smoothed_target(cfg.grid, spec.sigma)
    else:
        table = _load_table(run)
        if spec.method == 'oracle':
            field = oracle_posterior_from_table(table, cfg.sampler.n_spins)
        else:
            n_eff = spec.n_eff or default_n_eff(table, spec.weighting)
            logger.info(f"n_eff = {n_eff:.6g} ({'configured' if spec.n_eff else 'default'})")
            field = posterior_from_features(table, n_eff, spec.weighting)
    dump_posterior(field, run.path(POSTERIOR))


def stage_train(run: Run):
    cfg = run.cfg
    target = load_posterior(run.require(POSTERIOR))
    train_cfg = cfg.train.model_copy(update={'seed': seed_for(cfg.seed, 0, 'train', cfg.train.seed)})
    model = train_potential(target, train_cfg)
    save_model(model, run.path(MODEL))
    dump_loss_history(model.loss_history, run.path(LOSS))
    dump_scalar_field(ScalarField(cfg.grid, model.values(cfg.grid.points), 'logZ_theta'), run.path(POTENTIAL))


def stage_metric(run: Run):
    cfg = run.cfg
    model = load_model(run.require(MODEL))
    mode = cfg.geometry.mode
    if mode == 'analytic' and model.activation != 'softplus':
        logger.warning(f"{model.activation} networks have no analytic Hessian; using finite differences")
        mode = 'finite-diff'
    metric = hessian_field(model, cfg.grid, mode, cfg.geometry.h, cfg.geometry.eps_factor)
    dump_metric(metric, run.path(METRIC))
    report = min_eigenvalue_report(metric)
    if report['negative_fraction'] > 0:
        logger.warning(f"{report['negative_fraction']:.1%} of cells have a negative raw eigenvalue")
    meta = read_json(sidecar_path(run.path(METRIC)))
    write_json(sidecar_path(run.path(METRIC)), {**meta, 'convexity': report})


def stage_geodesic(run: Run):
    cfg = run.cfg
    geo = cfg.geometry
    metric = load_metric(run.require(METRIC))
    table = _load_table(run) if run.path(FEATURES).exists() else None
    summary = []
    for k, (a, b) in enumerate(geo.endpoints):
        path = geodesic(metric, a, b, geo.n_points, geo.iterations, geo.learning_rate)
        straight = linear_path(a, b, geo.n_points)
        dump_path(path.points, run.path(f"geodesic_{k}.csv"))
        dump_path(straight, run.path(f"linear_{k}.csv"))
        entry = {
            'a': list(a), 'b': list(b),
            'geodesic_length': path.length,
            'linear_length': path_length(straight, metric),
            'geodesic_curvature': path_curvature(path),
            'linear_curvature': path_curvature(straight),
            'converged': path.converged,
        }
        if table is not None:
            entry['geodesic_feature_length'] = feature_path_length(path, table)
            entry['linear_feature_length'] = feature_path_length(straight, table)
        logger.info(f"path {k}: geodesic {path.length:.6g} vs straight {entry['linear_length']:.6g}")
        summary.append(entry)
    write_json(run.path(GEODESICS), {'paths': summary})


def stage_phase(run: Run):
    metric = load_metric(run.require(METRIC))
    dump_phase_map(phase_map(metric, run.cfg.geometry.phase_quantile), run.path(PHASE_MAP))


def stage_evaluate(run: Run):
    cfg = run.cfg
    ev = cfg.evaluation
    F_rec = load_scalar_field(run.require(POTENTIAL))
    report: Dict[str, object] = {'system': cfg.system, 'seed': cfg.seed}
    metric_meta = read_json(sidecar_path(run.path(METRIC))) if run.path(METRIC).exists() else {}
    if 'convexity' in metric_meta:
        report['convexity'] = metric_meta['convexity']
    if run.path(GEODESICS).exists():
        report['geodesics'] = read_json(run.path(GEODESICS))['paths']

    table = _load_table(run) if run.path(FEATURES).exists() else None
    ref = None
    if ev.compare_reference and cfg.system != 'external':
        if cfg.system == 'ising' and table is None:
            raise ConfigError('Ising evaluation needs the sampled feature table')
        ref = reference_for(cfg.system, cfg.grid, cfg.sampler, table, cfg.seed, run.threads)
    if ref is not None:
        F_gt, grads = ref
        dump_scalar_field(F_gt, run.path('groundtruth_F.csv'))
        row = evaluate_reconstruction(cfg.system, F_rec, F_gt, grads)
        report['convex'] = row
        logger.info("convex: " + ', '.join(f"{k}={v:.4g}" for k, v in row.items() if k.endswith('rmse')))
        if cfg.system == 'ising':
            report['convex']['dFdT_onsager_rmse'] = _onsager_check(F_rec, row['affine'])
        if ev.mean_as_stat and table is not None and table.samples is not None:
            _, _, F_base = mean_as_stat(table, cfg.train.model_copy(
                update={'seed': seed_for(cfg.seed, 0, 'baseline', cfg.train.seed)}),
                iterations=ev.baseline_iterations)
            base = evaluate_reconstruction(cfg.system, F_base, F_gt, grads)
            base['degenerate'] = bool(F_base.meta.get('degenerate', False))
            report['mean_as_stat'] = base
    if ev.hessian and cfg.system == 'oracle' and run.path(METRIC).exists():
        metric = load_metric(run.path(METRIC))
        report['hessian_median_relative_error'] = hessian_relative_error(
            metric.tensors, oracle_hessian(cfg.grid.points, cfg.sampler.n_spins))
    write_json(run.path(REPORT), report)


def _onsager_check(F_rec: ScalarField, affine: dict) -> float:
    """RMSE of the fitted dF/dT against the Onsager energy, averaged over the two columns around H = 0."""
    grid = F_rec.grid
    if grid.ny % 2 or not np.isclose(grid.bounds[2], -grid.bounds[3]):
        raise DomainError('Onsager comparison needs an H range symmetric about 0 with an even cell count')
    d1, _ = np.gradient(F_rec.values, grid.dx, grid.dy, edge_order=2)
    mid = 0.5 * (d1[:, grid.ny // 2 - 1] + d1[:, grid.ny // 2])
    rec = affine['s'] * mid + affine['c1']
    return float(np.sqrt(np.mean((rec - onsager_energy_slice(grid)) ** 2)))


STAGE_FUNCS: Dict[str, Callable[[Run], None]] = {
    'sample': stage_sample,
    'posterior': stage_posterior,
    'train': stage_train,
    'metric': stage_metric,
    'geodesic': stage_geodesic,
    'phase': stage_phase,
    'evaluate': stage_evaluate,
}


def run_stage(run: Run, name: str):
    """Run one named stage inside its logging phase; failures become StageError."""
    if name not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}; choose from {', '.join(STAGE_FUNCS)}")
    run.stage = name
    with temp_phase(STAGES[name]):
        try:
            STAGE_FUNCS[name](run)
        except (ConfigError, StageError):
            raise
        except Exception as e:
            logger.exception(f"Stage {name} failed")
            raise StageError(name, e) from e


def write_manifest(run: Run) -> dict:
    files = {}
    for p in sorted(run.out.iterdir()):
        if p.is_file() and p.name != MANIFEST:
            files[p.name] = sha256_file(p)
    manifest = {
        'created_at': datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ'),
        'seed': run.cfg.seed,
        'system': run.cfg.system,
        'files': files,
    }
    write_json(run.path(MANIFEST), manifest)
    return manifest


def run_pipeline(config_path, seed: Optional[int] = None, out: Optional[str] = None,
                 threads: Optional[int] = None, start_stage: Optional[str] = None) -> dict:
    """Run every stage from ``start_stage`` (default: the first) and return the manifest."""
    run = prepare_run(config_path, seed, out, threads)
    names = list(STAGE_FUNCS)
    if start_stage is not None and start_stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {start_stage!r}; choose from {', '.join(names)}")
    start = names.index(start_stage) if start_stage else 0
    write_json(run.path(CONFIG_COPY), run.cfg.model_dump(mode='json', exclude={'out'}))
    logger.info(f"Running {run.cfg.system} pipeline into {run.out} (seed {run.cfg.seed}, {run.threads} threads)")
    try:
        for name in names[start:]:
            run_stage(run, name)
    finally:
        manifest = write_manifest(run)
    return manifest
