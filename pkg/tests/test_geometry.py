import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))
import numpy as np
import pytest
from fisherlat.errors import DomainError, SchemaError
from fisherlat.geometry import (
    MetricField,
    dump_metric,
    dump_path,
    feature_path_length,
    geodesic,
    grid_shortest_path_length,
    hessian_field,
    linear_path,
    load_metric,
    load_path,
    metric_at,
    min_eigenvalue_report,
    path_curvature,
    path_length,
    phase_map,
    pullback_metric,
)
from fisherlat.models import ParamGrid, TrainConfig
from fisherlat.posterior import FeatureTable
from fisherlat.potential import PotentialModel


def _constant_metric(grid, G):
    return MetricField(grid, np.broadcast_to(np.asarray(G, dtype=float), (grid.n_cells, 2, 2)).copy(), 1e-12)


def _scalar_metric(grid, fn):
    g = fn(grid.points)
    return MetricField(grid, g[:, None, None] * np.eye(2)[None], 1e-12)


# ---------------------------------------------------------------------------
# Hessian fields
# ---------------------------------------------------------------------------

def test_quadratic_potential_gives_constant_metric():
    g = ParamGrid(bounds=(-1.0, 1.0, -1.0, 1.0), nx=10, ny=10)
    t = g.points
    metric = hessian_field(0.5 * (t[:, 0] ** 2 + 4.0 * t[:, 1] ** 2), g, mode='finite-diff')
    assert np.allclose(metric.tensors, np.diag([1.0, 4.0]), atol=1e-8)
    assert not metric.degenerate


def test_affine_potential_is_degenerate():
    g = ParamGrid(nx=8, ny=8)
    t = g.points
    metric = hessian_field(2.0 * t[:, 0] - t[:, 1] + 3.0, g, mode='finite-diff')
    assert metric.degenerate
    assert np.allclose(metric.tensors, metric.floor * np.eye(2), rtol=1e-6, atol=1e-18)


def test_metric_is_invariant_under_affine_gauge():
    g = ParamGrid(nx=12, ny=12)
    t = g.points
    v = np.log(np.cosh(t[:, 0])) + 0.3 * t[:, 1] ** 4
    a = hessian_field(v, g, mode='finite-diff')
    b = hessian_field(v + 1.7 * t[:, 0] - 0.2 * t[:, 1] + 9.0, g, mode='finite-diff')
    assert np.allclose(a.tensors, b.tensors, atol=1e-8)


def test_model_hessian_modes_agree():
    g = ParamGrid(nx=6, ny=6)
    model = PotentialModel.init(g, TrainConfig(hidden=8, depth=2, seed=2))
    analytic = hessian_field(model, g, mode='analytic')
    stencil = hessian_field(model, g, mode='finite-diff', h=1e-3)
    assert np.allclose(analytic.raw_min_eigenvalues, stencil.raw_min_eigenvalues, atol=1e-5)


def test_hessian_field_errors():
    g = ParamGrid(nx=4, ny=4)
    values = np.zeros(16)
    with pytest.raises(DomainError):
        hessian_field(values, g, mode='analytic')
    with pytest.raises(DomainError):
        hessian_field(values, g, mode='finite-diff', h=0.0)
    with pytest.raises(DomainError):
        hessian_field(values, g, mode='spectral')


def test_min_eigenvalue_report_flags_saddle():
    g = ParamGrid(nx=6, ny=6)
    t = g.points
    report = min_eigenvalue_report(hessian_field(t[:, 0] ** 2 - t[:, 1] ** 2, g, mode='finite-diff'))
    assert report['min_raw_eigenvalue'] == pytest.approx(-2.0, abs=1e-8)
    assert report['negative_fraction'] == 1.0
    assert report['clamped_fraction'] == 1.0


def test_pullback_metric_of_linear_features():
    g = ParamGrid(nx=6, ny=6)
    t = g.points
    samples = [np.array([[p[0], 2.0 * p[1]]] * 2) for p in t]
    metric = pullback_metric(FeatureTable.from_samples(g, samples), weighting='uniform')
    assert np.allclose(metric.tensors, np.diag([1.0, 4.0]), atol=1e-10)


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def test_metric_at_cell_center_and_midpoint():
    g = ParamGrid(bounds=(0.0, 4.0, 0.0, 4.0), nx=4, ny=4)
    metric = _scalar_metric(g, lambda p: 1.0 + p[:, 0] + 2.0 * p[:, 1])
    c = g.index(1, 2)
    assert np.allclose(metric_at(metric, g.center(c)), metric.tensors[c], atol=1e-12)
    mid = 0.5 * (g.center(c) + g.center(g.index(2, 2)))
    expect = 0.5 * (metric.tensors[c] + metric.tensors[g.index(2, 2)])
    assert np.allclose(metric_at(metric, mid), expect, atol=1e-12)


def test_metric_at_constant_field_and_outside_point():
    g = ParamGrid(nx=4, ny=4)
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    metric = _constant_metric(g, G)
    for p in [(-1.99, 1.99), (0.3, -0.7), (1.8, 0.0)]:
        assert np.allclose(metric_at(metric, p), G, atol=1e-12)
    with pytest.raises(DomainError):
        metric_at(metric, (2.5, 0.0))


# ---------------------------------------------------------------------------
# Path length and curvature
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('scale,expected', [(1.0, 5.0), (4.0, 10.0)])
def test_straight_path_length(scale, expected):
    g = ParamGrid(bounds=(-1.0, 5.0, -1.0, 5.0), nx=8, ny=8)
    metric = _constant_metric(g, scale * np.eye(2))
    assert path_length(linear_path((0.0, 0.0), (3.0, 4.0), 10), metric) == pytest.approx(expected, rel=1e-12)


def test_path_length_refinement_converges():
    g = ParamGrid(bounds=(0.0, 2.0, 0.0, 2.0), nx=16, ny=16)
    metric = _scalar_metric(g, lambda p: 1.0 + np.sin(p[:, 0]) ** 2 + 0.5 * p[:, 1])
    s = np.linspace(0.0, 1.0, 201)
    coarse = np.column_stack([0.2 + 1.6 * s, 0.2 + 1.5 * s ** 2])
    s = np.linspace(0.0, 1.0, 401)
    fine = np.column_stack([0.2 + 1.6 * s, 0.2 + 1.5 * s ** 2])
    a, b = path_length(coarse, metric), path_length(fine, metric)
    assert abs(a - b) / b < 1e-3


def test_path_length_reversal_and_concatenation():
    g = ParamGrid(bounds=(0.0, 2.0, 0.0, 2.0), nx=8, ny=8)
    metric = _scalar_metric(g, lambda p: 1.0 + p[:, 0] * p[:, 1])
    pts = np.column_stack([np.linspace(0.1, 1.9, 30), 1.0 + 0.5 * np.sin(np.linspace(0.0, 3.0, 30))])
    whole = path_length(pts, metric)
    assert path_length(pts[::-1], metric) == pytest.approx(whole, rel=1e-12)
    assert path_length(pts[:12], metric) + path_length(pts[11:], metric) == pytest.approx(whole, rel=1e-12)


def test_path_curvature_examples():
    assert path_curvature(linear_path((0.0, 0.0), (1.0, 2.0), 9)) == 0.0
    assert path_curvature(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])) == pytest.approx(np.pi / 2)


def test_path_curvature_of_circle_tends_to_inverse_radius():
    r = 2.0
    ang = np.linspace(0.0, 2.0 * np.pi, 401)
    pts = r * np.column_stack([np.cos(ang), np.sin(ang)])
    assert path_curvature(pts) == pytest.approx(1.0 / r, rel=1e-3)


def test_path_curvature_rejects_duplicate_points():
    with pytest.raises(DomainError):
        path_curvature(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]))


def test_feature_path_length_with_identity_features():
    g = ParamGrid(nx=8, ny=8)
    samples = [np.array([p, p]) for p in g.points]
    table = FeatureTable.from_samples(g, samples)
    pts = linear_path((-1.0, -1.0), (1.0, 0.5), 20)
    assert feature_path_length(pts, table) == pytest.approx(2.5, rel=1e-12)


# ---------------------------------------------------------------------------
# Geodesics
# ---------------------------------------------------------------------------

def test_geodesic_in_constant_metric_stays_straight():
    g = ParamGrid(nx=8, ny=8)
    metric = _constant_metric(g, [[2.0, 0.3], [0.3, 1.0]])
    a, b = np.array([-1.5, -1.0]), np.array([1.5, 1.2])
    path = geodesic(metric, a, b, n_points=16, iterations=300)
    assert np.array_equal(path.points[0], a) and np.array_equal(path.points[-1], b)
    d = b - a
    off = np.abs((path.points[:, 0] - a[0]) * d[1] - (path.points[:, 1] - a[1]) * d[0]) / np.linalg.norm(d)
    assert np.all(off <= 1e-6)
    assert path.length == pytest.approx(path.straight_length, rel=1e-9)


def test_geodesic_for_euclidean_hessian_is_straight():
    g = ParamGrid(nx=10, ny=10)
    metric = hessian_field(0.5 * np.sum(g.points ** 2, axis=1), g, mode='finite-diff')
    path = geodesic(metric, (-1.0, 1.5), (1.2, -0.4), n_points=12, iterations=300)
    assert path.length == pytest.approx(np.hypot(2.2, 1.9), rel=1e-6)


def test_geodesic_bends_around_costly_strip():
    g = ParamGrid(bounds=(0.0, 3.0, 0.0, 3.0), nx=48, ny=48)
    metric = _scalar_metric(
        g, lambda p: 1.0 + 40.0 * np.exp(-((p[:, 0] - 1.5) / 0.2) ** 2) * np.exp(-((p[:, 1] - 1.5) / 0.5) ** 2))
    a, b = (0.3, 1.3), (2.7, 1.3)
    path = geodesic(metric, a, b, n_points=48, iterations=3000, learning_rate=0.02)
    assert path.length < path.straight_length
    assert path.points[:, 1].min() < 1.2
    assert np.all(path.points >= 0.0) and np.all(path.points <= 3.0)
    reference = grid_shortest_path_length(metric, a, b)
    assert abs(path.length - reference) / reference <= 0.05


def test_geodesic_rejects_outside_endpoints():
    g = ParamGrid(nx=4, ny=4)
    with pytest.raises(DomainError):
        geodesic(_constant_metric(g, np.eye(2)), (0.0, 0.0), (3.0, 0.0))


def test_grid_shortest_path_in_flat_metric():
    g = ParamGrid(bounds=(0.0, 4.0, 0.0, 4.0), nx=8, ny=8)
    d = grid_shortest_path_length(_constant_metric(g, np.eye(2)), g.center(0), g.center(g.n_cells - 1))
    assert d == pytest.approx(np.hypot(3.5, 3.5), rel=1e-12)


# ---------------------------------------------------------------------------
# Phase map
# ---------------------------------------------------------------------------

def test_phase_map_of_constant_field_is_empty():
    g = ParamGrid(nx=8, ny=8)
    pm = phase_map(_constant_metric(g, np.eye(2)))
    assert np.all(pm.values == 0.0)
    assert not pm.flags.any()


def test_phase_map_flags_step_line():
    g = ParamGrid(nx=16, ny=16)
    metric = _scalar_metric(g, lambda p: np.where(p[:, 0] < 0.0, 1.0, 5.0))
    pm = phase_map(metric, quantile=0.95)
    flagged_columns = set(np.divmod(np.flatnonzero(pm.flags), g.ny)[0])
    assert flagged_columns == {7, 8}
    with pytest.raises(DomainError):
        phase_map(metric, quantile=1.0)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def test_metric_and_path_files(tmp_path):
    g = ParamGrid(nx=4, ny=4)
    metric = _scalar_metric(g, lambda p: 1.0 + p[:, 0] ** 2)
    dump_metric(metric, tmp_path / 'metric.csv')
    back = load_metric(tmp_path / 'metric.csv')
    assert back.grid == g
    assert np.allclose(back.tensors, metric.tensors, rtol=1e-15)
    pts = linear_path((0.0, 0.0), (1.0, 1.0), 5)
    dump_path(pts, tmp_path / 'path.csv')
    assert np.allclose(load_path(tmp_path / 'path.csv'), pts, rtol=1e-15)


def test_load_metric_incomplete_file(tmp_path):
    g = ParamGrid(nx=4, ny=4)
    path = tmp_path / 'metric.csv'
    dump_metric(_constant_metric(g, np.eye(2)), path)
    lines = path.read_text().splitlines()
    path.write_text('\n'.join(lines[:-1]) + '\n')
    with pytest.raises(SchemaError, match='every cell'):
        load_metric(path)
