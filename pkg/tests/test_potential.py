import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))
import logging
import numpy as np
import pytest
from fisherlat.errors import ConvergenceError, DomainError, SchemaError
from fisherlat.geometry import hessian_field
from fisherlat.groundtruth import hessian_relative_error
from fisherlat.models import ParamGrid, TrainConfig
from fisherlat.posterior import PosteriorField, oracle_kl_rows, oracle_posterior_from_stats, smoothed_target
from fisherlat.potential import (
    LN2,
    PotentialModel,
    bregman,
    bregman_matrix,
    dump_loss_history,
    input_hessian,
    jsd,
    kernel_rows,
    load_loss_history,
    load_model,
    mse_bregman_loss,
    param_gradient,
    rows_from_values,
    save_model,
    train_potential,
    trend_ok,
)
from fisherlat.samplers import oracle_gradient, oracle_hessian, oracle_log_partition


def _small_model(grid, activation='softplus', seed=0):
    return PotentialModel.init(grid, TrainConfig(hidden=8, depth=2, activation=activation, seed=seed))


# ---------------------------------------------------------------------------
# bregman
# ---------------------------------------------------------------------------

def test_bregman_quadratic_example():
    g = ParamGrid(bounds=(-2.5, 2.5, -2.5, 2.5), nx=5, ny=5)
    phi = 0.5 * np.sum(g.points ** 2, axis=1)
    src = g.index(2, 2)
    assert bregman(phi, g, g.index(3, 2), src) == pytest.approx(0.5, abs=1e-12)
    assert bregman(phi, g, src, src) == 0.0


def test_bregman_boundary_source_warns(caplog, monkeypatch):
    monkeypatch.setattr(logging.getLogger('fisherlat'), 'propagate', True)
    g = ParamGrid(bounds=(-0.5, 3.5, -0.5, 3.5), nx=4, ny=4)
    phi = 0.5 * np.sum(g.points ** 2, axis=1)
    with caplog.at_level('WARNING'):
        d = bregman(phi, g, g.index(1, 0), 0)
    assert d == pytest.approx(0.5, abs=1e-12)
    assert 'boundary' in caplog.text


def test_bregman_quartic_matches_analytic_to_second_order():
    g = ParamGrid(bounds=(-1.0, 1.0, -1.0, 1.0), nx=64, ny=64)
    pts = g.points
    r2 = np.sum(pts ** 2, axis=1)
    phi = r2 ** 2
    grad = 4.0 * r2[:, None] * pts
    exact = phi[None, :] - phi[:, None] - (grad @ pts.T - np.sum(grad * pts, axis=1)[:, None])
    D = bregman_matrix(phi, g)
    i, j = np.divmod(np.arange(g.n_cells), g.ny)
    interior = (i > 0) & (i < g.nx - 1) & (j > 0) & (j < g.ny - 1)
    assert np.max(np.abs(D - exact)[interior]) <= 20.0 * g.dx ** 2


def test_bregman_matrix_self_minimum_for_convex_field():
    g = ParamGrid(bounds=(-1.0, 1.0, -1.0, 1.0), nx=12, ny=12)
    phi = np.sum(g.points ** 2, axis=1) + 0.3 * g.points[:, 0] ** 4
    D = bregman_matrix(phi, g)
    assert np.all(np.argmin(D, axis=1) == np.arange(g.n_cells))
    assert np.all(np.abs(np.diag(D)) <= 1e-12)


# ---------------------------------------------------------------------------
# jsd
# ---------------------------------------------------------------------------

def test_jsd_examples():
    assert jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.log(2.0), abs=1e-15)
    assert jsd([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.2157615543388357, abs=1e-12)


def test_jsd_is_symmetric_and_bounded():
    rng = np.random.default_rng(4)
    p = rng.random((20, 9))
    q = rng.random((20, 9))
    p /= p.sum(axis=1, keepdims=True)
    q /= q.sum(axis=1, keepdims=True)
    a, b = jsd(p, q), jsd(q, p)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= LN2))


def test_jsd_uses_cell_area():
    dens = np.array([2.0, 0.0])
    assert jsd(dens, np.array([1.0, 1.0]), cell_area=0.5) == pytest.approx(0.2157615543388357, abs=1e-12)


def test_jsd_rejects_negative_density():
    with pytest.raises(DomainError):
        jsd([1.2, -0.2], [0.5, 0.5])


# ---------------------------------------------------------------------------
# kernel rows
# ---------------------------------------------------------------------------

def test_constant_potential_gives_uniform_rows():
    g = ParamGrid(nx=6, ny=6)
    model = _small_model(g)
    model.network.set_flat(np.zeros(model.network.n_params))
    rows = kernel_rows(model, g)
    assert np.allclose(rows.rows, 1.0 / g.volume, rtol=1e-12)


def test_quadratic_potential_rows_peak_at_source():
    g = ParamGrid(bounds=(-1.0, 1.0, -1.0, 1.0), nx=20, ny=20)
    pts = g.points
    rows = rows_from_values(g, 0.5 * np.sum(pts ** 2, axis=1), pts)
    assert np.all(np.argmax(rows.log_rows, axis=1) == np.arange(g.n_cells))
    assert np.allclose(rows.masses.sum(axis=1), 1.0, atol=1e-12)


def test_oracle_potential_rows_match_kl_kernel():
    g = ParamGrid(nx=10, ny=10)
    pts = g.points
    rows = rows_from_values(g, oracle_log_partition(pts, 6), oracle_gradient(pts, 6))
    ref = oracle_kl_rows(g, 6)
    ref = ref / (ref.sum(axis=1, keepdims=True) * g.cell_area)
    assert np.allclose(rows.rows, ref, rtol=1e-9)


def test_finite_difference_rows_approach_exact_rows():
    g = ParamGrid(nx=10, ny=10)
    model = _small_model(g, seed=2)
    exact = rows_from_values(g, model.values(g.points), model.gradient(g.points))
    coarse = np.abs(kernel_rows(model, g, h=0.1).rows - exact.rows).max()
    fine = np.abs(kernel_rows(model, g, h=0.05).rows - exact.rows).max()
    assert fine < 0.35 * coarse


def test_kernel_rows_affine_gauge():
    g = ParamGrid(nx=8, ny=8)
    pts = g.points
    rng = np.random.default_rng(7)
    v = rng.random(g.n_cells)
    grads = rng.standard_normal((g.n_cells, 2))
    c = np.array([0.7, -1.3])
    base = rows_from_values(g, v, grads)
    shifted = rows_from_values(g, v + pts @ c + 2.5, grads + c)
    assert np.max(np.abs(shifted.log_rows - base.log_rows)) <= 1e-10


def test_affine_gauge_leaves_loss_and_metric_unchanged():
    g = ParamGrid(nx=10, ny=10)
    cfg = TrainConfig(hidden=16, depth=2, iterations=200, learning_rate=5e-3, seed=4)
    model = train_potential(smoothed_target(g, 0.8), cfg)
    v = model.values(g.points)
    w = v + g.points @ np.array([-0.4, 2.2]) - 1.1
    assert mse_bregman_loss(v, w, g) <= 1e-10
    a = hessian_field(v, g, mode='finite-diff')
    b = hessian_field(w, g, mode='finite-diff')
    assert np.max(np.abs(a.tensors - b.tensors)) <= 1e-10



def test_kernel_rows_constant_shift_through_model():
    g = ParamGrid(nx=6, ny=6)
    model = _small_model(g, seed=1)
    base = kernel_rows(model, g)
    model.network.biases[-1] = model.network.biases[-1] + 3.0
    assert np.max(np.abs(kernel_rows(model, g).log_rows - base.log_rows)) <= 1e-10


def test_rows_from_values_reports_overflow():
    g = ParamGrid(nx=4, ny=4)
    grads = np.zeros((16, 2))
    grads[5] = np.inf
    with pytest.raises(ConvergenceError, match='row 5'):
        rows_from_values(g, np.zeros(16), grads)


def test_kernel_rows_rejects_bad_spacing():
    g = ParamGrid(nx=4, ny=4)
    with pytest.raises(DomainError):
        kernel_rows(_small_model(g), g, h=0.0)


# ---------------------------------------------------------------------------
# mse_bregman_loss
# ---------------------------------------------------------------------------

def test_mse_bregman_loss_cases():
    g = ParamGrid(nx=6, ny=6)
    pts = g.points
    phi = np.sum(pts ** 2, axis=1)
    assert mse_bregman_loss(phi, phi, g) == 0.0
    assert mse_bregman_loss(phi, phi + pts @ [0.4, -2.0] - 1.5, g) <= 1e-10
    rng = np.random.default_rng(3)
    assert mse_bregman_loss(rng.random(36), rng.random(36), g) > 0.0


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_param_gradient_linearity():
    g = ParamGrid(nx=4, ny=4)
    model = _small_model(g, seed=3)
    pts = g.points
    adj = np.zeros(g.n_cells)
    assert np.all(param_gradient(model, adj, pts) == 0.0)
    adj[6] = 1.0
    assert np.allclose(param_gradient(model, adj, pts), model.param_backward(pts[6:7], [1.0]), atol=1e-14)
    adj[6] = np.nan
    with pytest.raises(DomainError):
        param_gradient(model, adj, pts)


def test_param_gradient_matches_finite_differences():
    g = ParamGrid(nx=4, ny=4)
    model = _small_model(g, seed=5)
    pts = g.points
    adj = np.random.default_rng(0).standard_normal(g.n_cells)
    grad = param_gradient(model, adj, pts)
    base = model.network.get_flat()
    eps = 1e-5
    for k in np.random.default_rng(1).choice(base.size, size=20, replace=False):
        e = np.zeros_like(base)
        e[k] = eps
        model.network.set_flat(base + e)
        up = adj @ model.values(pts)
        model.network.set_flat(base - e)
        down = adj @ model.values(pts)
        fd = (up - down) / (2 * eps)
        assert abs(fd - grad[k]) <= 1e-4 * max(1.0, abs(fd))
    model.network.set_flat(base)


def test_input_hessian_in_parameter_coordinates():
    g = ParamGrid(bounds=(1.0, 5.0, -2.0, 2.0), nx=4, ny=4)
    model = _small_model(g, seed=6)
    pts = g.points
    H = input_hessian(model, pts)
    h = 1e-5
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (model.gradient(pts + e) - model.gradient(pts - e)) / (2 * h)
        assert np.allclose(H[:, :, k], fd, atol=1e-6)
    with pytest.raises(DomainError):
        input_hessian(_small_model(g, activation='relu'), pts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_trend_ok():
    assert trend_ok([1.0] * 50)
    assert trend_ok(np.linspace(1.0, 0.0, 300))
    assert not trend_ok(np.concatenate([np.linspace(1.0, 0.5, 150), np.linspace(0.5, 0.9, 150)]))


def test_zero_iterations_returns_initial_model():
    g = ParamGrid(nx=6, ny=6)
    target = PosteriorField.from_logits(g, np.zeros((36, 36)), 1.0)
    cfg = TrainConfig(hidden=8, depth=2, iterations=0, seed=4)
    model = train_potential(target, cfg)
    assert len(model.loss_history) == 1
    assert 0.0 <= model.loss_history[0] <= LN2
    assert np.array_equal(model.network.get_flat(), PotentialModel.init(g, cfg).network.get_flat())


def test_training_on_uniform_target_flattens_the_potential():
    g = ParamGrid(nx=8, ny=8)
    target = PosteriorField.from_logits(g, np.zeros((64, 64)), 1.0)
    cfg = TrainConfig(hidden=16, depth=2, iterations=600, learning_rate=5e-3, seed=1)
    model = train_potential(target, cfg)
    assert len(model.loss_history) == 601
    assert model.loss_history[-1] < model.loss_history[0]
    # uniform rows need an affine potential, i.e. a vanishing Hessian
    before = np.linalg.norm(input_hessian(PotentialModel.init(g, cfg), g.points), axis=(1, 2))
    after = np.linalg.norm(input_hessian(model, g.points), axis=(1, 2))
    assert np.median(after) <= 0.25 * np.median(before)



def test_model_checkpoint_round_trip(tmp_path):
    g = ParamGrid(bounds=(0.0, 1.0, 0.0, 1.0), nx=4, ny=4)
    model = _small_model(g, seed=8)
    path = tmp_path / 'model.json'
    save_model(model, path)
    back = load_model(path)
    assert back.bounds == model.bounds
    assert np.array_equal(back.values(g.points), model.values(g.points))


def test_load_model_rejects_broken_checkpoint(tmp_path):
    path = tmp_path / 'model.json'
    path.write_text('{"sizes": [2, 1]}')
    with pytest.raises(SchemaError):
        load_model(path)


def test_loss_history_file(tmp_path):
    path = tmp_path / 'loss.csv'
    dump_loss_history([0.5, 0.25, 0.125], path)
    assert list(load_loss_history(path)) == [0.5, 0.25, 0.125]


@pytest.mark.slow
def test_oracle_hessian_recovery():
    g = ParamGrid(bounds=(-2.0, 2.0, -2.0, 2.0), nx=32, ny=32)
    n_spins = 8
    pts = g.points
    # exact posterior of one sample per cell carrying the expected block sums
    target = oracle_posterior_from_stats(g, oracle_gradient(pts, n_spins), 1, n_spins)
    cfg = TrainConfig(hidden=32, depth=2, iterations=4000, learning_rate=3e-3, seed=0)
    model = train_potential(target, cfg)
    assert trend_ok(model.loss_history)
    err = hessian_relative_error(input_hessian(model, pts), oracle_hessian(pts, n_spins))
    assert err <= 0.10
