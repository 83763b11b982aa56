"""Averaged-Jacobian linearization and the Picard control loop."""

import csv

import numpy as np
import pytest

from bihum import (
    BihumError,
    CoefficientSet,
    HumConfig,
    NoConvergenceError,
    NonlinearitySpec,
    SpaceTimeField,
    SpatialGrid,
    TimeGrid,
    UnresolvedIterateError,
    averaged_jacobians,
    box_mask,
    fixed_point_solve,
    free_trajectory,
    hum_solve,
    make_nonlinearity,
    mean_value_residual,
    sine_field,
    state_only_variant,
)
from bihum.semilinear import h2_surrogate_norm
from conftest import coeffs_with

PI = np.pi


def _const_field(grid, tg, value):
    vals = np.full((tg.nt + 1,) + grid.shape, value)
    return SpaceTimeField(vals, grid, tg, role="state")


def _smooth_field(grid, tg, amplitude):
    c = CoefficientSet.build(grid, tg)
    return free_trajectory(amplitude * sine_field(grid, (1,)), c, grid, tg)


def _bench_cfg(n=32, nt=200, eps=1e-6):
    grid = SpatialGrid((1.0,), (n,))
    tg = TimeGrid(0.5, nt)
    c = coeffs_with(grid, tg)
    return grid, tg, HumConfig(grid, tg, c, epsilon=eps)


def test_averaged_jacobian_closed_form_sin(grid16):
    # at constant z = 1: int_0^1 ab cos(b tau) dtau = a sin(b)
    tg = TimeGrid(1.0, 10)
    F = make_nonlinearity("sin", a=1.0, b=1.0)
    g1, g2, g3 = averaged_jacobians(_const_field(grid16, tg, 1.0), F)
    assert g2 is None and g3 is None
    assert np.max(np.abs(g1 - np.sin(1.0))) <= 1e-14


def test_averaged_jacobian_zero_and_linear(grid16):
    tg = TimeGrid(1.0, 10)
    z = _smooth_field(grid16, tg, 0.5)
    g1z, _, _ = averaged_jacobians(z, make_nonlinearity("zero"))
    assert not np.any(g1z)
    g1l, _, _ = averaged_jacobians(z, make_nonlinearity("linear", c=0.7))
    assert np.max(np.abs(g1l - 0.7)) <= 1e-14


def test_averaging_quadrature_polynomial_exactness(grid16):
    # dfdy = u^3 integrates to z^3/4; two Gauss nodes are exact at degree 3
    tg = TimeGrid(1.0, 10)
    F = NonlinearitySpec(
        "cubic-slope", {},
        f=lambda u, p, r: u ** 4 / 4.0,
        dfdy=lambda u, p, r: u ** 3,
        dfdp=None, dfdr=None, bound=np.inf)
    z = _smooth_field(grid16, tg, 0.8)
    zm = z.midpoints()
    g1, _, _ = averaged_jacobians(z, F, quad_nodes=2)
    assert np.max(np.abs(g1 - zm ** 3 / 4.0)) <= 1e-12 * max(np.max(np.abs(zm)) ** 3, 1.0)


def test_non_finite_iterate_rejected(grid16):
    tg = TimeGrid(1.0, 10)
    vals = np.zeros((tg.nt + 1,) + grid16.shape)
    vals[3, 4] = np.nan
    z = SpaceTimeField(vals, grid16, tg, role="state")
    with pytest.raises(UnresolvedIterateError):
        averaged_jacobians(z, make_nonlinearity("sin"))
    with pytest.raises(ValueError):
        averaged_jacobians(_const_field(grid16, tg, 1.0),
                           make_nonlinearity("sin"), quad_nodes=1)


def test_builtin_bounds_hold_on_samples(rng):
    for name, kw in (("linear", {"c": 0.4}), ("sin", {"a": 0.3, "b": 2.0}),
                     ("tanh", {"a": 0.5, "b": 1.5}),
                     ("full", {"a": 0.1, "b": 1.0, "c": 0.05, "d": 0.02, "dim": 1})):
        F = make_nonlinearity(name, **kw)
        assert F.derivative_sup(rng, dim=1) <= F.bound + 1e-12
        assert F.value_at_zero(1) == 0.0
    with pytest.raises(ValueError):
        make_nonlinearity("cubic")


def test_mean_value_identity_moderate_amplitude(grid16):
    tg = TimeGrid(1.0, 40)
    z = _smooth_field(grid16, tg, 0.3)
    assert mean_value_residual(z, make_nonlinearity("sin", a=0.1, b=1.0)) <= 1e-8
    F = make_nonlinearity("full", a=0.1, b=1.0, c=0.05, d=0.02, dim=1)
    assert mean_value_residual(z, F) <= 1e-8


def test_h2_surrogate_norm_scaling(grid16, rng):
    tg = TimeGrid(1.0, 20)
    vals = rng.standard_normal((tg.nt + 1,) + grid16.shape)
    n1 = h2_surrogate_norm(vals, grid16, tg)
    assert n1 > 0.0
    assert abs(h2_surrogate_norm(2.0 * vals, grid16, tg) - 2.0 * n1) <= 1e-12 * n1


def test_zero_nonlinearity_stops_after_two_iterations(grid16):
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    y0 = 0.5 * sine_field(grid, (1,))
    res, trace = fixed_point_solve(y0, None, make_nonlinearity("zero"), cfg)
    assert trace.converged
    assert len(trace.iterations) == 2
    assert trace.distances()[1] == 0.0
    plain = hum_solve(y0, None, cfg)
    assert np.array_equal(res.state.values, plain.state.values)
    assert np.array_equal(res.control.values, plain.control.values)


def test_linear_nonlinearity_stops_after_two_iterations(grid16):
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    y0 = 0.5 * sine_field(grid, (1,))
    res, trace = fixed_point_solve(y0, None, make_nonlinearity("linear", c=0.3), cfg)
    assert trace.converged
    assert len(trace.iterations) == 2
    assert trace.distances()[1] == 0.0
    # the z-independent shift equals a plain a0 = -c problem
    shifted = coeffs_with(grid, tg, a0=-0.3)
    import dataclasses
    plain = hum_solve(y0, None, dataclasses.replace(cfg, coefficients=shifted))
    assert np.array_equal(res.state.values, plain.state.values)


def test_sin_benchmark_converges(grid16):
    # frozen: 0.1 sin(u) at N = 32 needs 3 iterations with distances
    # 2.8e-1, 2.7e-6, 3.3e-11 and terminal within 5% of the linear baseline
    grid, tg, cfg = _bench_cfg()
    y0 = 0.5 * sine_field(grid, (1,))
    res, trace = fixed_point_solve(y0, None,
                                   make_nonlinearity("sin", a=0.1, b=1.0), cfg)
    assert trace.converged
    assert len(trace.iterations) == 3
    d = trace.distances()
    assert d[1] / d[0] <= 0.9 and d[2] / d[1] <= 0.9
    linear = hum_solve(y0, None, cfg)
    assert res.terminal_norm <= 10.0 * linear.terminal_norm
    assert trace.theta_final == 1.0


def test_fixed_point_trace_csv(grid16, tmp_path):
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    _, trace = fixed_point_solve(0.5 * sine_field(grid, (1,)), None,
                                 make_nonlinearity("zero"), cfg)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "distance", "terminal_norm", "control_norm"]
    assert len(rows) == 3
    s = trace.summary()
    assert s["iterations"] == 2 and s["converged"]


def test_state_only_variant_delegates(grid16):
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    # rough data: full-band random combination still converges
    rng = np.random.default_rng(5)
    y0 = grid.from_modes(rng.standard_normal(grid.shape) / (1.0 + np.arange(16)) ** 2)
    G = make_nonlinearity("tanh", a=0.1, b=1.0)
    r1, t1 = state_only_variant(y0, G, cfg)
    r2, t2 = fixed_point_solve(y0, None, G, cfg)
    assert np.array_equal(r1.state.values, r2.state.values)
    assert t1.distances() == t2.distances()
    with pytest.raises(ValueError):
        state_only_variant(y0, make_nonlinearity("full", dim=1), cfg)


def test_sin_equals_full_with_silent_slots(grid16):
    # full(a, b, c=0, d=0) shifts b0 and d by zero fields, which normalize
    # away, so every iterate matches the pure sin path bitwise
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    y0 = 0.5 * sine_field(grid, (1,))
    rs, ts = fixed_point_solve(y0, None, make_nonlinearity("sin", a=0.1, b=1.0), cfg)
    rf, tf = fixed_point_solve(
        y0, None, make_nonlinearity("full", a=0.1, b=1.0, c=0.0, d=0.0, dim=1), cfg)
    assert np.array_equal(rs.state.values, rf.state.values)
    assert ts.distances() == tf.distances()


def test_declared_bound_is_enforced(grid16):
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    lying = NonlinearitySpec(
        "lying", {},
        f=lambda u, p, r: u,
        dfdy=lambda u, p, r: np.ones_like(u),
        dfdp=None, dfdr=None, bound=0.01)
    with pytest.raises(BihumError):
        fixed_point_solve(0.5 * sine_field(grid, (1,)), None, lying, cfg)


def test_no_convergence_attaches_trace(grid16):
    grid, tg, cfg = _bench_cfg(n=16, nt=100)
    with pytest.raises(NoConvergenceError) as exc:
        fixed_point_solve(0.5 * sine_field(grid, (1,)), None,
                          make_nonlinearity("sin", a=0.1, b=1.0), cfg, max_iters=1)
    err = exc.value
    assert err.trace is not None and len(err.trace.iterations) == 1
    assert err.result is not None
    assert not err.trace.converged


def test_iterate_limit_grid_independent():
    # N = 32 vs N = 64 in L2-consistent modal coordinates (DST-I ortho
    # coefficients rescaled by sqrt(hvol)); frozen agreement 5e-16
    F = make_nonlinearity("sin", a=0.1, b=1.0)
    states = {}
    for n in (32, 64):
        grid, tg, cfg = _bench_cfg(n=n)
        res, _ = fixed_point_solve(0.5 * sine_field(grid, (1,)), None, F, cfg)
        states[n] = np.sqrt(grid.hvol) * grid.to_modes(res.state.values)
    pro = np.zeros_like(states[64])
    pro[:, :32] = states[32]
    rel = np.sqrt(np.sum((pro - states[64]) ** 2) / np.sum(states[64] ** 2))
    assert rel <= 1e-3
