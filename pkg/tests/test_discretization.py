"""Spectral operators, exponential marching, adjoint transposes, duality."""

import numpy as np
import pytest

from bihum import (
    CoefficientSet,
    InstabilityError,
    ShapeMismatchError,
    SpatialGrid,
    TimeGrid,
    apply_forward_operator,
    apply_lower_order,
    box_mask,
    duality_check,
    sine_field,
    solve_adjoint,
    solve_forward,
)
from conftest import coeffs_with, lowmode_field

PI = np.pi


def test_modal_symbols(grid16):
    kap = grid16.kappas[0]
    assert np.allclose(kap, (np.arange(16) + 1) * PI, rtol=1e-15)
    assert np.allclose(grid16.nu, -kap ** 2, rtol=1e-15)
    assert np.array_equal(grid16.mu, grid16.nu ** 2)


def test_transform_involution(grid32, rng):
    y = rng.standard_normal(grid32.shape)
    back = grid32.from_modes(grid32.to_modes(y))
    assert np.max(np.abs(back - y)) <= 1e-12 * np.max(np.abs(y))


def test_bilaplacian_eigenfunctions(grid16):
    y1 = sine_field(grid16, (1,))
    out = grid16.bilaplacian(y1)
    assert np.max(np.abs(out - PI ** 4 * y1)) <= 1e-11 * PI ** 4


def test_forward_operator_eigenvalue_with_laplacian_term(grid16):
    # (bilap + a1 lap) sin(2 pi x) = (16 pi^4 - 4 pi^2) sin(2 pi x)
    tg = TimeGrid(1.0, 8)
    c = coeffs_with(grid16, tg, a1=1.0)
    y = sine_field(grid16, (2,))
    out = apply_forward_operator(y, c, tg.midtimes[0])
    lam = 16 * PI ** 4 - 4 * PI ** 2
    assert np.max(np.abs(out - lam * y)) <= 1e-10 * lam


def test_forward_operator_matches_difference_oracle():
    # independent second-order finite differences with Navier ghost values
    # (odd reflection keeps y = lap y = 0 at the wall)
    def fd_operator(y, h, a0, b0, d, a1):
        ext = np.concatenate([[-y[1], -y[0]], [0.0], y, [0.0], [-y[-1], -y[-2]]])
        i = np.arange(y.size) + 3
        d1 = (ext[i + 1] - ext[i - 1]) / (2 * h)
        d2 = (ext[i + 1] - 2 * ext[i] + ext[i - 1]) / h ** 2
        d4 = (ext[i - 2] - 4 * ext[i - 1] + 6 * ext[i] - 4 * ext[i + 1]
              + ext[i + 2]) / h ** 4
        return d4 + a0 * y + b0 * d1 + (d + a1) * d2

    rng = np.random.default_rng(11)
    errs = {}
    for n in (32, 128):
        grid = SpatialGrid((1.0,), (n,))
        tg = TimeGrid(1.0, 8)
        x = grid.axes[0]
        y = np.zeros(n)
        for k in range(1, 6):
            y += rng.normal() / k ** 2 * np.sin(k * PI * x)
        a0 = 1.0 + 0.5 * np.sin(PI * x)
        b0 = 0.3 * np.sin(2 * PI * x)
        dd = 0.2 + 0.1 * np.sin(2 * PI * x)
        a1 = np.full(n, 0.5)
        c = CoefficientSet.build(grid, tg, a0=a0, b0=[b0], d=[[dd]], a1=a1,
                                 control_mask=box_mask(grid, ((0.3, 0.7),)))
        spec = apply_forward_operator(y, c, tg.midtimes[0])
        fd = fd_operator(y, grid.steps[0], a0, b0, dd, a1)
        errs[n] = float(np.linalg.norm(spec - fd) / np.linalg.norm(spec))
    assert errs[32] <= 0.03
    assert errs[128] <= 0.01
    assert errs[128] <= errs[32] / 8.0   # second-order oracle convergence


def test_dealiasing_is_identity_below_cutoff(grid16, rng):
    cut = grid16.dealias_mask
    low = lowmode_field(grid16, rng, kmax=4)
    assert np.array_equal(grid16.dealias(low), low) or \
        np.max(np.abs(grid16.dealias(low) - low)) <= 1e-14 * np.max(np.abs(low))
    high = sine_field(grid16, (16,))
    assert not bool(cut.ravel()[-1])
    assert np.max(np.abs(grid16.dealias(high))) <= 1e-13


def test_free_decay_matches_heat_kernel(grid16):
    # the integrating factor is exact on eigenmodes, at any step count
    y0 = sine_field(grid16, (1,))
    for nt in (16, 2000):
        tg = TimeGrid(1.0, nt)
        c = CoefficientSet.build(grid16, tg)
        y = solve_forward(y0, None, c, grid16, tg)
        amp = grid16.to_modes(y.terminal())[0] / grid16.to_modes(y0)[0]
        assert abs(amp - np.exp(-PI ** 4)) / np.exp(-PI ** 4) <= 1e-8


def test_free_decay_two_modes_pointwise(grid16):
    tg = TimeGrid(1.0, 2000)
    c = CoefficientSet.build(grid16, tg)
    y0 = sine_field(grid16, (1,)) + 0.5 * sine_field(grid16, (3,))
    y = solve_forward(y0, None, c, grid16, tg)
    exact = (np.exp(-PI ** 4) * sine_field(grid16, (1,))
             + 0.5 * np.exp(-81 * PI ** 4) * sine_field(grid16, (3,)))
    assert np.max(np.abs(y.terminal() - exact)) <= 1e-8


def test_forced_response_duhamel(grid16):
    # y0 = 0, g = sin(pi x) held constant: y(T) -> (1 - e^{-pi^4 T})/pi^4
    tg = TimeGrid(1.0, 2000)
    src = np.broadcast_to(sine_field(grid16, (1,)), (tg.nt,) + grid16.shape).copy()
    c = CoefficientSet.build(grid16, tg, g=src)
    y = solve_forward(np.zeros(grid16.shape), None, c, grid16, tg)
    exact = (1 - np.exp(-PI ** 4)) / PI ** 4
    amp = grid16.to_modes(y.terminal())[0] / grid16.to_modes(sine_field(grid16, (1,)))[0]
    assert abs(amp - exact) / exact <= 1e-6


def test_zero_data_gives_zero_trajectory(grid16):
    tg = TimeGrid(1.0, 40)
    c = coeffs_with(grid16, tg, a0=1.0, a1=0.2)
    y = solve_forward(np.zeros(grid16.shape), None, c, grid16, tg)
    assert not np.any(y.values)


def test_second_order_refinement():
    # frozen configuration: a0 = 1 shifts mode 1 to rate pi^4 + 1, which the
    # stage extrapolation resolves at second order
    grid = SpatialGrid((1.0,), (16,))
    T = 0.1
    y0 = sine_field(grid, (1,))
    exact = np.exp(-(PI ** 4 + 1.0) * T)
    errs = []
    for nt in (250, 500, 1000, 2000):
        tg = TimeGrid(T, nt)
        c = coeffs_with(grid, tg, a0=1.0)
        y = solve_forward(y0, None, c, grid, tg)
        amp = grid.to_modes(y.terminal())[0] / grid.to_modes(y0)[0]
        errs.append(abs(amp - exact) / exact)
    slopes = [np.log2(errs[i] / errs[i + 1]) for i in range(3)]
    assert min(slopes) >= 1.9


def test_adjoint_free_decay(grid16):
    tg = TimeGrid(1.0, 200)
    c = CoefficientSet.build(grid16, tg)
    z = solve_adjoint(sine_field(grid16, (1,)), c, "free", grid16, tg)
    amp = grid16.to_modes(z.initial())[0] / grid16.to_modes(sine_field(grid16, (1,)))[0]
    assert abs(amp - np.exp(-PI ** 4)) / np.exp(-PI ** 4) <= 1e-12


def test_adjoint_modes_coincide_without_lower_order(grid16, rng):
    tg = TimeGrid(1.0, 60)
    c = CoefficientSet.build(grid16, tg)
    zT = lowmode_field(grid16, rng)
    trajs = [solve_adjoint(zT, c, mode, grid16, tg).values
             for mode in ("free", "transposition", "full")]
    assert np.array_equal(trajs[0], trajs[1])
    assert np.array_equal(trajs[0], trajs[2])


def test_transposition_mode_decay_rate():
    # d = 1 turns the backward operator into bilap + lap on mode 1, rate
    # pi^4 - pi^2; log-rate agreement frozen at 5.8e-7 for this configuration
    grid = SpatialGrid((1.0,), (32,))
    tg = TimeGrid(0.1, 2000)
    c = CoefficientSet.build(grid, tg, d=[[np.ones(32)]],
                             control_mask=box_mask(grid, ((0.3, 0.7),)))
    z = solve_adjoint(sine_field(grid, (1,)), c, "transposition", grid, tg)
    amp = grid.to_modes(z.initial())[0] / grid.to_modes(sine_field(grid, (1,)))[0]
    rate = -np.log(amp) / tg.horizon
    exact = PI ** 4 - PI ** 2
    assert abs(rate - exact) / exact <= 1e-6


def test_invalid_adjoint_mode(grid16):
    tg = TimeGrid(1.0, 10)
    c = CoefficientSet.build(grid16, tg)
    with pytest.raises(ValueError):
        solve_adjoint(sine_field(grid16, (1,)), c, "both", grid16, tg)


def test_duality_identity_random_draws(grid16, rng):
    # 20 random (w, z) pairs under general variable coefficients
    tg = TimeGrid(1.0, 40)
    x = grid16.axes[0]
    c = CoefficientSet.build(
        grid16, tg,
        a0=1.0 + 0.5 * np.sin(PI * x),
        b0=[0.3 * np.sin(2 * PI * x)],
        d=[[0.2 + 0.1 * np.sin(2 * PI * x)]],
        a1=np.full(16, 0.5),
        control_mask=box_mask(grid16, ((0.3, 0.7),)))
    for _ in range(20):
        src = rng.standard_normal((tg.nt,) + grid16.shape)
        w = solve_forward(np.zeros(grid16.shape), None,
                          c.with_plain_source(src), grid16, tg)
        zT = lowmode_field(grid16, rng)
        gz = rng.standard_normal((tg.nt,) + grid16.shape)
        z = solve_adjoint(zT, c, "transposition", grid16, tg, source=gz)
        res = duality_check(w, z, c)
        scale = abs(np.sum(tg.tau[:, None] * z.pairing.reshape(tg.nt, -1)
                           * w.heat_source.reshape(tg.nt, -1)) * grid16.hvol)
        assert res / scale <= 1e-8


def test_dense_transpose_of_source_to_terminal_map(grid16):
    # columns of B: terminal response to a unit source impulse at one node
    # and one midpoint slot; rows of B^T from the adjoint pairing, full mode
    n = 16
    nt = 50
    tg = TimeGrid(1.0, nt)
    x = grid16.axes[0]
    c = CoefficientSet.build(
        grid16, tg,
        a0=0.8 + 0.4 * np.sin(PI * x),
        b0=[0.2 * np.sin(2 * PI * x)],
        d=[[0.1 + 0.05 * np.sin(PI * x)]],
        a1=np.full(n, 0.3),
        control_mask=box_mask(grid16, ((0.3, 0.7),)))
    B = np.zeros((n, nt * n))
    src = np.zeros((nt, n))
    for j in range(nt):
        for i in range(n):
            src[j, i] = 1.0
            y = solve_forward(np.zeros(n), None, c.with_plain_source(src), grid16, tg)
            B[:, j * n + i] = y.terminal()
            src[j, i] = 0.0
    Bt = np.zeros((nt * n, n))
    for k in range(n):
        zT = np.zeros(n)
        zT[k] = 1.0
        z = solve_adjoint(zT, c, "full", grid16, tg)
        Bt[:, k] = (tg.tau[:, None] * z.pairing).ravel()
    assert np.max(np.abs(B.T - Bt)) <= 1e-12 * np.max(np.abs(B))


def test_instability_ceiling_raises(grid16):
    tg = TimeGrid(1.0, 100)
    c = coeffs_with(grid16, tg, a0=-200.0)
    with pytest.raises(InstabilityError):
        solve_forward(sine_field(grid16, (1,)), None, c, grid16, tg)


def test_source_shape_validation(grid16):
    tg = TimeGrid(1.0, 10)
    c = CoefficientSet.build(grid16, tg)
    with pytest.raises(ShapeMismatchError):
        solve_adjoint(sine_field(grid16, (1,)), c, "free", grid16, tg,
                      source=np.zeros((tg.nt + 1,) + grid16.shape))
    with pytest.raises(ShapeMismatchError):
        apply_forward_operator(np.zeros(8), c, tg.midtimes[0])


def test_lower_order_da_selector(grid16, rng):
    # parts="da" keeps only the divergence-group terms
    tg = TimeGrid(1.0, 10)
    x = grid16.axes[0]
    u = lowmode_field(grid16, rng)
    only_ab = CoefficientSet.build(
        grid16, tg, a0=1.0 + x, b0=[np.sin(PI * x)],
        control_mask=box_mask(grid16, ((0.3, 0.7),)))
    assert not np.any(apply_lower_order(only_ab, 0, u, parts="da"))
    only_da = CoefficientSet.build(
        grid16, tg, d=[[0.3 * np.ones(16)]], a1=np.full(16, 0.2),
        control_mask=box_mask(grid16, ((0.3, 0.7),)))
    assert np.array_equal(apply_lower_order(only_da, 0, u, parts="da"),
                          apply_lower_order(only_da, 0, u, parts="all"))
