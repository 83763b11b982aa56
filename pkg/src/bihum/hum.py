"""Penalized control computation via the dual terminal-datum problem.

Instead of minimizing over controls directly, solve the spatial normal
equation

    (Lam + eps I) q = -y_free(T)

where Lam is the controllability Gramian of the discrete dynamics: Lam q is
the terminal value of the forward solve driven by the control chi_omega p,
with p the midpoint pairing view of the full-mode backward solve from q.
Because the backward solve is the exact transpose of the forward marcher,

    <Lam a, b> = sum_j tau_j <chi p_a, p_b>_omega

so Lam is symmetric positive semidefinite to roundoff and plain CG applies.
The recovered control is v = chi p_q, the state is the controlled forward
solve, and the stored adjoint is the negated backward solve, so the familiar
feedback relation v = -chi p holds bitwise.

The penalized cost (1/(2 eps)) ||y(T)||^2 + (1/2) ||v||^2_{Q_omega} and the
quotient diagnostics for the uniform penalization bound are assembled from
the same discrete inner products.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ._io import write_csv
from .discretization import (
    CoefficientSet,
    SpaceTimeField,
    SpatialGrid,
    TimeGrid,
    solve_adjoint,
    solve_forward,
)
from .errors import CgStagnationError, ShapeMismatchError, SweepDivergenceError
from .weights import WeightBundle, weighted_source_norm


@dataclass(frozen=True)
class HumConfig:
    """Inputs shared by the control solves.

    coefficients must carry a control mask. weights, when given, feed the
    weighted source norm used in the uniform-bound quotient.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    coefficients: CoefficientSet
    epsilon: float
    cg_tol: float = 1e-8
    cg_max_iters: int = 500
    weights: Optional[WeightBundle] = None
    precondition: bool = False        # diagonal modal-relaxation scaling

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"penalization epsilon must be positive, got {self.epsilon}")
        if not (0 < self.cg_tol < 1):
            raise ValueError(f"cg_tol must lie in (0, 1), got {self.cg_tol}")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be at least 1")
        if self.coefficients.control_mask is None:
            raise ShapeMismatchError("coefficient set must carry a control mask")
        if self.coefficients.grid != self.grid or self.coefficients.tgrid != self.tgrid:
            raise ShapeMismatchError("coefficient set lives on different grids")

    def with_epsilon(self, eps: float) -> "HumConfig":
        return replace(self, epsilon=eps)

    def with_coefficients(self, c: CoefficientSet) -> "HumConfig":
        return replace(self, coefficients=c)


@dataclass
class HumResult:
    """Control, controlled state and adjoint for one penalization level."""

    epsilon: float
    control: SpaceTimeField
    state: SpaceTimeField
    adjoint: SpaceTimeField
    terminal_datum: np.ndarray        # CG solution q of the normal equation
    terminal_norm: float              # ||y(T)||
    control_norm: float               # tau-weighted L2(Q_omega) norm of v
    cost: float
    cg_iterations: int
    cg_residuals: list
    weighted_source_norm: float
    initial_norm: float

    @property
    def bound_quotient(self) -> float:
        """[(1/eps)||y(T)||^2 + ||v||^2] / [weighted g norm^2 + ||y0||^2]."""
        num = self.terminal_norm ** 2 / self.epsilon + self.control_norm ** 2
        den = self.weighted_source_norm ** 2 + self.initial_norm ** 2
        if den == 0.0:
            return 0.0
        return num / den


def free_trajectory(y0: np.ndarray, c: CoefficientSet,
                    grid: SpatialGrid, tgrid: TimeGrid) -> SpaceTimeField:
    """Uncontrolled forward solve (source terms from c still apply)."""
    return solve_forward(y0, None, c, grid, tgrid)


def gramian_apply(zT: np.ndarray, c: CoefficientSet,
                  grid: SpatialGrid, tgrid: TimeGrid) -> np.ndarray:
    """Lam zT: backward full-mode solve, then forward solve driven by chi p.

    The forward leg uses zero initial data and no source; only the control
    enters. Symmetry and positive semidefiniteness follow from the transpose
    construction.
    """
    back = solve_adjoint(np.asarray(zT, dtype=float), c, "full", grid, tgrid)
    fwd = solve_forward(np.zeros(grid.shape), back.pairing, c.without_source(),
                        grid, tgrid)
    return fwd.terminal()


def dense_gramian(c: CoefficientSet, grid: SpatialGrid, tgrid: TimeGrid) -> np.ndarray:
    """Assemble Lam column by column (small grids only)."""
    n = int(np.prod(grid.shape))
    mat = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        mat[:, i] = gramian_apply(e.reshape(grid.shape), c, grid, tgrid).ravel()
    return mat


def _cg(apply_op: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
        inner: Callable[[np.ndarray, np.ndarray], float],
        tol: float, max_iters: int,
        precond: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        ) -> tuple[np.ndarray, int, list]:
    """CG (optionally preconditioned) with relative true-residual stopping;
    raises on stagnation."""
    bnorm = np.sqrt(inner(b, b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x, 0, [0.0]
    r = b.copy()
    z = r if precond is None else precond(r)
    p = z.copy()
    rho = inner(r, z)
    history = [1.0]
    best_x, best_res = x.copy(), 1.0
    for it in range(1, max_iters + 1):
        ap = apply_op(p)
        denom = inner(p, ap)
        if denom <= 0:
            # numerically indefinite direction; return the best iterate found
            raise CgStagnationError(
                f"non-positive curvature at iteration {it}",
                best=best_x, history=history,
            )
        gamma = rho / denom
        x = x + gamma * p
        r = r - gamma * ap
        rel = float(np.sqrt(inner(r, r)) / bnorm)
        history.append(rel)
        if rel < best_res:
            best_res, best_x = rel, x.copy()
        if rel <= tol:
            return x, it, history
        if it >= 30 and rel > 0.999 * history[it - 30]:
            raise CgStagnationError(
                f"relative residual stuck at {rel:.3e} after {it} iterations",
                best=best_x, history=history,
            )
        z = r if precond is None else precond(r)
        rho_new = inner(r, z)
        p = z + (rho_new / rho) * p
        rho = rho_new
    raise CgStagnationError(
        f"no convergence to {tol:.1e} within {max_iters} iterations "
        f"(best {best_res:.3e})",
        best=best_x, history=history,
    )


def _modal_relaxation_precond(cfg: HumConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Diagonal surrogate of Lam + eps I in sine space.

    On the uncontrolled constant-coefficient flow each mode relaxes like
    e^{-mu dt}, so the Gramian's modal diagonal is approximately the control
    volume fraction times int_0^T e^{-2 mu (T-t)} dt. Scaling by its inverse
    flattens the spectrum without touching the operator itself.
    """
    grid, tgrid = cfg.grid, cfg.tgrid
    frac = float(np.mean(cfg.coefficients.control_mask))
    mu = grid.mu
    relax = frac * -np.expm1(-2.0 * mu * tgrid.horizon) / (2.0 * mu)
    diag = relax + cfg.epsilon

    def apply(r: np.ndarray) -> np.ndarray:
        return grid.from_modes(grid.to_modes(r) / diag)

    return apply


def hum_solve(y0: np.ndarray, g: Optional[np.ndarray], cfg: HumConfig,
              _free: Optional[SpaceTimeField] = None) -> HumResult:
    """Solve the penalized problem for one epsilon.

    g, when given, replaces any source carried by cfg.coefficients. The
    stored adjoint p is the negated backward solve from the CG solution q,
    so the feedback relation v = -chi p holds bitwise on the control
    cylinder.
    """
    grid, tgrid = cfg.grid, cfg.tgrid
    c = cfg.coefficients if g is None else cfg.coefficients.with_plain_source(g)
    free = _free if _free is not None else free_trajectory(
        np.asarray(y0, dtype=float), c, grid, tgrid)
    b = -free.terminal()

    def apply_op(x: np.ndarray) -> np.ndarray:
        return gramian_apply(x, c, grid, tgrid) + cfg.epsilon * x

    def inner(u: np.ndarray, v: np.ndarray) -> float:
        return grid.inner(u, v)

    precond = _modal_relaxation_precond(cfg) if cfg.precondition else None
    q, iters, history = _cg(apply_op, b, inner, cfg.cg_tol, cfg.cg_max_iters,
                            precond=precond)

    back = solve_adjoint(q, c, "full", grid, tgrid)
    chi = c.control_mask
    v = chi * back.pairing
    state = solve_forward(np.asarray(y0, dtype=float), back.pairing, c, grid, tgrid)
    control = SpaceTimeField(v, grid, tgrid, role="control")
    # negating the backward solve gives the optimality-system adjoint: by
    # linearity it solves the same equation from -q, and v = -chi p exactly
    adjoint = SpaceTimeField(
        -back.values, grid, tgrid, role="adjoint",
        heat_source=None if back.heat_source is None else -back.heat_source,
        pairing=None if back.pairing is None else -back.pairing,
        adj_source=None if back.adj_source is None else -back.adj_source)

    tau = tgrid.tau
    flat = v.reshape(tgrid.nt, -1)
    control_norm = float(np.sqrt(grid.hvol * np.dot(tau, np.sum(flat * flat, axis=1))))
    terminal_norm = grid.norm(state.terminal())
    cost = 0.5 * terminal_norm ** 2 / cfg.epsilon + 0.5 * control_norm ** 2
    gsrc = c.source_slices()
    wnorm = 0.0
    if cfg.weights is not None and gsrc is not None:
        wnorm = weighted_source_norm(cfg.weights, gsrc, grid.hvol)
    return HumResult(
        epsilon=cfg.epsilon,
        control=control,
        state=state,
        adjoint=adjoint,
        terminal_datum=q,
        terminal_norm=terminal_norm,
        control_norm=control_norm,
        cost=cost,
        cg_iterations=iters,
        cg_residuals=history,
        weighted_source_norm=wnorm,
        initial_norm=grid.norm(np.asarray(y0, dtype=float)),
    )


@dataclass
class SweepReport:
    """Per-epsilon penalization diagnostics plus fitted decay behavior."""

    epsilons: list
    terminal_norms: list
    control_norms: list
    costs: list
    cg_iterations: list
    bound_quotients: list
    fitted_exponent: float
    control_ratio_last3: float
    sqrt_law_constant: float        # K with ||y(T)|| <= K sqrt(eps) on early points
    terminal_monotone: bool
    results: list = field(default_factory=list)

    def rows(self):
        for i in range(len(self.epsilons)):
            yield [self.epsilons[i], self.terminal_norms[i], self.control_norms[i],
                   self.costs[i], self.cg_iterations[i], self.bound_quotients[i]]

    def to_csv(self, path) -> None:
        write_csv(path, ["epsilon", "terminal_norm", "control_norm", "cost",
                         "cg_iters", "bound_quotient"], self.rows())

    def summary(self) -> dict:
        return {
            "epsilons": self.epsilons,
            "fitted_exponent": self.fitted_exponent,
            "control_ratio_last3": self.control_ratio_last3,
            "sqrt_law_constant": self.sqrt_law_constant,
            "terminal_monotone": self.terminal_monotone,
            "terminal_norms": self.terminal_norms,
            "control_norms": self.control_norms,
        }


def validate_epsilon_ladder(epsilons) -> list:
    """Normalize a sweep ladder: at least 4 strictly decreasing values
    spanning at least three decades."""
    eps = [float(e) for e in epsilons]
    if len(eps) < 4:
        raise ValueError("epsilon sweep needs at least 4 values")
    if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
        raise ValueError("epsilon values must be strictly decreasing")
    if eps[0] / eps[-1] < 1e3:
        raise ValueError("epsilon sweep must span at least three decades")
    return eps


def epsilon_sweep(y0: np.ndarray, g: Optional[np.ndarray], cfg: HumConfig,
                  epsilons) -> SweepReport:
    """Run hum_solve across a decreasing epsilon ladder and fit the decay law.

    Requires at least 4 values spanning at least 3 decades. Raises a
    sweep-divergence error (report attached) when the trailing control norms
    grow by more than a factor of 2, which signals loss of uniform
    controllability at the discrete level.
    """
    eps = validate_epsilon_ladder(epsilons)

    c = cfg.coefficients if g is None else cfg.coefficients.with_plain_source(g)
    free = free_trajectory(np.asarray(y0, dtype=float), c, cfg.grid, cfg.tgrid)
    results = []
    for e in eps:
        results.append(hum_solve(y0, g, cfg.with_epsilon(e), _free=free))
    return sweep_report_from_results(eps, results)


def sweep_report_from_results(eps, results) -> SweepReport:
    """Assemble the sweep diagnostics from per-epsilon solves (shared by the
    serial and parallel drivers so both emit identical tables)."""
    tn = np.array([r.terminal_norm for r in results])
    cn = np.array([r.control_norm for r in results])
    le = np.log(np.array(eps))
    # least-squares slope of log ||y(T)|| against log eps
    with np.errstate(divide="ignore"):
        lt = np.log(tn)
    mask = np.isfinite(lt)
    if mask.sum() >= 2:
        A = np.vstack([le[mask], np.ones(mask.sum())]).T
        slope = float(np.linalg.lstsq(A, lt[mask], rcond=None)[0][0])
    else:
        slope = float("nan")
    last3 = cn[-3:]
    ratio = float(np.max(last3) / max(np.min(last3), 1e-300))
    k_candidates = [tn[i] / np.sqrt(eps[i]) for i in range(min(2, len(eps)))]
    kconst = float(max(k_candidates))
    monotone = bool(np.all(np.diff(tn) <= 1e-12 * np.maximum(tn[:-1], 1e-300)))

    report = SweepReport(
        epsilons=eps,
        terminal_norms=tn.tolist(),
        control_norms=cn.tolist(),
        costs=[r.cost for r in results],
        cg_iterations=[r.cg_iterations for r in results],
        bound_quotients=[r.bound_quotient for r in results],
        fitted_exponent=slope,
        control_ratio_last3=ratio,
        sqrt_law_constant=kconst,
        terminal_monotone=monotone,
        results=results,
    )
    if ratio > 2.0:
        err = SweepDivergenceError(
            f"trailing control norms vary by factor {ratio:.3f} > 2; "
            f"discrete uniform controllability is lost at these resolutions"
        )
        err.report = report
        raise err
    return report
