"""Carleman weight construction and property checks.

The spatial profile is the polynomial bump eta(x) = prod_i x_i (L_i - x_i),
positive inside the box, zero on the boundary, with inward-pointing boundary
gradient and a single critical point at the center. Writing M = sup eta
= prod_i (L_i/2)^2 and theta(t) = 1/sqrt(t(T-t)), the weights are

    alpha(x, t) = (e^{lam (2M + eta)} - e^{4 lam M}) theta(t)      (negative)
    xi(x, t)    = e^{lam (2M + eta)} theta(t)                      (>= 2/T)

together with the truncated pair (alpha~, xi~) that freezes theta at its
t = T/2 value of 2/T on [0, T/2]. Spatial gradients obey the exact identities
grad alpha = grad xi = lam xi grad eta, and the analytic time-derivative ratio
(|alpha_t| + |xi_t|)/xi^3 is bounded by T/2 for every lam > 0.

Weights are evaluated on midpoint time grids only, which keeps a dt/2 offset
from the singular endpoints. Large exponents are reported through log-space
fields (log xi, and alpha itself, which never overflows); quantities of the
form e^{+-2 s alpha} must be assembled in log space by callers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ._io import write_csv
from .errors import (
    ConstructionInfeasibleError,
    GridMismatchError,
    InvalidRegionError,
    WeightOverflowError,
)
from .discretization import SpatialGrid, TimeGrid

LOG_FLOAT_MAX = 709.0


@dataclass(frozen=True)
class DomainSpec:
    """Box domain with an open control box and an inner observation box.

    The inner box must sit strictly inside the control box, and (for this bump
    profile) must contain the domain center, where grad eta vanishes.
    """

    extents: tuple[float, ...]
    control_box: tuple[tuple[float, float], ...]
    inner_box: tuple[tuple[float, float], ...]

    def __post_init__(self):
        dim = len(self.extents)
        if any(L <= 0 for L in self.extents):
            raise InvalidRegionError(f"domain extents must be positive, got {self.extents}")
        if len(self.control_box) != dim or len(self.inner_box) != dim:
            raise InvalidRegionError("control and inner boxes must match the domain dimension")
        for name, box in (("control", self.control_box), ("inner", self.inner_box)):
            for ax, (lo, hi) in enumerate(box):
                if not (0.0 <= lo < hi <= self.extents[ax]):
                    raise InvalidRegionError(
                        f"{name} box {box} is empty or leaves the domain on axis {ax}"
                    )
        for ax in range(dim):
            olo, ohi = self.control_box[ax]
            ilo, ihi = self.inner_box[ax]
            if not (olo < ilo and ihi < ohi):
                raise InvalidRegionError(
                    f"inner box must sit strictly inside the control box on axis {ax}"
                )

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def center(self) -> tuple[float, ...]:
        return tuple(L / 2.0 for L in self.extents)


@dataclass(frozen=True)
class EtaField:
    """The bump profile with exact derivatives sampled on the grid nodes."""

    spec: DomainSpec
    grid: SpatialGrid
    values: np.ndarray
    grad: np.ndarray      # (dim,) + shape
    hess: np.ndarray      # (dim, dim) + shape
    sup_norm: float       # exact analytic sup, prod (L_i/2)^2

    @property
    def dim(self) -> int:
        return self.grid.dim


def build_eta(spec: DomainSpec, grid: SpatialGrid) -> EtaField:
    """Construct the bump profile for the given domain, checking placement.

    The construction needs grad eta nonzero away from the inner box; with this
    profile the only critical point is the center, so the center must lie in
    the open inner box. If it does not, no compliant profile of this family
    exists and a construction-infeasible error is raised.
    """
    if tuple(grid.extents) != tuple(spec.extents):
        raise GridMismatchError(
            f"grid extents {grid.extents} do not match domain extents {spec.extents}"
        )
    for ax in range(spec.dim):
        ilo, ihi = spec.inner_box[ax]
        cen = spec.extents[ax] / 2.0
        if not (ilo < cen < ihi):
            raise ConstructionInfeasibleError(
                f"the profile's critical point sits at the domain center, which the "
                f"inner box {spec.inner_box} does not contain on axis {ax}"
            )
    dim = spec.dim
    facs = []
    dfacs = []
    for ax in range(dim):
        x = grid.axes[ax]
        L = spec.extents[ax]
        facs.append(x * (L - x))
        dfacs.append(L - 2.0 * x)

    def bview(arr1d: np.ndarray, ax: int) -> np.ndarray:
        sh = [1] * dim
        sh[ax] = -1
        return arr1d.reshape(sh)

    values = np.ones(grid.shape)
    for ax in range(dim):
        values = values * bview(facs[ax], ax)
    grad = np.empty((dim,) + grid.shape)
    for i in range(dim):
        g = np.ones(grid.shape)
        for ax in range(dim):
            g = g * bview(dfacs[ax] if ax == i else facs[ax], ax)
        grad[i] = g
    hess = np.empty((dim, dim) + grid.shape)
    for i in range(dim):
        for j in range(dim):
            h = np.ones(grid.shape)
            if i == j:
                h *= -2.0
                for ax in range(dim):
                    if ax != i:
                        h = h * bview(facs[ax], ax)
            else:
                for ax in range(dim):
                    if ax == i or ax == j:
                        h = h * bview(dfacs[ax], ax)
                    else:
                        h = h * bview(facs[ax], ax)
            hess[i, j] = h
    sup = float(np.prod([(L / 2.0) ** 2 for L in spec.extents]))
    return EtaField(spec, grid, values, grad, hess, sup)


@dataclass(frozen=True)
class WeightBundle:
    """Weight fields sampled on (midpoint times) x (grid nodes).

    alpha is negative and never overflows; xi can, so log_xi is the canonical
    accessor for exponent assembly. The tilde pair freezes the time factor
    below T/2.
    """

    eta: EtaField
    tgrid: TimeGrid
    s: float
    lam: float
    alpha: np.ndarray
    xi: np.ndarray
    alpha_tilde: np.ndarray
    xi_tilde: np.ndarray
    log_xi: np.ndarray
    log_xi_tilde: np.ndarray

    @property
    def horizon(self) -> float:
        return self.tgrid.horizon

    def max_s_alpha_mag(self) -> float:
        return float(self.s * np.max(np.abs(self.alpha)))


def eval_weights(eta: EtaField, s: float, lam: float, tgrid: TimeGrid) -> WeightBundle:
    """Evaluate both weight pairs on the midpoint time grid."""
    if s <= 0 or lam <= 0:
        raise ValueError(f"weight parameters must be positive, got s={s}, lam={lam}")
    T = tgrid.horizon
    t = tgrid.midtimes
    dim = eta.dim
    M = eta.sup_norm
    exponent = lam * (2.0 * M + eta.values)
    log_theta_max = -0.5 * float(np.min(np.log(t * (T - t))))
    # the boundary offset e^{4 lam M} dominates every exponent in the family
    # (eta <= M so 2M + eta < 4M), so it sets the overflow threshold
    peak = 4.0 * lam * M + log_theta_max
    if peak > LOG_FLOAT_MAX:
        raise WeightOverflowError(
            f"the weight family would reach e^{peak:.1f}, beyond floating range; "
            f"reduce lam or refine less aggressively"
        )
    theta = 1.0 / np.sqrt(t * (T - t))
    theta_tilde = np.where(t <= T / 2.0, 2.0 / T, theta)
    tb = theta.reshape((-1,) + (1,) * dim)
    tbt = theta_tilde.reshape((-1,) + (1,) * dim)
    E = np.exp(exponent)
    num = E - np.exp(4.0 * lam * M)
    alpha = num[None] * tb
    xi = E[None] * tb
    alpha_tilde = num[None] * tbt
    xi_tilde = E[None] * tbt
    log_xi = exponent[None] + np.log(theta).reshape((-1,) + (1,) * dim)
    log_xi_tilde = exponent[None] + np.log(theta_tilde).reshape((-1,) + (1,) * dim)
    return WeightBundle(eta, tgrid, float(s), float(lam), alpha, xi,
                        alpha_tilde, xi_tilde, log_xi, log_xi_tilde)


@dataclass(frozen=True)
class WeightPropertyReport:
    s: float
    lam: float
    horizon: float
    grad_alpha_residual: float
    grad_xi_residual: float
    xi_floor_margin: float      # min xi * (T/2) - 1, nonnegative when the floor holds
    time_ratio_max: float
    time_ratio_bound: float     # T/2
    gradient_ok: bool
    floor_ok: bool
    time_ratio_ok: bool

    @property
    def all_ok(self) -> bool:
        return self.gradient_ok and self.floor_ok and self.time_ratio_ok

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "lambda": self.lam,
            "horizon": self.horizon,
            "grad_alpha_residual": self.grad_alpha_residual,
            "grad_xi_residual": self.grad_xi_residual,
            "xi_floor_margin": self.xi_floor_margin,
            "time_ratio_max": self.time_ratio_max,
            "time_ratio_bound": self.time_ratio_bound,
            "gradient_ok": self.gradient_ok,
            "floor_ok": self.floor_ok,
            "time_ratio_ok": self.time_ratio_ok,
            "all_ok": self.all_ok,
        }


def check_weight_properties(bundle: WeightBundle, eta: EtaField,
                            grad_tol: float = 1e-12) -> WeightPropertyReport:
    """Verify the structural weight identities on the sampled fields.

    Gradient identity: grad alpha = grad xi = lam xi grad eta, compared
    between the linear-field path and the log-field path to guard drift.
    Floor: xi >= 2/T everywhere. Time ratio: the analytic
    (|alpha_t| + |xi_t|)/xi^3 stays below T/2.
    """
    lam = bundle.lam
    T = bundle.horizon
    dim = eta.dim
    M = eta.sup_norm
    grad_scale = np.abs(eta.grad)[:, None, ...]     # (dim, 1, nodes)

    # side A uses the stored linear xi, side B rebuilds xi from log_xi
    xi_a = bundle.xi[None, ...]                     # (1, nt, nodes)
    xi_b = np.exp(bundle.log_xi)[None, ...]
    ga = lam * xi_a * grad_scale
    gb = lam * xi_b * grad_scale
    denom = max(float(np.max(np.abs(ga))), 1e-300)
    grad_xi_res = float(np.max(np.abs(ga - gb))) / denom
    # alpha's gradient equals xi's; rebuild xi along the alpha path
    # (alpha plus the boundary offset times the recovered time factor)
    E_field = np.exp(lam * (2.0 * M + eta.values))[None, ...]
    theta = bundle.xi / E_field
    alpha_b = (E_field - np.exp(4.0 * lam * M)) * theta
    xi_from_alpha = alpha_b + np.exp(4.0 * lam * M) * theta
    ga2 = lam * xi_from_alpha[None, ...] * grad_scale
    grad_alpha_res = float(np.max(np.abs(ga2 - ga))) / denom

    floor_margin = float(np.min(bundle.xi) * (T / 2.0) - 1.0)

    t = bundle.tgrid.midtimes.reshape((-1,) + (1,) * dim)
    E = np.exp(lam * (2.0 * M + eta.values))[None, ...]
    num_mag = np.exp(4.0 * lam * M) - E        # |alpha numerator|, positive
    ratio = (num_mag + E) * np.abs(2.0 * t - T) / (2.0 * E ** 3)
    ratio_max = float(np.max(ratio))

    return WeightPropertyReport(
        s=bundle.s, lam=lam, horizon=T,
        grad_alpha_residual=grad_alpha_res,
        grad_xi_residual=grad_xi_res,
        xi_floor_margin=floor_margin,
        time_ratio_max=ratio_max,
        time_ratio_bound=T / 2.0,
        gradient_ok=(grad_alpha_res <= grad_tol and grad_xi_res <= grad_tol),
        floor_ok=(floor_margin >= 0.0),
        time_ratio_ok=(ratio_max <= T / 2.0),
    )


def weighted_source_norm(bundle: WeightBundle, g: Optional[np.ndarray],
                         hvol: float) -> float:
    """|| xi~^{-3} e^{-s alpha~} g ||_{L2(Q)} assembled in log space.

    Returns 0.0 for an absent or identically zero source, inf on overflow.
    """
    if g is None:
        return 0.0
    g = np.asarray(g, dtype=float)
    nt = bundle.tgrid.nt
    if g.ndim == bundle.eta.dim:
        g = np.broadcast_to(g, (nt,) + g.shape)
    if not np.any(g):
        return 0.0
    tau = bundle.tgrid.tau.reshape((-1,) + (1,) * bundle.eta.dim)
    with np.errstate(divide="ignore"):
        log_g = np.log(np.abs(g))
    log_terms = (2.0 * (-3.0 * bundle.log_xi_tilde - bundle.s * bundle.alpha_tilde + log_g)
                 + np.log(tau) + np.log(hvol))
    total = logsumexp(log_terms.ravel())
    return float(np.exp(0.5 * total))


def write_weights_csv(bundle: WeightBundle, path) -> None:
    """Long-format CSV: x[, y], t, alpha, xi, alpha_tilde, xi_tilde."""
    grid = bundle.eta.grid
    dim = grid.dim
    coord_names = ["x", "y", "z"][:dim]
    header = coord_names + ["t", "alpha", "xi", "alpha_tilde", "xi_tilde"]
    meshes = np.meshgrid(*grid.axes, indexing="ij")
    flat_coords = [m.ravel() for m in meshes]
    rows = []
    for ti, t in enumerate(bundle.tgrid.midtimes):
        a = bundle.alpha[ti].ravel()
        x = bundle.xi[ti].ravel()
        at = bundle.alpha_tilde[ti].ravel()
        xt = bundle.xi_tilde[ti].ravel()
        for ni in range(a.size):
            rows.append([flat_coords[ax][ni] for ax in range(dim)]
                        + [t, a[ni], x[ni], at[ni], xt[ni]])
    write_csv(path, header, rows)
