"""Sine-spectral space discretization and exponential time stepping.

Spatial part: tensor-product sine (DST-I) Galerkin on the interior nodes of a
box, under Navier conditions y = lap y = 0. Sine modes are exact
eigenfunctions of the bilaplacian, so the stiff operator is diagonal with
eigenvalues mu_k = (sum_i (k_i pi / L_i)^2)^2 and the Laplacian is diagonal
with nu_k = -sum_i (k_i pi / L_i)^2. Odd derivatives leave the sine span and
are applied with dense cosine-synthesis matrices; products with variable
coefficients are collocated on the nodes and the assembled lower-order term is
projected back with a 2/3 truncation.

Time part: states live on node times t_j = j*dt, sources and coefficients on
midpoint times (j+1/2)*dt, which realizes the interior grid
[delta_t, T - delta_t] with delta_t = dt/2. One step is

    y^{j+1} = X y^j + P (f_j - E_j m_j),     X = e^{-mu dt},  P = dt phi1(mu dt)

with phi1(x) = (1 - e^{-x})/x, E_j the lower-order coefficient operator at
midpoint j and m_j the stage estimate of y at that midpoint (m_0 = y^0, else
the two-level extrapolation 1.5 y^j - 0.5 y^{j-1}). The integrating factor is
exact on eigenmodes, so free decay is reproduced to roundoff and the scheme is
second order overall.

Backward (adjoint) solves are exact transposes of this map, computed by a
reverse sweep; see solve_adjoint. Every solver output carries its effective
heat source f_j - E_j m_j, which is what makes the discrete duality identity
in duality_check hold to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.fft import dstn

from .errors import (
    GridMismatchError,
    InstabilityError,
    ShapeMismatchError,
)

INSTABILITY_CEILING = 1e12


def _phi1(x: np.ndarray) -> np.ndarray:
    """(1 - e^{-x}) / x, stable for small nonnegative x."""
    x = np.asarray(x, dtype=float)
    small = x < 1e-8
    safe = np.where(small, 1.0, x)
    out = -np.expm1(-safe) / safe
    return np.where(small, 1.0 - x / 2.0 + x * x / 6.0, out)


@dataclass(frozen=True)
class SpatialGrid:
    """Interior-node tensor grid on the box prod_i (0, L_i).

    shape[i] interior nodes per axis at x = (j+1) h_i with h_i = L_i/(N_i+1).
    The nodal inner product hvol * sum(u v) equals the L2 inner product exactly
    for fields in the sine span (the DST-I is orthogonal).
    """

    extents: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if len(self.extents) != len(self.shape):
            raise ShapeMismatchError(
                f"extents {self.extents} and shape {self.shape} disagree on dimension"
            )
        if any(n < 1 for n in self.shape):
            raise ShapeMismatchError(f"need at least one interior node per axis, got {self.shape}")
        if any(L <= 0 for L in self.extents):
            raise ShapeMismatchError(f"extents must be positive, got {self.extents}")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @cached_property
    def steps(self) -> tuple[float, ...]:
        return tuple(L / (n + 1) for L, n in zip(self.extents, self.shape))

    @cached_property
    def hvol(self) -> float:
        return float(np.prod(self.steps))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            (np.arange(1, n + 1) * h) for n, h in zip(self.shape, self.steps)
        )

    def meshes(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def kappas(self) -> tuple[np.ndarray, ...]:
        """Per-axis continuous wavenumbers (k+1) pi / L for mode index k."""
        return tuple(
            (np.arange(1, n + 1) * np.pi / L) for n, L in zip(self.shape, self.extents)
        )

    @cached_property
    def nu(self) -> np.ndarray:
        """Laplacian eigenvalues, full mode shape (all negative)."""
        total = np.zeros(self.shape)
        for ax, kap in enumerate(self.kappas):
            sh = [1] * self.dim
            sh[ax] = -1
            total = total + (kap ** 2).reshape(sh)
        return -total

    @cached_property
    def mu(self) -> np.ndarray:
        """Bilaplacian eigenvalues nu^2, full mode shape."""
        return self.nu ** 2

    # transforms act on the trailing dim axes so time-stacked arrays pass through

    def _grid_axes(self, arr: np.ndarray) -> tuple[int, ...]:
        if arr.ndim < self.dim or arr.shape[-self.dim:] != self.shape:
            raise ShapeMismatchError(
                f"array of shape {arr.shape} does not end in grid shape {self.shape}"
            )
        return tuple(range(arr.ndim - self.dim, arr.ndim))

    def to_modes(self, u: np.ndarray) -> np.ndarray:
        return dstn(u, type=1, norm="ortho", axes=self._grid_axes(u))

    def from_modes(self, c: np.ndarray) -> np.ndarray:
        # orthonormal DST-I is an involution
        return dstn(c, type=1, norm="ortho", axes=self._grid_axes(c))

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return self.hvol * float(np.vdot(u, v).real)

    def norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(self.hvol) * np.linalg.norm(np.ravel(u)))

    # dense per-axis matrices for odd derivatives: u'(x_j) is a cosine series,
    # so analyze in sines, scale by kappa, synthesize in cosines

    @cached_property
    def _sine_mats(self) -> tuple[np.ndarray, ...]:
        mats = []
        for n in self.shape:
            jk = np.arange(1, n + 1)
            mats.append(np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(jk, jk) / (n + 1)))
        return tuple(mats)

    @cached_property
    def _cosine_mats(self) -> tuple[np.ndarray, ...]:
        mats = []
        for n in self.shape:
            jk = np.arange(1, n + 1)
            mats.append(np.sqrt(2.0 / (n + 1)) * np.cos(np.pi * np.outer(jk, jk) / (n + 1)))
        return tuple(mats)

    def _apply_axis(self, u: np.ndarray, mat: np.ndarray, axis_from_end: int) -> np.ndarray:
        ax = u.ndim - self.dim + axis_from_end
        moved = np.moveaxis(u, ax, -1)
        out = moved @ mat.T
        return np.moveaxis(out, -1, ax)

    def d1(self, u: np.ndarray, axis: int) -> np.ndarray:
        """First derivative along one grid axis (exact on the sine span)."""
        self._grid_axes(u)
        s = self._sine_mats[axis]
        c = self._cosine_mats[axis]
        kap = self.kappas[axis]
        return self._apply_axis(self._apply_axis(u, s, axis) * self._bshape(kap, axis), c, axis)

    def d1t(self, u: np.ndarray, axis: int) -> np.ndarray:
        """Transpose of d1 in the nodal dot product (discrete divergence form)."""
        self._grid_axes(u)
        s = self._sine_mats[axis]
        c = self._cosine_mats[axis]
        kap = self.kappas[axis]
        return self._apply_axis(self._apply_axis(u, c, axis) * self._bshape(kap, axis), s, axis)

    def _bshape(self, kap: np.ndarray, axis: int) -> np.ndarray:
        sh = [1] * self.dim
        sh[axis] = -1
        return kap.reshape(sh)

    def d2(self, u: np.ndarray, axis: int) -> np.ndarray:
        """Pure second derivative along one axis via the modal symbol -kappa^2."""
        c = self.to_modes(u)
        kap = self.kappas[axis]
        return self.from_modes(c * (-self._bshape(kap, axis) ** 2))

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        return self.from_modes(self.to_modes(u) * self.nu)

    def bilaplacian(self, u: np.ndarray) -> np.ndarray:
        return self.from_modes(self.to_modes(u) * self.mu)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """Stacked first derivatives, shape (dim,) + u.shape."""
        return np.stack([self.d1(u, a) for a in range(self.dim)])

    def hessian(self, u: np.ndarray) -> np.ndarray:
        """Stacked second derivatives, shape (dim, dim) + u.shape.

        Diagonal entries use the modal symbol; mixed entries compose two odd
        derivatives, which is exact for in-span fields.
        """
        d = self.dim
        out = np.empty((d, d) + u.shape)
        firsts = [self.d1(u, a) for a in range(d)]
        for i in range(d):
            for j in range(d):
                if i == j:
                    out[i, j] = self.d2(u, i)
                else:
                    out[i, j] = self.d1(firsts[j], i)
        return out

    def grad_laplacian(self, u: np.ndarray) -> np.ndarray:
        lap = self.laplacian(u)
        return np.stack([self.d1(lap, a) for a in range(self.dim)])

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule modal mask (1.0 kept, 0.0 truncated)."""
        keep = np.ones(self.shape)
        for ax, n in enumerate(self.shape):
            cutoff = (2 * (n + 1)) // 3
            kept = (np.arange(1, n + 1) <= cutoff).astype(float)
            sh = [1] * self.dim
            sh[ax] = -1
            keep = keep * kept.reshape(sh)
        return keep

    def dealias(self, u: np.ndarray) -> np.ndarray:
        return self.from_modes(self.to_modes(u) * self.dealias_mask)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T]: node times j*dt and midpoints (j+1/2)*dt.

    Quadrature over the midpoint (interior) grid uses trapezoid weights tau
    with halved end slices; the covered interval [dt/2, T - dt/2] omits the
    endpoints where the Carleman weights are singular.
    """

    horizon: float
    nt: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ShapeMismatchError(f"time horizon must be positive, got {self.horizon}")
        if self.nt < 1:
            raise ShapeMismatchError(f"need at least one time step, got nt={self.nt}")

    @property
    def dt(self) -> float:
        return self.horizon / self.nt

    @property
    def offset(self) -> float:
        return self.dt / 2.0

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.nt + 1)

    @cached_property
    def midtimes(self) -> np.ndarray:
        return (np.arange(self.nt) + 0.5) * self.dt

    @cached_property
    def tau(self) -> np.ndarray:
        w = np.full(self.nt, self.dt)
        if self.nt >= 2:
            w[0] = self.dt / 2.0
            w[-1] = self.dt / 2.0
        return w


def box_mask(grid: SpatialGrid, box: Sequence[tuple[float, float]]) -> np.ndarray:
    """Indicator of an open axis-aligned box on the interior nodes."""
    if len(box) != grid.dim:
        raise ShapeMismatchError(f"box {box} has wrong dimension for grid of dim {grid.dim}")
    mask = np.ones(grid.shape)
    for ax, (lo, hi) in enumerate(box):
        inside = ((grid.axes[ax] > lo) & (grid.axes[ax] < hi)).astype(float)
        sh = [1] * grid.dim
        sh[ax] = -1
        mask = mask * inside.reshape(sh)
    return mask


def sine_field(grid: SpatialGrid, modes: Sequence[int], amplitude: float = 1.0) -> np.ndarray:
    """prod_i sin(k_i pi x_i / L_i) scaled by amplitude."""
    if len(modes) != grid.dim:
        raise ShapeMismatchError(f"mode tuple {modes} has wrong dimension")
    out = np.full(grid.shape, amplitude)
    for ax, k in enumerate(modes):
        sh = [1] * grid.dim
        sh[ax] = -1
        out = out * np.sin(k * np.pi * grid.axes[ax] / grid.extents[ax]).reshape(sh)
    return out


def _normalize_coeff(arr, grid: SpatialGrid, tgrid: TimeGrid, name: str):
    """Accept None, scalar, a space field or a space-time stack; drop zeros."""
    if arr is None:
        return None
    a = np.asarray(arr, dtype=float)
    if a.ndim == 0:
        if float(a) == 0.0:
            return None
        a = np.full(grid.shape, float(a))
    if a.shape == grid.shape:
        pass
    elif a.shape == (tgrid.nt,) + grid.shape:
        pass
    else:
        raise ShapeMismatchError(
            f"coefficient {name} has shape {a.shape}; expected {grid.shape} "
            f"or {(tgrid.nt,) + grid.shape}"
        )
    if not np.all(np.isfinite(a)):
        raise ShapeMismatchError(f"coefficient {name} contains non-finite values")
    if not np.any(a):
        return None
    return a


def _slice_at(arr: Optional[np.ndarray], j: int, dim: int):
    """Midpoint slice j of a (possibly time-constant) coefficient array."""
    if arr is None:
        return None
    if arr.ndim == dim:
        return arr
    return arr[j]


@dataclass(frozen=True)
class CoefficientSet:
    """Lower-order coefficients, source and control-region masks.

    a0: zero-order scalar. b0: gradient coefficients (one field per axis).
    d: Hessian coefficients (dim x dim fields). a1: Laplacian scalar.
    The source is either plain (g) or divergence-form (g0, gdiv with one field
    per axis), never both. Masks are node indicators of the control region and
    the inner region.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    a0: Optional[np.ndarray] = None
    b0: Optional[tuple] = None
    d: Optional[tuple] = None
    a1: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    g0: Optional[np.ndarray] = None
    gdiv: Optional[tuple] = None
    control_mask: Optional[np.ndarray] = None
    inner_mask: Optional[np.ndarray] = None

    @classmethod
    def build(cls, grid, tgrid, a0=None, b0=None, d=None, a1=None, g=None,
              g0=None, gdiv=None, control_mask=None, inner_mask=None) -> "CoefficientSet":
        dim = grid.dim
        a0n = _normalize_coeff(a0, grid, tgrid, "a0")
        a1n = _normalize_coeff(a1, grid, tgrid, "a1")
        b0n = None
        if b0 is not None:
            comps = [_normalize_coeff(b0[i], grid, tgrid, f"b0[{i}]") for i in range(dim)]
            if any(c is not None for c in comps):
                b0n = tuple(comps)
        dn = None
        if d is not None:
            rows = []
            nonzero = False
            for i in range(dim):
                row = []
                for j in range(dim):
                    c = _normalize_coeff(d[i][j], grid, tgrid, f"d[{i}][{j}]")
                    nonzero = nonzero or c is not None
                    row.append(c)
                rows.append(tuple(row))
            if nonzero:
                dn = tuple(rows)
        gn = _normalize_source(g, grid, tgrid, "g")
        g0n = _normalize_source(g0, grid, tgrid, "g0")
        gdivn = None
        if gdiv is not None:
            comps = [_normalize_source(gdiv[i], grid, tgrid, f"gdiv[{i}]") for i in range(dim)]
            if any(c is not None for c in comps):
                gdivn = tuple(comps)
        if gn is not None and (g0n is not None or gdivn is not None):
            raise ShapeMismatchError("plain source g and divergence-form parts are mutually exclusive")
        cm = None if control_mask is None else np.asarray(control_mask, dtype=float)
        im = None if inner_mask is None else np.asarray(inner_mask, dtype=float)
        for m, nm in ((cm, "control_mask"), (im, "inner_mask")):
            if m is not None and m.shape != grid.shape:
                raise ShapeMismatchError(f"{nm} shape {m.shape} does not match grid {grid.shape}")
        return cls(grid, tgrid, a0n, b0n, dn, a1n, gn, g0n, gdivn, cm, im)

    @property
    def has_lower_order(self) -> bool:
        return any(x is not None for x in (self.a0, self.b0, self.d, self.a1))

    @property
    def has_da(self) -> bool:
        return self.d is not None or self.a1 is not None

    def sup_norms(self) -> dict:
        out = {}
        out["a0"] = 0.0 if self.a0 is None else float(np.max(np.abs(self.a0)))
        out["a1"] = 0.0 if self.a1 is None else float(np.max(np.abs(self.a1)))
        out["b0"] = 0.0 if self.b0 is None else max(
            (0.0 if c is None else float(np.max(np.abs(c)))) for c in self.b0
        )
        out["d"] = 0.0 if self.d is None else max(
            (0.0 if c is None else float(np.max(np.abs(c))))
            for row in self.d for c in row
        )
        return out

    def without_source(self) -> "CoefficientSet":
        return replace(self, g=None, g0=None, gdiv=None)

    def with_plain_source(self, g: Optional[np.ndarray]) -> "CoefficientSet":
        gn = _normalize_source(g, self.grid, self.tgrid, "g")
        return replace(self, g=gn, g0=None, gdiv=None)

    def source_slices(self) -> Optional[np.ndarray]:
        """Realized plain source on the midpoint grid, or None if zero.

        Divergence-form parts are realized as g0 + sum_i d1_i(g_i).
        """
        grid, nt = self.grid, self.tgrid.nt
        if self.g is not None:
            return _expand_time(self.g, nt, grid)
        if self.g0 is None and self.gdiv is None:
            return None
        total = np.zeros((nt,) + grid.shape)
        if self.g0 is not None:
            total += _expand_time(self.g0, nt, grid)
        if self.gdiv is not None:
            for ax, comp in enumerate(self.gdiv):
                if comp is not None:
                    total += grid.d1(_expand_time(comp, nt, grid), ax)
        return total


def _normalize_source(arr, grid, tgrid, name):
    if arr is None:
        return None
    a = np.asarray(arr, dtype=float)
    if a.ndim == 0:
        if float(a) == 0.0:
            return None
        a = np.full(grid.shape, float(a))
    if a.shape not in (grid.shape, (tgrid.nt,) + grid.shape):
        raise ShapeMismatchError(
            f"source {name} has shape {a.shape}; expected {grid.shape} "
            f"or {(tgrid.nt,) + grid.shape}"
        )
    if not np.all(np.isfinite(a)):
        raise ShapeMismatchError(f"source {name} contains non-finite values")
    if not np.any(a):
        return None
    return a


def _expand_time(arr: np.ndarray, nt: int, grid: SpatialGrid) -> np.ndarray:
    if arr.ndim == grid.dim:
        return np.broadcast_to(arr, (nt,) + grid.shape)
    return arr


def apply_lower_order(c: CoefficientSet, j: int, u: np.ndarray, parts: str = "all") -> np.ndarray:
    """E_j u: coefficient-weighted lower-order terms at midpoint j, dealiased.

    parts "all" applies a0 + b0.grad + d:hess + a1 lap; parts "da" restricts to
    the d and a1 groups. The 2/3 projection is applied once to the assembled
    sum, never to coefficients (constants are not in the sine span).
    """
    grid, dim = c.grid, c.grid.dim
    total = np.zeros_like(u)
    touched = False
    if parts == "all":
        a0j = _slice_at(c.a0, j, dim)
        if a0j is not None:
            total += a0j * u
            touched = True
        if c.b0 is not None:
            for ax, comp in enumerate(c.b0):
                cj = _slice_at(comp, j, dim)
                if cj is not None:
                    total += cj * grid.d1(u, ax)
                    touched = True
    elif parts != "da":
        raise ValueError(f"unknown parts selector {parts!r}")
    if c.d is not None:
        hess_cache = {}
        for i in range(dim):
            for k in range(dim):
                cj = _slice_at(c.d[i][k], j, dim)
                if cj is None:
                    continue
                if (i, k) not in hess_cache:
                    if i == k:
                        hess_cache[(i, k)] = grid.d2(u, i)
                    else:
                        hess_cache[(i, k)] = grid.d1(grid.d1(u, k), i)
                total += cj * hess_cache[(i, k)]
                touched = True
    a1j = _slice_at(c.a1, j, dim)
    if a1j is not None:
        total += a1j * grid.laplacian(u)
        touched = True
    if not touched:
        return total
    return grid.dealias(total)


def apply_lower_order_t(c: CoefficientSet, j: int, w: np.ndarray, parts: str = "all") -> np.ndarray:
    """Exact nodal transpose of apply_lower_order with the same slice and parts."""
    grid, dim = c.grid, c.grid.dim
    wf = grid.dealias(w)
    total = np.zeros_like(w)
    touched = False
    if parts == "all":
        a0j = _slice_at(c.a0, j, dim)
        if a0j is not None:
            total += a0j * wf
            touched = True
        if c.b0 is not None:
            for ax, comp in enumerate(c.b0):
                cj = _slice_at(comp, j, dim)
                if cj is not None:
                    total += grid.d1t(cj * wf, ax)
                    touched = True
    elif parts != "da":
        raise ValueError(f"unknown parts selector {parts!r}")
    if c.d is not None:
        for i in range(dim):
            for k in range(dim):
                cj = _slice_at(c.d[i][k], j, dim)
                if cj is None:
                    continue
                if i == k:
                    total += grid.d2(cj * wf, i)
                else:
                    # (d1_i d1_k)^T = d1t_k d1t_i
                    total += grid.d1t(grid.d1t(cj * wf, i), k)
                touched = True
    a1j = _slice_at(c.a1, j, dim)
    if a1j is not None:
        total += grid.laplacian(a1j * wf)
        touched = True
    if not touched:
        return np.zeros_like(w)
    return total


@dataclass
class SpaceTimeField:
    """Scalar field over the space-time grid.

    State and adjoint roles are node-aligned with nt+1 slices; control and
    source roles are midpoint-aligned with nt slices. Boundary values are
    structurally zero in the sine basis, which is what the Navier tag records.

    Solver-produced states carry heat_source, the effective sources f_j - E_j
    m_j of the equivalent pure-heat march. Adjoint solves also carry pairing,
    the midpoint sensitivity view s_j / tau_j that enters duality and Gramian
    identities exactly, and adj_source, the injected adjoint source.
    """

    values: np.ndarray
    grid: SpatialGrid
    tgrid: TimeGrid
    role: str = "state"
    bc: str = "navier"
    heat_source: Optional[np.ndarray] = None
    pairing: Optional[np.ndarray] = None
    adj_source: Optional[np.ndarray] = None

    def __post_init__(self):
        expected = {
            "state": self.tgrid.nt + 1,
            "adjoint": self.tgrid.nt + 1,
            "control": self.tgrid.nt,
            "source": self.tgrid.nt,
        }
        if self.role not in expected:
            raise ValueError(f"unknown role {self.role!r}")
        want = (expected[self.role],) + self.grid.shape
        if self.values.shape != want:
            raise ShapeMismatchError(
                f"{self.role} field of shape {self.values.shape}, expected {want}"
            )

    @property
    def node_aligned(self) -> bool:
        return self.values.shape[0] == self.tgrid.nt + 1

    def initial(self) -> np.ndarray:
        return self.values[0]

    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def midpoints(self) -> np.ndarray:
        """Averages onto midpoint times (node-aligned fields only)."""
        if not self.node_aligned:
            return self.values
        return 0.5 * (self.values[:-1] + self.values[1:])

    def stage_midpoints(self) -> np.ndarray:
        """The midpoint estimates the marcher itself uses (m_0 = y^0, then AB2)."""
        if not self.node_aligned:
            raise ShapeMismatchError("stage midpoints are defined for node-aligned fields")
        v = self.values
        m = np.empty((self.tgrid.nt,) + self.grid.shape)
        m[0] = v[0]
        if self.tgrid.nt > 1:
            m[1:] = 1.5 * v[1:-1] - 0.5 * v[:-2]
        return m

    def spacetime_norm(self) -> float:
        """Discrete L2(Q) norm: tau weights on midpoints, node trapezoid otherwise."""
        g = self.grid
        if self.node_aligned:
            w = np.full(self.tgrid.nt + 1, self.tgrid.dt)
            w[0] *= 0.5
            w[-1] *= 0.5
        else:
            w = self.tgrid.tau
        sq = np.sum(self.values.reshape(self.values.shape[0], -1) ** 2, axis=1)
        return float(np.sqrt(g.hvol * np.dot(w, sq)))


def _check_same_grids(a: SpaceTimeField, b: SpaceTimeField):
    if a.grid != b.grid or a.tgrid != b.tgrid:
        raise GridMismatchError("fields live on different grids")


def _march(grid: SpatialGrid, tgrid: TimeGrid, y0: np.ndarray,
           sources: Optional[np.ndarray], c: Optional[CoefficientSet],
           parts: str = "all") -> tuple[np.ndarray, np.ndarray]:
    """Run the exponential scheme; return (node trajectory, effective heat sources)."""
    nt, dt = tgrid.nt, tgrid.dt
    if y0.shape != grid.shape:
        raise ShapeMismatchError(f"initial datum shape {y0.shape}, expected {grid.shape}")
    Xd = np.exp(-grid.mu * dt)
    Pd = dt * _phi1(grid.mu * dt)
    lower = c is not None and (c.has_lower_order if parts == "all" else c.has_da)
    src_hat = None if sources is None else grid.to_modes(sources)

    values = np.empty((nt + 1,) + grid.shape)
    heat = np.zeros((nt,) + grid.shape)
    values[0] = y0
    yhat = grid.to_modes(np.asarray(y0, dtype=float))
    yhat_old = None
    for j in range(nt):
        if lower:
            mhat = yhat if j == 0 else 1.5 * yhat - 0.5 * yhat_old
            e = apply_lower_order(c, j, grid.from_modes(mhat), parts=parts)
            bracket = -grid.to_modes(e)
            if src_hat is not None:
                bracket += src_hat[j]
        else:
            bracket = src_hat[j] if src_hat is not None else None
        if bracket is None:
            yhat_new = Xd * yhat
        else:
            yhat_new = Xd * yhat + Pd * bracket
            heat[j] = grid.from_modes(bracket)
        slice_norm = np.linalg.norm(yhat_new)
        if not np.isfinite(slice_norm) or slice_norm > INSTABILITY_CEILING:
            raise InstabilityError(
                f"slice norm {slice_norm:.3e} at step {j + 1} (t={tgrid.times[j + 1]:.6g}) "
                f"exceeds {INSTABILITY_CEILING:.0e}"
            )
        values[j + 1] = grid.from_modes(yhat_new)
        yhat_old, yhat = yhat, yhat_new
    return values, heat


def solve_forward(y0: np.ndarray, v: Optional[np.ndarray], c: CoefficientSet,
                  grid: SpatialGrid, tgrid: TimeGrid) -> SpaceTimeField:
    """March the controlled system forward: sources chi_omega v + g at midpoints."""
    g_slices = c.source_slices()
    sources = None
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.shape != (tgrid.nt,) + grid.shape:
            raise ShapeMismatchError(
                f"control shape {v.shape}, expected {(tgrid.nt,) + grid.shape}"
            )
        if c.control_mask is None:
            raise ShapeMismatchError("a control was supplied but the coefficient set has no control mask")
        sources = c.control_mask * v
    if g_slices is not None:
        sources = g_slices if sources is None else sources + g_slices
    values, heat = _march(grid, tgrid, np.asarray(y0, dtype=float), sources, c, parts="all")
    return SpaceTimeField(values, grid, tgrid, role="state", heat_source=heat)


_ADJOINT_PARTS = {"free": None, "transposition": "da", "full": "all"}


def _reverse_sweep(grid: SpatialGrid, tgrid: TimeGrid, zT: np.ndarray,
                   c: Optional[CoefficientSet], parts: Optional[str],
                   source: Optional[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Exact transpose of the forward march.

    Returns (lambda trajectory on node times, sensitivity slices s_j = P lam^{j+1}).
    The recurrence, with nu_k = tau_k g_k - E_k^T P lam^{k+1}:

        lam^{nt} = zT
        lam^{j}  = X lam^{j+1} + c_j nu_j - (1/2) nu_{j+1},   c_j = 3/2 (j>=1), 1 (j=0)

    where the nu_{j+1} term is dropped at j = nt-1. Sources injected this way
    pair against the forward stage midpoints m_j, which is what makes the
    duality identity exact.
    """
    nt, dt = tgrid.nt, tgrid.dt
    if zT.shape != grid.shape:
        raise ShapeMismatchError(f"terminal datum shape {zT.shape}, expected {grid.shape}")
    Xd = np.exp(-grid.mu * dt)
    Pd = dt * _phi1(grid.mu * dt)
    tau = tgrid.tau
    lower = c is not None and parts is not None and (
        c.has_lower_order if parts == "all" else c.has_da
    )
    src_hat = None if source is None else grid.to_modes(np.asarray(source, dtype=float))

    lam = np.empty((nt + 1,) + grid.shape)
    sens = np.empty((nt,) + grid.shape)
    lam_hat = grid.to_modes(np.asarray(zT, dtype=float))
    lam[nt] = grid.from_modes(lam_hat)
    nu_next = None
    for j in range(nt - 1, -1, -1):
        sig_hat = Pd * lam_hat
        sens[j] = grid.from_modes(sig_hat)
        nu_j = None
        if src_hat is not None:
            nu_j = tau[j] * src_hat[j]
        if lower:
            et = apply_lower_order_t(c, j, grid.from_modes(sig_hat), parts=parts)
            et_hat = grid.to_modes(et)
            nu_j = -et_hat if nu_j is None else nu_j - et_hat
        new_hat = Xd * lam_hat
        if nu_j is not None:
            new_hat = new_hat + (1.5 if j >= 1 else 1.0) * nu_j
        if nu_next is not None:
            new_hat = new_hat - 0.5 * nu_next
        slice_norm = np.linalg.norm(new_hat)
        if not np.isfinite(slice_norm) or slice_norm > INSTABILITY_CEILING:
            raise InstabilityError(
                f"adjoint slice norm {slice_norm:.3e} at step {j} exceeds "
                f"{INSTABILITY_CEILING:.0e}"
            )
        lam[j] = grid.from_modes(new_hat)
        lam_hat = new_hat
        nu_next = nu_j if nu_j is not None else np.zeros_like(lam_hat)
    return lam, sens


def solve_adjoint(zT: np.ndarray, c: CoefficientSet, mode: str,
                  grid: SpatialGrid, tgrid: TimeGrid,
                  source: Optional[np.ndarray] = None) -> SpaceTimeField:
    """Backward solve from t = T as the exact transpose of the forward map.

    mode selects the lower-order content of the backward operator:
      free           no lower-order terms (pure backward heat)
      transposition  divergence-form d and a1 terms only
      full           transposes of all of a0, b0, d, a1

    source, if given, holds midpoint slices of the adjoint equation's right
    side. The returned field's values are the state view (lambda sequence);
    .pairing carries the midpoint view s_j / tau_j used by Gramian, duality
    and extremal-system identities.
    """
    if mode not in _ADJOINT_PARTS:
        raise ValueError(f"unknown adjoint mode {mode!r}")
    if source is not None:
        source = np.asarray(source, dtype=float)
        if source.shape != (tgrid.nt,) + grid.shape:
            raise ShapeMismatchError(
                f"adjoint source shape {source.shape}, expected {(tgrid.nt,) + grid.shape}"
            )
    parts = _ADJOINT_PARTS[mode]
    lam, sens = _reverse_sweep(grid, tgrid, np.asarray(zT, dtype=float), c, parts, source)
    pairing = sens / tgrid.tau.reshape((-1,) + (1,) * grid.dim)
    return SpaceTimeField(lam, grid, tgrid, role="adjoint",
                          pairing=pairing, adj_source=source)


def apply_forward_operator(y: np.ndarray, c: CoefficientSet, t: float) -> np.ndarray:
    """Spatial forward operator at midpoint time t: bilap y + E(t) y."""
    grid, tgrid = c.grid, c.tgrid
    y = np.asarray(y, dtype=float)
    if y.shape != grid.shape:
        raise ShapeMismatchError(f"slice shape {y.shape}, expected {grid.shape}")
    j = int(round(t / tgrid.dt - 0.5))
    if j < 0 or j >= tgrid.nt or abs(tgrid.midtimes[j] - t) > 1e-9 * max(tgrid.horizon, 1.0):
        raise ValueError(f"t={t} is not a midpoint sample of the time grid")
    out = grid.bilaplacian(y)
    if c.has_lower_order:
        out = out + apply_lower_order(c, j, y, parts="all")
    return out


def duality_check(w: SpaceTimeField, z: SpaceTimeField, c: CoefficientSet) -> float:
    """Residual of the transposition identity pairing w against z.

    With f the effective heat source of w (so Lw = f discretely for
    L = d/dt + bilap), g the adjoint source of z, z0 its terminal datum and
    m_j the stage midpoints of w:

        sum_j tau_j <p_j, f_j>  =  <z0, w(T)> + sum_j tau_j <g_j, m_j>
                                   - sum_j tau_j <p_j, (d:hess + a1 lap) m_j>

    where p is z's pairing view and the d/a1 term reuses the solver's own
    operator path. Exact to roundoff when z was solved in transposition mode
    on the same grids. Returns the absolute residual.
    """
    _check_same_grids(w, z)
    if c.grid != w.grid or c.tgrid != w.tgrid:
        raise GridMismatchError("coefficient set lives on a different grid")
    if not w.node_aligned or w.heat_source is None:
        raise ValueError("w must be a solver-produced node-aligned trajectory")
    if z.pairing is None:
        raise ValueError("z must be a solver-produced adjoint trajectory")
    if np.any(w.values[0]):
        raise ValueError("the transposition identity requires w(0) = 0")
    grid, tgrid = w.grid, w.tgrid
    tau, hvol = tgrid.tau, grid.hvol
    p = z.pairing
    m = w.stage_midpoints()

    def tsum(a: np.ndarray, b: np.ndarray) -> float:
        per_slice = np.sum(a.reshape(a.shape[0], -1) * b.reshape(b.shape[0], -1), axis=1)
        return hvol * float(np.dot(tau, per_slice))

    lhs = tsum(p, w.heat_source)
    boundary = hvol * float(np.sum(z.terminal() * w.terminal()))
    gterm = 0.0 if z.adj_source is None else tsum(z.adj_source, m)
    da_term = 0.0
    if c.has_da:
        em = np.empty_like(m)
        for j in range(tgrid.nt):
            em[j] = apply_lower_order(c, j, m[j], parts="da")
        da_term = tsum(p, em)
    return abs(lhs - boundary - gterm + da_term)
