"""Experiment runner: structured TOML configs in, CSV/JSON artifacts out.

Subcommands cover every pipeline (weights-audit, solve, carleman-audit, hum,
sweep, semilinear); `manifest` inspects a finished run directory. Exit codes:
0 success, 2 config parse failure, 3 config validation failure, 4 solver
failure with a diagnostic error.json in the run directory.

Serial runs are deterministic: the same config and seed reproduce every CSV
byte for byte. Parallel sweeps (--workers) farm out epsilon points to worker
processes and apply the canonical row order (descending epsilon) before the
single writer emits the table, so they match serial output row for row.
"""

from __future__ import annotations

import argparse
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                        # Python 3.10
    import tomli as tomllib

from . import __version__
from ._io import sha256_file, write_csv, write_field_csv, write_json, write_trajectory
from .carleman_audit import AuditProblem, constant_sweep, solve_dual_extremal
from .discretization import (
    CoefficientSet,
    SpatialGrid,
    TimeGrid,
    box_mask,
    sine_field,
    solve_adjoint,
    solve_forward,
)
from .errors import (
    BihumError,
    CgStagnationError,
    ConfigParseError,
    ConfigValidationError,
    ConstructionInfeasibleError,
    InvalidRegionError,
    MissingRunError,
    NoConvergenceError,
    SweepDivergenceError,
)
from .hum import (
    HumConfig,
    epsilon_sweep,
    hum_solve,
    sweep_report_from_results,
    validate_epsilon_ladder,
)
from .semilinear import fixed_point_solve, make_nonlinearity
from .weights import DomainSpec, build_eta, check_weight_properties, eval_weights, write_weights_csv

PROFILE_KINDS = ("const", "sinusoidal", "bump", "random_lowmode")


# ---------------------------------------------------------------------------
# config model

@dataclass(frozen=True)
class ProfileSpec:
    """Named analytic field profile with parameters."""

    kind: str
    params: dict

    def get(self, key, default=None):
        return self.params.get(key, default)


@dataclass(frozen=True)
class NonlinearityConfig:
    name: str
    params: dict
    tol: float = 1e-6
    max_iters: int = 25
    quad_nodes: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    """Normalized experiment description; round-trips through TOML exactly."""

    extents: tuple
    control_box: tuple
    inner_box: tuple
    shape: tuple
    nt: int
    horizon: float
    lambdas: tuple
    s0: tuple
    epsilons: tuple
    y0: ProfileSpec
    terminal: ProfileSpec
    adjoint_mode: str
    a0: Optional[ProfileSpec]
    b0: Optional[tuple]
    d: Optional[tuple]
    a1: Optional[ProfileSpec]
    g: Optional[ProfileSpec]
    nonlinearity: Optional[NonlinearityConfig]
    cg_tol: float
    cg_max_iters: int
    output_dir: str
    seed: int

    @property
    def dim(self) -> int:
        return len(self.extents)

    def s_values(self) -> list:
        scale = math.sqrt(self.horizon) + self.horizon
        return [s0 * scale for s0 in self.s0]


def default_config() -> ExperimentConfig:
    """The 1D default: unit interval, horizon 1, control on (0.3, 0.7)."""
    sinus = ProfileSpec("sinusoidal", {"amplitude": 1.0, "modes": (1,)})
    return ExperimentConfig(
        extents=(1.0,),
        control_box=((0.3, 0.7),),
        inner_box=((0.4, 0.6),),
        shape=(32,),
        nt=400,
        horizon=1.0,
        lambdas=(1.0, 2.0, 3.0),
        s0=(0.5, 1.0, 2.0),
        epsilons=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
        y0=sinus,
        terminal=sinus,
        adjoint_mode="free",
        a0=None, b0=None, d=None, a1=None, g=None,
        nonlinearity=None,
        cg_tol=1e-8,
        cg_max_iters=500,
        output_dir="runs",
        seed=1234,
    )


# ---------------------------------------------------------------------------
# parsing

def _normval(v, where: str):
    if isinstance(v, bool):
        raise ConfigValidationError(f"{where}: booleans are not valid values")
    if isinstance(v, (int, float, str)):
        return v
    if isinstance(v, list):
        return tuple(_normval(x, where) for x in v)
    raise ConfigValidationError(f"{where}: unsupported value {v!r}")


def _profile(entry, where: str) -> ProfileSpec:
    if isinstance(entry, bool):
        raise ConfigValidationError(f"{where}: expected a number or profile table")
    if isinstance(entry, (int, float)):
        return ProfileSpec("const", {"value": float(entry)})
    if isinstance(entry, dict):
        kind = entry.get("profile")
        if kind not in PROFILE_KINDS:
            raise ConfigValidationError(
                f"{where}: unknown profile {kind!r}; expected one of {PROFILE_KINDS}")
        params = {k: _normval(v, f"{where}.{k}") for k, v in entry.items()
                  if k != "profile"}
        return ProfileSpec(kind, params)
    raise ConfigValidationError(f"{where}: expected a number or profile table")


def _floats(seq, where: str) -> tuple:
    try:
        vals = tuple(float(x) for x in seq)
    except (TypeError, ValueError):
        raise ConfigValidationError(f"{where}: expected a list of numbers")
    if not vals:
        raise ConfigValidationError(f"{where}: must be nonempty")
    return vals


def _box(seq, dim: int, where: str) -> tuple:
    try:
        box = tuple((float(lo), float(hi)) for lo, hi in seq)
    except (TypeError, ValueError):
        raise ConfigValidationError(f"{where}: expected [[lo, hi], ...] per axis")
    if len(box) != dim:
        raise ConfigValidationError(f"{where}: needs one interval per axis")
    return box


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment config."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"config is not valid TOML: {exc}") from exc
    return config_from_mapping(data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_from_mapping(data: dict) -> ExperimentConfig:
    dom = data.get("domain", {})
    extents = _floats(dom.get("extents", ()), "domain.extents")
    dim = len(extents)
    control = _box(dom.get("control_box", ()), dim, "domain.control_box")
    inner = _box(dom.get("inner_box", ()), dim, "domain.inner_box")

    gridsec = data.get("grid", {})
    shape = tuple(int(n) for n in gridsec.get("shape", ()))
    if len(shape) != dim:
        raise ConfigValidationError("grid.shape needs one resolution per axis")
    if any(n < 8 for n in shape):
        raise ConfigValidationError("grid.shape: every resolution must be >= 8")
    nt = int(gridsec.get("nt", 0))
    if nt < 8:
        raise ConfigValidationError("grid.nt must be >= 8")

    horizon = float(data.get("time", {}).get("horizon", 0.0))
    if horizon <= 0.0:
        raise ConfigValidationError("time.horizon must be positive")

    wsec = data.get("weights", {})
    lambdas = _floats(wsec.get("lambdas", (1.0, 2.0, 3.0)), "weights.lambdas")
    s0 = _floats(wsec.get("s0", (1.0,)), "weights.s0")
    if any(v <= 0 for v in lambdas + s0):
        raise ConfigValidationError("weights.lambdas and weights.s0 must be positive")

    psec = data.get("penalty", {})
    if "epsilons" in psec:
        epsilons = _floats(psec["epsilons"], "penalty.epsilons")
    elif "epsilon" in psec:
        epsilons = (float(psec["epsilon"]),)
    else:
        epsilons = (1e-4,)
    if any(e <= 0 for e in epsilons):
        raise ConfigValidationError("penalty: epsilon values must be positive")

    y0 = _profile(data.get("initial", {}).get("y0",
                  {"profile": "sinusoidal", "amplitude": 1.0, "modes": [1]}),
                  "initial.y0")
    asec = data.get("adjoint", {})
    terminal = _profile(asec.get("terminal",
                        {"profile": "sinusoidal", "amplitude": 1.0, "modes": [1]}),
                        "adjoint.terminal")
    mode = asec.get("mode", "free")
    if mode not in ("free", "transposition", "full"):
        raise ConfigValidationError(
            "adjoint.mode must be free, transposition or full")

    csec = data.get("coefficients", {})
    a0 = _profile(csec["a0"], "coefficients.a0") if "a0" in csec else None
    a1 = _profile(csec["a1"], "coefficients.a1") if "a1" in csec else None
    g = _profile(csec["g"], "coefficients.g") if "g" in csec else None
    b0 = None
    if "b0" in csec:
        ent = csec["b0"]
        if not isinstance(ent, list) or len(ent) != dim:
            raise ConfigValidationError("coefficients.b0 needs one entry per axis")
        b0 = tuple(_profile(e, f"coefficients.b0[{i}]") for i, e in enumerate(ent))
    d = None
    if "d" in csec:
        ent = csec["d"]
        if (not isinstance(ent, list) or len(ent) != dim
                or any(not isinstance(r, list) or len(r) != dim for r in ent)):
            raise ConfigValidationError("coefficients.d must be a dim x dim table")
        d = tuple(tuple(_profile(e, f"coefficients.d[{i}][{j}]")
                        for j, e in enumerate(row)) for i, row in enumerate(ent))

    nl = None
    if "nonlinearity" in data:
        nsec = dict(data["nonlinearity"])
        name = nsec.pop("name", None)
        if not isinstance(name, str):
            raise ConfigValidationError("nonlinearity.name is required")
        tol = float(nsec.pop("tol", 1e-6))
        max_iters = int(nsec.pop("max_iters", 25))
        quad_nodes = int(nsec.pop("quad_nodes", 8))
        if tol <= 0 or max_iters < 1 or quad_nodes < 2:
            raise ConfigValidationError("nonlinearity: bad tol/max_iters/quad_nodes")
        params = {k: _normval(v, f"nonlinearity.{k}") for k, v in nsec.items()}
        nl = NonlinearityConfig(name, params, tol, max_iters, quad_nodes)

    ssec = data.get("solver", {})
    cg_tol = float(ssec.get("cg_tol", 1e-8))
    cg_max_iters = int(ssec.get("cg_max_iters", 500))
    if not (0.0 < cg_tol < 1.0) or cg_max_iters < 1:
        raise ConfigValidationError("solver: cg_tol in (0,1) and cg_max_iters >= 1")

    rsec = data.get("run", {})
    output_dir = str(rsec.get("output_dir", "runs"))
    seed = int(rsec.get("seed", 0))

    cfg = ExperimentConfig(
        extents=extents, control_box=control, inner_box=inner, shape=shape,
        nt=nt, horizon=horizon, lambdas=lambdas, s0=s0, epsilons=epsilons,
        y0=y0, terminal=terminal, adjoint_mode=mode,
        a0=a0, b0=b0, d=d, a1=a1, g=g, nonlinearity=nl,
        cg_tol=cg_tol, cg_max_iters=cg_max_iters,
        output_dir=output_dir, seed=seed,
    )
    # region invariants checked by the domain type itself
    DomainSpec(cfg.extents, cfg.control_box, cfg.inner_box)
    return cfg


# ---------------------------------------------------------------------------
# serialization (schema-specific emitter; stdlib has no TOML writer)

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        r = repr(v)
        return r if ("." in r or "e" in r or "E" in r or "n" in r) else r + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _toml_profile(p: ProfileSpec) -> str:
    parts = [f'profile = "{p.kind}"']
    for k in sorted(p.params):
        parts.append(f"{k} = {_toml_value(p.params[k])}")
    return "{" + ", ".join(parts) + "}"


def serialize_config(cfg: ExperimentConfig) -> str:
    """Emit the config as TOML; parse_config inverts this exactly."""
    lines = []

    def sec(name):
        if lines:
            lines.append("")
        lines.append(f"[{name}]")

    sec("domain")
    lines.append(f"extents = {_toml_value(cfg.extents)}")
    lines.append(f"control_box = {_toml_value([list(b) for b in cfg.control_box])}")
    lines.append(f"inner_box = {_toml_value([list(b) for b in cfg.inner_box])}")
    sec("grid")
    lines.append(f"shape = {_toml_value(cfg.shape)}")
    lines.append(f"nt = {cfg.nt}")
    sec("time")
    lines.append(f"horizon = {_toml_value(cfg.horizon)}")
    sec("weights")
    lines.append(f"lambdas = {_toml_value(cfg.lambdas)}")
    lines.append(f"s0 = {_toml_value(cfg.s0)}")
    sec("penalty")
    lines.append(f"epsilons = {_toml_value(cfg.epsilons)}")
    sec("initial")
    lines.append(f"y0 = {_toml_profile(cfg.y0)}")
    sec("adjoint")
    lines.append(f'mode = "{cfg.adjoint_mode}"')
    lines.append(f"terminal = {_toml_profile(cfg.terminal)}")
    named = [(n, getattr(cfg, n)) for n in ("a0", "a1", "g")]
    if any(v is not None for _, v in named) or cfg.b0 is not None or cfg.d is not None:
        sec("coefficients")
        for n, v in named:
            if v is not None:
                lines.append(f"{n} = {_toml_profile(v)}")
        if cfg.b0 is not None:
            inner = ", ".join(_toml_profile(p) for p in cfg.b0)
            lines.append(f"b0 = [{inner}]")
        if cfg.d is not None:
            rows = ", ".join(
                "[" + ", ".join(_toml_profile(p) for p in row) + "]"
                for row in cfg.d)
            lines.append(f"d = [{rows}]")
    if cfg.nonlinearity is not None:
        nl = cfg.nonlinearity
        sec("nonlinearity")
        lines.append(f'name = "{nl.name}"')
        lines.append(f"tol = {_toml_value(nl.tol)}")
        lines.append(f"max_iters = {nl.max_iters}")
        lines.append(f"quad_nodes = {nl.quad_nodes}")
        for k in sorted(nl.params):
            lines.append(f"{k} = {_toml_value(nl.params[k])}")
    sec("solver")
    lines.append(f"cg_tol = {_toml_value(cfg.cg_tol)}")
    lines.append(f"cg_max_iters = {cfg.cg_max_iters}")
    sec("run")
    lines.append(f'output_dir = {_toml_value(cfg.output_dir)}')
    lines.append(f"seed = {cfg.seed}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# profile realization

def realize_profile(p: ProfileSpec, grid: SpatialGrid,
                    rng: np.random.Generator) -> np.ndarray:
    """Evaluate a named profile on the interior nodes."""
    if p.kind == "const":
        return np.full(grid.shape, float(p.get("value", 0.0)))
    if p.kind == "sinusoidal":
        modes = p.get("modes", (1,) * grid.dim)
        amp = float(p.get("amplitude", 1.0))
        return sine_field(grid, [int(m) for m in modes], amp)
    if p.kind == "bump":
        amp = float(p.get("amplitude", 1.0))
        center = p.get("center", tuple(e / 2.0 for e in grid.extents))
        width = p.get("width", min(grid.extents) / 4.0)
        widths = width if isinstance(width, tuple) else (width,) * grid.dim
        out = np.full(grid.shape, amp)
        mesh = grid.meshes()
        for ax in range(grid.dim):
            u = (mesh[ax] - float(center[ax])) / float(widths[ax])
            inside = np.abs(u) < 1.0
            fac = np.zeros(grid.shape)
            # exp(1 - 1/(1-u^2)) on |u|<1, extended by zero
            fac[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
            out = out * fac
        return out
    if p.kind == "random_lowmode":
        amp = float(p.get("amplitude", 1.0))
        kmax = int(p.get("kmax", 4))
        modal = np.zeros(grid.shape)
        sl = tuple(slice(0, min(kmax, n)) for n in grid.shape)
        draw = rng.standard_normal([min(kmax, n) for n in grid.shape])
        # 1/k^2 falloff keeps the sample smooth at any resolution
        for idx in np.ndindex(draw.shape):
            draw[idx] /= float(np.prod([(i + 1) ** 2 for i in idx]))
        modal[sl] = amp * draw
        return grid.from_modes(modal)
    raise ConfigValidationError(f"unknown profile kind {p.kind!r}")


@dataclass
class RuntimeSetup:
    """Everything a subcommand needs, realized from a config."""

    cfg: ExperimentConfig
    spec: DomainSpec
    grid: SpatialGrid
    tgrid: TimeGrid
    eta: object
    control_mask: np.ndarray
    inner_mask: np.ndarray
    coeffs: CoefficientSet          # includes the plain source when configured
    y0: np.ndarray
    zT: np.ndarray
    g_field: Optional[np.ndarray]
    rng: np.random.Generator


def build_runtime(cfg: ExperimentConfig) -> RuntimeSetup:
    spec = DomainSpec(cfg.extents, cfg.control_box, cfg.inner_box)
    grid = SpatialGrid(cfg.extents, cfg.shape)
    tgrid = TimeGrid(cfg.horizon, cfg.nt)
    eta = build_eta(spec, grid)
    control_mask = box_mask(grid, cfg.control_box)
    inner_mask = box_mask(grid, cfg.inner_box)
    rng = np.random.default_rng(cfg.seed)
    # fixed realization order keeps seeded draws reproducible
    y0 = realize_profile(cfg.y0, grid, rng)
    zT = realize_profile(cfg.terminal, grid, rng)
    a0 = None if cfg.a0 is None else realize_profile(cfg.a0, grid, rng)
    b0 = None if cfg.b0 is None else [realize_profile(p, grid, rng) for p in cfg.b0]
    d = None if cfg.d is None else [[realize_profile(p, grid, rng) for p in row]
                                    for row in cfg.d]
    a1 = None if cfg.a1 is None else realize_profile(cfg.a1, grid, rng)
    g_field = None if cfg.g is None else realize_profile(cfg.g, grid, rng)
    coeffs = CoefficientSet.build(
        grid, tgrid, a0=a0, b0=b0, d=d, a1=a1, g=g_field,
        control_mask=control_mask, inner_mask=inner_mask)
    return RuntimeSetup(cfg, spec, grid, tgrid, eta, control_mask, inner_mask,
                        coeffs, y0, zT, g_field, rng)


# ---------------------------------------------------------------------------
# subcommands

def _weights_bundle(setup: RuntimeSetup):
    cfg = setup.cfg
    return eval_weights(setup.eta, cfg.s_values()[0], cfg.lambdas[0], setup.tgrid)


def cmd_weights_audit(setup: RuntimeSetup, outdir: Path) -> list:
    cfg = setup.cfg
    artifacts = []
    reports = []
    s = cfg.s_values()[0]
    for i, lam in enumerate(cfg.lambdas):
        bundle = eval_weights(setup.eta, s, lam, setup.tgrid)
        name = f"weights-{i}.csv"
        write_weights_csv(bundle, outdir / name)
        artifacts.append(name)
        rep = check_weight_properties(bundle, setup.eta)
        entry = rep.to_dict()
        entry["s"] = s
        entry["eta_sup"] = setup.eta.sup_norm
        reports.append(entry)
    write_json(outdir / "weight_properties.json",
               {"reports": reports, "all_ok": all(r["all_ok"] for r in reports)})
    artifacts.append("weight_properties.json")
    return artifacts


def cmd_solve(setup: RuntimeSetup, outdir: Path) -> list:
    cfg, grid, tgrid = setup.cfg, setup.grid, setup.tgrid
    artifacts = []
    y = solve_forward(setup.y0, None, setup.coeffs, grid, tgrid)
    z = solve_adjoint(setup.zT, setup.coeffs.without_source(), cfg.adjoint_mode,
                      grid, tgrid)
    for name, fld in (("state", y), ("adjoint", z)):
        write_trajectory(outdir / f"{name}.traj", fld.values, tgrid.nt, tgrid.horizon)
        artifacts.append(f"{name}.traj")
        if grid.dim == 1:
            write_field_csv(outdir / f"{name}.csv", fld.values, grid.axes,
                            tgrid.times, name)
            artifacts.append(f"{name}.csv")
    hvol = grid.hvol
    write_json(outdir / "solve_summary.json", {
        "adjoint_mode": cfg.adjoint_mode,
        "state_terminal_norm": float(np.sqrt(hvol * np.sum(y.terminal() ** 2))),
        "state_initial_norm": float(np.sqrt(hvol * np.sum(y.initial() ** 2))),
        "adjoint_initial_norm": float(np.sqrt(hvol * np.sum(z.initial() ** 2))),
        "nt": tgrid.nt,
        "dt": tgrid.dt,
    })
    artifacts.append("solve_summary.json")
    return artifacts


def cmd_carleman_audit(setup: RuntimeSetup, outdir: Path) -> list:
    cfg, grid, tgrid = setup.cfg, setup.grid, setup.tgrid
    artifacts = []
    s_list = cfg.s_values()
    lam_list = list(cfg.lambdas)

    plain = AuditProblem("plain", grid, tgrid, setup.eta, setup.zT,
                         g=setup.g_field)
    table_p = constant_sweep(plain, s_list, lam_list)
    table_p.to_csv(outdir / "carleman_plain.csv")
    artifacts.append("carleman_plain.csv")

    div = AuditProblem("divergence", grid, tgrid, setup.eta, setup.zT,
                       g0=setup.g_field, g_vec=None,
                       d=setup.coeffs.d, a1=setup.coeffs.a1)
    table_d = constant_sweep(div, s_list, lam_list)
    table_d.to_csv(outdir / "carleman_divergence.csv")
    artifacts.append("carleman_divergence.csv")

    # extremal solves reuse the free adjoint flow of the configured datum
    z = solve_adjoint(setup.zT, setup.coeffs.without_source(), "free", grid, tgrid)
    rows = []
    for lam in lam_list:
        for s in s_list:
            try:
                res = solve_dual_extremal(z, s, lam, grid, tgrid, setup.eta,
                                          method="cg", tol=cfg.cg_tol,
                                          max_iters=cfg.cg_max_iters)
                rows.append([s, lam, res.j_value, res.quotient,
                             res.stationarity_residual, res.cg_iterations, "ok"])
            except CgStagnationError:
                # the point stays in the table; weight grading can exhaust
                # float64 at large s without invalidating the rest of the sweep
                nan = float("nan")
                rows.append([s, lam, nan, nan, nan, -1, "stalled"])
    write_csv(outdir / "dual_extremal.csv",
              ["s", "lambda", "j_value", "quotient", "stationarity_residual",
               "cg_iters", "flag"], rows)
    artifacts.append("dual_extremal.csv")
    write_json(outdir / "carleman_summary.json", {
        "plain": table_p.summary(),
        "divergence": table_d.summary(),
        "dual_quotients": [r[3] for r in rows if r[6] == "ok"],
    })
    artifacts.append("carleman_summary.json")
    return artifacts


def _hum_config(setup: RuntimeSetup, epsilon: float) -> HumConfig:
    cfg = setup.cfg
    return HumConfig(setup.grid, setup.tgrid, setup.coeffs, epsilon=epsilon,
                     cg_tol=cfg.cg_tol, cg_max_iters=cfg.cg_max_iters,
                     weights=_weights_bundle(setup))


def cmd_hum(setup: RuntimeSetup, outdir: Path) -> list:
    cfg, grid, tgrid = setup.cfg, setup.grid, setup.tgrid
    artifacts = []
    res = hum_solve(setup.y0, None, _hum_config(setup, cfg.epsilons[0]))
    for name, fld in (("state", res.state), ("control", res.control)):
        write_trajectory(outdir / f"{name}.traj", fld.values, tgrid.nt,
                         tgrid.horizon)
        artifacts.append(f"{name}.traj")
        if grid.dim == 1:
            times = tgrid.times if name == "state" else tgrid.midtimes
            write_field_csv(outdir / f"{name}.csv", fld.values, grid.axes,
                            times, name)
            artifacts.append(f"{name}.csv")
    write_json(outdir / "hum_summary.json", {
        "epsilon": res.epsilon,
        "terminal_norm": res.terminal_norm,
        "control_norm": res.control_norm,
        "cost": res.cost,
        "cg_iterations": res.cg_iterations,
        "bound_quotient": res.bound_quotient,
        "initial_norm": res.initial_norm,
        "weighted_source_norm": res.weighted_source_norm,
    })
    artifacts.append("hum_summary.json")
    return artifacts


def _sweep_point(payload) -> tuple:
    """Worker entry: one penalized solve at one epsilon."""
    text, eps = payload
    setup = build_runtime(parse_config(text))
    res = hum_solve(setup.y0, None, _hum_config(setup, eps))
    return (eps, res)


def cmd_sweep(setup: RuntimeSetup, outdir: Path, workers: int = 1) -> list:
    cfg = setup.cfg
    try:
        eps = validate_epsilon_ladder(cfg.epsilons)
    except ValueError as exc:
        raise ConfigValidationError(str(exc)) from exc
    hcfg = _hum_config(setup, eps[0])
    if workers <= 1:
        report = epsilon_sweep(setup.y0, None, hcfg, eps)
    else:
        text = serialize_config(cfg)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(_sweep_point, [(text, e) for e in eps]))
        # canonical order: descending epsilon, regardless of completion order
        pairs.sort(key=lambda p: -p[0])
        report = sweep_report_from_results([p[0] for p in pairs],
                                           [p[1] for p in pairs])
    report.to_csv(outdir / "sweep.csv")
    write_json(outdir / "sweep_summary.json", report.summary())
    return ["sweep.csv", "sweep_summary.json"]


def cmd_semilinear(setup: RuntimeSetup, outdir: Path) -> list:
    cfg, grid, tgrid = setup.cfg, setup.grid, setup.tgrid
    if cfg.nonlinearity is None:
        raise ConfigValidationError(
            "semilinear subcommand requires a [nonlinearity] section")
    nl = cfg.nonlinearity
    try:
        F = make_nonlinearity(nl.name, **nl.params)
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(f"nonlinearity: {exc}") from exc
    base = _hum_config(setup, cfg.epsilons[-1])
    base = base.with_coefficients(setup.coeffs.without_source())
    res, trace = fixed_point_solve(setup.y0, setup.g_field, F, base,
                                   tol=nl.tol, max_iters=nl.max_iters,
                                   quad_nodes=nl.quad_nodes)
    artifacts = []
    trace.to_csv(outdir / "trace.csv")
    artifacts.append("trace.csv")
    for name, fld in (("state", res.state), ("control", res.control)):
        write_trajectory(outdir / f"{name}.traj", fld.values,
                         tgrid.nt, tgrid.horizon)
        artifacts.append(f"{name}.traj")
    summary = trace.summary()
    summary.update({
        "nonlinearity": nl.name,
        "epsilon": res.epsilon,
        "terminal_norm": res.terminal_norm,
        "control_norm": res.control_norm,
    })
    write_json(outdir / "semilinear_summary.json", summary)
    artifacts.append("semilinear_summary.json")
    return artifacts


# ---------------------------------------------------------------------------
# driver

SUBCOMMANDS = ("weights-audit", "solve", "carleman-audit", "hum", "sweep",
               "semilinear")


def run(subcommand: str, config_path, out_dir=None, workers: int = 1) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except ConfigParseError as exc:
        print(f"config parse error: {exc}", file=sys.stderr)
        return 2
    except (ConfigValidationError, InvalidRegionError) as exc:
        print(f"config validation error: {exc}", file=sys.stderr)
        return 3

    outdir = Path(out_dir if out_dir is not None else cfg.output_dir) / subcommand
    outdir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        setup = build_runtime(cfg)
        (outdir / "config.toml").write_text(serialize_config(cfg))
        if subcommand == "weights-audit":
            artifacts = cmd_weights_audit(setup, outdir)
        elif subcommand == "solve":
            artifacts = cmd_solve(setup, outdir)
        elif subcommand == "carleman-audit":
            artifacts = cmd_carleman_audit(setup, outdir)
        elif subcommand == "hum":
            artifacts = cmd_hum(setup, outdir)
        elif subcommand == "sweep":
            artifacts = cmd_sweep(setup, outdir, workers=workers)
        elif subcommand == "semilinear":
            artifacts = cmd_semilinear(setup, outdir)
        else:
            print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
            return 2
    except (ConfigValidationError, InvalidRegionError,
            ConstructionInfeasibleError) as exc:
        print(f"config validation error: {exc}", file=sys.stderr)
        return 3
    except BihumError as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, NoConvergenceError) and exc.trace is not None:
            diag["trace"] = exc.trace.summary()
        if isinstance(exc, SweepDivergenceError) and hasattr(exc, "report"):
            diag["sweep"] = exc.report.summary()
        write_json(outdir / "error.json", diag)
        print(f"solver error: {exc}", file=sys.stderr)
        return 4
    _write_manifest(outdir, subcommand, cfg, artifacts,
                    time.perf_counter() - started)
    return 0


def _write_manifest(outdir: Path, subcommand: str, cfg: ExperimentConfig,
                    artifacts: list, wall_time: float) -> None:
    import scipy

    write_json(outdir / "manifest.json", {
        "subcommand": subcommand,
        "config_sha256": sha256_file(outdir / "config.toml"),
        "seed": cfg.seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "bihum": __version__,
        },
        "wall_time_s": wall_time,
        "nt": cfg.nt,
        "dt": cfg.horizon / cfg.nt,
        "artifacts": artifacts,
    })


def read_manifest(run_dir) -> dict:
    """Load and verify a run directory's manifest.

    Raises a missing-run error when the manifest, the config copy or any
    listed artifact is absent.
    """
    rd = Path(run_dir)
    mpath = rd / "manifest.json"
    if not mpath.is_file():
        raise MissingRunError(f"{rd} has no manifest.json")
    import json

    manifest = json.loads(mpath.read_text())
    if not (rd / "config.toml").is_file():
        raise MissingRunError(f"{rd} has no config copy")
    arts = manifest.get("artifacts", [])
    if not arts:
        raise MissingRunError(f"{rd} lists no result artifacts")
    for name in arts:
        if not (rd / name).is_file():
            raise MissingRunError(f"{rd} is missing artifact {name}")
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bihum",
        description="null-control experiments for fourth-order parabolic problems")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a TOML experiment config")
        p.add_argument("--out-dir", default=None,
                       help="override the configured output directory")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=1,
                           help="parallel workers across sweep points")
    pm = sub.add_parser("manifest")
    pm.add_argument("run_dir", help="path to a finished run directory")
    args = parser.parse_args(argv)

    if args.subcommand == "manifest":
        try:
            manifest = read_manifest(args.run_dir)
        except MissingRunError as exc:
            print(f"missing run: {exc}", file=sys.stderr)
            return 4
        import json

        print(json.dumps(manifest, indent=2, sort_keys=True))
        return 0
    workers = getattr(args, "workers", 1)
    return run(args.subcommand, args.config, out_dir=args.out_dir,
               workers=workers)


if __name__ == "__main__":
    sys.exit(main())
