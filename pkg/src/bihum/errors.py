"""Error types shared across the package.

Every failure mode that callers are expected to handle gets its own class so
the CLI can map them to exit codes (config parse -> 2, validation -> 3,
anything solver-side -> 4).
"""


class BihumError(Exception):
    """Base class for all package errors."""


class ConfigParseError(BihumError):
    """Config file could not be read or decoded."""


class ConfigValidationError(BihumError):
    """Config parsed but violates an invariant; message names the invariant."""


class InvalidRegionError(ConfigValidationError):
    """Region containment chain (inner subset of control subset of domain) fails."""


class ConstructionInfeasibleError(ConfigValidationError):
    """The separable eta construction cannot satisfy its critical-point requirement."""


class WeightOverflowError(BihumError):
    """A non-log-space weight evaluation would leave the floating range."""


class ShapeMismatchError(BihumError):
    """Field shapes inconsistent with the grid they claim to live on."""


class GridMismatchError(BihumError):
    """Two fields passed to one operation live on different grids."""


class InstabilityError(BihumError):
    """A time-slice norm exceeded 1e12 during a march (explicit-part blowup)."""


class CgStagnationError(BihumError):
    """CG hit its iteration cap above tolerance. Carries the best iterate."""

    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = history if history is not None else []


class DegenerateSolutionError(BihumError):
    """Audit subject is numerically zero; weighted ratios would be meaningless."""


class CoupledSolveDivergenceError(CgStagnationError):
    """The coupled extremal-system iteration stalled above tolerance."""


class UnresolvedIterateError(BihumError):
    """An iterate's Hessian contains non-finite values."""


class NoConvergenceError(BihumError):
    """Fixed-point loop exhausted max_iters. Carries the trace so far."""

    def __init__(self, message, trace=None, result=None):
        super().__init__(message)
        self.trace = trace
        self.result = result


class SweepDivergenceError(BihumError):
    """Control norms failed the boundedness check across an epsilon sweep."""


class MissingRunError(BihumError):
    """Run directory does not exist or lacks a manifest."""
