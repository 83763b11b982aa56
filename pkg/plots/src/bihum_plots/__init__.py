"""Publication-style figures from the solver CLI's CSV artifacts."""

from .render import (
    SCHEMAS,
    STYLE,
    PlotJob,
    SchemaMismatchError,
    build_figure,
    read_table,
    render,
)

__version__ = "0.1.0"

__all__ = [
    "SCHEMAS",
    "STYLE",
    "PlotJob",
    "SchemaMismatchError",
    "build_figure",
    "read_table",
    "render",
    "__version__",
]
