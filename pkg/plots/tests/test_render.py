"""Rendering contracts: documented CSV schemas in, stable images out."""

import json

import matplotlib.pyplot as plt
import numpy as np
import pytest

from bihum_plots import (
    SCHEMAS,
    PlotJob,
    SchemaMismatchError,
    build_figure,
    read_table,
    render,
)
from bihum_plots.cli import main

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
FITTED = 0.51764931


@pytest.fixture(autouse=True)
def _close_figures():
    yield
    plt.close("all")


def _write_sweep(tmp_path, fitted=FITTED):
    eps = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]
    lines = ["epsilon,terminal_norm,control_norm,cost,cg_iters,bound_quotient"]
    for i, e in enumerate(eps):
        lines.append(f"{e!r},{e ** 0.5 * 1e-3!r},{0.01 * (1 + i)!r},"
                     f"{1.0!r},{5 + i},{2.0!r}")
    path = tmp_path / "sweep.csv"
    path.write_text("\n".join(lines) + "\n")
    (tmp_path / "sweep_summary.json").write_text(
        json.dumps({"fitted_exponent": fitted}))
    return path


def _write_ratios(tmp_path, drop_last=False):
    rows = []
    for lam in (1.0, 2.0, 3.0):
        for s in (2.0, 4.0, 8.0, 16.0):
            rows.append(f"{s!r},{lam!r},{1.0!r},{2.0!r},"
                        f"{0.01 * lam / s!r},ok")
    if drop_last:
        rows = rows[:-1]
    path = tmp_path / "carleman_plain.csv"
    path.write_text("s,lambda,lhs_z,rhs_obs,ratio,flag\n"
                    + "\n".join(rows) + "\n")
    return path


def _write_trace(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text(
        "iter,distance,terminal_norm,control_norm\n"
        "0,0.28,0.001,0.04\n"
        "1,2.7e-06,0.0008,0.041\n"
        "2,3.3e-11,0.0008,0.041\n")
    return path


def _write_weights(tmp_path, two_d=False):
    xs = np.linspace(1 / 9, 8 / 9, 8)
    ts = np.linspace(0.05, 0.95, 10)
    header = "x,y,t,alpha,xi,alpha_tilde,xi_tilde" if two_d else \
        "x,t,alpha,xi,alpha_tilde,xi_tilde"
    lines = [header]
    for t in ts:
        theta = 1.0 / np.sqrt(t * (1.0 - t))
        for x in xs:
            eta = x * (1.0 - x)
            alpha = (np.exp(2 + eta) - np.exp(4.0)) * theta
            xi = np.exp(2 + eta) * theta
            cells = [repr(float(x))]
            if two_d:
                cells.append(repr(0.5))
            cells += [repr(float(t)), repr(float(alpha)), repr(float(xi)),
                      repr(float(alpha)), repr(float(xi))]
            lines.append(",".join(cells))
    path = tmp_path / "weights-0.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


_FIXTURES = {
    "decay": _write_sweep,
    "ratio-heatmap": _write_ratios,
    "fixedpoint": _write_trace,
    "weights": _write_weights,
}


@pytest.mark.parametrize("kind", sorted(SCHEMAS))
def test_every_documented_schema_renders(kind, tmp_path):
    csv = _FIXTURES[kind](tmp_path)
    out = render(PlotJob(kind, csv, tmp_path / f"{kind}.png"))
    data = out.read_bytes()
    assert data[:8] == PNG_MAGIC
    assert len(data) > 1000


def test_decay_slope_annotation_matches_summary(tmp_path):
    csv = _write_sweep(tmp_path)
    fig = build_figure(PlotJob("decay", csv, tmp_path / "d.png"))
    ax = fig.axes[0]
    assert len(ax.lines) == 2                # terminal and control series
    notes = [t.get_text() for t in ax.texts if t.get_text().startswith("slope")]
    assert len(notes) == 1
    assert abs(float(notes[0].split()[1]) - round(FITTED, 3)) <= 1e-12


def test_decay_reads_explicit_summary_path(tmp_path):
    csv = _write_sweep(tmp_path)
    alt = tmp_path / "alt.json"
    alt.write_text(json.dumps({"fitted_exponent": 0.42006}))
    fig = build_figure(PlotJob("decay", csv, tmp_path / "d.png",
                               summary_path=alt))
    notes = [t.get_text() for t in fig.axes[0].texts
             if t.get_text().startswith("slope")]
    assert notes == ["slope 0.420"]


def test_decay_missing_summary_raises(tmp_path):
    csv = _write_sweep(tmp_path)
    (tmp_path / "sweep_summary.json").unlink()
    with pytest.raises(FileNotFoundError):
        build_figure(PlotJob("decay", csv, tmp_path / "d.png"))


def test_heatmap_cells_match_row_count(tmp_path):
    csv = _write_ratios(tmp_path)            # 3 lambdas x 4 s values
    fig = build_figure(PlotJob("ratio-heatmap", csv, tmp_path / "h.png"))
    img = fig.axes[0].images[0].get_array()
    assert img.shape == (3, 4)
    assert img.size == len(read_table(csv)["ratio"])


def test_heatmap_rejects_incomplete_grid(tmp_path):
    csv = _write_ratios(tmp_path, drop_last=True)
    with pytest.raises(SchemaMismatchError):
        build_figure(PlotJob("ratio-heatmap", csv, tmp_path / "h.png"))


@pytest.mark.parametrize("kind", sorted(SCHEMAS))
def test_empty_csv_is_a_schema_mismatch(kind, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert read_table(empty) == {}
    with pytest.raises(SchemaMismatchError) as exc:
        build_figure(PlotJob(kind, empty, tmp_path / "o.png"))
    assert exc.value.missing == SCHEMAS[kind]
    for col in SCHEMAS[kind]:
        assert col in str(exc.value)


def test_missing_columns_are_named(tmp_path):
    path = tmp_path / "partial.csv"
    path.write_text("epsilon,terminal_norm\n0.01,0.001\n")
    with pytest.raises(SchemaMismatchError) as exc:
        build_figure(PlotJob("decay", path, tmp_path / "o.png"))
    assert exc.value.missing == ("control_norm",)
    assert "control_norm" in str(exc.value)


def test_job_validation(tmp_path):
    with pytest.raises(FileNotFoundError):
        PlotJob("decay", tmp_path / "absent.csv", tmp_path / "o.png")
    csv = _write_trace(tmp_path)
    with pytest.raises(ValueError):
        PlotJob("histogram", csv, tmp_path / "o.png")


def test_weights_renders_two_profile_panels(tmp_path):
    csv = _write_weights(tmp_path)
    fig = build_figure(PlotJob("weights", csv, tmp_path / "w.png"))
    panels = fig.axes
    assert len(panels) == 2
    # five representative time slices per panel
    assert len(panels[0].lines) == 5
    assert len(panels[1].lines) == 5


def test_weights_rejects_2d_tables(tmp_path):
    csv = _write_weights(tmp_path, two_d=True)
    with pytest.raises(SchemaMismatchError):
        build_figure(PlotJob("weights", csv, tmp_path / "w.png"))


def test_rendering_is_byte_stable(tmp_path):
    csv = _write_sweep(tmp_path)
    a = render(PlotJob("decay", csv, tmp_path / "a.png"))
    b = render(PlotJob("decay", csv, tmp_path / "b.png"))
    assert a.read_bytes() == b.read_bytes()


def test_cli_end_to_end(tmp_path, capsys):
    csv = _write_sweep(tmp_path)
    assert main(["decay", str(csv)]) == 0
    assert (tmp_path / "sweep.png").read_bytes()[:8] == PNG_MAGIC
    out = tmp_path / "figs" / "ratios.png"
    ratios = _write_ratios(tmp_path)
    assert main(["ratio-heatmap", str(ratios), "-o", str(out)]) == 0
    assert out.is_file()

    assert main(["decay", str(tmp_path / "absent.csv")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("epsilon\n0.01\n")
    assert main(["decay", str(bad)]) == 3
    err = capsys.readouterr().err
    assert "missing columns" in err
