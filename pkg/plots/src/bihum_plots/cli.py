"""Command line entry: bihum-render <kind> <csv> [-o out.png]."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import SCHEMAS, PlotJob, SchemaMismatchError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bihum-render",
        description="render figures from the solver's CSV artifacts")
    parser.add_argument("kind", choices=sorted(SCHEMAS))
    parser.add_argument("csv", help="input CSV artifact")
    parser.add_argument("-o", "--out", default=None,
                        help="output image path (default: the CSV path with "
                             "a .png suffix)")
    parser.add_argument("--summary", default=None,
                        help="decay only: JSON summary holding the fitted "
                             "exponent (default: sweep_summary.json next to "
                             "the CSV)")
    parser.add_argument("--title", default=None, help="figure title override")
    args = parser.parse_args(argv)

    csv_path = Path(args.csv)
    out = Path(args.out) if args.out else csv_path.with_suffix(".png")
    try:
        job = PlotJob(args.kind, csv_path, out,
                      summary_path=args.summary, title=args.title)
        render(job)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except SchemaMismatchError as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return 3
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
