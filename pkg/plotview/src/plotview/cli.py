"""Command line wrapper: plot <kind> <csv...> --out FILE [--labels ...].

- error_vs_time plots the relerrB column of each file
- energy_error_vs_time_log derives |H(t) - H(0)| / |H(0)| from the H
  column of each file
- convergence_table averages relerrB per file and fits slopes against
  the numeric --labels spacings
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import KINDS, render
from .series import load_csv

# which schema column feeds each render kind
KIND_COLUMN = {
    "error_vs_time": "relerrB",
    "energy_error_vs_time_log": "H",
    "convergence_table": "relerrB",
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="plot",
        description="Render diagnostics CSVs to figures or convergence tables.",
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("csv", nargs="+", help="diagnostics CSV files")
    parser.add_argument("--out", required=True, help="output file (.png or .txt)")
    parser.add_argument(
        "--labels",
        nargs="*",
        default=None,
        help="one label per file; the convergence table reads them as spacings",
    )
    args = parser.parse_args(argv)
    try:
        collection = load_csv(
            args.csv, columns=(KIND_COLUMN[args.kind],), labels=args.labels
        )
        parent = Path(args.out).parent
        if parent and not parent.exists():
            parent.mkdir(parents=True, exist_ok=True)
        out = render(collection, args.kind, args.out)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
