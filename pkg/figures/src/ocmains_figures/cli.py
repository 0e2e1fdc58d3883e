"""Command line: ``figures <kind> --in <csv...> --out <path>``."""

from __future__ import annotations

import argparse
import sys

from .plots import FigureError, FigureSpec, plot_rmse, plot_trajectory, plot_uncertainty

KINDS = {
    "uncertainty": plot_uncertainty,
    "rmse": plot_rmse,
    "trajectory": plot_trajectory,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="figures",
        description="Render consistency/accuracy figures from exported CSVs",
    )
    parser.add_argument("kind", choices=sorted(KINDS))
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="input CSV file(s); trajectory takes trace then field grid")
    parser.add_argument("--out", required=True, help="output image path")
    args = parser.parse_args(argv)

    try:
        spec = FigureSpec(kind=args.kind, inputs=args.inputs, output=args.out)
        outputs = KINDS[args.kind](spec)
    except FigureError as exc:
        print(f"figure error: {exc}", file=sys.stderr)
        return 2
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
