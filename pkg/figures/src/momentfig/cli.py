"""momentfig: render figures from momentprop result directories."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import MissingColumnError
from .render import FIGURE_IDS, FigureSpec, render

_SHORT = {"F1": "F1_demo", "F2": "F2_histograms", "F3": "F3_vanilla", "F4": "F4_bnff", "F5": "F5_bnres"}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="momentfig", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure from a result directory")
    p.add_argument("--figure", required=True, help="|".join(_SHORT) + " or full id")
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out", default=None, help="output image (default <in>/<figure>.png)")
    p.add_argument("--tau", type=float, default=None, help="power-law reference exponent for F5")
    args = parser.parse_args(argv)

    figure_id = _SHORT.get(args.figure, args.figure)
    if figure_id not in FIGURE_IDS:
        print(f"unknown figure {args.figure!r}; choose from {', '.join(_SHORT)}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(args.input_dir) / f"{figure_id}.png"
    try:
        path = render(FigureSpec(figure_id, Path(args.input_dir), out, tau=args.tau))
    except (MissingColumnError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
