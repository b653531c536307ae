"""Command line front end: render figures from result CSV directories."""

from __future__ import annotations

import argparse
import sys

from .figures import RENDERERS, MissingInputError, render


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="moderr-plots",
        description="regenerate figures from experiment result CSVs")
    sub = parser.add_subparsers(dest="command", required=True)

    ren = sub.add_parser("render", help="render one or all figure ids")
    ren.add_argument("--results", required=True, help="results directory")
    ren.add_argument("--figure", default="all",
                     help="figure id (experiment id) or 'all'")
    ren.add_argument("--format", default="png", choices=("png", "svg"))
    ren.add_argument("--out", default=None, help="output directory")

    sub.add_parser("list", help="list figure ids")

    args = parser.parse_args(argv)
    if args.command == "list":
        for fig_id in RENDERERS:
            print(fig_id)
        return 0

    ids = list(RENDERERS) if args.figure == "all" else [args.figure]
    status = 0
    for fig_id in ids:
        try:
            path = render(args.results, fig_id, out_dir=args.out,
                          fmt=args.format)
            print(f"wrote {path}")
        except MissingInputError as exc:
            print(f"{fig_id}: {exc}", file=sys.stderr)
            status = 1
        except KeyError as exc:
            print(f"unknown figure id: {exc}", file=sys.stderr)
            return 2
    return status


if __name__ == "__main__":
    sys.exit(main())
