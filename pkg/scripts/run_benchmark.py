"""Adapt with every method on the motif benchmark and report mean test AUC per method."""
from dataclasses import replace
from pathlib import Path

from gapgc.adapt import METHODS
from gapgc.experiments import run_experiment, summarize

from _common import load_config, parser


def main():
    p = parser(__doc__)
    p.add_argument("--methods", default=",".join(METHODS))
    args = p.parse_args()
    config = replace(load_config(args), methods=tuple(args.methods.split(",")))
    rows = run_experiment(config, Path(config.out_dir) / "benchmark.csv")
    summary = summarize(rows)
    base = summary["none"].mean if "none" in summary else None
    for method in config.methods:
        s = summary.get(method)
        if s is None:
            print(f"{method:9s} failed on every seed")
            continue
        delta = "" if base is None else f"  {100 * (s.mean - base):+6.2f} vs none"
        print(f"{method:9s} {100 * s.mean:6.2f} +/- {100 * s.ci95:4.2f}{delta}")


if __name__ == "__main__":
    main()
