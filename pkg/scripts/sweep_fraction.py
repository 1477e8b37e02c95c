"""Adapt on growing fractions of the test split; evaluate on all of it."""
from pathlib import Path

from gapgc.experiments import sweep_fraction

from _common import load_config, parser


def main():
    p = parser(__doc__)
    p.add_argument("--fractions", default="0.1,0.25,0.5,0.75,1.0")
    p.add_argument("--method", default="gapgc")
    args = p.parse_args()
    config = load_config(args)
    out = Path(config.out_dir)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    _, table = sweep_fraction(config, fractions, out / "sweep.csv", out / "sweep_plot.csv", args.method)
    for (label, f), s in sorted(table.items()):
        print(f"{label:7s} {f:5.2f}  {100 * s.mean:6.3f} +/- {100 * s.ci95:5.3f}")


if __name__ == "__main__":
    main()
