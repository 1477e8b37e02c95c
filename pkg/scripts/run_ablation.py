"""ALA / GPPS ablation matrix on shared per-seed checkpoints."""
from pathlib import Path

from gapgc.experiments import run_ablation

from _common import load_config, parser


def main():
    config = load_config(parser(__doc__).parse_args())
    _, summary = run_ablation(config, Path(config.out_dir) / "ablation.csv")
    base = summary["baseline"].mean
    for label, s in summary.items():
        print(f"{label:9s} {100 * s.mean:6.2f} +/- {100 * s.ci95:4.2f}  {100 * (s.mean - base):+6.2f}")


if __name__ == "__main__":
    main()
