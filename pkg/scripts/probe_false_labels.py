"""Tent adapted on all test graphs versus only the wrongly pseudo-labelled ones."""
from pathlib import Path

from gapgc.experiments import false_pseudo_label_probe

from _common import load_config, parser


def main():
    p = parser(__doc__)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    args = p.parse_args()
    config = load_config(args)
    rows, means = false_pseudo_label_probe(config, Path(config.out_dir) / "probe.csv", args.lr, args.batch_size)
    for r in rows:
        print(f"seed {r.seed}  {r.split:10s}  {r.status if not r.ok else f'{100 * r.mean_auc:.3f}'}")
    if means:
        print(f"mean over {means['n']} seeds: all {100 * means['all']:.3f}, false subset {100 * means['false']:.3f}")


if __name__ == "__main__":
    main()
