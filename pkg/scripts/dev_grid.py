"""Hyperparameter grid for GAPGC on development seeds (disjoint from the
acceptance seeds 0-4).  Prints the mean AUC change versus no adaptation,
in thousandths, for the full method and its ablations."""
import argparse
import itertools
from dataclasses import replace

import numpy as np

from gapgc.adapt import TTAConfig, adapt, evaluate
from gapgc.experiments import ExperimentConfig, prepare_seed

VARIANTS = {
    "both": {},
    "no_ala": {"use_ala": False},
    "no_gpps": {"use_gpps": False},
    "neither": {"use_ala": False, "use_gpps": False},
    "pf": {"method": "pf_gapgc"},
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", default="100,101,102,103,104")
    p.add_argument("--lr", default="1e-4,5e-4,1e-3")
    p.add_argument("--lam", default="1,10")
    p.add_argument("--batch-size", default="32,64,128")
    p.add_argument("--recalibrate-bn", action="store_true")
    args = p.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    config = ExperimentConfig(seeds=seeds)
    contexts = [prepare_seed(config, s) for s in seeds]
    baselines = [evaluate(c.bundle, c.test)[1] for c in contexts]
    grid = itertools.product(*(map(float, v.split(",")) for v in (args.lr, args.lam, args.batch_size)))
    for lr, lam, bs in grid:
        base = TTAConfig(lr=lr, lam=lam, batch_size=int(bs), recalibrate_bn=args.recalibrate_bn)
        cells = {}
        for name, kw in VARIANTS.items():
            deltas = [evaluate(adapt(c.bundle, c.test, replace(base, seed=c.seed, **kw))[0], c.test)[1] - b
                      for c, b in zip(contexts, baselines)]
            cells[name] = round(1000 * float(np.mean(deltas)), 2)
        print(f"lr={lr:g} lam={lam:g} batch={int(bs)}", cells, flush=True)


if __name__ == "__main__":
    main()
