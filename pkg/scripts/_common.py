"""Shared argument handling for the experiment scripts."""
import argparse
from dataclasses import replace

from gapgc.experiments import ExperimentConfig


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="flat JSON experiment config")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--workers", type=int, default=1)
    return p


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    return replace(config, seeds=seeds, out_dir=args.out, workers=args.workers)
