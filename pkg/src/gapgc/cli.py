"""Command-line entry point: ``gapgc <subcommand> [--config F] [--seed 0,1] [--out DIR] [--method M]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import experiments as ex
from .adapt import METHODS, adapt, evaluate
from .errors import GapgcError
from .graphs import write_dataset
from .models import ModelBundle

log = logging.getLogger("gapgc")


def _seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _methods(text: str) -> tuple:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return methods


def _fractions(text: str) -> tuple:
    return tuple(float(f) for f in text.split(","))


def build_config(args) -> ex.ExperimentConfig:
    config = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seeds"] = args.seed
    if args.method is not None:
        updates["methods"] = args.method
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.workers is not None:
        updates["workers"] = args.workers
    return replace(config, **updates) if updates else config


def _out(config) -> Path:
    path = Path(config.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_summary(summary: dict) -> None:
    for label, s in summary.items():
        print(f"{label:10s} mean AUC {100 * s.mean:6.2f}  +/- {100 * s.ci95:5.2f} (95% CI, n={s.n})")


def cmd_generate_data(config, args) -> int:
    out = _out(config)
    for seed in config.seeds:
        graphs, split = ex.load_or_generate(config, seed)
        path = out / f"motif_seed{seed}.jsonl"
        write_dataset(path, graphs, generator_seed=seed, shift_profile=asdict(config.profile))
        (out / f"motif_seed{seed}.split.json").write_text(json.dumps(asdict(split)), encoding="utf-8")
        print(f"{path}: {len(graphs)} graphs, split {len(split.train)}/{len(split.validation)}/{len(split.test)}")
    return 0


def cmd_train(config, args) -> int:
    out = _out(config)
    for seed in config.seeds:
        ctx = ex.prepare_seed(config, seed)
        path = out / f"model_seed{seed}.json"
        ctx.bundle.save(path)
        best = max((h.get("val_auc", float("nan")) for h in ctx.train_log), default=float("nan"))
        print(f"{path}: best validation AUC {best:.4f}, {ctx.train_ms / 1000:.1f}s")
    return 0


def cmd_adapt(config, args) -> int:
    out = _out(config)
    for seed in config.seeds:
        if args.checkpoint:
            graphs, split = ex.load_or_generate(config, seed)
            test = [graphs[i] for i in split.test]
            bundle = ModelBundle.load(args.checkpoint)
        else:
            ctx = ex.prepare_seed(config, seed)
            test, bundle = ctx.test, ctx.bundle
        for method in config.methods:
            adapted, report = adapt(bundle, test, replace(config.tta, method=method, seed=seed))
            _, mean = evaluate(adapted, test)
            stem = out / f"adapted_{method}_seed{seed}"
            adapted.save(stem.with_suffix(".json"))
            stem.with_suffix(".report.json").write_text(json.dumps(report.to_json()), encoding="utf-8")
            print(f"{stem}.json: test AUC {mean:.4f} after {len(report.records)} steps")
    return 0


def cmd_eval(config, args) -> int:
    rows = ex.run_experiment(config, _out(config) / "results.csv")
    _print_summary(ex.summarize(rows))
    return _failures(rows)


def cmd_ablate(config, args) -> int:
    rows, summary = ex.run_ablation(config, _out(config) / "ablation.csv")
    _print_summary(summary)
    return _failures(rows)


def cmd_sweep(config, args) -> int:
    out = _out(config)
    method = config.methods[-1]  # the adapted method; "none" rows are added anyway
    rows, table = ex.sweep_fraction(config, args.fractions, out / "sweep.csv", out / "sweep_plot.csv", method)
    for (label, f), s in sorted(table.items()):
        print(f"{label:10s} fraction {f:5.2f}  mean AUC {100 * s.mean:6.2f}")
    return _failures(rows)


def cmd_probe(config, args) -> int:
    rows, means = ex.false_pseudo_label_probe(config, _out(config) / "probe.csv", args.tent_lr, args.tent_batch_size)
    if means is None:
        print("probe skipped: no seed had a usable false-pseudo-label subset")
        return 0
    print(f"tent on all test graphs      mean AUC {100 * means['all']:6.2f}")
    print(f"tent on false-label subset   mean AUC {100 * means['false']:6.2f}  (n={means['n']} seeds)")
    return 0


def _failures(rows) -> int:
    failed = [r for r in rows if not r.ok and not r.status.startswith("skipped")]
    for r in failed:
        print(f"FAILED {r.method} seed {r.seed}: {r.status}", file=sys.stderr)
    return 1 if failed else 0


COMMANDS = {
    "generate-data": (cmd_generate_data, "write generated datasets as JSONL with metadata and split"),
    "train": (cmd_train, "train and checkpoint one model per seed"),
    "adapt": (cmd_adapt, "adapt trained models on the test split and save them"),
    "eval": (cmd_eval, "train, adapt and evaluate every method and seed; write results.csv"),
    "ablate": (cmd_ablate, "ALA / GPPS ablation matrix; write ablation.csv"),
    "sweep-fraction": (cmd_sweep, "adapt on growing fractions of the test split; write sweep.csv"),
    "probe-false-labels": (cmd_probe, "Tent on all test graphs vs. the false-pseudo-label subset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapgc", description="Graph test-time adaptation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat JSON experiment config")
        p.add_argument("--seed", type=_seeds, help="comma-separated seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--method", type=_methods, help=f"comma-separated, from {', '.join(METHODS)}")
        p.add_argument("--workers", type=int, help="process-pool size over seeds")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "adapt":
            p.add_argument("--checkpoint", help="model checkpoint to adapt instead of training one")
        if name == "sweep-fraction":
            p.add_argument("--fractions", type=_fractions, default=(0.25, 0.5, 0.75, 1.0))
        if name == "probe-false-labels":
            p.add_argument("--tent-lr", type=float, default=1e-3)
            p.add_argument("--tent-batch-size", type=int, default=32)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        return COMMANDS[args.command][0](config, args)
    except (GapgcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
