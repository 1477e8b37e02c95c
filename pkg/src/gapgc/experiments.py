"""Experiment orchestration: seeded train/adapt/evaluate cells, the ablation
matrix, the test-fraction sweep and the false-pseudo-label probe.

Every cell writes rows of the schema ``method, seed, split, task_id, auc,
wall_ms, config_hash, status``; ``task_id`` is a task index or ``mean``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .adapt import METHODS, TrainConfig, TTAConfig, adapt, evaluate, offline_train, predict
from .errors import ConfigError, GapgcError
from .graphs import Graph, ShiftProfile, generate_motif_ood_dataset, load_jsonl, structural_cluster_split
from .models import GinConfig, ModelBundle

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "seed", "split", "task_id", "auc", "wall_ms", "config_hash", "status")

ABLATION_CELLS = {
    "baseline": None,
    "w/Both": (True, True),
    "w/o ALA": (False, True),
    "w/o GPPS": (True, False),
    "w/o Both": (False, False),
}

# flat config keys: prefix -> (field name on ExperimentConfig, dataclass)
_SECTIONS = {"profile_": ("profile", ShiftProfile), "model_": ("model", GinConfig),
             "train_": ("train", TrainConfig), "": ("tta", TTAConfig)}
_PER_SEED = {"seed", "method"}
_TOP_LEVEL = ("seeds", "methods", "n_graphs", "data_path", "out_dir", "workers")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: data source, model, offline training, adaptation and seeds.

    The defaults are the desk-scale benchmark: a 3-layer, 32-wide GIN trained
    for 3 epochs on 2000 generated graphs.
    """

    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = ("none", "gapgc")
    n_graphs: int = 2000
    data_path: str | None = None
    out_dir: str = "results"
    workers: int = 1
    profile: ShiftProfile = field(default_factory=ShiftProfile)
    model: GinConfig = field(default_factory=lambda: GinConfig(num_layers=3, hidden_dim=32))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3))
    tta: TTAConfig = field(default_factory=TTAConfig)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unsupported methods {bad or '[]'}; choose from {METHODS}")
        if self.data_path is None and self.n_graphs < 50:
            raise ConfigError("n_graphs must be >= 50")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.model.task_count != self.profile.task_count and self.data_path is None:
            raise ConfigError(f"model task_count {self.model.task_count} vs profile {self.profile.task_count}")
        self.profile.validate()

    # ---- flat JSON mapping

    def to_flat(self) -> dict:
        flat = {k: getattr(self, k) for k in _TOP_LEVEL}
        flat["seeds"], flat["methods"] = list(self.seeds), list(self.methods)
        for prefix, (attr, _) in _SECTIONS.items():
            for k, v in asdict(getattr(self, attr)).items():
                if k not in _PER_SEED:
                    flat[prefix + k] = list(v) if isinstance(v, tuple) else v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        flat = dict(flat)
        top = {k: flat.pop(k) for k in _TOP_LEVEL if k in flat}
        sections = {attr: {} for attr, _ in _SECTIONS.values()}
        for key, value in flat.items():
            for prefix, (attr, kind) in _SECTIONS.items():
                name = key[len(prefix):] if key.startswith(prefix) else None
                if name in {f.name for f in fields(kind)} and name not in _PER_SEED:
                    sections[attr][name] = value
                    break
            else:
                raise ConfigError(f"unknown config key {key!r}")
        defaults = cls()
        built = {}
        for prefix, (attr, kind) in _SECTIONS.items():
            values = sections[attr]
            if kind is ShiftProfile:
                built[attr] = ShiftProfile.from_dict({**asdict(defaults.profile), **values})
            else:
                built[attr] = replace(getattr(defaults, attr), **values)
        return cls(**top, **built)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            flat = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_flat(flat)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def config_hash(config: ExperimentConfig, **cell) -> str:
    """Digest of everything that determines a cell's numbers.

    The output directory and worker count do not change results and are
    left out; ``cell`` holds per-cell overrides such as method or fraction.
    """
    flat = config.to_flat()
    for k in ("out_dir", "workers", "seeds", "methods"):
        flat.pop(k)
    flat["cell"] = cell
    blob = json.dumps(flat, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- rows and CSV


@dataclass
class ResultRow:
    method: str
    seed: int | str
    split: str
    per_task: list
    mean_auc: float
    wall_ms: float
    config_hash: str
    status: str = "ok"

    def __post_init__(self):
        if self.status == "ok" and not 0.0 <= self.mean_auc <= 1.0:
            raise GapgcError(f"mean AUC {self.mean_auc} outside [0, 1]")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def csv_rows(self) -> list[dict]:
        base = {"method": self.method, "seed": self.seed, "split": self.split,
                "wall_ms": f"{self.wall_ms:.1f}", "config_hash": self.config_hash, "status": self.status}
        out = [{**base, "task_id": t, "auc": _fmt(a)} for t, a in enumerate(self.per_task)]
        out.append({**base, "task_id": "mean", "auc": _fmt(self.mean_auc)})
        return out


def _fmt(value: float) -> str:
    return "nan" if value is None or math.isnan(value) else repr(float(value))


class CsvWriter:
    """Append-only CSV; each row is one ``write`` followed by a flush.

    Only the process that owns the writer touches the file, so rows produced
    by pool workers are serialized through it.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._csv = csv.DictWriter(self._fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new:
            self._csv.writeheader()
            self._fh.flush()

    def write(self, row: ResultRow) -> None:
        for r in row.csv_rows():
            self._csv.writerow(r)
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise GapgcError(f"{path}: header {reader.fieldnames} does not match {CSV_COLUMNS}")
        return list(reader)


# ---------------------------------------------------------------- per-seed context


@dataclass
class SeedContext:
    seed: int
    graphs: list
    split: object
    bundle: ModelBundle
    train_log: list
    train_ms: float

    @property
    def test(self) -> list[Graph]:
        return [self.graphs[i] for i in self.split.test]


_CONTEXT_CACHE: dict = {}


def _data_key(config: ExperimentConfig, seed: int) -> str:
    flat = config.to_flat()
    keep = {k: v for k, v in flat.items() if k.startswith(("profile_", "model_", "train_"))}
    keep.update(n_graphs=config.n_graphs, data_path=config.data_path, seed=seed)
    return json.dumps(keep, sort_keys=True, default=str)


def load_or_generate(config: ExperimentConfig, seed: int):
    if config.data_path is not None:
        graphs = load_jsonl(config.data_path)
        return graphs, structural_cluster_split(graphs)
    return generate_motif_ood_dataset(seed, config.n_graphs, config.profile)


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedContext:
    """Data, split and the validation-selected trained model for ``seed``.

    Results are memoised per process on everything that determines them, so
    every cell of one seed shares the identical checkpoint.
    """
    key = _data_key(config, seed)
    if key not in _CONTEXT_CACHE:
        graphs, split = load_or_generate(config, seed)
        split.check(graphs)
        start = time.perf_counter()
        bundle = ModelBundle.init(config.model, seed)
        train = [graphs[i] for i in split.train]
        validation = [graphs[i] for i in split.validation]
        bundle, history = offline_train(bundle, train, replace(config.train, seed=seed), validation)
        _CONTEXT_CACHE[key] = SeedContext(seed, graphs, split, bundle, history,
                                          (time.perf_counter() - start) * 1000)
    return _CONTEXT_CACHE[key]


def clear_cache() -> None:
    _CONTEXT_CACHE.clear()


def run_cell(ctx: SeedContext, tta: TTAConfig, label: str, chash: str, split: str = "test",
             adapt_on: Sequence[Graph] | None = None) -> tuple[ResultRow, object]:
    """Adapt a clone of the seed's model and evaluate it on the full test split.

    Errors inside the cell become a failed row instead of propagating.
    """
    test = ctx.test
    start = time.perf_counter()
    try:
        adapted, report = adapt(ctx.bundle, test if adapt_on is None else adapt_on, replace(tta, seed=ctx.seed))
        per_task, mean = evaluate(adapted, test)
    except GapgcError as exc:
        log.warning("cell %s seed %d failed: %s", label, ctx.seed, exc)
        wall = (time.perf_counter() - start) * 1000
        return ResultRow(label, ctx.seed, split, [], float("nan"), wall, chash,
                         f"failed: {type(exc).__name__}: {exc}"), None
    wall = (time.perf_counter() - start) * 1000
    return ResultRow(label, ctx.seed, split, [float(a) for a in per_task], mean, wall, chash), report


# ---------------------------------------------------------------- drivers


def _map_seeds(config: ExperimentConfig, fn: Callable, *args) -> list:
    """``fn(config, seed, *args)`` for every seed, in seed order."""
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(fn, config, s, *args) for s in config.seeds]
            return [f.result() for f in futures]
    return [fn(config, s, *args) for s in config.seeds]


def _write(rows: list[ResultRow], path) -> None:
    if path is None:
        return
    with CsvWriter(path) as writer:
        for row in rows:
            writer.write(row)


def _experiment_seed(config: ExperimentConfig, seed: int) -> list[ResultRow]:
    try:
        ctx = prepare_seed(config, seed)
    except GapgcError as exc:
        return [ResultRow(m, seed, "test", [], float("nan"), 0.0, config_hash(config, method=m),
                          f"failed: {type(exc).__name__}: {exc}") for m in config.methods]
    rows = []
    for method in config.methods:
        tta = replace(config.tta, method=method)
        rows.append(run_cell(ctx, tta, method, config_hash(config, method=method))[0])
    return rows


def run_experiment(config: ExperimentConfig, csv_path=None) -> list[ResultRow]:
    """One row per (seed, method); ``none`` is the unadapted baseline."""
    rows = [r for seed_rows in _map_seeds(config, _experiment_seed) for r in seed_rows]
    _write(rows, csv_path)
    return rows


@dataclass
class Summary:
    label: str
    mean: float
    std: float
    ci95: float
    n: int


def summarize(rows: Sequence[ResultRow]) -> dict[str, Summary]:
    """Seed mean, sample std and 95% t-interval half-width per method label."""
    groups: dict[str, list[float]] = {}
    for r in rows:
        if r.ok and r.seed != "mean":
            groups.setdefault(r.method, []).append(r.mean_auc)
    out = {}
    for label, values in groups.items():
        v = np.asarray(values)
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        half = float(stats.t.ppf(0.975, len(v) - 1) * std / math.sqrt(len(v))) if len(v) > 1 else float("nan")
        out[label] = Summary(label, float(v.mean()), std, half, len(v))
    return out


def _ablation_seed(config: ExperimentConfig, seed: int) -> list[ResultRow]:
    ctx = prepare_seed(config, seed)
    rows = []
    for label, flags in ABLATION_CELLS.items():
        if flags is None:
            tta = replace(config.tta, method="none")
        else:
            tta = replace(config.tta, method="gapgc", use_ala=flags[0], use_gpps=flags[1])
        rows.append(run_cell(ctx, tta, label, config_hash(config, cell=label))[0])
    return rows


def run_ablation(config: ExperimentConfig, csv_path=None):
    """Baseline plus the four (ALA, GPPS) flag combinations on shared checkpoints.

    Returns ``(rows, summary)``; the CSV gets one extra row per cell with
    seed ``mean`` holding the average over seeds.
    """
    rows = [r for seed_rows in _map_seeds(config, _ablation_seed) for r in seed_rows]
    summary = summarize(rows)
    mean_rows = [ResultRow(label, "mean", "test", _mean_tasks(rows, label), s.mean, 0.0,
                           config_hash(config, cell=label)) for label, s in summary.items()]
    _write(rows + mean_rows, csv_path)
    return rows, summary


def _mean_tasks(rows, label) -> list:
    per = [r.per_task for r in rows if r.method == label and r.ok]
    return np.nanmean(np.asarray(per, dtype=float), axis=0).tolist() if per else []


def adaptation_subset(ctx: SeedContext, fraction: float) -> list[Graph]:
    """First ``ceil(fraction * n)`` test graphs of a fixed per-seed shuffle,
    returned in test-split order."""
    n = len(ctx.split.test)
    order = np.random.default_rng([ctx.seed, 0xF5]).permutation(n)
    keep = np.sort(order[:math.ceil(fraction * n)])
    test = ctx.test
    return [test[i] for i in keep]


def _sweep_seed(config: ExperimentConfig, seed: int, fractions: tuple, method: str) -> list[ResultRow]:
    ctx = prepare_seed(config, seed)
    rows = []
    for f in fractions:
        subset = adaptation_subset(ctx, f)
        for m in ("none", method):
            tta = replace(config.tta, method=m)
            row, _ = run_cell(ctx, tta, m, config_hash(config, method=m, fraction=f),
                              split=f"test@{f:g}", adapt_on=subset)
            rows.append(row)
    return rows


def validate_fractions(fractions) -> tuple:
    fractions = tuple(float(f) for f in fractions)
    if not fractions:
        raise ConfigError("no fractions given")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"fraction {f} outside (0, 1]")
    if list(fractions) != sorted(fractions):
        raise ConfigError(f"fractions must be ascending, got {fractions}")
    return fractions


def sweep_fraction(config: ExperimentConfig, fractions=(0.25, 0.5, 1.0), csv_path=None,
                   plot_path=None, method: str = "gapgc"):
    """Adapt on growing prefixes of the shuffled test split; always evaluate
    on all of it.  Each fraction also gets an unadapted row.

    Returns ``(rows, table)`` where ``table`` maps ``(method, fraction)`` to
    a :class:`Summary` over seeds.
    """
    fractions = validate_fractions(fractions)
    rows = [r for seed_rows in _map_seeds(config, _sweep_seed, fractions, method) for r in seed_rows]
    table = {}
    for f in fractions:
        part = [r for r in rows if r.split == f"test@{f:g}"]
        for label, s in summarize(part).items():
            table[(label, f)] = s
    _write(rows, csv_path)
    if plot_path is not None:
        Path(plot_path).parent.mkdir(parents=True, exist_ok=True)
        with open(plot_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "fraction", "mean_auc", "std", "ci95", "n_seeds"])
            for (label, f), s in sorted(table.items()):
                w.writerow([label, f, repr(s.mean), repr(s.std), repr(s.ci95), s.n])
    return rows, table


def false_label_subset(bundle: ModelBundle, graphs: Sequence[Graph]) -> list[Graph]:
    """Graphs whose thresholded prediction disagrees with a known label on any task.

    Labels only pick the subset; adaptation itself never reads them.
    """
    scores = predict(bundle, graphs)
    out = []
    for g, s in zip(graphs, scores):
        known = ~np.isnan(g.labels)
        if np.any((s[known] > 0.5).astype(float) != g.labels[known]):
            out.append(g)
    return out


def _num_batches(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return max(full + (rest >= 2), 1)


def _probe_seed(config: ExperimentConfig, seed: int, lr: float, batch_size: int) -> list[ResultRow]:
    ctx = prepare_seed(config, seed)
    tta = replace(config.tta, method="tent", lr=lr, batch_size=batch_size)
    chash = config_hash(config, method="tent", condition="all", lr=lr, batch_size=batch_size)
    rows = [run_cell(ctx, tta, "tent", chash, split="test:all")[0]]
    subset = false_label_subset(ctx.bundle, ctx.test)
    chash = config_hash(config, method="tent", condition="false", lr=lr, batch_size=batch_size)
    if len(subset) < 2:
        log.info("seed %d: false-pseudo-label subset has %d graphs, probe skipped", seed, len(subset))
        rows.append(ResultRow("tent", seed, "test:false", [], float("nan"), 0.0, chash,
                              f"skipped: false-pseudo-label subset has {len(subset)} graphs"))
        return rows
    # same number of Tent updates in both conditions: the subset is cycled
    steps = _num_batches(len(ctx.test), tta.batch_size) * tta.tta_epochs
    epochs = math.ceil(steps / _num_batches(len(subset), tta.batch_size))
    rows.append(run_cell(ctx, replace(tta, tta_epochs=epochs), "tent", chash, split="test:false", adapt_on=subset)[0])
    return rows


def false_pseudo_label_probe(config: ExperimentConfig, csv_path=None, lr: float = 1e-3, batch_size: int = 32):
    """Tent adapted on all test graphs versus only the wrongly pseudo-labelled
    ones, both evaluated on the full test split.

    Tent runs with its own ``lr`` and ``batch_size``.  The subset condition
    makes as many passes as needed to take the same number of Tent steps as
    the full condition.  Returns ``(rows, means)``
    with ``means`` over seeds where both conditions ran.
    """
    rows = [r for seed_rows in _map_seeds(config, _probe_seed, lr, batch_size) for r in seed_rows]
    _write(rows, csv_path)
    by_seed: dict = {}
    for r in rows:
        by_seed.setdefault(r.seed, {})[r.split] = r
    paired = [(d["test:all"].mean_auc, d["test:false"].mean_auc) for d in by_seed.values()
              if d["test:all"].ok and d["test:false"].ok]
    if not paired:
        return rows, None
    arr = np.asarray(paired)
    return rows, {"all": float(arr[:, 0].mean()), "false": float(arr[:, 1].mean()), "n": len(paired)}
