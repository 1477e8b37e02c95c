import json

import numpy as np
import pytest

from gapgc import experiments as ex
from gapgc.adapt import TrainConfig, TTAConfig
from gapgc.errors import ConfigError, GapgcError
from gapgc.experiments import CSV_COLUMNS, ExperimentConfig, ResultRow, config_hash
from gapgc.graphs import ShiftProfile
from gapgc.models import GinConfig


def tiny_config(**kw):
    base = dict(seeds=(0, 1), n_graphs=200, model=GinConfig(num_layers=2, hidden_dim=8),
                train=TrainConfig(epochs=2, batch_size=32), tta=TTAConfig(batch_size=32))
    return ExperimentConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def config():
    return tiny_config()


# ---------------------------------------------------------------- config


def test_flat_round_trip(tmp_path):
    config = tiny_config(profile=ShiftProfile(cycle_len_range_test=(5, 12)))
    path = tmp_path / "cfg.json"
    config.save(path)
    assert ExperimentConfig.load(path) == config
    flat = json.loads(path.read_text())
    assert flat["model_hidden_dim"] == 8 and flat["lam"] == 1.0 and "seed" not in flat


def test_unknown_keys_and_bad_values_rejected(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_flat({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_flat({"profile_colour": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=("none", "magic"))
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=(1, 1))
    path = tmp_path / "cfg.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)


def test_hash_ignores_bookkeeping_but_not_settings(config):
    h = config_hash(config, method="gapgc")
    assert h == config_hash(tiny_config(out_dir="elsewhere", workers=3, seeds=(7,)), method="gapgc")
    assert h != config_hash(config, method="tent")
    assert h != config_hash(tiny_config(tta=TTAConfig(batch_size=32, lam=2.0)), method="gapgc")
    assert len(h) == 16


# ---------------------------------------------------------------- rows and CSV


def test_csv_rows_and_header(tmp_path):
    path = tmp_path / "out.csv"
    row = ResultRow("gapgc", 0, "test", [0.9, float("nan")], 0.9, 12.34, "abc")
    with ex.CsvWriter(path) as w:
        w.write(row)
    with ex.CsvWriter(path) as w:  # appending does not repeat the header
        w.write(row)
    rows = ex.read_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert [r["task_id"] for r in rows] == ["0", "1", "mean"] * 2
    assert rows[1]["auc"] == "nan" and float(rows[2]["auc"]) == 0.9


def test_read_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(GapgcError):
        ex.read_csv(path)


def test_row_rejects_impossible_auc():
    with pytest.raises(GapgcError):
        ResultRow("x", 0, "test", [], 1.5, 0.0, "h")


def test_failed_cell_becomes_failed_row(config):
    ctx = ex.prepare_seed(config, 0)
    row, report = ex.run_cell(ctx, TTAConfig(method="tent"), "tent", "h", adapt_on=[])
    assert not row.ok and row.status.startswith("failed: ContractError")
    assert report is None


def test_summary_is_mean_and_t_interval():
    rows = [ResultRow("a", s, "test", [], v, 0.0, "h") for s, v in enumerate([0.8, 0.9, 1.0])]
    s = ex.summarize(rows)["a"]
    assert s.mean == pytest.approx(0.9)
    assert s.std == pytest.approx(0.1)
    assert s.ci95 == pytest.approx(4.302652729911275 * 0.1 / np.sqrt(3))


# ---------------------------------------------------------------- drivers


def test_seed_context_is_shared(config):
    assert ex.prepare_seed(config, 0) is ex.prepare_seed(tiny_config(out_dir="x"), 0)


def test_run_experiment_writes_one_row_per_method_and_seed(config, tmp_path):
    path = tmp_path / "results.csv"
    rows = ex.run_experiment(config, path)
    assert [(r.method, r.seed) for r in rows] == [("none", 0), ("gapgc", 0), ("none", 1), ("gapgc", 1)]
    assert all(r.ok for r in rows)
    assert len(ex.read_csv(path)) == 4 * 3


def test_ablation_means_match_rows(config, tmp_path):
    path = tmp_path / "ablation.csv"
    rows, summary = ex.run_ablation(config, path)
    assert set(summary) == set(ex.ABLATION_CELLS)
    for label, s in summary.items():
        values = [r.mean_auc for r in rows if r.method == label]
        assert s.mean == pytest.approx(sum(values) / len(values))
    baseline = [r for r in rows if r.method == "baseline"]
    plain = [r for r in ex.run_experiment(tiny_config(methods=("none",)))]
    assert [r.mean_auc for r in baseline] == [r.mean_auc for r in plain]
    mean_rows = [r for r in ex.read_csv(path) if r["seed"] == "mean" and r["task_id"] == "mean"]
    assert len(mean_rows) == len(ex.ABLATION_CELLS)


def test_sweep_full_fraction_equals_plain_run(config, tmp_path):
    rows, table = ex.sweep_fraction(config, (0.5, 1.0), tmp_path / "s.csv", tmp_path / "plot.csv")
    plain = {(r.method, r.seed): r.mean_auc for r in ex.run_experiment(config)}
    for r in rows:
        if r.split == "test@1":
            assert r.mean_auc == plain[(r.method, r.seed)]
    assert table[("none", 0.5)].mean == table[("none", 1.0)].mean
    plot = (tmp_path / "plot.csv").read_text().splitlines()
    assert plot[0] == "method,fraction,mean_auc,std,ci95,n_seeds" and len(plot) == 5


def test_adaptation_subset_is_nested_and_ordered(config):
    ctx = ex.prepare_seed(config, 1)
    small, large = ex.adaptation_subset(ctx, 0.25), ex.adaptation_subset(ctx, 0.75)
    ids = {id(g) for g in large}
    assert all(id(g) in ids for g in small)
    assert len(small) == int(np.ceil(0.25 * len(ctx.test)))
    order = [next(i for i, t in enumerate(ctx.test) if t is g) for g in large]
    assert order == sorted(order)


@pytest.mark.parametrize("fractions", [(), (0.0, 1.0), (1.0, 0.5), (0.5, 1.5)])
def test_bad_fractions(fractions):
    with pytest.raises(ConfigError):
        ex.validate_fractions(fractions)


def test_false_label_subset_disagrees_with_labels(config):
    ctx = ex.prepare_seed(config, 0)
    subset = ex.false_label_subset(ctx.bundle, ctx.test)
    scores = ex.predict(ctx.bundle, subset)
    for g, s in zip(subset, scores):
        assert np.any((s > 0.5) != (g.labels == 1))


def test_probe_rows_and_step_matching(config, tmp_path):
    rows, means = ex.false_pseudo_label_probe(config, tmp_path / "probe.csv")
    assert [r.split for r in rows] == ["test:all", "test:false"] * 2
    assert means is None or means["n"] <= 2
    assert ex._num_batches(65, 32) == 2 and ex._num_batches(66, 32) == 3 and ex._num_batches(1, 32) == 1


def test_parallel_workers_match_serial(config):
    serial = ex.run_experiment(tiny_config(methods=("none",)))
    parallel = ex.run_experiment(tiny_config(methods=("none",), workers=2))
    assert [r.mean_auc for r in serial] == [r.mean_auc for r in parallel]
