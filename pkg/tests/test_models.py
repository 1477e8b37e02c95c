import numpy as np
import pytest

from gapgc import autodiff as ad
from gapgc.autodiff import Tensor, backward, grad_check
from gapgc.errors import ConfigError, ContractError, StatisticsError, ValidationError
from gapgc.graphs import Graph, GraphBatch
from gapgc.models import GinConfig, ModelBundle, bn_param_names, masked_bce, pool


def weighted_sum(t, seed=0):
    r = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum_axis(ad.mul(t, r))


def test_config_validation():
    with pytest.raises(ConfigError):
        GinConfig(num_layers=0)
    with pytest.raises(ConfigError):
        GinConfig(dropout_rate=0.7)


def test_partitions(tiny_bundle):
    store = tiny_bundle.params
    assert all(n.startswith("enc.") for n in store.names("phi1"))
    assert set(store.names("phi2")) == {"cls.w", "cls.b"}
    assert bn_param_names(store) == [n for n in store.names("phi1") if ".bn." in n]
    assert len(bn_param_names(store)) == 2 * tiny_bundle.config.num_layers


def test_forward_shape_and_eval_determinism(tiny_bundle, small_graphs):
    batch = GraphBatch(small_graphs)
    a = tiny_bundle.forward(batch).data
    b = tiny_bundle.forward(batch).data
    assert a.shape == (6, 2)
    assert np.array_equal(a, b)


def test_unit_edge_weights_equal_default(tiny_bundle, small_graphs):
    batch = GraphBatch(small_graphs)
    plain = tiny_bundle.encode(batch).data
    ones = tiny_bundle.encode(batch, np.ones(batch.num_pairs)).data
    np.testing.assert_allclose(plain, ones, atol=1e-12)


def test_zero_edge_weights_equal_edgeless_graphs(tiny_bundle, small_graphs):
    batch = GraphBatch(small_graphs)
    bare = GraphBatch([Graph(g.num_nodes, g.features, [], g.labels) for g in small_graphs])
    np.testing.assert_allclose(tiny_bundle.encode(batch, np.zeros(batch.num_pairs)).data,
                               tiny_bundle.encode(bare).data, atol=1e-12)


def test_predictions_are_invariant_to_batch_composition(tiny_bundle, small_graphs):
    together = tiny_bundle.forward(GraphBatch(small_graphs)).data
    alone = np.concatenate([tiny_bundle.forward(GraphBatch([g])).data for g in small_graphs])
    np.testing.assert_allclose(together, alone, atol=1e-12)


@pytest.mark.parametrize("bn_mode", ["eval", "batch"])
def test_encode_gradient_wrt_edge_weights(tiny_bundle, small_graphs, bn_mode):
    batch = GraphBatch(small_graphs)
    w = Tensor(np.random.default_rng(2).uniform(0.2, 1.0, batch.num_pairs), requires_grad=True)
    fn = lambda: weighted_sum(pool(tiny_bundle.encode(batch, w, bn_mode), batch))
    report = grad_check(fn, [w])
    assert report.passed, report.failures[:3]


def test_full_model_parameter_gradients(tiny_bundle, small_graphs):
    batch = GraphBatch(small_graphs)
    store = tiny_bundle.params
    # zero-initialized biases put isolated nodes exactly on the relu kink
    rng = np.random.default_rng(0)
    for n in store.names("phi1"):
        store[n].data = store[n].data + rng.normal(scale=0.1, size=store[n].shape)
    fn = lambda: masked_bce(tiny_bundle.forward(batch, bn_mode="batch"), batch.labels, batch.label_mask)
    # a bias right before batch statistics cancels: its true gradient is zero,
    # which leaves only finite-difference roundoff to compare against
    pre_norm = [n for n in store.names("phi1") if n.endswith(".b2")]
    with ad.Tape():
        grads = backward(fn(), store)
    for n in pre_norm:
        np.testing.assert_allclose(grads[n], 0.0, atol=1e-12)
    names = [n for n in store.names("phi1") + store.names("phi2") if n not in pre_norm]
    report = grad_check(fn, [store[n] for n in names], max_entries=8)
    assert report.passed, report.failures[:3]


def test_edge_weights_shape_checked(tiny_bundle, small_graphs):
    batch = GraphBatch(small_graphs)
    with pytest.raises(ContractError, match="edge_weights"):
        tiny_bundle.encode(batch, np.ones(batch.num_pairs + 1))


def test_single_graph_batch_statistics_rejected(tiny_bundle, small_graphs):
    one = GraphBatch([Graph(1, np.ones((1, 8)), [], [1.0, 0.0])])
    with pytest.raises(StatisticsError):
        tiny_bundle.encode(one, bn_mode="batch")


def test_capture_returns_pre_normalization_activations(tiny_bundle, small_graphs):
    captured = []
    tiny_bundle.encode(GraphBatch(small_graphs), capture=captured)
    assert len(captured) == tiny_bundle.config.num_layers
    assert captured[0].shape == (sum(g.num_nodes for g in small_graphs), 4)


def test_masked_bce_ignores_missing_labels():
    logits = Tensor(np.array([[0.0, 5.0], [2.0, -1.0]]))
    labels = np.array([[1.0, np.nan], [0.0, 1.0]])
    mask = ~np.isnan(labels)
    expected = (np.log(2) + np.log1p(np.exp(2.0)) + np.log1p(np.exp(1.0))) / 3
    assert masked_bce(logits, labels, mask).item() == pytest.approx(expected)
    with pytest.raises(ContractError):
        masked_bce(logits, labels, np.zeros_like(mask))


def test_checkpoint_round_trip(tmp_path, tiny_bundle, small_graphs):
    tiny_bundle.encode(GraphBatch(small_graphs), bn_mode="train")  # move running stats off defaults
    path = tmp_path / "model.json"
    tiny_bundle.save(path)
    loaded = ModelBundle.load(path)
    batch = GraphBatch(small_graphs)
    assert np.array_equal(loaded.forward(batch).data, tiny_bundle.forward(batch).data)
    assert loaded.params.checksum("phi2") == tiny_bundle.params.checksum("phi2")


def test_unknown_checkpoint_format(tmp_path):
    with pytest.raises(ValidationError):
        ModelBundle.from_json({"format": "other/9"})


def test_clone_is_independent(tiny_bundle):
    clone = tiny_bundle.clone()
    clone.params["cls.b"].data += 1.0
    clone.bn["enc"][0].running_mean += 1.0
    assert np.all(tiny_bundle.params["cls.b"].data == 0.0)
    assert np.all(tiny_bundle.bn["enc"][0].running_mean == 0.0)


def test_gradient_reaches_classifier_only_through_pool(tiny_bundle, small_graphs):
    batch = GraphBatch(small_graphs)
    with ad.Tape():
        grads = backward(ad.sum_axis(tiny_bundle.forward(batch)), tiny_bundle.params)
    emb = pool(tiny_bundle.encode(batch), batch).data
    np.testing.assert_allclose(grads["cls.w"], emb.sum(axis=0)[:, None] * np.ones((1, 2)), atol=1e-12)
    assert np.all(grads["proj.w1"] == 0.0)
