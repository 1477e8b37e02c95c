import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gapgc import autodiff as ad
from gapgc.autodiff import BNState, ParamStore, Tape, Tensor, backward, grad_check, no_tape
from gapgc.errors import (
    ContractError, DeterminismError, DomainError, IndexRangeError, NumericError, ShapeError, StatisticsError,
)

from gradcases import GRAD_OPS, op_case


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- examples


def test_sigmoid_at_zero_and_its_slope():
    x = leaf(0.0)
    with Tape():
        y = ad.sigmoid(x)
        (g,) = backward(y, [x])
    assert y.item() == 0.5
    assert g == pytest.approx(0.25)


def test_softmax_of_constant_row_is_uniform():
    out = ad.softmax_row(Tensor([2.5, 2.5, 2.5]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3)


@given(st.lists(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=6))
def test_cosine_of_vector_with_itself_is_one(values):
    v = np.array(values)
    assert ad.cosine_sim(v, v).item() == pytest.approx(1.0)


def test_segment_sum_examples():
    out = ad.segment_sum(Tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])
    empty = ad.segment_sum(Tensor([[1.0], [2.0]]), [0, 0], 3)
    np.testing.assert_array_equal(empty.data[1:], 0.0)


def test_segment_sum_gradient_is_upstream_row():
    x = leaf([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    w = np.array([[1.0, -1.0], [2.0, 0.5]])
    with Tape():
        loss = ad.sum_axis(ad.mul(ad.segment_sum(x, [1, 0, 1], 2), w))
        (g,) = backward(loss, [x])
    np.testing.assert_array_equal(g, w[[1, 0, 1]])


def test_backward_examples():
    x, p = leaf(3.0), leaf(1.0)
    with Tape():
        loss = ad.mul(x, x)
        gx, gp = backward(loss, [x, p])
    assert gx == 6.0
    assert gp == 0.0
    v = leaf(np.arange(5.0))
    with Tape():
        (gv,) = backward(ad.mean_axis(v), [v])
    np.testing.assert_allclose(gv, np.full(5, 0.2))


def test_backward_returns_mapping_for_store():
    store = ParamStore()
    a = store.add("a", np.ones(3), "phi1")
    store.add("b", np.ones(2), "phi2")
    with Tape():
        grads = backward(ad.sum_axis(ad.mul(a, a)), store)
    assert set(grads) == {"a", "b"}
    np.testing.assert_array_equal(grads["a"], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(grads["b"], [0.0, 0.0])


# ---------------------------------------------------------------- errors


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))


@pytest.mark.parametrize("value", [0.0, -1.0])
def test_log_of_non_positive_is_domain_error(value):
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, value]))


def test_division_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_segment_sum_out_of_range_names_position():
    with pytest.raises(IndexRangeError, match="position 2"):
        ad.segment_sum(Tensor(np.ones((3, 1))), [0, 1, 5], 2)


def test_index_select_out_of_range():
    with pytest.raises(IndexRangeError):
        ad.index_select(Tensor(np.ones((3, 1))), [0, 3])


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape():
        y = ad.mul(x, 2.0)
        with pytest.raises(ContractError, match="scalar"):
            backward(y, [x])


def test_detached_loss_rejected():
    x = leaf(2.0)
    with pytest.raises(ContractError, match="detached"):
        backward(ad.mul(x, x), [x])
    with Tape():
        y = ad.mul(x, x)
    with pytest.raises(ContractError):
        backward(y.detach(), [x])


def test_non_finite_output_is_reported():
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


def test_no_tape_suspends_recording():
    x = leaf(1.0)
    with Tape() as tape:
        with no_tape():
            y = ad.mul(x, x)
        assert len(tape) == 0
    assert y.node is None


# ---------------------------------------------------------------- gradient checking


def test_grad_check_passes_on_quadratic_form():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    x = leaf(rng.normal(size=4))
    fn = lambda: ad.sum_axis(ad.mul(x, ad.reshape(ad.matmul(Tensor(a), ad.reshape(x, (4, 1))), (4,))))
    report = grad_check(fn, [x], epsilon=1e-5, rel_tol=1e-4)
    assert report.passed, report.failures


def test_grad_check_flags_wrong_rule():
    x = leaf(np.array([0.3, -1.2, 2.0]))

    def bad_square(t):
        return ad._result("bad_square", t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    report = grad_check(lambda: ad.sum_axis(bad_square(x)), [x])
    assert not report.passed
    assert report.failures[0][0] == "p0"
    assert report.worst > 0.4


def test_grad_check_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    x = leaf(np.ones(3))
    with pytest.raises(DeterminismError):
        grad_check(lambda: ad.sum_axis(ad.mul(x, rng.normal(size=3))), [x])


@pytest.mark.parametrize("op", GRAD_OPS)
def test_every_op_passes_gradient_check(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    fn, params = op_case(op, rng, (3, 4, 2))
    report = grad_check(fn, params)
    assert report.passed, report.failures[:3]


@given(op=st.sampled_from(GRAD_OPS), dims=st.tuples(*[st.integers(1, 8)] * 3), seed=st.integers(0, 2**31))
def test_ops_pass_gradient_check_on_random_shapes(op, dims, seed):
    fn, params = op_case(op, np.random.default_rng(seed), dims)
    report = grad_check(fn, params)
    assert report.passed, report.failures[:3]


@given(n=st.integers(1, 10), f=st.integers(1, 4), segs=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_segment_sum_is_adjoint_of_gather(n, f, segs, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, segs, size=n)
    x, y = rng.normal(size=(n, f)), rng.normal(size=(segs, f))
    lhs = float((ad.segment_sum(x, ids, segs).data * y).sum())
    rhs = float((x * ad.index_select(y, ids).data).sum())
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    fn, params = op_case("cosine_sim", rng, (5, 3, 4))
    runs = []
    for _ in range(2):
        with Tape():
            runs.append(backward(fn(), params))
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


def test_gradients_do_not_accumulate_across_calls():
    x = leaf(2.0)
    for _ in range(3):
        with Tape():
            (g,) = backward(ad.mul(x, x), [x])
        assert g == 4.0


# ---------------------------------------------------------------- batch normalization


def test_batchnorm_batch_mode_standardizes_without_touching_running_stats():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, size=(50, 4))
    state = BNState.fresh(4)
    out = ad.batchnorm(x, np.ones(4), np.zeros(4), state, "batch").data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-3)
    np.testing.assert_array_equal(state.running_mean, 0.0)


def test_batchnorm_train_mode_moves_running_stats_by_momentum():
    x = np.array([[1.0], [3.0]])
    state = BNState.fresh(1, momentum=0.1)
    ad.batchnorm(x, np.ones(1), np.zeros(1), state, "train")
    assert state.running_mean[0] == pytest.approx(0.2)
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_batchnorm_eval_mode_uses_running_stats():
    state = BNState(np.array([1.0]), np.array([4.0]), eps=0.0)
    out = ad.batchnorm(np.array([[5.0]]), np.array([2.0]), np.array([1.0]), state, "eval")
    assert out.item() == pytest.approx(2.0 * (5.0 - 1.0) / 2.0 + 1.0)


@pytest.mark.parametrize("mode", ["train", "batch"])
def test_batchnorm_needs_two_rows_for_batch_statistics(mode):
    with pytest.raises(StatisticsError):
        ad.batchnorm(np.ones((1, 3)), np.ones(3), np.zeros(3), BNState.fresh(3), mode)


# ---------------------------------------------------------------- parameter store


def test_param_store_partitions_and_flags():
    store = ParamStore()
    store.add("enc.w", np.ones(2), "phi1")
    store.add("cls.w", np.ones(2), "phi2")
    store.set_trainable("phi2", False)
    assert store.partition_of("cls.w") == "phi2"
    assert list(store.trainable()) == ["enc.w"]
    with pytest.raises(ContractError):
        store.add("enc.w", np.ones(2), "phi2")
    with pytest.raises(ContractError):
        store.add("x", np.ones(2), "nowhere")


def test_checksum_tracks_values_and_copy_is_deep():
    store = ParamStore()
    store.add("a", np.arange(3.0), "phi2")
    before = store.checksum("phi2")
    clone = store.copy()
    clone["a"].data[0] = 9.0
    assert store.checksum("phi2") == before
    assert clone.checksum("phi2") != before


def test_forward_op_dispatch():
    assert ad.forward_op("sigmoid", Tensor(0.0)).item() == 0.5
    with pytest.raises(ContractError):
        ad.forward_op("nope", Tensor(0.0))
