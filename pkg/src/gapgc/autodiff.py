"""Define-by-run reverse-mode autodiff over dense float64 numpy arrays.

Usage::

    with Tape():
        loss = mean_axis(mul(x, x))
    grads = backward(loss, store)

Operations record a node on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient.  Outside a tape they are plain numpy
computations, which is what finite-difference checks and evaluation use.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DeterminismError,
    DomainError,
    IndexRangeError,
    NumericError,
    ShapeError,
    StatisticsError,
)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    vjp: Callable


class Tape:
    """Append-only record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, op, inputs, output, vjp):
        output.node = (self, len(self.nodes))
        self.nodes.append(Node(op, inputs, output, vjp))

    def __len__(self):
        return len(self.nodes)


class no_tape:
    """Suspend recording (e.g. for finite differences or pure evaluation)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data, inputs: tuple, vjp: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    out = a.data / b.data
    return _result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    return _result(
        "softplus", np.logaddexp(0.0, a.data), (a,),
        lambda g: (g * _sigmoid_np(a.data),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        bad = np.argwhere(a.data <= 0)[0]
        raise DomainError(f"log of non-positive value {a.data[tuple(bad)]!r} at {tuple(bad)}")
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_axis(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum_axis", out, (a,), vjp)


def mean_axis(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean over empty axis of shape {a.shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result("mean_axis", out, (a,), vjp)


def index_select(a, index) -> Tensor:
    """Gather rows ``a[index]`` along axis 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        pos = int(np.argmax((index < 0) | (index >= a.shape[0])))
        raise IndexRangeError(f"index_select: index {index[pos]} at position {pos} out of range for {a.shape[0]} rows")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)

    return _result("index_select", a.data[index], (a,), vjp)


def segment_sum(values, segments, num_segments: int) -> Tensor:
    """Row ``k`` of the result sums the rows of ``values`` whose segment id is ``k``."""
    values = as_tensor(values)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (values.shape[0],):
        raise ShapeError(f"segment_sum: {segments.shape[0] if segments.ndim else 0} ids for {values.shape[0]} rows")
    bad = (segments < 0) | (segments >= num_segments)
    if bad.any():
        pos = int(np.argmax(bad))
        raise IndexRangeError(f"segment_sum: segment id {segments[pos]} at position {pos} not in [0, {num_segments})")
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, segments, values.data)
    return _result("segment_sum", out, (values,), lambda g: (g[segments],))


# ---------------------------------------------------------------- row-wise nonlinearities


def softmax_row(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(
        "softmax_row", s, (a,),
        lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),),
    )


def log_softmax_row(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)
    return _result(
        "log_softmax_row", out, (a,),
        lambda g: (g - s * g.sum(axis=-1, keepdims=True),),
    )


def l2_normalize(a, zero_rows: str = "raise") -> Tensor:
    """Scale each row to unit norm.

    ``zero_rows="raise"`` rejects zero-norm rows; ``"zero"`` maps them to zero
    rows with zero gradient.
    """
    a = as_tensor(a)
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    zero = norms[:, 0] == 0
    if zero.any():
        if zero_rows == "raise":
            raise NumericError(f"zero-norm row {int(np.argmax(zero))} in cosine similarity")
        norms = np.where(zero[:, None], 1.0, norms)
    y = x / norms
    y[zero] = 0.0

    def vjp(g):
        g2 = g.reshape(y.shape)
        gx = (g2 - y * (g2 * y).sum(axis=1, keepdims=True)) / norms
        gx[zero] = 0.0
        return (gx.reshape(a.shape),)

    return _result("l2_normalize", y.reshape(a.shape), (a,), vjp)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity: scalar for two vectors, ``[m, n]`` matrix for two row stacks."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 1 and b.data.ndim == 1:
        if a.shape != b.shape:
            raise ShapeError(f"cosine_sim: vector shapes {a.shape} and {b.shape}")
        return sum_axis(mul(l2_normalize(a), l2_normalize(b)))
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_sim: shapes {a.shape} and {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------- batch normalization

BN_MODES = ("train", "eval", "batch")


@dataclass
class BNState:
    """Running statistics of one normalization layer.

    ``last_mean``/``last_var`` hold the statistics of the most recent
    batch-statistics forward pass.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-8
    last_mean: np.ndarray | None = field(default=None, repr=False)
    last_var: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, width: int, **kw) -> "BNState":
        return cls(np.zeros(width), np.ones(width), **kw)

    def copy(self) -> "BNState":
        return BNState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batchnorm(x, gamma, beta, state: BNState, mode: str = "eval") -> Tensor:
    """Per-channel normalization of ``x`` ([N, C]) followed by the affine map.

    ``train`` normalizes with batch statistics and updates the running ones;
    ``batch`` uses batch statistics without touching the running ones;
    ``eval`` uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mode not in BN_MODES:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    n = xd.shape[0]
    if mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        if n < 2:
            raise StatisticsError(f"batch statistics need at least 2 rows, got {n}")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        state.last_mean, state.last_var = mu, var
        if mode == "train":
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu
            state.running_var = (1 - m) * state.running_var + m * var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if mode == "eval":
            dx = dxhat * inv
        else:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return _result("batchnorm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- dispatch

OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "softmax_row": softmax_row,
    "log_softmax_row": log_softmax_row,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "mean_axis": mean_axis,
    "sum_axis": sum_axis,
    "index_select": index_select,
    "batchnorm": batchnorm,
    "cosine_sim": cosine_sim,
    "transpose": transpose,
    "l2_normalize": l2_normalize,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- parameters

PARTITIONS = ("phi1", "phi2", "proj", "theta1", "theta2")


class ParamStore:
    """Named parameter tensors, each in exactly one partition.

    Partitions: ``phi1`` encoder, ``phi2`` classifier, ``proj`` projection
    head, ``theta1`` augmenter encoder, ``theta2`` augmenter scorer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._partition: dict[str, str] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, partition: str, trainable: bool = True) -> Tensor:
        if partition not in PARTITIONS:
            raise ContractError(f"unknown partition {partition!r}")
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._partition[name] = partition
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def partition_of(self, name: str) -> str:
        return self._partition[name]

    def names(self, partitions: Iterable[str] | str | None = None) -> list[str]:
        if partitions is None:
            return list(self._params)
        if isinstance(partitions, str):
            partitions = (partitions,)
        partitions = set(partitions)
        return [n for n in self._params if self._partition[n] in partitions]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, partition: str, flag: bool) -> None:
        for n in self.names(partition):
            self._trainable[n] = flag

    def trainable(self, partitions=None) -> dict[str, Tensor]:
        return {n: self._params[n] for n in self.names(partitions) if self._trainable[n]}

    def select(self, names: Iterable[str]) -> dict[str, Tensor]:
        return {n: self._params[n] for n in names}

    def remove_partition(self, partition: str) -> None:
        for n in self.names(partition):
            del self._params[n], self._partition[n], self._trainable[n]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict) -> None:
        for n, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._params[n].shape:
                raise ShapeError(f"{n}: stored shape {v.shape} vs {self._params[n].shape}")
            self._params[n].data = v.copy()

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self._params.items():
            other.add(n, t.data.copy(), self._partition[n], self._trainable[n])
        return other

    def checksum(self, partitions=None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.names(partitions)):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params=None):
    """Gradients of a scalar ``loss`` recorded on a tape.

    ``params`` may be a :class:`ParamStore` (all trainable entries), a
    mapping of name to tensor, or a sequence of tensors; the result mirrors it
    (dict or list).  Unreached parameters get zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if loss.node is None:
        raise ContractError("loss is detached: it was not computed under an active tape")
    tape, idx = loss.node
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: idx + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi

    if params is None:
        return grads
    if isinstance(params, ParamStore):
        params = params.trainable()
    if isinstance(params, dict):
        return {n: np.asarray(grads.get(id(t), np.zeros(t.shape))).reshape(t.shape) for n, t in params.items()}
    return [np.asarray(grads.get(id(t), np.zeros(t.shape))).reshape(t.shape) for t in params]


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    failures: list[tuple[str, tuple, float, float, float]]
    rel_tol: float

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    fn: Callable[[], Tensor],
    params,
    epsilon: float = 1e-6,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-7,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central finite differences.

    ``fn`` takes no arguments, reads the current parameter values and returns
    a scalar tensor; every random draw inside it must be fixed.  The relative
    error of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``.  With
    ``max_entries`` a seeded random subset of each parameter's entries is
    probed.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    if isinstance(params, ParamStore):
        params = params.trainable()
    elif not isinstance(params, dict):
        params = {f"p{i}": t for i, t in enumerate(params)}

    with Tape():
        loss = fn()
        analytic = backward(loss, params)
    with no_tape():
        again = fn().item()
    if again != loss.item():
        raise DeterminismError(f"two forward passes disagree: {loss.item()!r} vs {again!r}")

    rng = np.random.default_rng(seed)
    max_err: dict[str, float] = {}
    failures = []
    for name, t in params.items():
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            with no_tape():
                flat[k] = orig + epsilon
                fp = fn().item()
                flat[k] = orig - epsilon
                fm = fn().item()
            flat[k] = orig
            num = (fp - fm) / (2 * epsilon)
            a = a_flat[k]
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, err)
            if err > rel_tol:
                failures.append((name, np.unravel_index(k, t.shape), float(a), float(num), float(err)))
        max_err[name] = worst
    return GradCheckReport(max_err, failures, rel_tol)
