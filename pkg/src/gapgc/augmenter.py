"""Learnable edge-dropping augmenter, its parameter-free variant, the edge
regularizer and the random-drop ablation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .graphs import GraphBatch
from .models import ModelBundle, glorot, linear

MODES = ("learnable", "parameter_free")
DELTA_CLAMP = 1e-6


@dataclass
class AugmenterParams:
    """Settings of the augmenter attached to a bundle.

    The tensors themselves live in the bundle's store: ``aug.enc.*``
    (theta1, a copy of the trained encoder) and, in learnable mode,
    ``aug.mlp.*`` (theta2, scoring concatenated endpoint embeddings).
    """

    mode: str = "learnable"
    tau: float = 0.5
    freeze_encoder: bool = False
    init_keep: float = 0.8

    def __post_init__(self):
        if not 0 < self.init_keep < 1:
            raise ConfigError(f"init_keep must lie in (0, 1), got {self.init_keep}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown augmenter mode {self.mode!r}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")

    def copy(self) -> "AugmenterParams":
        return AugmenterParams(**asdict(self))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "AugmenterParams":
        return cls(**obj)


def attach_augmenter(bundle: ModelBundle, mode: str = "learnable", tau: float = 0.5,
                     seed: int = 0, freeze_encoder: bool = False, init_keep: float = 0.8) -> AugmenterParams:
    """Initialise theta1 from the current encoder and theta2 at random.

    The scorer's output bias starts at ``logit(init_keep)`` so the first
    augmentations keep edges at roughly that rate instead of dropping half.
    """
    aug = AugmenterParams(mode, tau, freeze_encoder, init_keep)
    store = bundle.params
    store.remove_partition("theta1")
    store.remove_partition("theta2")
    for name in store.names("phi1"):
        store.add("aug." + name, store[name].data.copy(), "theta1", trainable=not freeze_encoder)
    bundle.bn["aug.enc"] = [s.copy() for s in bundle.bn["enc"]]
    if mode == "learnable":
        rng = np.random.default_rng(seed)
        h = bundle.config.hidden_dim
        store.add("aug.mlp.w1", glorot(rng, 2 * h, h), "theta2")
        store.add("aug.mlp.b1", np.zeros(h), "theta2")
        store.add("aug.mlp.w2", glorot(rng, h, 1), "theta2")
        store.add("aug.mlp.b2", np.full(1, np.log(init_keep / (1 - init_keep))), "theta2")
    bundle.augmenter = aug
    return aug


def compute_edge_logits(bundle: ModelBundle, batch: GraphBatch, bn_mode: str = "batch") -> Tensor:
    """One logit per undirected pair ``(i, j)``, ``i < j``.

    Learnable mode scores ``MLP([h_i, h_j])``; parameter-free mode uses the
    cosine of the endpoint embeddings (zero when either embedding is zero).
    """
    aug = bundle.augmenter
    if aug is None:
        raise ContractError("bundle has no augmenter attached")
    h = bundle.encode(batch, None, bn_mode, prefix="aug.enc")
    hi = ad.index_select(h, batch.pairs[:, 0])
    hj = ad.index_select(h, batch.pairs[:, 1])
    if aug.mode == "parameter_free":
        return ad.sum_axis(ad.mul(ad.l2_normalize(hi, "zero"), ad.l2_normalize(hj, "zero")), axis=1)
    p = bundle.params
    if "aug.mlp.w1" not in p:
        raise ContractError("learnable augmenter without theta2 parameters")
    hidden = ad.relu(linear(ad.concat([hi, hj], axis=1), p["aug.mlp.w1"], p["aug.mlp.b1"]))
    return ad.reshape(linear(hidden, p["aug.mlp.w2"], p["aug.mlp.b2"]), (batch.num_pairs,))


def draw_delta(rng, shape) -> np.ndarray:
    return np.clip(rng.random(shape), DELTA_CLAMP, 1 - DELTA_CLAMP)


def gumbel_sigmoid(omega, tau: float, rng=None, delta=None):
    """Relaxed Bernoulli keep-weights ``sigmoid((log d - log(1-d) + omega) / tau)``.

    The uniform noise ``d`` is either drawn from ``rng`` or replayed from
    ``delta``; it is a constant for differentiation.  Returns ``(weights, d)``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    omega = ad.as_tensor(omega)
    if delta is None:
        if rng is None:
            raise ContractError("gumbel_sigmoid needs an rng or a frozen delta")
        delta = draw_delta(rng, omega.shape)
    else:
        delta = np.clip(np.asarray(delta, dtype=np.float64), DELTA_CLAMP, 1 - DELTA_CLAMP)
        if delta.shape != omega.shape:
            raise ContractError(f"delta shape {delta.shape} vs logits {omega.shape}")
    logistic = np.log(delta) - np.log1p(-delta)
    return ad.sigmoid(ad.mul(ad.add(omega, logistic), 1.0 / tau)), delta


@dataclass
class AugmentedGraph:
    batch: GraphBatch
    omega: Tensor
    weights: Tensor
    delta: np.ndarray
    tau: float

    def replay(self) -> Tensor:
        return gumbel_sigmoid(self.omega.detach(), self.tau, delta=self.delta)[0]


def augment(bundle: ModelBundle, batch: GraphBatch, tau: float, rng=None, delta=None,
            bn_mode: str = "batch") -> AugmentedGraph:
    omega = compute_edge_logits(bundle, batch, bn_mode)
    weights, delta = gumbel_sigmoid(omega, tau, rng=rng, delta=delta)
    return AugmentedGraph(batch, omega, weights, delta, tau)


def regularizer_Le(omega, num_pairs: int | None = None) -> Tensor:
    """Mean edge logit over undirected pairs; zero for an edgeless batch."""
    omega = ad.as_tensor(omega)
    n = omega.size if num_pairs is None else num_pairs
    if n == 0:
        return Tensor(0.0)
    return ad.mul(ad.sum_axis(omega), 1.0 / n)


def random_edge_drop(batch: GraphBatch, keep_prob: float, rng) -> Tensor:
    """Independent keep/drop mask per undirected pair (no gradient)."""
    if not 0 < keep_prob <= 1:
        raise ConfigError(f"keep_prob {keep_prob} outside (0, 1]")
    return Tensor((rng.random(batch.num_pairs) < keep_prob).astype(np.float64))


def tau_schedule(step: int, total_steps: int, start: float = 0.5, end: float = 0.1) -> float:
    """Linear anneal from ``start`` to ``end`` over ``total_steps``."""
    if total_steps <= 1:
        return start
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start + (end - start) * frac
