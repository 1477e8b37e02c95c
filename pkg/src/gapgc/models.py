"""GIN encoder with continuous edge weights, classifier and projection head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BNState, ParamStore, Tensor
from .errors import ConfigError, ContractError, ValidationError
from .graphs import FEATURE_WIDTH, GraphBatch

CHECKPOINT_FORMAT = "gapgc-checkpoint/1"


@dataclass(frozen=True)
class GinConfig:
    num_layers: int = 5
    hidden_dim: int = 64
    feature_width: int = FEATURE_WIDTH
    task_count: int = 2
    epsilon: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ConfigError("num_layers and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 0.5]")
        if self.feature_width < 1 or self.task_count < 1:
            raise ConfigError("feature_width and task_count must be >= 1")


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def add_gin_encoder(store: ParamStore, prefix: str, cfg: GinConfig, rng, partition: str):
    states = []
    width = cfg.feature_width
    for layer in range(cfg.num_layers):
        p = f"{prefix}.l{layer}"
        store.add(f"{p}.w1", glorot(rng, width, cfg.hidden_dim), partition)
        store.add(f"{p}.b1", np.zeros(cfg.hidden_dim), partition)
        store.add(f"{p}.w2", glorot(rng, cfg.hidden_dim, cfg.hidden_dim), partition)
        store.add(f"{p}.b2", np.zeros(cfg.hidden_dim), partition)
        store.add(f"{p}.bn.gamma", np.ones(cfg.hidden_dim), partition)
        store.add(f"{p}.bn.beta", np.zeros(cfg.hidden_dim), partition)
        states.append(BNState.fresh(cfg.hidden_dim))
        width = cfg.hidden_dim
    return states


def bn_param_names(store: ParamStore, prefix: str = "enc") -> list[str]:
    return [n for n in store.names("phi1") if n.startswith(prefix + ".") and ".bn." in n]


class ModelBundle:
    """Encoder (``enc.*``, partition phi1), classifier (``cls.*``, phi2),
    projection head (``proj.*``) and, once attached, the augmenter
    (``aug.enc.*`` theta1, ``aug.mlp.*`` theta2).

    ``bn`` maps an encoder prefix to its per-layer normalization state.
    """

    def __init__(self, config: GinConfig, params: ParamStore, bn: dict[str, list[BNState]], augmenter=None):
        self.config = config
        self.params = params
        self.bn = bn
        self.augmenter = augmenter

    @classmethod
    def init(cls, config: GinConfig, seed: int = 0) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        store = ParamStore()
        bn = {"enc": add_gin_encoder(store, "enc", config, rng, "phi1")}
        h, t = config.hidden_dim, config.task_count
        store.add("cls.w", glorot(rng, h, t), "phi2")
        store.add("cls.b", np.zeros(t), "phi2")
        store.add("proj.w1", glorot(rng, h, h), "proj")
        store.add("proj.b1", np.zeros(h), "proj")
        store.add("proj.w2", glorot(rng, h, h), "proj")
        store.add("proj.b2", np.zeros(h), "proj")
        return cls(config, store, bn)

    def clone(self) -> "ModelBundle":
        aug = None if self.augmenter is None else self.augmenter.copy()
        return ModelBundle(self.config, self.params.copy(), {k: [s.copy() for s in v] for k, v in self.bn.items()}, aug)

    # ------------------------------------------------------------ forward pieces

    def encode(self, batch: GraphBatch, edge_weights=None, bn_mode: str = "eval", prefix: str = "enc",
               dropout_rng=None, capture: list | None = None) -> Tensor:
        """Node embeddings ``[N, hidden_dim]``.

        Layer rule: ``h_i <- MLP((1 + eps) h_i + sum_j w_ij h_j)``, then
        batchnorm, then relu except after the last layer.  ``edge_weights``
        holds one weight per undirected pair; ``None`` means all ones.
        ``capture`` receives each layer's pre-normalization activations.
        """
        cfg = self.config
        p = self.params
        if edge_weights is not None:
            edge_weights = ad.as_tensor(edge_weights)
            if edge_weights.shape not in ((batch.num_pairs,), (batch.num_pairs, 1)):
                raise ContractError(f"edge_weights shape {edge_weights.shape} for {batch.num_pairs} pairs")
            w_dir = ad.index_select(ad.reshape(edge_weights, (batch.num_pairs, 1)), batch.edge_pair)
        h = Tensor(batch.x)
        for layer, state in enumerate(self.bn[prefix]):
            name = f"{prefix}.l{layer}"
            z = h if cfg.epsilon == 0 else ad.mul(h, 1.0 + cfg.epsilon)
            if batch.num_pairs:
                msgs = ad.index_select(h, batch.src)
                if edge_weights is not None:
                    msgs = ad.mul(msgs, w_dir)
                z = ad.add(z, ad.segment_sum(msgs, batch.dst, batch.num_nodes))
            z = ad.relu(linear(z, p[f"{name}.w1"], p[f"{name}.b1"]))
            z = linear(z, p[f"{name}.w2"], p[f"{name}.b2"])
            if capture is not None:
                capture.append(z.data)
            z = ad.batchnorm(z, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], state, bn_mode)
            if layer < cfg.num_layers - 1:
                z = ad.relu(z)
                if dropout_rng is not None and cfg.dropout_rate > 0:
                    keep = 1.0 - cfg.dropout_rate
                    z = ad.mul(z, (dropout_rng.random(z.shape) < keep) / keep)
            h = z
        return h

    def classify(self, graph_emb: Tensor) -> Tensor:
        return linear(graph_emb, self.params["cls.w"], self.params["cls.b"])

    def project(self, graph_emb: Tensor) -> Tensor:
        p = self.params
        hidden = ad.relu(linear(graph_emb, p["proj.w1"], p["proj.b1"]))
        return linear(hidden, p["proj.w2"], p["proj.b2"])

    def forward(self, batch: GraphBatch, edge_weights=None, bn_mode="eval", dropout_rng=None) -> Tensor:
        """Per-task logits ``[m, T]``."""
        h = self.encode(batch, edge_weights, bn_mode, dropout_rng=dropout_rng)
        return self.classify(pool(h, batch))

    # ------------------------------------------------------------ persistence

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "params": {
                n: {
                    "partition": self.params.partition_of(n),
                    "trainable": self.params.is_trainable(n),
                    "shape": list(t.shape),
                    "values": t.data.reshape(-1).tolist(),
                }
                for n, t in self.params.items()
            },
            "bn": {
                k: [
                    {"running_mean": s.running_mean.tolist(), "running_var": s.running_var.tolist(),
                     "momentum": s.momentum, "eps": s.eps}
                    for s in states
                ]
                for k, states in self.bn.items()
            },
            "augmenter": None if self.augmenter is None else self.augmenter.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelBundle":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {obj.get('format')!r}")
        config = GinConfig(**obj["config"])
        store = ParamStore()
        for n, rec in obj["params"].items():
            store.add(n, np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"]),
                      rec["partition"], rec["trainable"])
        bn = {
            k: [BNState(np.asarray(s["running_mean"]), np.asarray(s["running_var"]), s["momentum"], s["eps"])
                for s in states]
            for k, states in obj["bn"].items()
        }
        aug = None
        if obj.get("augmenter") is not None:
            from .augmenter import AugmenterParams

            aug = AugmenterParams.from_json(obj["augmenter"])
        return cls(config, store, bn, aug)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelBundle":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def pool(node_emb: Tensor, batch: GraphBatch) -> Tensor:
    """Mean of node embeddings per graph."""
    sums = ad.segment_sum(node_emb, batch.node_to_graph, batch.num_graphs)
    return ad.mul(sums, (1.0 / batch.graph_sizes)[:, None])


def masked_bce(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sigmoid cross-entropy averaged over the non-missing labels."""
    count = mask.sum()
    if count == 0:
        raise ContractError("no labelled entries in batch")
    y = np.where(mask, labels, 0.0)
    per = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    return ad.mul(ad.sum_axis(ad.mul(per, mask.astype(np.float64))), 1.0 / count)
