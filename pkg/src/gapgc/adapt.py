"""Offline training, GAPGC min-max adaptation, PF-GAPGC and the Tent / BN /
SHOT-lite baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augmenter import attach_augmenter, augment, random_edge_drop, regularizer_Le, tau_schedule
from .autodiff import Tape, backward, no_tape
from .errors import AdaptationError, ConfigError, ContractError, StatisticsError, TrainingError
from .graphs import Graph, GraphBatch
from .loss import contrastive_loss, own_positive, pseudo_label, select_positives
from .metrics import roc_auc_multitask
from .models import ModelBundle, bn_param_names, masked_bce, pool
from .optim import Adam

log = logging.getLogger(__name__)

METHODS = ("none", "gapgc", "pf_gapgc", "tent", "bn", "shot")


@dataclass(frozen=True)
class TTAConfig:
    method: str = "gapgc"
    lam: float = 1.0
    gamma: float = 0.8
    tau_start: float = 0.5
    tau_end: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 128
    tta_epochs: int = 1
    theta_steps: int = 1
    phi_steps: int = 1
    seed: int = 0
    use_ala: bool = True
    use_gpps: bool = True
    shot_beta: float = 0.3
    bn_rho: float = 0.0
    bn_mode: str = "batch"
    keep_prob: float = 0.8
    aug_init_keep: float = 0.8
    recalibrate_bn: bool = False
    clip_norm: float = 5.0
    temperature: float = 1.0
    label_from_augmented: bool = False
    freeze_aug_encoder: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch statistics)")
        if self.tta_epochs < 1 or self.theta_steps < 0 or self.phi_steps < 0:
            raise ConfigError("epochs >= 1 and step counts >= 0 required")
        if not 0 <= self.bn_rho <= 1:
            raise ConfigError("bn_rho must lie in [0, 1]")
        if self.bn_mode not in ("batch", "eval"):
            raise ConfigError("bn_mode must be 'batch' or 'eval'")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob must lie in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 0


@dataclass
class StepRecord:
    step: int
    loss: float
    le: float
    objective: float
    entropy: float
    weight_mean: float = float("nan")
    weight_min: float = float("nan")
    weight_max: float = float("nan")
    positives_mean: float = float("nan")


@dataclass
class AdaptReport:
    method: str
    records: list = field(default_factory=list)

    def add(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ContractError("report steps must increase")
        values = [v for v in asdict(rec).values() if isinstance(v, float) and not math.isnan(v)]
        if not all(math.isfinite(v) for v in values):
            raise AdaptationError(f"non-finite value in step {rec.step}: {rec}")
        self.records.append(rec)

    def to_json(self) -> dict:
        return {"method": self.method, "records": [asdict(r) for r in self.records]}


# ---------------------------------------------------------------- helpers


def make_batches(graphs: Sequence[Graph], batch_size: int, rng=None) -> list[GraphBatch]:
    """Chunk (optionally shuffled) graphs; a trailing singleton joins the previous batch."""
    if not graphs:
        raise ContractError("no graphs to batch")
    order = np.arange(len(graphs)) if rng is None else rng.permutation(len(graphs))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return [GraphBatch([graphs[i] for i in c]) for c in chunks]


def binary_entropy_from_logits(logits) -> ad.Tensor:
    """Elementwise ``-p log p - (1-p) log(1-p)`` with ``p = sigmoid(x)``."""
    return ad.sub(ad.softplus(logits), ad.mul(ad.sigmoid(logits), logits))


def mean_task_entropy(logits) -> ad.Tensor:
    """Sum over tasks of the batch-mean binary entropy."""
    return ad.sum_axis(ad.mean_axis(binary_entropy_from_logits(logits), axis=0))


def predict(bundle: ModelBundle, graphs: Sequence[Graph], bn_mode: str = "eval", batch_size: int = 512) -> np.ndarray:
    """Sigmoid scores ``[n, T]``; in ``batch`` mode the whole set is one batch."""
    with no_tape():
        if bn_mode == "batch":
            logits = bundle.forward(GraphBatch(graphs), bn_mode="batch").data
        else:
            parts = [bundle.forward(GraphBatch(graphs[i:i + batch_size]), bn_mode="eval").data
                     for i in range(0, len(graphs), batch_size)]
            logits = np.concatenate(parts, axis=0)
    return 1.0 / (1.0 + np.exp(-logits))


def evaluate(bundle: ModelBundle, graphs: Sequence[Graph], bn_mode: str = "eval"):
    scores = predict(bundle, graphs, bn_mode)
    labels = np.stack([g.labels for g in graphs])
    return roc_auc_multitask(scores, labels)


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise AdaptationError(f"non-finite {what} at step {step}: {value}")


# ---------------------------------------------------------------- offline training


def offline_train(bundle: ModelBundle, train: Sequence[Graph], cfg: TrainConfig = TrainConfig(),
                  validation: Sequence[Graph] | None = None):
    """Masked multi-task sigmoid cross-entropy with Adam, bn in train mode.

    With ``validation`` the parameters of the epoch with the best validation
    AUC are kept.  Returns ``(bundle, log)``; ``bundle`` is modified in place.
    """
    if not train:
        raise ContractError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    names = bundle.params.names(("phi1", "phi2"))
    opt = Adam(bundle.params.select(names), cfg.lr, cfg.weight_decay)
    history = []
    best = None
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for batch in make_batches(train, cfg.batch_size, rng):
            with Tape():
                logits = bundle.forward(batch, bn_mode="train", dropout_rng=rng)
                loss = masked_bce(logits, batch.labels, batch.label_mask)
                grads = backward(loss, opt.params)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at step {step}")
            opt.step(grads)
            losses.append(loss.item())
            step += 1
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if validation:
            entry["val_auc"] = evaluate(bundle, validation)[1]
            if best is None or entry["val_auc"] > best[0]:
                best = (entry["val_auc"], bundle.params.state(), [s.copy() for s in bundle.bn["enc"]])
        history.append(entry)
        log.debug("epoch %d %s", epoch, entry)
    if best is not None:
        bundle.params.load_state(best[1])
        bundle.bn["enc"] = best[2]
    return bundle, history


def train_loss(bundle: ModelBundle, graphs: Sequence[Graph]) -> float:
    batch = GraphBatch(graphs)
    with no_tape():
        return masked_bce(bundle.forward(batch, bn_mode="eval"), batch.labels, batch.label_mask).item()


# ---------------------------------------------------------------- BN statistics


def set_bn_statistics(bundle: ModelBundle, batch: GraphBatch, rho: float = 0.0, prefix: str = "enc") -> None:
    """Blend each layer's running statistics towards the batch statistics:
    ``stat <- rho * stat + (1 - rho) * batch_stat``."""
    if batch.num_nodes < 2:
        raise StatisticsError("need at least two nodes for batch statistics")
    with no_tape():
        bundle.encode(batch, None, "batch", prefix=prefix)
    for state in bundle.bn[prefix]:
        state.running_mean = rho * state.running_mean + (1 - rho) * state.last_mean
        state.running_var = rho * state.running_var + (1 - rho) * state.last_var


def adapt_bn(bundle: ModelBundle, graphs: Sequence[Graph], config: TTAConfig):
    """Replace normalization statistics with test-batch statistics; no gradient steps."""
    if len(graphs) < 2:
        raise StatisticsError("BN adaptation needs at least two graphs")
    b = bundle.clone()
    report = AdaptReport("bn")
    for batch in make_batches(graphs, config.batch_size):
        set_bn_statistics(b, batch, config.bn_rho)
    return b, report


# ---------------------------------------------------------------- GAPGC


def _gapgc_forward(b: ModelBundle, batch: GraphBatch, config: TTAConfig, tau: float, rng, parameter_free: bool):
    """Contrastive loss, edge regularizer and diagnostics for one batch."""
    mode = config.bn_mode
    if config.use_ala:
        aug = augment(b, batch, tau, rng=rng, bn_mode=mode)
        weights, omega = aug.weights, aug.omega
    else:
        weights, omega = random_edge_drop(batch, config.keep_prob, rng), None
    g = pool(b.encode(batch, None, mode), batch)
    g_aug = pool(b.encode(batch, weights, mode), batch)
    z = g if parameter_free else b.project(g)
    z_aug = g_aug if parameter_free else b.project(g_aug)
    with no_tape():
        logits = b.classify(ad.Tensor(g.data))
        logits_aug = b.classify(ad.Tensor(g_aug.data))
    aug_labels = pseudo_label(logits_aug)
    anchor_labels = aug_labels if config.label_from_augmented else pseudo_label(logits)
    if config.use_gpps:
        positives = select_positives(anchor_labels, aug_labels, config.gamma)
    else:
        positives = own_positive(batch.num_graphs)
    loss = contrastive_loss(z, z_aug, positives, config.temperature)
    le = regularizer_Le(omega) if omega is not None else ad.Tensor(0.0)
    with no_tape():
        entropy = mean_task_entropy(logits).item()
    return loss, le, weights, positives, entropy


def adapt_gapgc(bundle: ModelBundle, graphs: Sequence[Graph], config: TTAConfig):
    """Alternating min-max adaptation on unlabelled test graphs.

    Per batch: ``theta_steps`` ascent steps of ``loss + lam * L_e`` on the
    augmenter (clipped Adam on the negated objective), then ``phi_steps``
    descent steps of the contrastive loss on encoder and projection head.
    The classifier is never updated.  Gumbel noise is redrawn every forward.
    """
    if not graphs:
        raise ContractError("empty test split")
    parameter_free = config.method == "pf_gapgc"
    b = bundle.clone()
    b.params.set_trainable("phi2", False)
    if config.use_ala:
        attach_augmenter(b, "parameter_free" if parameter_free else "learnable", config.tau_start,
                         seed=config.seed, freeze_encoder=config.freeze_aug_encoder,
                         init_keep=config.aug_init_keep)
    rng = np.random.default_rng(config.seed)
    phi_names = b.params.names(("phi1",) if parameter_free else ("phi1", "proj"))
    opt_phi = Adam(b.params.select(phi_names), config.lr, config.weight_decay)
    theta = b.params.trainable(("theta1", "theta2"))
    opt_theta = Adam(theta, config.lr, config.weight_decay, clip_norm=config.clip_norm) if theta else None
    report = AdaptReport(config.method)
    batches_per_epoch = None
    step = 0
    for epoch in range(config.tta_epochs):
        batches = make_batches(graphs, config.batch_size, rng)
        batches_per_epoch = batches_per_epoch or len(batches)
        total = config.tta_epochs * batches_per_epoch
        for batch in batches:
            tau = tau_schedule(step, total, config.tau_start, config.tau_end)
            le_value = 0.0
            if config.use_ala and opt_theta is not None:
                for _ in range(config.theta_steps):
                    with Tape():
                        loss, le, *_ = _gapgc_forward(b, batch, config, tau, rng, parameter_free)
                        objective = ad.add(loss, ad.mul(le, config.lam))
                        grads = backward(objective, theta)
                    _check_finite(objective.item(), "augmenter objective", step)
                    opt_theta.step(grads, ascent=True)
            for _ in range(config.phi_steps):
                with Tape():
                    loss, le, weights, positives, entropy = _gapgc_forward(b, batch, config, tau, rng, parameter_free)
                    grads = backward(loss, opt_phi.params)
                _check_finite(loss.item(), "contrastive loss", step)
                opt_phi.step(grads)
                le_value = le.item()
                report.add(StepRecord(
                    step=step, loss=loss.item(), le=le_value, objective=loss.item() + config.lam * le_value,
                    entropy=entropy, weight_mean=float(weights.data.mean()) if weights.size else float("nan"),
                    weight_min=float(weights.data.min()) if weights.size else float("nan"),
                    weight_max=float(weights.data.max()) if weights.size else float("nan"),
                    positives_mean=float(positives.sum(axis=1).mean()),
                ))
                step += 1
    finalize_statistics(b, graphs, config)
    return b, report


def finalize_statistics(b: ModelBundle, graphs: Sequence[Graph], config: TTAConfig) -> None:
    """Methods that adapt under batch statistics leave the bundle normalizing
    with the statistics of all graphs they adapted on."""
    if config.recalibrate_bn and config.bn_mode == "batch" and len(graphs) >= 2:
        set_bn_statistics(b, GraphBatch(graphs))


# ---------------------------------------------------------------- Tent / SHOT


def adapt_tent(bundle: ModelBundle, graphs: Sequence[Graph], config: TTAConfig):
    """Entropy minimization on the normalization scale/shift parameters only."""
    if not graphs:
        raise ContractError("empty test split")
    b = bundle.clone()
    rng = np.random.default_rng(config.seed)
    opt = Adam(b.params.select(bn_param_names(b.params)), config.lr, config.weight_decay)
    report = AdaptReport("tent")
    step = 0
    for _ in range(config.tta_epochs):
        for batch in make_batches(graphs, config.batch_size, rng):
            for _ in range(max(config.phi_steps, 1)):
                with Tape():
                    loss = mean_task_entropy(b.forward(batch, bn_mode=config.bn_mode))
                    grads = backward(loss, opt.params)
                _check_finite(loss.item(), "entropy", step)
                opt.step(grads)
                report.add(StepRecord(step, loss.item(), 0.0, loss.item(), loss.item()))
                step += 1
    finalize_statistics(b, graphs, config)
    return b, report


def shot_loss(logits, beta: float):
    """``H_cond - H_marg + beta * CE(hard pseudo-labels)`` and its parts."""
    h_cond = mean_task_entropy(logits)
    p_mean = ad.mean_axis(ad.sigmoid(logits), axis=0)
    h_marg = ad.sum_axis(ad.neg(ad.add(ad.mul(p_mean, ad.log(p_mean)),
                                       ad.mul(ad.sub(1.0, p_mean), ad.log(ad.sub(1.0, p_mean))))))
    loss = ad.sub(h_cond, h_marg)
    if beta:
        y = pseudo_label(logits).astype(np.float64)
        ce = ad.mean_axis(ad.sum_axis(ad.sub(ad.softplus(logits), ad.mul(logits, y)), axis=1))
        loss = ad.add(loss, ad.mul(ce, beta))
    return loss, h_cond, h_marg


def adapt_shot(bundle: ModelBundle, graphs: Sequence[Graph], config: TTAConfig):
    """SHOT-lite on the encoder with the classifier frozen."""
    if not graphs:
        raise ContractError("empty test split")
    b = bundle.clone()
    b.params.set_trainable("phi2", False)
    rng = np.random.default_rng(config.seed)
    opt = Adam(b.params.select(b.params.names("phi1")), config.lr, config.weight_decay)
    report = AdaptReport("shot")
    step = 0
    for _ in range(config.tta_epochs):
        for batch in make_batches(graphs, config.batch_size, rng):
            for _ in range(max(config.phi_steps, 1)):
                with Tape():
                    loss, h_cond, _ = shot_loss(b.forward(batch, bn_mode=config.bn_mode), config.shot_beta)
                    grads = backward(loss, opt.params)
                _check_finite(loss.item(), "SHOT loss", step)
                opt.step(grads)
                report.add(StepRecord(step, loss.item(), 0.0, loss.item(), h_cond.item()))
                step += 1
    finalize_statistics(b, graphs, config)
    return b, report


def adapt(bundle: ModelBundle, graphs: Sequence[Graph], config: TTAConfig):
    """Dispatch on ``config.method``; ``none`` returns an untouched clone."""
    if config.method == "none":
        return bundle.clone(), AdaptReport("none")
    if config.method in ("gapgc", "pf_gapgc"):
        return adapt_gapgc(bundle, graphs, config)
    if config.method == "tent":
        return adapt_tent(bundle, graphs, config)
    if config.method == "shot":
        return adapt_shot(bundle, graphs, config)
    if config.method == "bn":
        return adapt_bn(bundle, graphs, replace(config, batch_size=max(len(graphs), 2)))
    raise ConfigError(f"unknown method {config.method!r}")
