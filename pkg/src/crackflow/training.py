"""Training: class-balanced edge loss, AdamW, schedule, epoch loop.

The loss weights each map's classes by their own frequencies: with
N = |Y+| + |Y-|, the negative term carries alpha = gamma + |Y+|/N and
the positive term carries beta = lambda * |Y-|/N, so the rare edge
pixels dominate. With gamma = 0 an all-negative map yields a zero
weight on its only term; gamma > 0 keeps no-crack frames informative.

The optimizer is AdamW with decoupled decay: the decay pulls directly
on the parameter, never through the moment estimates. A non-finite
gradient rejects the whole step so a single bad batch cannot poison
the moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import AugmentationConfig, augment, load_flow, load_manifest, load_pair
from .errors import DataError, NumericError
from .metrics import confusion_at_threshold
from .model import NetworkConfig, cascade_forward, normalize_image
from .tensor import Tape, Tensor

_CLAMP = 1e-7


@dataclass
class LossConfig:
    gamma: float = 0.0
    lam: float = 1.1

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")


def class_weights(gt: np.ndarray, cfg: LossConfig):
    """(alpha, beta) for one binary map: negative and positive term weights."""
    mask = np.asarray(gt) != 0
    n_pos = int(np.count_nonzero(mask))
    n = mask.size
    alpha = cfg.gamma + n_pos / n
    beta = cfg.lam * (n - n_pos) / n
    return alpha, beta


def class_balanced_bce(pred: np.ndarray, gt: np.ndarray, cfg: LossConfig):
    """Loss and its gradient with respect to pre-sigmoid activations.

    pred holds probabilities (the sigmoid output). The returned gradient
    is analytic in the activations: alpha*p on negatives, -beta*(1-p) on
    positives, which stays finite even for saturated probabilities.
    """
    p = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(gt) != 0
    if p.shape != mask.shape:
        raise ValueError(f"prediction {p.shape} does not match labels {mask.shape}")
    alpha, beta = class_weights(gt, cfg)
    safe = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    loss = -(alpha * np.sum(np.log(1.0 - safe[~mask]))
             + beta * np.sum(np.log(safe[mask])))
    grad = np.where(mask, -beta * (1.0 - p), alpha * p)
    return float(loss), grad


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int
    beta1: float
    beta2: float
    weight_decay: float
    eps: float


def init_optimizer(params: dict, beta1: float = 0.9, beta2: float = 0.999,
                   weight_decay: float = 1e-4, eps: float = 1e-8) -> OptimizerState:
    m = {k: np.zeros_like(t.data) for k, t in params.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.items()}
    return OptimizerState(m=m, v=v, step=0, beta1=beta1, beta2=beta2,
                          weight_decay=weight_decay, eps=eps)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """One decoupled-decay Adam update, applied in place.

    The step is all-or-nothing: gradients are checked before anything
    mutates, so a rejected step leaves parameters and moments untouched.
    """
    for name in params:
        if name not in grads:
            raise ValueError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != params[name].data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter "
                             f"shape {params[name].data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step rejected")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * (update + state.weight_decay * p.data).astype(p.data.dtype)
    return params, state


def lr_at(epoch: int, base: float = 5e-5, period: int = 5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if period < 1:
        raise ValueError("period must be at least 1")
    return base / (2.0 ** (epoch // period))


@dataclass
class TrainConfig:
    batch_size: int = 6
    epochs: int = 40
    base_lr: float = 5e-5
    halve_every: int = 5
    val_threshold: float = 0.5
    seed: int = 0
    flow_weight: float = 0.0  # optional true-flow supervision on network 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not (0 < self.val_threshold < 1):
            raise ValueError("val_threshold must be in (0, 1)")


@dataclass
class LogEntry:
    epoch: int
    lr: float
    train_loss: float
    val_f1: float
    is_best: bool


@dataclass
class TrainingLog:
    entries: list = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return next(e.epoch for e in reversed(self.entries) if e.is_best)


def format_training_log(log: TrainingLog) -> str:
    lines = ["epoch, lr, train_loss, val_f1, is_best"]
    for e in log.entries:
        lines.append(f"{e.epoch}, {e.lr!r}, {e.train_loss!r}, "
                     f"{e.val_f1!r}, {int(e.is_best)}")
    return "\n".join(lines) + "\n"


def _clone_weights(weights: dict) -> dict:
    return {k: Tensor(t.data.copy(), requires_grad=True, name=t.name)
            for k, t in weights.items()}


def validate_f1(weights: dict, net_cfg: NetworkConfig, pairs,
                threshold: float) -> float:
    """Pooled F-1 over the pairs at one fixed threshold."""
    tp = fp = fn = 0
    for pair in pairs:
        ref = Tensor(normalize_image(pair.reference))
        de = Tensor(normalize_image(pair.deformed))
        out = cascade_forward(None, weights, net_cfg, ref, de)
        a, b, c = confusion_at_threshold(out.prob.data[0, 0],
                                         np.asarray(pair.gt), threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    p = 1.0 if tp + fp == 0 else tp / (tp + fp)
    r = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _flow_sidecar(manifest_path, entry):
    p = Path(manifest_path).parent / entry.def_path
    return p.with_suffix(".flo")


def _load_training_set(manifest_path, flow_weight):
    manifest = load_manifest(manifest_path)
    if not manifest.entries:
        raise DataError(f"{manifest_path}: manifest has no entries")
    pairs, flows = [], []
    for entry in manifest.entries:
        pair = load_pair(manifest_path, entry)
        if pair.gt is None:
            raise DataError(f"{manifest_path}: entry {entry.sequence_id}/"
                            f"{entry.frame_index} has no ground truth")
        pairs.append(pair)
        side = _flow_sidecar(manifest_path, entry)
        flows.append(load_flow(side) if flow_weight > 0 and side.exists() else None)
    return pairs, flows


def _pair_step(tape, weights, net_cfg, pair, flow, loss_cfg, flow_weight):
    """Forward + backward for one pair; returns the scalar loss."""
    ref = Tensor(normalize_image(pair.reference))
    de = Tensor(normalize_image(pair.deformed))
    out = cascade_forward(tape, weights, net_cfg, ref, de)
    prob = out.prob.data[0, 0]
    loss, dz = class_balanced_bce(prob, np.asarray(pair.gt), loss_cfg)
    seeds = [(out.logits, dz[None, None])]
    if flow is not None and flow_weight > 0:
        fu, fv = flow
        target = np.stack([fu, fv])[None]
        diff = out.flow2.data - target
        loss += flow_weight * float(np.mean(np.square(diff)))
        seeds.append((out.flow2, flow_weight * 2.0 * diff / diff.size))
    tape.backward(seeds)
    return loss


def train(weights: dict, net_cfg: NetworkConfig, train_manifest, val_manifest,
          train_cfg: TrainConfig, loss_cfg: LossConfig | None = None,
          aug_cfg: AugmentationConfig | None = None):
    """Epoch loop; returns (best-validation weights, TrainingLog).

    `weights` is updated in place, so after the call it holds the
    last-epoch parameters while the returned dict holds the best ones.
    Optional flow supervision reads a `<deformed stem>.flo` sidecar next
    to each deformed image when train_cfg.flow_weight > 0.
    """
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    pairs, flows = _load_training_set(train_manifest, train_cfg.flow_weight)
    val_manifest_data = load_manifest(val_manifest)
    if not val_manifest_data.entries:
        raise DataError(f"{val_manifest}: manifest has no entries")
    val_pairs = [load_pair(val_manifest, e) for e in val_manifest_data.entries]
    for i, pair in enumerate(val_pairs):
        if pair.gt is None:
            raise DataError(f"{val_manifest}: entry {i} has no ground truth")

    root = np.random.SeedSequence(train_cfg.seed)
    rng_order, rng_aug = (np.random.default_rng(s) for s in root.spawn(2))
    state = init_optimizer(weights)
    log = TrainingLog()
    best_f1 = -1.0
    best_weights = _clone_weights(weights)

    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.base_lr, train_cfg.halve_every)
        order = rng_order.permutation(len(pairs))
        losses = []
        for b0 in range(0, len(order), train_cfg.batch_size):
            batch = order[b0 : b0 + train_cfg.batch_size]
            for t in weights.values():
                t.zero_grad()
            for j in batch:
                pair = pairs[j]
                if aug_cfg is not None:
                    pair = augment(pair, aug_cfg, rng_aug)
                tape = Tape()
                loss = _pair_step(tape, weights, net_cfg, pair, flows[j],
                                  loss_cfg, train_cfg.flow_weight)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, "
                                       f"batch {b0 // train_cfg.batch_size}")
                losses.append(loss)
            grads = {k: t.grad / len(batch) for k, t in weights.items()}
            adamw_step(weights, grads, state, lr)
        val_f1 = validate_f1(weights, net_cfg, val_pairs, train_cfg.val_threshold)
        is_best = val_f1 > best_f1
        if is_best:
            best_f1 = val_f1
            best_weights = _clone_weights(weights)
        log.entries.append(LogEntry(epoch=epoch, lr=lr,
                                    train_loss=float(np.mean(losses)),
                                    val_f1=val_f1, is_best=is_best))
    return best_weights, log
