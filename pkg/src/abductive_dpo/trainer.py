"""MLE pre-training and preference fine-tuning loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .lm import LmPolicy, batch_log_prob_sums
from .losses import LossSpec, combine_multitask, preference_loss

log = logging.getLogger(__name__)

DYNAMICS_COLUMNS = (
    "step",
    "epoch",
    "logp_chosen_std",
    "logp_rejected_std",
    "logp_chosen_abd",
    "logp_rejected_abd",
    "loss",
    "grad_norm",
)


class TrainingDiverged(ArithmeticError):
    pass


class DatasetMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    epochs: int = 5
    lr: float = 2e-3
    batch_size: int = 8
    grad_accum: int = 1
    max_grad_norm: float = 1.0
    warmup_ratio: float = 0.1
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("epochs, batch_size and grad_accum must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossSpec(**d["loss"])
        if "adam" in d and isinstance(d["adam"], dict):
            d["adam"] = AdamConfig(**d["adam"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with decoupled weight decay, operating in place on leaf tensors."""

    def __init__(self, params: Sequence[T.Tensor], cfg: AdamConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if lr == 0.0:
                continue
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = p.data - lr * (update + c.weight_decay * p.data)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to ``base_lr`` then constant; ``step`` counts from 0."""
    warm = math.ceil(warmup_ratio * total_steps)
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    return base_lr


def global_grad_norm(params: Sequence[T.Tensor]) -> float:
    sq = [float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None]
    return math.sqrt(math.fsum(sq))


def clip_gradients(params: Sequence[T.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _check_trainable(policy: LmPolicy):
    if policy.frozen:
        raise ValueError("cannot train a frozen policy")


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _optimizer_steps(n_items: int, cfg: TrainConfig) -> int:
    micro = math.ceil(n_items / cfg.batch_size)
    return math.ceil(micro / cfg.grad_accum)


# ---------------------------------------------------------------- MLE


def mle_loss(policy: LmPolicy, pairs: Sequence[tuple]) -> T.Tensor:
    """Mean per-token negative log-likelihood of responses given prompts."""
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    n_tok = float(sum(len(y) for y in ys))
    return T.scalar_mul(T.sum(policy.log_prob_sums(xs, ys)), -1.0 / n_tok)


def corpus_nll(policy: LmPolicy, pairs: Sequence[tuple]) -> float:
    lp = batch_log_prob_sums(policy, [p[0] for p in pairs], [p[1] for p in pairs])
    return float(-lp.sum() / sum(len(p[1]) for p in pairs))


def pretrain_mle(policy: LmPolicy, corpus: Sequence[tuple], cfg: TrainConfig) -> list[float]:
    """Conditional MLE on ``(prompt, response)`` pairs, in place.

    Returns the per-step training losses.  Raises :class:`TrainingDiverged` if the
    loss stops being finite.
    """
    _check_trainable(policy)
    if not corpus:
        raise ValueError("empty pre-training corpus")
    params = policy.parameters()
    opt = Adam(params, cfg.adam)
    rng = np.random.default_rng([cfg.seed, 11])
    total = cfg.epochs * _optimizer_steps(len(corpus), cfg)
    losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        micro = _batches(len(corpus), cfg.batch_size, rng)
        for start in range(0, len(micro), cfg.grad_accum):
            group = micro[start : start + cfg.grad_accum]
            policy.zero_grad()
            step_loss = 0.0
            for idx in group:
                try:
                    loss = mle_loss(policy, [corpus[i] for i in idx])
                except T.NumericFault as exc:
                    raise TrainingDiverged(f"MLE diverged at epoch {epoch} step {step}: {exc}") from exc
                T.backward(T.scalar_mul(loss, 1.0 / len(group)))
                step_loss += loss.item() / len(group)
            clip_gradients(params, cfg.max_grad_norm)
            opt.step(lr_at(step, total, cfg.lr, cfg.warmup_ratio))
            losses.append(step_loss)
            step += 1
        log.debug("mle epoch %d loss %.4f", epoch, losses[-1])
    return losses


# ---------------------------------------------------------------- preference fine-tuning


@dataclass
class DynamicsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("dynamics rows must have increasing step index")
        self.rows.append({k: row[k] for k in DYNAMICS_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def epoch_means(self) -> list[dict]:
        """Average every column over the optimizer steps of each (1-based) epoch."""
        out: dict[int, list[dict]] = {}
        for r in self.rows:
            out.setdefault(int(math.ceil(r["epoch"] - 1e-9)), []).append(r)
        means = []
        for ep in sorted(out):
            rs = out[ep]
            m = {k: float(np.mean([r[k] for r in rs])) for k in DYNAMICS_COLUMNS if k not in ("step", "epoch")}
            m["epoch"] = ep
            means.append(m)
        return means

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DYNAMICS_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in DYNAMICS_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "DynamicsLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != DYNAMICS_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            rows = [{k: (int(r[k]) if k == "step" else float(r[k])) for k in DYNAMICS_COLUMNS} for r in reader]
        return cls(rows)


def _views(records):
    """Unpack records into (x, y_w, y_l, x_w); raise if a view is unavailable."""
    xs, yws, yls, xws = [], [], [], []
    for r in records:
        if not (hasattr(r, "response_pair") and hasattr(r, "prompt_pair")):
            raise DatasetMismatch(
                f"fine-tuning needs records exposing both pair views, got {type(r).__name__}"
            )
        x, yw, yl = r.response_pair()
        xw, xl, y = r.prompt_pair()
        if xl is not x or y is not yl:
            # the abductive rejected pair must be the standard rejected pair
            raise DatasetMismatch(f"record {getattr(r, 'id', '?')}: prompt-pair view does not share (x, y_l)")
        xs.append(x)
        yws.append(yw)
        yls.append(yl)
        xws.append(xw)
    return xs, yws, yls, xws


def reference_logps(ref: LmPolicy, records) -> np.ndarray:
    """(n, 3) array of ref log pi for (x, y_w), (x, y_l) and (x_w, y_l)."""
    xs, yws, yls, xws = _views(records)
    n = len(xs)
    lp = batch_log_prob_sums(ref, xs * 2 + xws, yws + yls + yls)
    return np.stack([lp[:n], lp[n : 2 * n], lp[2 * n :]], axis=1)


def batch_objective(policy: LmPolicy, spec: LossSpec, records, ref_lp: np.ndarray):
    """Loss on a batch of records plus the three policy log-likelihood vectors.

    One forward pass scores (x, y_w), (x, y_l) and (x_w, y).  The abductive
    rejected term reuses the (x, y_l) node: it is the same quantity.
    """
    xs, yws, yls, xws = _views(records)
    n = len(xs)
    lp = policy.log_prob_sums(xs * 2 + xws, yws + yls + yls)
    lp_w = T.index(lp, slice(0, n))
    lp_l = T.index(lp, slice(n, 2 * n))
    lp_abd_w = T.index(lp, slice(2 * n, 3 * n))
    ld = spec.lambda_dpop if spec.objective == "dpop" else 0.0
    lam = {"standard": 1.0, "abductive": 0.0}.get(spec.direction, spec.lambda_multi)
    std = preference_loss(lp_w, lp_l, ref_lp[:, 0], ref_lp[:, 1], spec.beta, ld) if lam > 0 else None
    abd = preference_loss(lp_abd_w, lp_l, ref_lp[:, 2], ref_lp[:, 1], spec.beta, ld) if lam < 1 else None
    return combine_multitask(std, abd, lam), (lp_w.data, lp_l.data, lp_abd_w.data)


def finetune(policy: LmPolicy, ref: LmPolicy, dataset, cfg: TrainConfig, on_epoch=None):
    """Preference fine-tuning of ``policy`` in place; returns ``(policy, DynamicsLog)``.

    ``on_epoch(epoch, policy)`` is called after every epoch (1-based), which is how
    the ablation runners evaluate per-epoch checkpoints.
    """
    _check_trainable(policy)
    if not ref.frozen:
        raise ValueError("reference policy must be frozen (use clone_frozen)")
    records = list(dataset)
    if not records:
        raise ValueError("empty preference dataset")
    spec = cfg.loss
    ref_lp = reference_logps(ref, records)
    params = policy.parameters()
    opt = Adam(params, cfg.adam)
    rng = np.random.default_rng([cfg.seed, 17])
    steps_per_epoch = _optimizer_steps(len(records), cfg)
    total = cfg.epochs * steps_per_epoch
    dyn = DynamicsLog()
    step = 0
    for epoch in range(cfg.epochs):
        micro = _batches(len(records), cfg.batch_size, rng)
        for start in range(0, len(micro), cfg.grad_accum):
            group = micro[start : start + cfg.grad_accum]
            policy.zero_grad()
            n_items = sum(len(idx) for idx in group)
            acc = np.zeros(3)
            step_loss = 0.0
            for idx in group:
                batch = [records[i] for i in idx]
                try:
                    loss, lps = batch_objective(policy, spec, batch, ref_lp[idx])
                except T.NumericFault as exc:
                    raise TrainingDiverged(f"fine-tuning diverged at epoch {epoch + 1} step {step}: {exc}") from exc
                T.backward(T.scalar_mul(loss, 1.0 / len(group)))
                step_loss += loss.item() / len(group)
                acc += [float(np.sum(v)) for v in lps]
            norm = clip_gradients(params, cfg.max_grad_norm)
            if not math.isfinite(norm):
                raise TrainingDiverged(f"non-finite gradient norm at step {step}")
            opt.step(lr_at(step, total, cfg.lr, cfg.warmup_ratio))
            means = acc / n_items
            dyn.append(
                step=step,
                epoch=(step + 1) / steps_per_epoch,
                logp_chosen_std=means[0],
                logp_rejected_std=means[1],
                logp_chosen_abd=means[2],
                logp_rejected_abd=means[1],
                loss=step_loss,
                grad_norm=norm,
            )
            step += 1
        if on_epoch is not None:
            on_epoch(epoch + 1, policy)
    return policy, dyn
