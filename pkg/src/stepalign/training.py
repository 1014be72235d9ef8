"""Optimization loop: linear warmup + cosine decay, Adam with decoupled weight
decay, per-batch losses with the global contrastive term coupling the batch.

Everything random (sample order, dropout, smoothness sampling) is driven by a
single seeded generator, so a (config, seed, dataset) triple reproduces the
final parameters bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .core import DataError, NumericalError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    peak_lr: float = 3e-4
    final_lr: float = 1e-6
    weight_decay: float = 1e-4
    batch_size: int = 8
    drop_percentile: float = 0.8
    seed: int = 0
    contrastive: L.ContrastiveConfig = field(default_factory=L.ContrastiveConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    # scale factors for ablation runs; 1.0 reproduces the full objective
    seq_weight: float = 1.0
    glob_weight: float = 1.0
    checkpoint_every: int = 0  # epochs between checkpoints, 0 = final only

    def __post_init__(self):
        if not (0 <= self.warmup_epochs < self.epochs):
            raise DataError("warmup_epochs must be < epochs")
        if not (self.peak_lr > self.final_lr > 0):
            raise DataError("need peak_lr > final_lr > 0")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to peak over the warmup epochs, then cosine decay
    from peak to final over the remaining steps."""
    if step < 0:
        raise DataError("step must be >= 0")
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return cfg.peak_lr * step / warmup
    last = total - 1
    if last <= warmup:
        return cfg.peak_lr
    phase = min(1.0, (step - warmup) / (last - warmup))
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * phase))


class AdamW:
    """Adam with decoupled multiplicative weight decay.

    The decay shrinks parameters by (1 - weight_decay) each step independently
    of the learning rate, so lr = 0 still decays while wd = 0 plus lr = 0
    leaves parameters bit-identical.
    """

    def __init__(self, params: M.ModelParams, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.tensors.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.weight_decay
            if lr:
                mhat = self.m[name] / bias1
                vhat = self.v[name] / bias2
                p -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class StepLog:
    step: int
    lr: float
    loss: L.LossBreakdown

    def to_json_dict(self) -> dict:
        b = self.loss
        return {"step": self.step, "seq": b.seq, "glob": b.glob, "div": b.div,
                "smooth": b.smooth, "total": b.total,
                "matched_pairs": b.matched_pairs, "lr": self.lr}


@dataclass
class TrainResult:
    params: M.ModelParams
    log: list


def _batch_losses(params_nodes, cfg: TrainConfig, batch, rng):
    """Per-batch objective; returns (total tensor, LossBreakdown)."""
    cc = cfg.contrastive
    batch_slots, batch_phrases = [], []
    seq_terms, div_terms, smooth_terms = [], [], []
    matched = 0
    for sample in batch:
        slots = M.forward_nodes(params_nodes, cfg.model, sample.video.data,
                                training=True, rng=rng)
        batch_slots.append(slots)
        batch_phrases.append(ad.constant(sample.phrases.data))

        if cfg.seq_weight != 0.0:
            term, corr = L.seq_loss(slots, sample.phrases.data,
                                    cc.gamma_contrastive, cfg.drop_percentile)
            seq_terms.append(ad.mul(term, cfg.seq_weight))
            matched += corr.num_matches
        div_terms.append(L.diversity_reg(slots))

        n_frames = sample.video.length
        if n_frames > 2 * cc.neighborhood:
            attention = M.attention_tensor(sample.video.data, slots, cc.gamma_attention)
            smooth_terms.append(L.smoothness_reg(
                attention, cc.neighborhood, min(cc.sample_count, n_frames),
                cc.gamma_contrastive, rng=rng))
        else:
            smooth_terms.append(ad.constant(0.0))

    def batch_mean(terms):
        if not terms:
            return ad.constant(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / len(batch))

    seq_term = batch_mean(seq_terms)
    glob_term = ad.constant(0.0)
    if cfg.glob_weight != 0.0 and len(batch) > 1:
        glob_term = ad.mul(L.global_loss(batch_slots, batch_phrases, cc.gamma_contrastive),
                           cfg.glob_weight)
    div_term = batch_mean(div_terms)
    smooth_term = batch_mean(smooth_terms)

    total = L.combine_losses(seq_term, glob_term, div_term, smooth_term, cc.alpha, cc.beta)
    bd = L.total_loss(float(seq_term.data), float(glob_term.data), float(div_term.data),
                      float(smooth_term.data), cc.alpha, cc.beta, matched_pairs=matched)
    return total, bd


def train(dataset, cfg: TrainConfig, checkpoint_callback=None) -> TrainResult:
    """Train a fresh model on `dataset`; returns final parameters and the
    per-step loss log. `checkpoint_callback(epoch, params, step)` fires every
    cfg.checkpoint_every epochs when set."""
    if not dataset:
        raise DataError("empty dataset")
    for sample in dataset:
        if sample.video.dim != cfg.model.dim:
            raise DataError(f"{sample.id}: dim {sample.video.dim} != model dim {cfg.model.dim}")

    rng = np.random.default_rng(cfg.seed)
    params = M.init_params(cfg.model, seed=cfg.seed)
    optimizer = AdamW(params, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            tape = ad.Tape()
            nodes = M.param_nodes(params, tape)
            total, bd = _batch_losses(nodes, cfg, batch, rng)
            if not math.isfinite(bd.total):
                raise NumericalError(f"non-finite total loss at step {step}: {bd}")
            grads = ad.backward(tape, total, nodes)
            lr = lr_at(step, steps_per_epoch, cfg)
            optimizer.step(grads, lr)
            for name, arr in params.tensors.items():
                if not np.isfinite(arr).all():
                    raise NumericalError(f"parameter {name!r} became non-finite at step {step}")
            log.append(StepLog(step=step, lr=lr, loss=bd))
            step += 1
        if checkpoint_callback and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_callback(epoch + 1, params, step)
    return TrainResult(params=params, log=log)
