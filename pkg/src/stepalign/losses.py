"""Training objectives: sequence-alignment and global contrastive losses plus
the diversity and attention-smoothness regularizers, combined as

    total = seq + glob + alpha * div + beta * smooth

Loss functions operate on autodiff Tensors so they can sit on a tape; plain
arrays are wrapped as constants. The Drop-DTW correspondence inside the
sequence loss is discrete and acts as a constant selector: no gradient flows
through the alignment itself.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .align import CostSpec, drop_dtw, percentile_drop_cost
from .core import DataError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    gamma_contrastive: float = 0.03
    gamma_attention: float = 0.03
    alpha: float = 0.3
    beta: float = 0.02
    neighborhood: int = 3
    sample_count: int = 64

    def __post_init__(self):
        if self.gamma_contrastive <= 0 or self.gamma_attention <= 0:
            raise DataError("temperatures must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise DataError("regularizer weights must be non-negative")
        if self.neighborhood < 1:
            raise DataError("neighborhood must be >= 1")
        if self.sample_count < 1:
            raise DataError("sample_count must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    seq: float
    glob: float
    div: float
    smooth: float
    total: float
    matched_pairs: int


def _rows(value) -> ad.Tensor:
    t = ad.as_tensor(value)
    if t.data.ndim != 2:
        raise DataError(f"expected a (length, dim) array, got shape {t.data.shape}")
    return t


def info_nce(anchor, candidates, positive_index: int, gamma: float) -> ad.Tensor:
    """-log of the positive's share of exp(cos/gamma) mass over all candidates."""
    if gamma <= 0:
        raise DataError("gamma must be positive")
    cands = _rows(candidates)
    n = cands.data.shape[0]
    if not (0 <= positive_index < n):
        raise DataError(f"positive index {positive_index} outside 0..{n - 1}")
    anchor = ad.as_tensor(anchor)
    anchor2d = ad.reshape(anchor, (1, anchor.data.size))
    logits = ad.mul(ad.cosine_matrix(anchor2d, cands), 1.0 / gamma)  # (1, n)
    lse = ad.logsumexp(logits, axis=-1)  # (1,)
    pos = ad.take(logits, [positive_index])
    return ad.reshape(ad.add(lse, ad.mul(pos, -1.0)), ())


def seq_loss(slots, phrases, gamma: float, drop_percentile: float = 0.8,
             correspondence=None):
    """Order-aware contrastive loss over a Drop-DTW matching of slots to phrases.

    Both sides may drop; each matched slot anchors an Info-NCE over all
    phrases, each matched phrase one over all slots, and each direction is
    averaged over its matched anchors. Returns (loss, correspondence); with no
    matches at all the loss is a constant zero. Pass `correspondence` to reuse
    a fixed alignment (it is a constant selector, so gradient checks need it
    pinned).
    """
    slots_t = _rows(slots)
    phrases_t = _rows(phrases)
    K, L = slots_t.data.shape[0], phrases_t.data.shape[0]
    sims = ad.cosine_matrix(slots_t, phrases_t)  # (K, L)
    if correspondence is None:
        costs = -sims.data
        drop = percentile_drop_cost(costs, drop_percentile)
        corr = drop_dtw(CostSpec(costs, drop, drop), "one_to_one")
    else:
        corr = correspondence
    matches = corr.matches
    if not matches:
        logger.debug("seq_loss: no surviving matches, returning 0")
        return ad.constant(0.0), corr

    logits = ad.mul(sims, 1.0 / gamma)
    slot_idx = np.array([i for i, _ in matches])
    phrase_idx = np.array([j for _, j in matches])

    lse_rows = ad.logsumexp(logits, axis=1)  # (K,)
    pos_rows = ad.take(logits, slot_idx * L + phrase_idx)
    slot_dir = ad.mul(ad.sum_(ad.add(ad.take(lse_rows, slot_idx), ad.mul(pos_rows, -1.0))),
                      1.0 / len(matches))

    lse_cols = ad.logsumexp(logits, axis=0)  # (L,)
    pos_cols = pos_rows
    phrase_dir = ad.mul(ad.sum_(ad.add(ad.take(lse_cols, phrase_idx), ad.mul(pos_cols, -1.0))),
                        1.0 / len(matches))
    return ad.add(slot_dir, phrase_dir), corr


def global_loss(batch_slots, batch_phrases, gamma: float) -> ad.Tensor:
    """Batch-level MIL-NCE: slots pull toward their own video's phrases and
    push away from other videos' phrases. Exactly zero for a single video."""
    if len(batch_slots) == 0 or len(batch_slots) != len(batch_phrases):
        raise DataError("batch lists must be non-empty and aligned")
    if gamma <= 0:
        raise DataError("gamma must be positive")
    slot_rows = [_rows(s) for s in batch_slots]
    phrase_rows = [_rows(p) for p in batch_phrases]
    slot_owner = np.concatenate([np.full(t.data.shape[0], b) for b, t in enumerate(slot_rows)])
    phrase_owner = np.concatenate([np.full(t.data.shape[0], b) for b, t in enumerate(phrase_rows)])
    slots_all = ad.concat(slot_rows, axis=0) if len(slot_rows) > 1 else slot_rows[0]
    phrases_all = ad.concat(phrase_rows, axis=0) if len(phrase_rows) > 1 else phrase_rows[0]

    f = ad.exp(ad.mul(ad.cosine_matrix(slots_all, phrases_all), 1.0 / gamma))
    positive = (slot_owner[:, None] == phrase_owner[None, :]).astype(np.float64)
    pos_mass = ad.sum_(ad.mul(f, ad.constant(positive)), axis=1)
    all_mass = ad.sum_(f, axis=1)
    ratios = ad.div(pos_mass, all_mass)
    return ad.mul(ad.log(ad.mean(ratios)), -1.0)


def diversity_reg(slots) -> ad.Tensor:
    """Mean pairwise off-diagonal cosine similarity among the slots."""
    slots_t = _rows(slots)
    K = slots_t.data.shape[0]
    if K < 2:
        logger.debug("diversity_reg: fewer than two slots, returning 0")
        return ad.constant(0.0)
    gram = ad.cosine_matrix(slots_t, slots_t)
    off = 1.0 - np.eye(K)
    return ad.mul(ad.sum_(ad.mul(gram, ad.constant(off))), 1.0 / (K * (K - 1)))


def smoothness_reg(attention, neighborhood: int, samples: int, gamma: float,
                   rng: np.random.Generator | None = None, indices=None) -> ad.Tensor:
    """MIL-NCE over sampled attention rows: neighbors within `neighborhood`
    frames are positives, everything sampled is in the denominator.

    Sampling is uniform without replacement from `rng`; pass `indices` to pin
    the sampled set (finite-difference checks, replays). Anchors with no
    sampled neighbor are skipped; if every anchor is skipped the loss is zero.
    """
    att = _rows(attention)
    N = att.data.shape[0]
    if N <= 2 * neighborhood:
        raise DataError(f"need more than {2 * neighborhood} frames, got {N}")
    if samples > N:
        raise DataError("cannot sample more frames than exist")
    if not np.allclose(att.data.sum(axis=1), 1.0, atol=1e-6):
        raise DataError("attention rows must sum to 1")
    if indices is None:
        if rng is None:
            raise DataError("smoothness_reg needs rng or explicit indices")
        indices = rng.choice(N, size=samples, replace=False)
    indices = np.asarray(indices, dtype=np.intp)

    deltas = np.abs(indices[:, None] - indices[None, :])
    positive = (deltas <= neighborhood) & (deltas > 0)
    keep = positive.any(axis=1)
    if not keep.any():
        logger.debug("smoothness_reg: every sampled anchor lacks neighbors, returning 0")
        return ad.constant(0.0)

    rows = ad.take(att, (indices[:, None] * att.data.shape[1] + np.arange(att.data.shape[1])[None, :]).reshape(-1))
    rows = ad.reshape(rows, (len(indices), att.data.shape[1]))
    f = ad.exp(ad.mul(ad.cosine_matrix(rows, rows), 1.0 / gamma))
    pos_mass = ad.sum_(ad.mul(f, ad.constant(positive.astype(np.float64))), axis=1)
    all_mass = ad.sum_(f, axis=1)
    ratios = ad.div(pos_mass, all_mass)
    kept = ad.take(ratios, np.nonzero(keep)[0])
    return ad.mul(ad.log(ad.mean(kept)), -1.0)


def combine_losses(seq, glob, div, smooth, alpha: float, beta: float) -> ad.Tensor:
    """Tensor-valued weighted sum, same association order as total_loss."""
    tensors = {}
    for name, value in (("seq", seq), ("glob", glob), ("div", div), ("smooth", smooth)):
        t = ad.as_tensor(value)
        if not np.isfinite(t.data).all():
            raise NumericalError(f"loss term {name!r} is not finite")
        tensors[name] = t
    return ad.add(ad.add(ad.add(tensors["seq"], tensors["glob"]),
                         ad.mul(tensors["div"], alpha)),
                  ad.mul(tensors["smooth"], beta))


def total_loss(seq: float, glob: float, div: float, smooth: float,
               alpha: float, beta: float, matched_pairs: int = 0) -> LossBreakdown:
    """Combine the four terms into a LossBreakdown; rejects non-finite parts."""
    for name, value in (("seq", seq), ("glob", glob), ("div", div), ("smooth", smooth)):
        if not math.isfinite(value):
            raise NumericalError(f"loss term {name!r} is not finite")
    total = seq + glob + alpha * div + beta * smooth
    return LossBreakdown(seq=seq, glob=glob, div=div, smooth=smooth,
                         total=total, matched_pairs=matched_pairs)
