"""Step localization: align slots to the video with many-to-one Drop-DTW,
zero-shot localization from step-text prompts, and the order-agnostic
nearest-slot baseline.
"""

from __future__ import annotations

import numpy as np

from .align import CostSpec, drop_dtw, match_cost_matrix, normalize_rows, percentile_drop_cost
from .core import BACKGROUND, Correspondence, DataError, EmbeddingSequence, SegmentLabeling


def labeling_from_correspondence(corr: Correspondence, labels=None) -> SegmentLabeling:
    """Frame labels carry exactly the matched frames; each surviving row k
    yields one segment spanning its first to last matched column."""
    K, N = corr.match_matrix.shape
    if labels is None:
        labels = list(range(K))
    frame_labels = [BACKGROUND] * N
    segments = []
    for k in range(K):
        cols = np.nonzero(corr.match_matrix[k])[0]
        if cols.size == 0:
            continue
        for j in cols:
            frame_labels[int(j)] = labels[k]
        segments.append((labels[k], int(cols[0]), int(cols[-1])))
    return SegmentLabeling(tuple(frame_labels), tuple(segments))


def localize_steps(slots: EmbeddingSequence, video: EmbeddingSequence,
                   drop_percentile: float = 0.8) -> tuple[SegmentLabeling, Correspondence]:
    """Many-to-one Drop-DTW of slots against frames, drops enabled on both
    sides with the percentile drop cost. All slots dropped is a valid outcome
    and produces an empty labeling."""
    costs = match_cost_matrix(video, slots)
    drop = percentile_drop_cost(costs, drop_percentile)
    corr = drop_dtw(CostSpec(costs, drop, drop), "many_to_one")
    return labeling_from_correspondence(corr), corr


def select_slots_for_steps(slots: EmbeddingSequence, step_texts: EmbeddingSequence,
                           drop_percentile: float = 0.8) -> list[int]:
    """One-to-one Drop-DTW of slots against the ordered step texts, dropping
    only on the slot side: every step text gets exactly one slot. Returns the
    surviving slot indices, ordered so the i-th one matches step i."""
    K, T = slots.length, step_texts.length
    if K < T:
        raise DataError(f"too few slots: {K} slots for {T} steps")
    costs = match_cost_matrix(step_texts, slots)
    drop = percentile_drop_cost(costs, drop_percentile)
    corr = drop_dtw(CostSpec(costs, row_drop_cost=drop, col_drop_cost=None), "one_to_one")
    chosen = [BACKGROUND] * T
    for i, j in corr.matches:
        chosen[j] = i
    if any(c == BACKGROUND for c in chosen):
        raise DataError("alignment failed to cover every step text")
    return chosen


def zero_shot_localize(slots: EmbeddingSequence, step_texts: EmbeddingSequence,
                       video: EmbeddingSequence, drop_percentile: float = 0.8) -> SegmentLabeling:
    """Localize an ordered list of step-text embeddings: pick one slot per
    step, then align the surviving slots to the video. Output labels are step
    indices 0..T-1 (those the video alignment keeps, in increasing order)."""
    chosen = select_slots_for_steps(slots, step_texts, drop_percentile)
    survivors = EmbeddingSequence(slots.data[chosen], "slots")
    labeling, corr = localize_steps(survivors, video, drop_percentile)
    return labeling


def nearest_slot_baseline(slots: EmbeddingSequence, video: EmbeddingSequence,
                          keep: int | None = None) -> SegmentLabeling:
    """Order-agnostic baseline: label every frame with its most similar slot,
    restricted to the `keep` slots whose best frame similarity is highest."""
    K = slots.length
    if keep is None:
        keep = K
    if not (1 <= keep <= K):
        raise DataError(f"keep must lie in 1..{K}")
    sims = normalize_rows(video.data) @ normalize_rows(slots.data).T  # (N, K)
    if keep < K:
        best = sims.max(axis=0)
        kept = np.sort(np.argsort(-best, kind="stable")[:keep])
    else:
        kept = np.arange(K)
    winner = kept[np.argmax(sims[:, kept], axis=1)]
    return SegmentLabeling.from_frame_labels(winner.tolist())


def zero_shot_nearest_baseline(slots: EmbeddingSequence, step_texts: EmbeddingSequence,
                               video: EmbeddingSequence, drop_percentile: float = 0.8) -> SegmentLabeling:
    """Ablation of zero_shot_localize with the order-agnostic frame assignment
    in place of the video alignment stage."""
    chosen = select_slots_for_steps(slots, step_texts, drop_percentile)
    survivors = EmbeddingSequence(slots.data[chosen], "slots")
    return nearest_slot_baseline(survivors, video, keep=len(chosen))
