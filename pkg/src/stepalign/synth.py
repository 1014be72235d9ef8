"""Synthetic instructional-video generator.

Tasks get well-separated unit prototype vectors; each video lays a random
subsequence of its task's steps over a timeline padded with background frames
drawn near a shared irrelevant subspace. Phrases mix the present prototypes
(in order) with distractors. Everything is planted, so ground-truth segments,
ordered step texts, and phrase relevance come for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, DatasetSample, EmbeddingSequence

MAX_SEPARATION_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 32
    num_tasks: int = 4
    steps_per_task: int = 6
    videos_per_task: int = 30
    frames_range: tuple = (40, 80)
    step_len_range: tuple = (4, 8)
    background_ratio: float = 0.5
    distractor_phrase_ratio: float = 0.5
    noise_sigma: float = 0.1
    step_presence_prob: float = 0.85
    max_cosine: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.frames_range[0] > self.frames_range[1] or self.step_len_range[0] > self.step_len_range[1]:
            raise DataError("ranges must be ordered (min, max)")
        if self.step_len_range[0] < 1:
            raise DataError("steps need at least one frame")
        for name in ("background_ratio", "distractor_phrase_ratio", "step_presence_prob"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise DataError(f"{name} must lie in [0, 1]")
        if self.background_ratio >= 1.0 or self.distractor_phrase_ratio >= 1.0:
            raise DataError("background_ratio and distractor_phrase_ratio must be < 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _separated_unit_vectors(rng, count, dim, existing, max_cosine):
    """Rejection-sample unit vectors whose pairwise cosine with everything in
    `existing` and each other stays at or below max_cosine."""
    chosen = []
    pool = list(existing)
    for _ in range(count):
        for attempt in range(MAX_SEPARATION_ATTEMPTS):
            cand = _unit(rng.normal(size=dim))
            if all(float(cand @ other) <= max_cosine for other in pool):
                chosen.append(cand)
                pool.append(cand)
                break
        else:
            raise DataError(f"cannot satisfy separation {max_cosine} at dim {dim}")
    return chosen


def _noisy(rng, base: np.ndarray, sigma: float) -> np.ndarray:
    noise = rng.normal(size=base.shape)  # always drawn, keeps streams aligned
    if sigma == 0.0:
        return base.copy()
    return _unit(base + sigma * noise)


def generate(cfg: SynthConfig):
    """Build the dataset; returns (samples, prototypes) where prototypes maps
    task name -> (steps_per_task, dim) array of clean step vectors."""
    rng = np.random.default_rng(cfg.seed)
    prototypes = {}
    all_protos = []
    for t in range(cfg.num_tasks):
        protos = _separated_unit_vectors(rng, cfg.steps_per_task, cfg.dim, [], cfg.max_cosine)
        prototypes[f"task{t}"] = np.stack(protos)
        all_protos.extend(protos)
    bg_dim = max(2, cfg.dim // 8)
    bg_basis = np.stack(_separated_unit_vectors(rng, bg_dim, cfg.dim, all_protos, cfg.max_cosine))

    def background_frame():
        return _unit(rng.normal(size=bg_dim) @ bg_basis)

    samples = []
    for t in range(cfg.num_tasks):
        task = f"task{t}"
        protos = prototypes[task]
        for v in range(cfg.videos_per_task):
            present = [s for s in range(cfg.steps_per_task)
                       if rng.random() < cfg.step_presence_prob]
            if not present:
                present = [int(rng.integers(cfg.steps_per_task))]

            lengths = [int(rng.integers(cfg.step_len_range[0], cfg.step_len_range[1] + 1))
                       for _ in present]
            step_frames = sum(lengths)
            ratio = cfg.background_ratio
            bg_total = round(step_frames * ratio / (1.0 - ratio))
            n_frames = step_frames + bg_total
            lo, hi = cfg.frames_range
            if n_frames < lo and ratio > 0.0:
                bg_total += lo - n_frames
            elif n_frames > hi:
                bg_total = max(0, bg_total - (n_frames - hi))
            n_frames = step_frames + bg_total
            if n_frames > hi:
                raise DataError(f"step content alone exceeds frames_range: {n_frames} > {hi}")

            gaps = rng.multinomial(bg_total, np.full(len(present) + 1, 1.0 / (len(present) + 1)))
            frames = np.empty((n_frames, cfg.dim))
            gt_segments = []
            cursor = 0
            for slot, (step, length) in enumerate(zip(present, lengths)):
                for _ in range(gaps[slot]):
                    frames[cursor] = _noisy(rng, background_frame(), cfg.noise_sigma)
                    cursor += 1
                start = cursor
                for _ in range(length):
                    frames[cursor] = _noisy(rng, protos[step], cfg.noise_sigma)
                    cursor += 1
                gt_segments.append((step, start, cursor - 1))
            for _ in range(gaps[-1]):
                frames[cursor] = _noisy(rng, background_frame(), cfg.noise_sigma)
                cursor += 1
            assert cursor == n_frames

            n_real = len(present)
            dr = cfg.distractor_phrase_ratio
            n_distract = round(n_real * dr / (1.0 - dr))
            total_phrases = n_real + n_distract
            distractor_positions = set(
                rng.choice(total_phrases, size=n_distract, replace=False).tolist()) if n_distract else set()
            phrases = np.empty((total_phrases, cfg.dim))
            relevance = []
            real_iter = iter(present)
            for pos in range(total_phrases):
                if pos in distractor_positions:
                    phrases[pos] = _unit(rng.normal(size=cfg.dim))
                    relevance.append(False)
                else:
                    phrases[pos] = _noisy(rng, protos[next(real_iter)], cfg.noise_sigma)
                    relevance.append(True)

            samples.append(DatasetSample(
                id=f"{task}_video{v}",
                video=EmbeddingSequence(frames, "video"),
                phrases=EmbeddingSequence(phrases, "phrases"),
                gt_segments=tuple(gt_segments),
                gt_step_texts=EmbeddingSequence(protos[present], "step_texts"),
                phrase_relevance=tuple(relevance),
                task=task,
            ))
    return samples, prototypes
