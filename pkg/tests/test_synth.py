import dataclasses

import numpy as np
import pytest

from stepalign.core import DataError
from stepalign.synth import SynthConfig, generate

SMALL = SynthConfig(dim=16, num_tasks=2, steps_per_task=4, videos_per_task=5,
                    frames_range=(20, 40), step_len_range=(2, 4), seed=7)


class TestGenerate:
    def test_deterministic(self):
        a, pa = generate(SMALL)
        b, pb = generate(SMALL)
        assert len(a) == len(b) == 10
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.video.data, sb.video.data)
            np.testing.assert_array_equal(sa.phrases.data, sb.phrases.data)
            assert sa.gt_segments == sb.gt_segments
        for task in pa:
            np.testing.assert_array_equal(pa[task], pb[task])

    def test_segments_sorted_and_in_range(self):
        samples, _ = generate(SMALL)
        for s in samples:
            prev_end = -1
            for step_id, start, end in s.gt_segments:
                assert 0 <= start <= end < s.video.length
                assert start > prev_end
                prev_end = end
                assert 0 <= step_id < SMALL.steps_per_task

    def test_relevant_phrases_follow_step_order(self):
        samples, protos = generate(SMALL)
        for s in samples:
            step_order = [step for step, _, _ in s.gt_segments]
            relevant = [i for i, r in enumerate(s.phrase_relevance) if r]
            assert len(relevant) == len(step_order)
            task_protos = protos[s.task]
            for pos, step in zip(relevant, step_order):
                sims = task_protos @ s.phrases.data[pos] / np.linalg.norm(s.phrases.data[pos])
                assert sims.argmax() == step

    def test_clean_frames_equal_prototypes(self):
        cfg = dataclasses.replace(SMALL, noise_sigma=0.0)
        samples, protos = generate(cfg)
        for s in samples[:4]:
            task_protos = protos[s.task]
            for step_id, start, end in s.gt_segments:
                for j in range(start, end + 1):
                    frame = s.video.data[j]
                    cos_own = float(frame @ task_protos[step_id])
                    assert cos_own == pytest.approx(1.0, abs=1e-12)
                    others = np.delete(np.arange(cfg.steps_per_task), step_id)
                    assert (task_protos[others] @ frame <= cfg.max_cosine + 1e-9).all()

    def test_prototype_separation(self):
        _, protos = generate(SMALL)
        for task_protos in protos.values():
            gram = task_protos @ task_protos.T
            off = gram[~np.eye(len(gram), dtype=bool)]
            assert (off <= SMALL.max_cosine + 1e-12).all()

    def test_background_ratio_within_ten_percent(self):
        samples, _ = generate(SynthConfig(seed=3))
        total = sum(s.video.length for s in samples)
        steps = sum(end - start + 1 for s in samples for _, start, end in s.gt_segments)
        bg_fraction = 1.0 - steps / total
        assert abs(bg_fraction - 0.5) <= 0.05

    def test_degenerate_clean_case(self):
        cfg = dataclasses.replace(
            SMALL, noise_sigma=0.0, background_ratio=0.0, distractor_phrase_ratio=0.0,
            step_presence_prob=1.0)
        samples, protos = generate(cfg)
        for s in samples[:3]:
            task_protos = protos[s.task]
            assert all(r for r in s.phrase_relevance)
            cursor = 0
            for step_id, start, end in s.gt_segments:
                assert start == cursor  # no background anywhere
                cursor = end + 1
                np.testing.assert_array_equal(s.video.data[start], task_protos[step_id])
            assert cursor == s.video.length
            np.testing.assert_array_equal(s.phrases.data, task_protos[[g[0] for g in s.gt_segments]])

    def test_gt_step_texts_are_clean_prototypes(self):
        samples, protos = generate(SMALL)
        for s in samples[:5]:
            order = [step for step, _, _ in s.gt_segments]
            np.testing.assert_array_equal(s.gt_step_texts.data, protos[s.task][order])

    def test_separation_failure_raises(self):
        cfg = SynthConfig(dim=2, num_tasks=1, steps_per_task=40, videos_per_task=1,
                          frames_range=(200, 400), seed=0)
        with pytest.raises(DataError, match="separation"):
            generate(cfg)

    def test_sigma_does_not_change_layout(self):
        noisy, _ = generate(SMALL)
        clean, _ = generate(dataclasses.replace(SMALL, noise_sigma=0.0))
        for a, b in zip(noisy, clean):
            assert a.gt_segments == b.gt_segments
            assert a.phrase_relevance == b.phrase_relevance
