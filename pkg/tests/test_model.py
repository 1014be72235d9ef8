import math

import numpy as np
import pytest

import stepalign.autodiff as ad
import stepalign.losses as L
import stepalign.model as M
from stepalign.core import DataError, EmbeddingSequence
from conftest import finite_diff_check

TOY = M.ModelConfig(dim=8, num_slots=3, num_layers=1, num_heads=2, ff_multiplier=2)


def video_seq(rng, n=7, d=8):
    return EmbeddingSequence(rng.normal(size=(n, d)), "video")


class TestSinusoidalPe:
    def test_position_zero(self):
        table = M.sinusoidal_pe(4, 6)
        np.testing.assert_allclose(table[0, 0::2], 0.0)
        np.testing.assert_allclose(table[0, 1::2], 1.0)

    def test_known_value(self):
        assert M.sinusoidal_pe(2, 4)[1, 0] == pytest.approx(math.sin(1.0))

    def test_range(self):
        table = M.sinusoidal_pe(50, 16)
        assert (np.abs(table) <= 1.0).all()

    def test_odd_dim_rejected(self):
        with pytest.raises(DataError):
            M.sinusoidal_pe(4, 5)


class TestForward:
    def test_fixed_output_shape(self, rng):
        params = M.init_params(TOY, seed=0)
        for n in (1, 7, 200):
            slots = M.forward(params, video_seq(rng, n=n))
            assert slots.data.shape == (TOY.num_slots, TOY.dim)
            assert slots.kind == "slots"

    def test_eval_mode_deterministic(self, rng):
        params = M.init_params(TOY, seed=0)
        video = video_seq(rng)
        a = M.forward(params, video, training=False)
        b = M.forward(params, video, training=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_frame_order_matters(self, rng):
        params = M.init_params(TOY, seed=0)
        video = video_seq(rng, n=9)
        permuted = EmbeddingSequence(video.data[::-1].copy(), "video")
        a = M.forward(params, video)
        b = M.forward(params, permuted)
        assert np.abs(a.data - b.data).max() > 1e-6

    def test_dim_mismatch(self, rng):
        params = M.init_params(TOY, seed=0)
        with pytest.raises(DataError):
            M.forward(params, EmbeddingSequence(rng.normal(size=(5, 6)), "video"))

    def test_training_needs_rng(self, rng):
        params = M.init_params(TOY, seed=0)
        with pytest.raises(DataError):
            M.forward(params, video_seq(rng), training=True)

    def test_dropout_changes_training_output(self, rng):
        params = M.init_params(TOY, seed=0)
        video = video_seq(rng)
        t1 = M.forward(params, video, training=True, rng=np.random.default_rng(0))
        t2 = M.forward(params, video, training=True, rng=np.random.default_rng(1))
        e = M.forward(params, video, training=False)
        assert np.abs(t1.data - t2.data).max() > 0
        # same seed reproduces the same masks
        t1b = M.forward(params, video, training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(t1.data, t1b.data)
        assert np.abs(t1.data - e.data).max() > 0


class TestAttentionMap:
    def test_rows_sum_to_one(self, rng):
        video = video_seq(rng, n=11)
        slots = EmbeddingSequence(rng.normal(size=(4, 8)), "slots")
        att = M.attention_map(video, slots, 0.03)
        assert att.shape == (11, 4)
        np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)

    def test_equidistant_frame_uniform(self):
        slots = EmbeddingSequence(np.eye(4), "slots")
        video = EmbeddingSequence(np.ones((1, 4)), "video")
        att = M.attention_map(video, slots, 0.03)
        np.testing.assert_allclose(att[0], 0.25, atol=1e-12)

    def test_sharpens_to_argmax(self, rng):
        slots = EmbeddingSequence(np.eye(3), "slots")
        video = EmbeddingSequence(np.array([[0.9, 0.3, 0.1]]), "video")
        att = M.attention_map(video, slots, 1e-4)
        assert att[0].max() > 1.0 - 1e-9
        assert att[0].argmax() == 0

    def test_temperature_positive(self, rng):
        with pytest.raises(DataError):
            M.attention_map(video_seq(rng), EmbeddingSequence(np.eye(8), "slots"), 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = M.init_params(TOY, seed=3)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, params, step=17, seed=3)
        loaded, step, seed = M.load_checkpoint(path)
        assert step == 17 and seed == 3
        assert loaded.config == TOY
        for name in params.names:
            np.testing.assert_array_equal(
                loaded.tensors[name],
                params.tensors[name].astype(np.float32).astype(np.float64))

    def test_reload_is_stable(self, tmp_path):
        params = M.init_params(TOY, seed=3)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        M.save_checkpoint(a, params, step=1, seed=3)
        loaded, _, _ = M.load_checkpoint(a)
        M.save_checkpoint(b, loaded, step=1, seed=3)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError):
            M.load_checkpoint(path)


class TestFullModelGradient:
    def test_matches_finite_differences(self, rng):
        params = M.init_params(TOY, seed=1)
        video = rng.normal(size=(6, 8))
        weights = rng.normal(size=(TOY.num_slots, TOY.dim))

        def build(arrays):
            tape = ad.Tape()
            nodes = {k: ad.leaf(v, tape) for k, v in arrays.items()}
            slots = M.forward_nodes(nodes, TOY, video, training=False)
            loss = ad.sum_(ad.mul(slots, ad.constant(weights)))
            return tape, nodes, loss

        worst = finite_diff_check(build, params.tensors, coords=4, rng=rng)
        assert worst <= 1e-4

    def test_with_losses_frozen_correspondence(self, rng):
        params = M.init_params(TOY, seed=2)
        video = rng.normal(size=(7, 8))
        phrases = rng.normal(size=(4, 8))
        smooth_idx = np.array([0, 2, 3, 5, 6])

        def slots_of(arrays, tape=None):
            tape = tape or ad.Tape()
            nodes = {k: ad.leaf(v, tape) for k, v in arrays.items()}
            return tape, nodes, M.forward_nodes(nodes, TOY, video, training=False)

        _, _, base_slots = slots_of(params.tensors)
        _, frozen_corr = L.seq_loss(base_slots, phrases, 0.1, 0.8)

        def build(arrays):
            tape, nodes, slots = slots_of(arrays)
            seq, _ = L.seq_loss(slots, phrases, 0.1, correspondence=frozen_corr)
            glob = L.global_loss([slots], [ad.constant(phrases)], 0.1)
            div = L.diversity_reg(slots)
            att = M.attention_tensor(video, slots, 0.03)
            smooth = L.smoothness_reg(att, 1, 5, 0.1, indices=smooth_idx)
            return tape, nodes, L.combine_losses(seq, glob, div, smooth, 0.3, 0.02)

        worst = finite_diff_check(build, params.tensors, coords=3, rng=rng)
        assert worst <= 1e-4
