import math

import numpy as np
import pytest

import musicssl.autodiff as ad
from musicssl.autodiff import Tensor, backward
from musicssl.encoder import (DiscreteHead, EmaTeacher, EncoderConfig, MaskSpec,
                              MusicEncoder, RegressionHead, conv_output_length,
                              ema_update, frame_layer_norm, load_checkpoint,
                              num_mask_spans, receptive_field, sample_mask,
                              save_checkpoint, select_target_layers)
from musicssl.errors import WorkbenchError


class TestEncoderConfig:
    def test_stride_product_enforced(self):
        with pytest.raises(WorkbenchError):
            EncoderConfig(conv_layers=((8, 10, 5), (8, 3, 2)))

    def test_heads_divide_hidden(self):
        with pytest.raises(WorkbenchError):
            EncoderConfig(hidden=30, heads=4)

    def test_dict_roundtrip(self, tiny_encoder_config):
        back = EncoderConfig.from_dict(tiny_encoder_config.to_dict())
        assert back == tiny_encoder_config


class TestConvFrontend:
    def test_output_length_chained_formula(self, tiny_encoder_config):
        def chained(n):
            for _, k, s in tiny_encoder_config.conv_layers:
                n = (n - k) // s + 1
            return n

        for samples in (16000, 80000, 1000, 399):
            assert conv_output_length(tiny_encoder_config, samples) == chained(samples)
        assert conv_output_length(tiny_encoder_config, 16000) == 49
        assert conv_output_length(tiny_encoder_config, 80000) == 249

    def test_doubling_property(self, tiny_encoder_config):
        t1 = conv_output_length(tiny_encoder_config, 16000)
        t2 = conv_output_length(tiny_encoder_config, 32000)
        assert t2 >= 2 * t1 - 1

    def test_receptive_field(self, tiny_encoder_config):
        assert receptive_field(tiny_encoder_config) == 400

    def test_short_clip_rejected(self, tiny_encoder_config):
        model = MusicEncoder(tiny_encoder_config, seed=0)
        with pytest.raises(WorkbenchError):
            model.conv_frontend(np.zeros((1, 300), dtype=np.float32))

    def test_frontend_shape(self, tiny_encoder_config, rng):
        model = MusicEncoder(tiny_encoder_config, seed=0)
        tokens = model.conv_frontend(
            rng.standard_normal((2, 16000)).astype(np.float32) * 0.1)
        assert tokens.shape == (2, 49, tiny_encoder_config.hidden)


class TestMasking:
    def test_zero_prob_empty(self, rng):
        mask = sample_mask(100, MaskSpec(span=10, prob=0.0), rng)
        assert not mask.any()

    def test_span_start_count(self):
        assert num_mask_spans(100, MaskSpec(span=10, prob=0.65)) == 6
        assert num_mask_spans(1000, MaskSpec(span=10, prob=0.65)) == 65

    def test_coverage_bounds(self, rng):
        for _ in range(50):
            mask = sample_mask(100, MaskSpec(span=10, prob=0.65), rng)
            assert 10 <= mask.sum() <= 60

    def test_mask_never_extends_past_end(self, rng):
        for t in (10, 11, 37, 100):
            mask = sample_mask(t, MaskSpec(span=10, prob=0.9), rng)
            assert mask.shape == (t,)

    def test_too_short_sequence(self, rng):
        with pytest.raises(WorkbenchError):
            sample_mask(5, MaskSpec(span=10, prob=0.5), rng)

    def test_coverage_matches_inclusion_exclusion(self):
        t, span, prob = 200, 7, 0.5
        spec = MaskSpec(span=span, prob=prob)
        m = num_mask_spans(t, spec)
        n_starts = t - span + 1
        expected = 0.0
        for pos in range(t):
            covering = min(pos, n_starts - 1) - max(0, pos - span + 1) + 1
            p_uncovered = (math.comb(n_starts - covering, m) / math.comb(n_starts, m))
            expected += 1.0 - p_uncovered
        draws = 2000
        rng = np.random.default_rng(0)
        total = sum(sample_mask(t, spec, rng).sum() for _ in range(draws))
        assert abs(total / draws - expected) / expected < 0.02

    def test_apply_mask_replaces_frames(self, tiny_encoder_config, rng):
        model = MusicEncoder(tiny_encoder_config, seed=0)
        tokens = model.conv_frontend(
            rng.standard_normal((1, 16000)).astype(np.float32) * 0.1)
        masked, mask = model.apply_mask(tokens, MaskSpec(span=5, prob=0.5, seed=3))
        assert mask.shape == (1, 49)
        assert mask.any()
        changed = np.any(masked.data != tokens.data, axis=2)[0]
        np.testing.assert_array_equal(changed, mask[0])

    def test_apply_mask_prob_zero_identity(self, tiny_encoder_config, rng):
        model = MusicEncoder(tiny_encoder_config, seed=0)
        tokens = model.conv_frontend(
            rng.standard_normal((1, 16000)).astype(np.float32) * 0.1)
        masked, mask = model.apply_mask(tokens, MaskSpec(span=5, prob=0.0, seed=3))
        assert not mask.any()
        np.testing.assert_array_equal(masked.data, tokens.data)


class TestEncode:
    def test_layer_list_length(self, tiny_encoder_config, rng):
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        model = MusicEncoder(tiny_encoder_config, seed=0)
        out = model.forward(waves)
        assert len(out.layers) == tiny_encoder_config.n_transformer_layers + 1

    def test_zero_transformer_layers(self, rng):
        cfg = EncoderConfig(conv_layers=((8, 10, 5), (8, 4, 4), (8, 4, 4), (8, 4, 4)),
                            n_transformer_layers=0, hidden=8, heads=2, ff_dim=16,
                            dropout=0.0, max_frames=256)
        model = MusicEncoder(cfg, seed=0)
        out = model.forward(rng.standard_normal((1, 8000)).astype(np.float32) * 0.1)
        assert len(out.layers) == 1

    def test_batch_order_independence(self, tiny_encoder_config, rng):
        waves = rng.standard_normal((2, 8000)).astype(np.float32) * 0.1
        model = MusicEncoder(tiny_encoder_config, seed=0)
        out_fwd = model.forward(waves)
        out_rev = model.forward(waves[::-1].copy())
        for a, b in zip(out_fwd.layers, out_rev.layers):
            np.testing.assert_array_equal(a.data[0], b.data[1])
            np.testing.assert_array_equal(a.data[1], b.data[0])

    def test_deterministic_without_dropout(self, tiny_encoder_config, rng):
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        model = MusicEncoder(tiny_encoder_config, seed=0)
        a = model.forward(waves)
        b = model.forward(waves)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.data, lb.data)

    def test_dropout_keyed_determinism(self, rng):
        cfg = EncoderConfig(
            conv_layers=((16, 10, 5), (16, 3, 2), (16, 3, 2), (16, 3, 2),
                         (16, 3, 2), (16, 2, 2), (16, 2, 2)),
            n_transformer_layers=1, hidden=16, heads=2, ff_dim=32, dropout=0.3,
            max_frames=128)
        model = MusicEncoder(cfg, seed=0)
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        a = model.forward(waves, training=True, rng_key=(5, 1))
        b = model.forward(waves, training=True, rng_key=(5, 1))
        c = model.forward(waves, training=True, rng_key=(5, 2))
        np.testing.assert_array_equal(a.layers[-1].data, b.layers[-1].data)
        assert not np.array_equal(a.layers[-1].data, c.layers[-1].data)

    def test_max_frames_enforced(self, tiny_encoder_config, rng):
        cfg = EncoderConfig(**{**tiny_encoder_config.to_dict(), "max_frames": 10})
        model = MusicEncoder(cfg, seed=0)
        with pytest.raises(WorkbenchError):
            model.forward(rng.standard_normal((1, 16000)).astype(np.float32))


class TestDiscreteHead:
    def test_aligned_projection_wins(self):
        head = DiscreteHead(hidden=4, n_codes=3, proj_dim=4, seed=0)
        head.proj_w.data = np.eye(4, dtype=np.float32)
        head.proj_b.data = np.zeros(4, dtype=np.float32)
        head.code_embeddings.data = np.array(
            [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], dtype=np.float32)
        h = Tensor(np.array([[[0.0, 2.0, 0.0, 0.0]]], dtype=np.float32))
        logits = head.logits(h).data[0, 0]
        assert np.argmax(logits) == 1

    def test_scale_invariance(self, rng):
        head = DiscreteHead(hidden=8, n_codes=5, proj_dim=16, seed=1)
        head.proj_b.data = np.zeros_like(head.proj_b.data)  # keep logits homogeneous
        h = rng.standard_normal((1, 3, 8)).astype(np.float32)
        a = head.logits(Tensor(h)).data
        b = head.logits(Tensor(10.0 * h)).data
        np.testing.assert_allclose(a, b, atol=1e-4)

    def test_random_init_near_uniform_ce(self, rng):
        head = DiscreteHead(hidden=16, n_codes=8, seed=2)
        frames = Tensor(rng.standard_normal((16, 64, 16)).astype(np.float32))
        logits = head.logits(frames)
        targets = rng.integers(0, 8, size=(16, 64))
        loss = ad.cross_entropy(logits, targets)
        assert abs(loss.item() - np.log(8)) / np.log(8) < 0.05

    def test_code_embeddings_receive_gradient(self, rng):
        head = DiscreteHead(hidden=8, n_codes=4, proj_dim=16, seed=0)
        h = Tensor(rng.standard_normal((1, 6, 8)).astype(np.float32))
        loss = ad.cross_entropy(head.logits(h), rng.integers(0, 4, size=(1, 6)))
        backward(loss)
        assert np.any(head.code_embeddings.grad != 0)

    def test_zero_norm_projection_gives_zero_cosine(self):
        head = DiscreteHead(hidden=4, n_codes=3, proj_dim=4, seed=0)
        head.proj_w.data = np.zeros((4, 4), dtype=np.float32)
        head.proj_b.data = np.zeros(4, dtype=np.float32)
        h = Tensor(np.ones((1, 2, 4), dtype=np.float32))
        np.testing.assert_array_equal(head.logits(h).data, 0.0)

    def test_validation(self):
        with pytest.raises(WorkbenchError):
            DiscreteHead(hidden=4, n_codes=0)
        with pytest.raises(WorkbenchError):
            DiscreteHead(hidden=4, n_codes=2, temperature=0.0)


class TestTeacherTargets:
    def test_top_k_selection_rules(self):
        assert select_target_layers(12, 8) == list(range(5, 13))
        assert select_target_layers(12, "all") == list(range(1, 13))
        assert select_target_layers(2, 1) == [2]
        with pytest.raises(WorkbenchError):
            select_target_layers(2, 8)

    def test_top1_equals_normalized_final_layer(self, tiny_encoder_config, rng):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        targets = teacher.targets(waves, 1, normalize=True)
        expected = frame_layer_norm(teacher.encoder.forward(waves).layers[-1].data)
        np.testing.assert_allclose(targets, expected, atol=1e-6)

    def test_unnormalized_top1_is_raw_layer(self, tiny_encoder_config, rng):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        targets = teacher.targets(waves, 1, normalize=False)
        raw = teacher.encoder.forward(waves).layers[-1].data
        np.testing.assert_array_equal(targets, raw)

    def test_teacher_never_accumulates_grads(self, tiny_encoder_config, rng):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        head = RegressionHead(tiny_encoder_config.hidden, seed=1)
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        targets = teacher.targets(waves, "all")
        out = student.forward(waves, mask_spec=MaskSpec(span=5, prob=0.5, seed=1))
        loss = ad.mse(head.predict(out.layers[-1]), targets, mask=out.mask_indices)
        backward(loss)
        for p in teacher.encoder.parameters():
            assert p.grad is None or not np.any(p.grad)
        assert any(np.any(p.grad) for p in student.parameters())


class TestEmaUpdate:
    def test_tau_one_keeps_teacher(self, tiny_encoder_config):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        before = {n: a.copy() for n, a in teacher.encoder.state_arrays().items()}
        student2 = MusicEncoder(tiny_encoder_config, seed=5)
        ema_update(teacher.encoder, student2, tau=1.0)
        for name, arr in teacher.encoder.state_arrays().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_tau_zero_copies_student(self, tiny_encoder_config):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        student2 = MusicEncoder(tiny_encoder_config, seed=5)
        ema_update(teacher.encoder, student2, tau=0.0)
        for name, arr in teacher.encoder.state_arrays().items():
            np.testing.assert_array_equal(arr, student2.state_arrays()[name])

    def test_tau_half_geometric_decay(self, tiny_encoder_config):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        other = MusicEncoder(tiny_encoder_config, seed=9)
        teacher.encoder.load_state_arrays(other.state_arrays())

        def distance():
            return sum(float(np.sum((t - s) ** 2)) for t, s in zip(
                teacher.encoder.state_arrays().values(),
                student.state_arrays().values()))

        d0 = distance()
        ema_update(teacher.encoder, student, tau=0.5)
        d1 = distance()
        ema_update(teacher.encoder, student, tau=0.5)
        d2 = distance()
        assert abs(d1 - d0 / 4) / d0 < 1e-5  # distance halves, squared quarters
        assert abs(d2 - d0 / 16) / d0 < 1e-5

    def test_bad_tau(self, tiny_encoder_config):
        student = MusicEncoder(tiny_encoder_config, seed=0)
        teacher = EmaTeacher(student)
        with pytest.raises(WorkbenchError):
            ema_update(teacher.encoder, student, tau=1.5)


class TestCheckpoint:
    def test_roundtrip_forward_bitwise(self, tiny_encoder_config, tmp_path, rng):
        model = MusicEncoder(tiny_encoder_config, seed=3)
        waves = rng.standard_normal((1, 8000)).astype(np.float32) * 0.1
        before = model.forward(waves).layers[-1].data
        path = tmp_path / "m.sslc"
        save_checkpoint(path, model, paradigm="none", step=7)
        ckpt = load_checkpoint(path)
        assert ckpt.paradigm == "none" and ckpt.step == 7
        after = ckpt.model.forward(waves).layers[-1].data
        np.testing.assert_array_equal(before, after)

    def test_heads_teacher_and_moments(self, tiny_encoder_config, tmp_path):
        model = MusicEncoder(tiny_encoder_config, seed=3)
        head = DiscreteHead(tiny_encoder_config.hidden, n_codes=5, proj_dim=8, seed=1)
        teacher = EmaTeacher(model)
        head.proj_w.m += 0.25
        moments = {p.name: (p.m, p.v) for p in model.parameters() + head.parameters()}
        path = tmp_path / "m.sslc"
        save_checkpoint(path, model, paradigm="discrete", step=42,
                        discrete_head=head, teacher=teacher, moments=moments,
                        extra_config={"config_hash": "beef"})
        ckpt = load_checkpoint(path)
        assert ckpt.discrete_head.n_codes == 5
        assert ckpt.teacher is not None
        assert ckpt.config["extra"]["config_hash"] == "beef"
        np.testing.assert_allclose(ckpt.moments["discrete.proj_w"][0], 0.25)
        np.testing.assert_array_equal(
            ckpt.discrete_head.code_embeddings.data, head.code_embeddings.data)

    def test_bad_file(self, tmp_path):
        path = tmp_path / "junk.sslc"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(WorkbenchError):
            load_checkpoint(path)
