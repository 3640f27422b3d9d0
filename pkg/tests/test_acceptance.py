"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The heavy end-to-end
criteria (7-9, 11) train small models on synthetic corpora; the whole
module is sized for desk-scale CPU runtimes.
"""

import itertools
import json
import math

import numpy as np
import pytest

import musicssl.autodiff as ad
from musicssl.audio import MfccConfig, load_audio, mfcc
from musicssl.encoder import (EncoderConfig, EmaTeacher, MaskSpec, MusicEncoder,
                              ema_update, num_mask_spans, sample_mask_starts,
                              save_checkpoint)
from musicssl.manifest import read_manifest
from musicssl.metrics import (DbnConfig, KeyLabel, average_precision_macro,
                              beat_f_measure, dbn_decode, match_beats,
                              refined_key_score, roc_auc_macro)
from musicssl.pretrain import TrainConfig, assign_labels_for_manifest, run_pretraining
from musicssl.probe import (ProbeConfig, ProbeModel, build_probe_dataset, train_probe)
from musicssl.quantize import fit_kmeans
from musicssl.synth import SynthSpec, gen_corpus

from test_autodiff import gradcheck, weighted
from test_metrics import definition_ap, optimal_matching, pairwise_auc
from test_probe import params_hash


def record(criterion: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {criterion}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared desk-scale corpus (criteria 7-9)

DESK_ENC = EncoderConfig()  # 2 transformer layers, hidden 64


@pytest.fixture(scope="module")
def pitch_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_pitch")
    spec = SynthSpec(task="pitch", n_clips=200, duration=2.0, seed=42)
    manifest_path = gen_corpus(spec, root / "corpus")
    manifest = read_manifest(manifest_path)
    cfg = MfccConfig(pad_tail=True)
    feats = {p: mfcc(load_audio(root / "corpus" / p), cfg) for p in manifest.paths()}
    stacked = np.concatenate([f.values for f in feats.values()])
    codebook = fit_kmeans(stacked, k=8, seed=1)
    assign_labels_for_manifest(codebook, manifest, lambda p: feats[p], root / "labels")
    return root, manifest_path


def test_criterion_01_gradient_correctness(rng):
    """Every autodiff op passes randomized central finite-difference checks."""
    checks = [
        ("add", lambda ts: weighted(ad.add(ts[0], ts[1])), [(3, 4), (4,)]),
        ("sub", lambda ts: weighted(ad.sub(ts[0], ts[1])), [(3, 4), (3, 4)]),
        ("mul", lambda ts: weighted(ad.mul(ts[0], ts[1])), [(2, 3, 4), (3, 4)]),
        ("scale", lambda ts: weighted(ad.scale(ts[0], 1.3)), [(5,)]),
        ("matmul", lambda ts: weighted(ad.matmul(ts[0], ts[1])), [(3, 4), (4, 5)]),
        ("matmul_batched", lambda ts: weighted(ad.matmul(ts[0], ts[1])),
         [(2, 3, 4), (2, 4, 5)]),
        ("transpose", lambda ts: weighted(ad.transpose(ts[0], (1, 0, 2))), [(2, 3, 4)]),
        ("reshape", lambda ts: weighted(ad.reshape(ts[0], (6, 2))), [(3, 4)]),
        ("concat", lambda ts: weighted(ad.concat(ts, axis=1)), [(2, 3), (2, 2)]),
        ("narrow", lambda ts: weighted(ad.narrow(ts[0], 1, 1, 2)), [(3, 5)]),
        ("sum", lambda ts: weighted(ad.tsum(ts[0], axis=1)), [(3, 4)]),
        ("mean", lambda ts: weighted(ad.tmean(ts[0], axis=0)), [(3, 4)]),
        ("gelu", lambda ts: weighted(ad.gelu(ts[0])), [(4, 4)]),
        ("sigmoid", lambda ts: weighted(ad.sigmoid(ts[0])), [(4, 4)]),
        ("softmax", lambda ts: weighted(ad.softmax(ts[0])), [(3, 5)]),
        ("log_softmax", lambda ts: weighted(ad.log_softmax(ts[0])), [(3, 5)]),
        ("layer_norm", lambda ts: weighted(ad.layer_norm(ts[0])), [(3, 6)]),
        ("l2_normalize", lambda ts: weighted(ad.l2_normalize(ts[0])), [(3, 6)]),
        ("dropout", lambda ts: weighted(ad.dropout(ts[0], 0.4, (3, 2, 1))), [(4, 5)]),
        ("embedding", lambda ts: weighted(
            ad.embedding_lookup(ts[0], np.array([[0, 2], [1, 2]]))), [(4, 3)]),
        ("conv1d", lambda ts: weighted(ad.conv1d(ts[0], ts[1], stride=2)),
         [(2, 3, 12), (4, 3, 3)]),
        ("cross_entropy", lambda ts: ad.cross_entropy(
            ts[0], np.array([1, 0, 2]), np.array([True, False, True])), [(3, 4)]),
        ("mse", lambda ts: ad.mse(ts[0], ts[1],
                                  np.array([[True, False], [True, True]])),
         [(2, 2, 3), (2, 2, 3)]),
        ("smooth_l1", lambda ts: ad.smooth_l1(ts[0], np.full((3, 4), 5.0), beta=1.0),
         [(3, 4)]),
        ("bce", lambda ts: ad.bce_with_logits(
            ts[0], (np.arange(12).reshape(3, 4) % 2).astype(float)), [(3, 4)]),
    ]
    for name, build, shapes in checks:
        gradcheck(build, shapes, rng, n_instances=10)
    record("1 gradient-correctness", True, f"{len(checks)} ops x 10 instances")


def test_criterion_02_masking_statistics():
    """Span-start count exact; Monte Carlo coverage matches inclusion-exclusion."""
    t, span, prob = 1000, 10, 0.65
    spec = MaskSpec(span=span, prob=prob)
    expected_starts = int(np.floor(prob * t / span))
    assert expected_starts == 65 == num_mask_spans(t, spec)

    n_positions = t - span + 1
    m = expected_starts
    expected_coverage = 0.0
    for pos in range(t):
        covering = min(pos, n_positions - 1) - max(0, pos - span + 1) + 1
        p_uncovered = math.comb(n_positions - covering, m) / math.comb(n_positions, m)
        expected_coverage += 1.0 - p_uncovered

    rng = np.random.default_rng(7)
    draws = 10000
    total = 0
    for _ in range(draws):
        starts = np.sort(sample_mask_starts(t, spec, rng))
        assert len(starts) == expected_starts  # exact every draw
        gaps = np.diff(starts)
        total += span + int(np.minimum(gaps, span).sum())
    mc_coverage = total / draws
    rel = abs(mc_coverage - expected_coverage) / expected_coverage
    record("2 masking-statistics", rel < 0.01,
           f"MC {mc_coverage:.2f} vs analytic {expected_coverage:.2f}, rel {rel:.4f}")


def test_criterion_03_kmeans(rng):
    """Monotone inertia on 100 instances; separable recovery; K=1 mean."""
    for _ in range(100):  # fit_kmeans raises internally on any inertia increase
        rows = rng.standard_normal((60, 4))
        fit_kmeans(rows, k=5, seed=int(rng.integers(10000)))

    a = rng.standard_normal((50, 3)) * 0.01
    b = rng.standard_normal((50, 3)) * 0.01 + np.array([2.0, 0.0, 0.0])
    rows = np.concatenate([a, b])
    codebook = fit_kmeans(rows, k=2, seed=0)
    from musicssl.audio import FeatureMatrix
    from musicssl.quantize import assign

    ids = assign(codebook, FeatureMatrix(values=rows.astype(np.float32),
                                         frame_rate=50.0, feature_kind="mfcc")).ids
    separable = len(set(ids[:50].tolist())) == 1 and len(set(ids[50:].tolist())) == 1 \
        and ids[0] != ids[-1]

    k1 = fit_kmeans(rng.standard_normal((40, 6)) * 2 + 3, k=1, seed=0)
    k1_ok = bool(np.all(np.abs(k1.centroids[0]) < 1e-9))
    record("3 kmeans", separable and k1_ok,
           f"separable={separable}, |K=1 centroid|max={np.abs(k1.centroids[0]).max():.2e}")


def test_criterion_04_metric_oracles(rng):
    """Ranking metrics, beat matching and key table vs exhaustive oracles."""
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        auc, _, _ = roc_auc_macro(scores[:, None], labels[:, None])
        ap, _, _ = average_precision_macro(scores[:, None], labels[:, None])
        assert abs(auc - pairwise_auc(scores, labels)) < 1e-12
        assert abs(ap - definition_ap(scores, labels)) < 1e-12

    for _ in range(1000):
        ref = np.sort(rng.random(int(rng.integers(0, 9))) * 2)
        est = np.sort(rng.random(int(rng.integers(0, 9))) * 2)
        tol = float(rng.choice([0.02, 0.05, 0.2]))
        assert match_beats(est, ref, tol) == optimal_matching(est, ref, tol)

    keys = [KeyLabel(t, m) for t in range(12) for m in ("major", "minor")]
    for est, ref in itertools.product(keys, keys):
        got = refined_key_score(est, ref)
        if est == ref:
            want = 1.0
        elif est.mode == ref.mode and est.tonic == (ref.tonic + 7) % 12:
            want = 0.5
        elif (ref.mode, est.mode) == ("major", "minor") and \
                est.tonic == (ref.tonic + 9) % 12:
            want = 0.3
        elif (ref.mode, est.mode) == ("minor", "major") and \
                est.tonic == (ref.tonic + 3) % 12:
            want = 0.3
        elif est.tonic == ref.tonic and est.mode != ref.mode:
            want = 0.2
        else:
            want = 0.0
        assert got == want, f"{est} vs {ref}"
    record("4 metric-oracles", True, "auc/ap x1000, matching x1000, key 24x24")


def test_criterion_05_dbn_decoding():
    """Impulse trains: F1=1.0 at 120 bpm, >=0.95 across the 60-200 sweep."""
    def impulse(bpm, duration=10.0, fps=50):
        n = int(duration * fps)
        act = np.full(n, 0.02)
        times = np.arange(0, duration, 60.0 / bpm)
        frames = np.round(times * fps).astype(int)
        frames = frames[frames < n]
        act[frames] = 0.95
        return act, times[: len(frames)]

    act, times = impulse(120)
    f1_120 = beat_f_measure(dbn_decode(act, DbnConfig(fps=50)).times, times, 0.02)
    sweep = {}
    for bpm in range(60, 201, 10):
        act, times = impulse(bpm)
        decoded = dbn_decode(act, DbnConfig(fps=50))
        sweep[bpm] = beat_f_measure(decoded.times, times, 0.02)
    worst = min(sweep.values())
    record("5 dbn-decoding", f1_120 == 1.0 and worst >= 0.95,
           f"120bpm F1={f1_120:.3f}, sweep min={worst:.3f}")


def test_criterion_06_ema_contract(tiny_encoder_config):
    """tau=1 identity, tau=0 copy, tau=0.5 exact halving in f32."""
    student = MusicEncoder(tiny_encoder_config, seed=0)
    other = MusicEncoder(tiny_encoder_config, seed=9)

    teacher = EmaTeacher(student)
    teacher.encoder.load_state_arrays(other.state_arrays())
    before = {n: a.copy() for n, a in teacher.encoder.state_arrays().items()}
    ema_update(teacher.encoder, student, tau=1.0)
    tau1_ok = all(np.array_equal(teacher.encoder.state_arrays()[n], before[n])
                  for n in before)

    ema_update(teacher.encoder, student, tau=0.0)
    tau0_ok = all(np.array_equal(teacher.encoder.state_arrays()[n],
                                 student.state_arrays()[n]) for n in before)

    teacher.encoder.load_state_arrays(other.state_arrays())
    expected = {n: (np.float32(0.5) * other.state_arrays()[n]
                    + np.float32(0.5) * student.state_arrays()[n]).astype(np.float32)
                for n in before}
    ema_update(teacher.encoder, student, tau=0.5)
    tau_half_ok = all(np.array_equal(teacher.encoder.state_arrays()[n], expected[n])
                      for n in before)
    record("6 ema-contract", tau1_ok and tau0_ok and tau_half_ok,
           f"tau1={tau1_ok} tau0={tau0_ok} tau0.5={tau_half_ok}")


def _train_and_curve(paradigm: str, pitch_corpus, tmp_path, seed=0, steps=500):
    root, manifest_path = pitch_corpus
    cfg = TrainConfig(paradigm=paradigm, steps=steps, crop_seconds=2.0,
                      token_budget=4 * 32000, checkpoint_every=10 ** 6, seed=seed)
    result = run_pretraining(cfg, DESK_ENC, manifest_path, root / "corpus",
                             tmp_path / f"{paradigm}{seed}",
                             labels_dir=root / "labels", n_codes=8)
    return result


def test_criterion_07_discrete_sanity(pitch_corpus, tmp_path):
    """Initial loss near ln 8; >=40% drop within 500 steps."""
    result = _train_and_curve("discrete", pitch_corpus, tmp_path)
    initial = result.losses[0]
    floor = float(np.mean(result.losses[-50:]))
    ln8 = math.log(8)
    init_ok = abs(initial - ln8) / ln8 <= 0.10
    drop_ok = floor <= 0.6 * initial
    record("7 discrete-sanity", init_ok and drop_ok,
           f"initial {initial:.3f} (ln8={ln8:.3f}), late mean {floor:.3f}")


def test_criterion_08_continuous_sanity(pitch_corpus, tmp_path):
    """>=50% loss drop within 500 steps; teacher-student distance sane."""
    root, manifest_path = pitch_corpus
    cfg = TrainConfig(paradigm="continuous", steps=500, crop_seconds=2.0,
                      token_budget=4 * 32000, checkpoint_every=10 ** 6, seed=0)
    from musicssl.pretrain import _WaveCache, _gather_waves, continuous_step, make_batches
    from musicssl.encoder import RegressionHead
    from musicssl.synth import derive_seed

    model = MusicEncoder(DESK_ENC, seed=cfg.seed)
    teacher = EmaTeacher(model)
    head = RegressionHead(DESK_ENC.hidden, seed=derive_seed(cfg.seed, 102))
    manifest = read_manifest(manifest_path)
    cache = _WaveCache(root / "corpus")
    losses, distances = [], []
    for step, crops in make_batches(manifest, cfg.crop_seconds, cfg.token_budget,
                                    cfg.seed, num_steps=cfg.steps):
        waves = _gather_waves(cache, crops, cfg.crop_samples())
        losses.append(continuous_step(model, head, teacher, waves, cfg, step))
        if step % 50 == 0:
            dist = sum(float(np.sum((t - s) ** 2)) for t, s in zip(
                teacher.encoder.state_arrays().values(),
                model.state_arrays().values()))
            distances.append(dist)
    initial = losses[0]
    floor = float(np.mean(losses[-50:]))
    drop_ok = floor <= 0.5 * initial
    dist_ok = all(np.isfinite(d) and d > 0 for d in distances)
    record("8 continuous-sanity", drop_ok and dist_ok,
           f"initial {initial:.3f}, late mean {floor:.3f}, "
           f"distance range [{min(distances):.2e}, {max(distances):.2e}]")


def _probe_accuracy(ckpt_path, manifest_path, labels_path, audio_root, seed):
    model, dataset, vocab = build_probe_dataset(ckpt_path, manifest_path, labels_path,
                                                audio_root, "pitch")
    cfg = ProbeConfig(task_kind="multiclass", hidden=512, lr=1e-3, epochs=50,
                      batch_size=32, patience=10, seed=seed)
    probe = ProbeModel(model.config.n_transformer_layers + 1, model.config.hidden,
                       len(vocab), cfg, vocab=vocab)
    train_probe(probe, dataset["train"]["x"], dataset["train"]["y"],
                dataset["valid"]["x"], dataset["valid"]["y"], cfg)
    logits = probe.forward(ad.Tensor(dataset["test"]["x"])).data
    return float((logits.argmax(axis=1) == dataset["test"]["y"]).mean())


def test_criterion_09_transfer_gap(pitch_corpus, tmp_path):
    """Pre-trained frozen encoder beats random init by >=10 accuracy points."""
    root, manifest_path = pitch_corpus
    labels_path = root / "corpus" / "labels.tsv"
    gaps = []
    for seed in (0, 1, 2):
        rnd = MusicEncoder(DESK_ENC, seed=seed)
        rnd_path = tmp_path / f"rnd{seed}.sslc"
        save_checkpoint(rnd_path, rnd, paradigm="none", step=0)
        acc_rand = _probe_accuracy(rnd_path, manifest_path, labels_path,
                                   root / "corpus", seed)
        result = _train_and_curve("discrete", pitch_corpus, tmp_path, seed=seed,
                                  steps=2000)
        acc_pre = _probe_accuracy(result.final_checkpoint, manifest_path, labels_path,
                                  root / "corpus", seed)
        gaps.append(100.0 * (acc_pre - acc_rand))
        print(f"\n  seed {seed}: random {acc_rand:.3f} pretrained {acc_pre:.3f}")
    mean_gap = float(np.mean(gaps))
    record("9 transfer-gap", mean_gap >= 10.0,
           f"gaps {['%.1f' % g for g in gaps]}, mean {mean_gap:.1f} pts")


def test_criterion_10_probe_protocol(rng, tiny_encoder_config, tmp_path):
    """Frozen encoder, normalized layer weights, separable task at 100%."""
    root = tmp_path / "probecheck"
    spec = SynthSpec(task="pitch", n_clips=12, duration=1.0, seed=5)
    manifest_path = gen_corpus(spec, root)
    model = MusicEncoder(tiny_encoder_config, seed=1)
    ckpt = tmp_path / "enc.sslc"
    save_checkpoint(ckpt, model, paradigm="none", step=0)
    model2, dataset, vocab = build_probe_dataset(ckpt, manifest_path,
                                                 root / "labels.tsv", root, "pitch")
    digest = params_hash(model2)
    cfg = ProbeConfig(task_kind="multiclass", hidden=512, lr=1e-3, epochs=3,
                      batch_size=8, seed=0)
    probe = ProbeModel(3, model2.config.hidden, len(vocab), cfg, vocab=vocab)
    train_probe(probe, dataset["train"]["x"], dataset["train"]["y"], None, None, cfg)
    frozen_ok = params_hash(model2) == digest
    weights_ok = abs(probe.layer_weights().sum() - 1.0) < 1e-6

    n, layers, h = 120, 3, 16
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, layers, h)).astype(np.float32) * 0.1
    x[:, :, 0] += np.where(y == 1, 2.0, -2.0)[:, None]
    sep_cfg = ProbeConfig(task_kind="multiclass", hidden=512, lr=1e-3, epochs=30,
                          batch_size=16, seed=0)
    sep_probe = ProbeModel(layers, h, 2, sep_cfg)
    history = train_probe(sep_probe, x[:80], y[:80].astype(np.int64),
                          x[80:], y[80:].astype(np.int64), sep_cfg)
    separable_ok = max(history.valid_score) == 1.0
    record("10 probe-protocol", frozen_ok and weights_ok and separable_ok,
           f"frozen={frozen_ok} weights={weights_ok} separable={separable_ok}")


def test_criterion_11_reproducibility(tmp_path):
    """Two identical full pipeline runs yield byte-identical metric reports."""
    from musicssl.cli import main

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "synth": {"task": "pitch", "n_clips": 30, "duration": 2.0},
        "encoder": {"conv_layers": [[16, 10, 5], [16, 3, 2], [16, 3, 2], [16, 3, 2],
                                    [16, 3, 2], [16, 2, 2], [16, 2, 2]],
                    "hidden": 16, "heads": 2, "ff_dim": 32, "dropout": 0.05,
                    "max_frames": 256},
        "quantize": {"k": 4},
        "pretrain": {"steps": 200, "crop_seconds": 2.0, "token_budget": 64000,
                     "checkpoint_every": 1000, "proj_dim": 64},
        "probe": {"epochs": 5, "batch_size": 8},
    }))

    def pipeline(base):
        steps = [
            ["synth", "--out", base / "corpus"],
            ["features", "--manifest", base / "corpus" / "manifest.tsv",
             "--out", base / "feats"],
            ["kmeans", "--manifest", base / "corpus" / "manifest.tsv",
             "--features-dir", base / "feats", "--out", base / "km"],
            ["pretrain", "--manifest", base / "corpus" / "manifest.tsv",
             "--labels-dir", base / "km" / "labels",
             "--codebook", base / "km" / "codebook.sslk", "--out", base / "run"],
            ["probe", "--ckpt", base / "run" / "ckpt_final.sslc",
             "--manifest", base / "corpus" / "manifest.tsv",
             "--labels", base / "corpus" / "labels.tsv", "--task", "pitch",
             "--out", base / "probe"],
            ["eval", "--predictions", base / "probe" / "predictions.json",
             "--labels", base / "corpus" / "labels.tsv", "--task", "pitch",
             "--manifest", base / "corpus" / "manifest.tsv", "--out", base / "eval"],
        ]
        for step in steps:
            code = main([str(s) for s in step] + ["--config", str(cfg_path),
                                                  "--seed", "11"])
            assert code == 0, f"pipeline step {step[0]} failed"
        return (base / "eval" / "report.json").read_bytes()

    a = pipeline(tmp_path / "runA")
    b = pipeline(tmp_path / "runB")
    record("11 reproducibility", a == b,
           f"report bytes equal: {a == b} ({len(a)} bytes)")
