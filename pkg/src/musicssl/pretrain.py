"""Pre-training objectives and the training loop.

Batches hold a fixed audio budget: floor(token_budget / crop_samples) crops
per batch regardless of crop length. Crop offsets are drawn on the 320-sample
frame grid so pseudo-label frames align exactly with encoder output frames.
Every random draw (batch order, offsets, masks) is a pure function of
(seed, step), which makes interrupted training resumable bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import load_audio
from .encoder import (Checkpoint, DiscreteHead, EmaTeacher, EncoderConfig, MaskSpec,
                      MusicEncoder, RegressionHead, conv_output_length, load_checkpoint,
                      save_checkpoint)
from .errors import WorkbenchError
from .manifest import Manifest, read_manifest
from .quantize import (LabelSequence, read_label_sequence, write_label_sequence)
from .synth import derive_seed

log = logging.getLogger(__name__)

HOP = 320


@dataclass
class TrainConfig:
    paradigm: str = "discrete"
    steps: int = 2000
    crop_seconds: float = 30.0
    token_budget: int = 480000  # total samples per batch, constant across crops
    lr: float = 5e-4
    warmup_frac: float = 0.08
    weight_decay: float = 0.01
    seed: int = 0
    mask_span: int = 10
    mask_prob: float = 0.65
    masked_only: bool = True
    loss_kind: str = "mse"  # continuous objective: mse | smooth_l1
    smooth_l1_beta: float = 1.0
    target_layers: object = "all"  # 'all' or top-k count (continuous objective)
    normalize_targets: bool = True
    tau_start: float = 0.999
    tau_end: float = 0.9999
    tau_anneal_frac: float = 0.3
    checkpoint_every: int = 500
    proj_dim: int = 1024
    temperature: float = 0.1
    config_hash: str = ""

    def __post_init__(self):
        if self.paradigm not in ("discrete", "continuous"):
            raise WorkbenchError(f"unknown paradigm {self.paradigm!r}")
        if self.steps < 1:
            raise WorkbenchError("steps must be >= 1")
        if self.crop_seconds <= 0:
            raise WorkbenchError("crop_seconds must be positive")
        if self.loss_kind not in ("mse", "smooth_l1"):
            raise WorkbenchError(f"unknown loss kind {self.loss_kind!r}")

    def crop_samples(self, sample_rate: int = 16000) -> int:
        return int(round(self.crop_seconds * sample_rate))

    def to_dict(self) -> dict:
        doc = dict(self.__dict__)
        doc["target_layers"] = str(self.target_layers)
        return doc

    def lr_at(self, step: int) -> float:
        warmup = max(1, int(round(self.warmup_frac * self.steps)))
        if step <= warmup:
            return self.lr * step / warmup
        remaining = max(1, self.steps - warmup)
        return self.lr * max(0.0, (self.steps - step) / remaining)

    def tau_at(self, step: int) -> float:
        anneal = max(1, int(round(self.tau_anneal_frac * self.steps)))
        frac = min(1.0, step / anneal)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass
class Crop:
    path: str
    offset: int  # samples, multiple of HOP


def make_batches(manifest: Manifest, crop_seconds: float, token_budget: int,
                 seed: int, start_step: int = 0, num_steps: int = 1,
                 sample_rate: int = 16000):
    """Deterministic stream of crop batches.

    Yields (step, [Crop, ...]) for step in [start_step+1, start_step+num_steps].
    Clip order reshuffles per (seed, epoch); offsets are hop-aligned and drawn
    per (seed, epoch, batch). Clips shorter than the crop are skipped.
    """
    crop_len = int(round(crop_seconds * sample_rate))
    usable = [row for row in manifest.rows if row.duration >= crop_len]
    skipped = len(manifest.rows) - len(usable)
    if skipped:
        log.warning("skipping %d clips shorter than the %.2fs crop", skipped, crop_seconds)
    if not usable:
        raise WorkbenchError("no manifest clip is at least one crop long")
    per_batch = token_budget // crop_len
    if per_batch < 1:
        raise WorkbenchError("token_budget smaller than one crop")

    batches_per_epoch = max(1, len(usable) // per_batch)
    for step in range(start_step + 1, start_step + num_steps + 1):
        batch_index = step - 1
        epoch = batch_index // batches_per_epoch
        position = batch_index % batches_per_epoch
        order = np.random.default_rng([seed & 0xFFFFFFFF, epoch, 11]).permutation(len(usable))
        if len(usable) < per_batch:
            order = np.resize(order, per_batch)
        chosen = order[position * per_batch:(position + 1) * per_batch]
        rng = np.random.default_rng([seed & 0xFFFFFFFF, epoch, position, 13])
        crops = []
        for idx in chosen:
            row = usable[int(idx)]
            max_hops = (row.duration - crop_len) // HOP
            offset = int(rng.integers(0, max_hops + 1)) * HOP
            crops.append(Crop(path=row.path, offset=offset))
        assert len(crops) * crop_len <= token_budget
        yield step, crops


class _WaveCache:
    """In-memory float32 waveforms keyed by manifest path."""

    def __init__(self, audio_root):
        self.root = Path(audio_root)
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = load_audio(self.root / path).samples
        return self._cache[path]


def _gather_waves(cache: _WaveCache, crops, crop_len: int) -> np.ndarray:
    waves = np.empty((len(crops), crop_len), dtype=np.float32)
    for i, crop in enumerate(crops):
        samples = cache.get(crop.path)
        waves[i] = samples[crop.offset:crop.offset + crop_len]
    return waves


def slice_labels(labels: LabelSequence, crop: Crop, needed: int) -> np.ndarray:
    """Label ids for a crop's encoder frames; tolerates a one-frame shortfall."""
    frame_offset = crop.offset // HOP
    available = len(labels.ids) - frame_offset
    if available < needed - 1:
        raise WorkbenchError(
            f"{crop.path}: labels cover {available} frames at offset {frame_offset}, "
            f"need {needed} (misalignment beyond one frame)")
    return labels.ids[frame_offset:frame_offset + min(needed, available)]


def label_path(labels_dir, clip_path: str) -> Path:
    return Path(labels_dir) / Path(clip_path).with_suffix(".ssll")


def _select_mask(mask: np.ndarray, masked_only: bool, redraw) -> np.ndarray:
    sel = mask if masked_only else np.ones_like(mask, dtype=bool)
    if not sel.any():
        sel = redraw()
        if not sel.any():
            raise WorkbenchError("mask selects no frames even after a redraw")
    return sel


def discrete_step(model: MusicEncoder, head: DiscreteHead, waves: np.ndarray,
                  label_rows: list, cfg: TrainConfig, step: int) -> float:
    """One optimizer step of masked pseudo-label prediction; returns the loss."""
    params = model.parameters() + head.parameters()
    ad.zero_grads(params)
    t_use = min(len(r) for r in label_rows)
    targets = np.stack([r[:t_use] for r in label_rows]).astype(np.int64)

    def run(draw: int):
        spec = MaskSpec(span=cfg.mask_span, prob=cfg.mask_prob,
                        seed=derive_seed(cfg.seed, step, draw))
        out = model.forward(waves, mask_spec=spec, training=True,
                            rng_key=(cfg.seed, step))
        t = out.layers[-1].shape[1]
        if t - t_use > 1 or t < t_use:
            raise WorkbenchError("labels misaligned with encoder frames by more than one")
        h = out.layers[-1] if t == t_use else ad.narrow(out.layers[-1], 1, 0, t_use)
        return h, out.mask_indices[:, :t_use]

    state = {}
    state["h"], mask = run(1)

    def redraw():
        state["h"], fresh = run(2)
        return fresh

    sel = _select_mask(mask, cfg.masked_only, redraw)
    logits = head.logits(state["h"])
    loss = ad.cross_entropy(logits, targets, mask=sel)
    ad.backward(loss)
    ad.adam_step(params, lr=cfg.lr_at(step), weight_decay=cfg.weight_decay, step=step)
    return loss.item()


def continuous_step(model: MusicEncoder, head: RegressionHead, teacher: EmaTeacher,
                    waves: np.ndarray, cfg: TrainConfig, step: int) -> float:
    """One optimizer step of masked regression onto EMA-teacher targets."""
    params = model.parameters() + head.parameters()
    ad.zero_grads(params)
    targets = teacher.targets(waves, cfg.target_layers, normalize=cfg.normalize_targets)

    def run(mask_seed: int):
        spec = MaskSpec(span=cfg.mask_span, prob=cfg.mask_prob, seed=mask_seed)
        return model.forward(waves, mask_spec=spec, training=True,
                             rng_key=(cfg.seed, step))

    out = run(derive_seed(cfg.seed, step, 1))
    state = {"out": out}

    def redraw():
        state["out"] = run(derive_seed(cfg.seed, step, 2))
        return state["out"].mask_indices

    sel = _select_mask(out.mask_indices, cfg.masked_only, redraw)
    pred = head.predict(state["out"].layers[-1])
    if cfg.loss_kind == "mse":
        loss = ad.mse(pred, targets, mask=sel)
    else:
        loss = ad.smooth_l1(pred, targets, beta=cfg.smooth_l1_beta, mask=sel)
    ad.backward(loss)
    ad.adam_step(params, lr=cfg.lr_at(step), weight_decay=cfg.weight_decay, step=step)
    teacher.update(model, cfg.tau_at(step))
    return loss.item()


def _moments_of(params) -> dict:
    return {p.name: (p.m, p.v) for p in params}


def _restore_moments(params, moments: dict) -> None:
    for p in params:
        if p.name in moments:
            m, v = moments[p.name]
            p.m = m.astype(np.float32).copy()
            p.v = v.astype(np.float32).copy()


@dataclass
class PretrainResult:
    final_checkpoint: Path
    loss_log: Path
    losses: list = field(default_factory=list)


def run_pretraining(cfg: TrainConfig, encoder_cfg: EncoderConfig, manifest_path,
                    audio_root, out_dir, labels_dir=None, n_codes: int | None = None,
                    resume_from=None) -> PretrainResult:
    """Train one model under either paradigm, writing checkpoints and a loss log.

    Checkpoints land at every multiple of checkpoint_every (except the final
    step) plus a tagged final checkpoint. Resuming from any checkpoint
    reproduces the uninterrupted run exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(manifest_path)

    discrete_head = regression_head = teacher = None
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.paradigm != cfg.paradigm:
            raise WorkbenchError(
                f"checkpoint paradigm {ckpt.paradigm} does not match config {cfg.paradigm}")
        model = ckpt.model
        discrete_head, regression_head = ckpt.discrete_head, ckpt.regression_head
        teacher = ckpt.teacher
        start_step = ckpt.step
        trained = model.parameters() + (discrete_head.parameters() if discrete_head
                                        else regression_head.parameters())
        _restore_moments(trained, ckpt.moments)
    else:
        model = MusicEncoder(encoder_cfg, seed=cfg.seed)
        if cfg.paradigm == "discrete":
            if n_codes is None:
                raise WorkbenchError("discrete paradigm needs the codebook size")
            discrete_head = DiscreteHead(encoder_cfg.hidden, n_codes,
                                         proj_dim=cfg.proj_dim,
                                         temperature=cfg.temperature,
                                         seed=derive_seed(cfg.seed, 101))
        else:
            regression_head = RegressionHead(encoder_cfg.hidden,
                                             seed=derive_seed(cfg.seed, 102))
            teacher = EmaTeacher(model)

    labels = {}
    if cfg.paradigm == "discrete":
        if labels_dir is None:
            raise WorkbenchError("discrete paradigm needs a labels directory")
        for path in manifest.paths():
            lp = label_path(labels_dir, path)
            if lp.exists():
                labels[path] = read_label_sequence(lp)

    cache = _WaveCache(audio_root)
    crop_len = cfg.crop_samples(encoder_cfg.sample_rate)
    needed_frames = conv_output_length(encoder_cfg, crop_len)
    log_path = out_dir / "loss_log.tsv"
    log_fh = open(log_path, "a")
    losses = []
    trained_params = model.parameters() + (discrete_head.parameters() if discrete_head
                                           else regression_head.parameters())

    def write_ckpt(path, step):
        save_checkpoint(path, model, paradigm=cfg.paradigm, step=step,
                        discrete_head=discrete_head, regression_head=regression_head,
                        teacher=teacher, moments=_moments_of(trained_params),
                        extra_config={"train": cfg.to_dict(),
                                      "config_hash": cfg.config_hash})

    try:
        stream = make_batches(manifest, cfg.crop_seconds, cfg.token_budget, cfg.seed,
                              start_step=start_step, num_steps=cfg.steps - start_step,
                              sample_rate=encoder_cfg.sample_rate)
        for step, crops in stream:
            waves = _gather_waves(cache, crops, crop_len)
            if cfg.paradigm == "discrete":
                rows = []
                for crop in crops:
                    if crop.path not in labels:
                        raise WorkbenchError(f"no labels for {crop.path}")
                    rows.append(slice_labels(labels[crop.path], crop, needed_frames))
                loss = discrete_step(model, discrete_head, waves, rows, cfg, step)
                tau = 0.0
            else:
                loss = continuous_step(model, regression_head, teacher, waves, cfg, step)
                tau = cfg.tau_at(step)
            losses.append(loss)
            log_fh.write(f"{step}\t{loss:.6f}\t{cfg.lr_at(step):.8f}\t{tau:.6f}\n")
            if step % cfg.checkpoint_every == 0 and step < cfg.steps:
                write_ckpt(out_dir / f"ckpt_{step:06d}.sslc", step)
        final_path = out_dir / "ckpt_final.sslc"
        write_ckpt(final_path, cfg.steps)
    finally:
        log_fh.close()
    return PretrainResult(final_checkpoint=final_path, loss_log=log_path, losses=losses)


def assign_labels_for_manifest(codebook, manifest: Manifest, features_for,
                               out_dir) -> None:
    """Write one .ssll file per clip from a feature-loading callback."""
    out_dir = Path(out_dir)
    for path in manifest.paths():
        features = features_for(path)
        from .quantize import assign

        seq = assign(codebook, features)
        target = label_path(out_dir, path)
        target.parent.mkdir(parents=True, exist_ok=True)
        write_label_sequence(target, seq)


def run_iteration_pipeline(n_iterations: int, cfg: TrainConfig,
                           encoder_cfg: EncoderConfig, manifest_path, audio_root,
                           mfcc_features_for, k: int, out_dir,
                           kmeans_seed: int = 0, iter2_layer: int | None = None,
                           frame_budget: int | None = None) -> Path:
    """HuBERT-style multi-iteration driver.

    Iteration 1 clusters handcrafted features; iteration i >= 2 refits the
    codebook on the previous checkpoint's hidden activations, re-assigns
    labels, and retrains from scratch with the same seed policy.
    """
    from .quantize import DEFAULT_FRAME_BUDGET, fit_kmeans, fit_second_iteration, write_codebook

    if n_iterations < 1:
        raise WorkbenchError("need at least one iteration")
    if cfg.paradigm != "discrete":
        raise WorkbenchError("the iteration pipeline trains the discrete paradigm")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(manifest_path)
    budget = frame_budget or DEFAULT_FRAME_BUDGET
    if iter2_layer is None:
        iter2_layer = max(1, encoder_cfg.n_transformer_layers // 2)

    final = None
    for iteration in range(1, n_iterations + 1):
        labels_dir = out_dir / f"labels_iter{iteration}"
        codebook_path = out_dir / f"codebook_iter{iteration}.sslk"
        if iteration == 1:
            stacked = np.concatenate(
                [mfcc_features_for(p).values for p in manifest.paths()], axis=0)
            codebook = fit_kmeans(stacked, k, seed=kmeans_seed, feature_kind="mfcc",
                                  frame_budget=budget)
            features_for = mfcc_features_for
        else:
            codebook = fit_second_iteration(final, manifest_path, audio_root,
                                            layer=iter2_layer, k=k, seed=kmeans_seed,
                                            frame_budget=budget)
            prev_model = load_checkpoint(final).model

            def features_for(path, _model=prev_model):
                from .audio import FeatureMatrix

                clip = load_audio(Path(audio_root) / path)
                out = _model.forward(clip.samples[None, :])
                return FeatureMatrix(values=out.layers[iter2_layer].data[0],
                                     frame_rate=encoder_cfg.frame_rate,
                                     feature_kind="deep")

        write_codebook(codebook_path, codebook)
        assign_labels_for_manifest(codebook, manifest, features_for, labels_dir)
        result = run_pretraining(cfg, encoder_cfg, manifest_path, audio_root,
                                 out_dir / f"iter{iteration}", labels_dir=labels_dir,
                                 n_codes=k)
        final = result.final_checkpoint
    return final
