"""Frozen-encoder probing.

A probe learns a softmax-normalized weighting over the L+1 encoder layer
outputs plus a one-hidden-layer MLP (512 units) on top of the weighted
features. The encoder itself is never updated: embeddings are extracted
up front with windowed forward passes and the probe trains on those.

Clip-level tasks pool each window's frames by temporal mean and average
across windows; the framewise task keeps the per-frame features and rates
every frame independently.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import MusicEncoder, load_checkpoint
from .errors import UnsupportedFormatError, WorkbenchError
from .metrics import roc_auc_macro

TASK_KINDS = ("multiclass", "multilabel", "regression", "framewise")

_PROBE_MAGIC = b"SSLP"
_PROBE_VERSION = 1


@dataclass
class ProbeConfig:
    task_kind: str
    hidden: int = 512
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise WorkbenchError(f"unknown task kind {self.task_kind!r}")
        if self.hidden < 1 or self.lr <= 0:
            raise WorkbenchError("hidden must be >= 1 and lr positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class WindowPolicy:
    window_seconds: float = 5.0
    hop_seconds: float = 5.0
    aggregate: str = "mean"

    def __post_init__(self):
        if self.window_seconds <= 0 or self.hop_seconds <= 0:
            raise WorkbenchError("window and hop must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def window_starts(n_samples: int, policy: WindowPolicy, sample_rate: int) -> list:
    """Start offsets of the inference windows; short clips get one full window."""
    window = int(round(policy.window_seconds * sample_rate))
    hop = int(round(policy.hop_seconds * sample_rate))
    if n_samples <= window:
        return [0]
    return list(range(0, n_samples - window + 1, hop))


def extract_layer_embeddings(model: MusicEncoder, samples: np.ndarray,
                             policy: WindowPolicy | None = None) -> np.ndarray:
    """Per-layer clip embedding, shape (L+1, H): frame mean within each
    window, arithmetic mean across windows."""
    policy = policy or WindowPolicy()
    sr = model.config.sample_rate
    window = int(round(policy.window_seconds * sr))
    per_window = []
    for start in window_starts(len(samples), policy, sr):
        chunk = samples[start:start + window]
        out = model.forward(chunk[None, :])
        per_window.append(np.stack([layer.data[0].mean(axis=0) for layer in out.layers]))
    return np.mean(per_window, axis=0)


def extract_layer_frames(model: MusicEncoder, samples: np.ndarray) -> np.ndarray:
    """Per-frame layer stack for framewise probing, shape (T, L+1, H)."""
    out = model.forward(samples[None, :])
    return np.stack([layer.data[0] for layer in out.layers], axis=1)


def weighted_features(vectors: np.ndarray, raw_weights: np.ndarray) -> np.ndarray:
    """softmax(raw_weights)-weighted sum over the layer axis (axis -2)."""
    vectors = np.asarray(vectors)
    w = np.asarray(raw_weights, dtype=np.float64)
    if vectors.shape[-2] != len(w):
        raise WorkbenchError("layer count does not match weight vector")
    e = np.exp(w - w.max())
    soft = e / e.sum()
    return np.tensordot(vectors, soft, axes=([-2], [0])) if vectors.ndim == 2 else \
        (vectors * soft[..., None]).sum(axis=-2)


def framewise_probe_targets(beat_times, t: int, frame_rate: float) -> np.ndarray:
    """Binary frame labels: the frame at each beat plus both neighbors."""
    targets = np.zeros(t, dtype=np.float32)
    for bt in np.asarray(beat_times, dtype=np.float64):
        center = int(round(bt * frame_rate))
        for f in (center - 1, center, center + 1):
            if 0 <= f < t:
                targets[f] = 1.0
    return targets


class ProbeModel:
    """Layer weighting plus MLP head; the trainable half of the probe."""

    def __init__(self, n_layers: int, input_dim: int, n_outputs: int,
                 config: ProbeConfig, vocab: list | None = None,
                 window: WindowPolicy | None = None, config_hash: str = ""):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.vocab = vocab
        self.window = window or WindowPolicy()
        self.config_hash = config_hash
        self.n_outputs = n_outputs
        limit1 = np.sqrt(6.0 / (input_dim + config.hidden))
        limit2 = np.sqrt(6.0 / (config.hidden + n_outputs))
        self.layer_w = Parameter(np.zeros(n_layers, dtype=np.float32), name="probe.layer_w")
        self.w1 = Parameter(rng.uniform(-limit1, limit1,
                                        (input_dim, config.hidden)).astype(np.float32),
                            name="probe.w1")
        self.b1 = Parameter(np.zeros(config.hidden, dtype=np.float32), name="probe.b1")
        self.w2 = Parameter(rng.uniform(-limit2, limit2,
                                        (config.hidden, n_outputs)).astype(np.float32),
                            name="probe.w2")
        self.b2 = Parameter(np.zeros(n_outputs, dtype=np.float32), name="probe.b2")

    def parameters(self) -> list:
        return [self.layer_w, self.w1, self.b1, self.w2, self.b2]

    def layer_weights(self) -> np.ndarray:
        w = self.layer_w.data.astype(np.float64)
        e = np.exp(w - w.max())
        return e / e.sum()

    def forward(self, x: Tensor) -> Tensor:
        """x: (..., L+1, H) -> logits (..., n_outputs)."""
        soft = ad.softmax(ad.reshape(self.layer_w, (-1, 1)), axis=0)
        combined = ad.tsum(ad.mul(x, soft), axis=x.ndim - 2)
        hidden = ad.relu(ad.add(ad.matmul(combined, self.w1), self.b1))
        return ad.add(ad.matmul(hidden, self.w2), self.b2)

    def snapshot(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def restore(self, snap: dict) -> None:
        for p in self.parameters():
            p.data = snap[p.name].copy()


def _loss_for(task_kind: str, logits: Tensor, targets):
    if task_kind == "multiclass":
        return ad.cross_entropy(logits, targets)
    if task_kind in ("multilabel", "framewise"):
        return ad.bce_with_logits(logits, targets)
    return ad.mse(logits, targets)


def _validation_score(task_kind: str, probe: ProbeModel, x: np.ndarray, y) -> float:
    logits = probe.forward(Tensor(x)).data
    if task_kind == "multiclass":
        return float((logits.argmax(axis=1) == y).mean())
    if task_kind == "multilabel":
        try:
            macro, _, _ = roc_auc_macro(logits, y)
            return macro
        except WorkbenchError:
            return float("-inf")
    if task_kind == "regression":
        scores = []
        for d in range(y.shape[1]):
            tot = float(np.sum((y[:, d] - y[:, d].mean()) ** 2))
            if tot > 0:
                scores.append(1.0 - float(np.sum((y[:, d] - logits[:, d]) ** 2)) / tot)
        return float(np.mean(scores)) if scores else float("-inf")
    # framewise: negative BCE
    z = logits[..., 0]
    yv = np.asarray(y, dtype=np.float64)
    bce = np.maximum(z, 0) - z * yv + np.log1p(np.exp(-np.abs(z)))
    return -float(bce.mean())


@dataclass
class ProbeHistory:
    train_loss: list = field(default_factory=list)
    valid_score: list = field(default_factory=list)
    best_epoch: int = -1


def train_probe(probe: ProbeModel, train_x: np.ndarray, train_y,
                valid_x: np.ndarray | None, valid_y, cfg: ProbeConfig) -> ProbeHistory:
    """Adam on (layer weighting + MLP) with early stopping on the validation
    metric. Inputs are pre-extracted layer stacks: (N, L+1, H) for clip
    tasks, (N_frames, L+1, H) for framewise.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    params = probe.parameters()
    history = ProbeHistory()
    best = (float("-inf"), None)
    stale = 0
    adam_step_idx = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_x))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ad.zero_grads(params)
            logits = probe.forward(Tensor(train_x[idx]))
            loss = _loss_for(cfg.task_kind, logits, train_y[idx])
            ad.backward(loss)
            adam_step_idx += 1
            ad.adam_step(params, lr=cfg.lr, step=adam_step_idx)
            epoch_losses.append(loss.item())
        history.train_loss.append(float(np.mean(epoch_losses)))
        if valid_x is None or len(valid_x) == 0:
            continue
        score = _validation_score(cfg.task_kind, probe, valid_x, valid_y)
        history.valid_score.append(score)
        if score > best[0]:
            best = (score, probe.snapshot())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if best[1] is not None:
        probe.restore(best[1])
    return history


def predict(probe: ProbeModel, model: MusicEncoder, samples: np.ndarray):
    """Task-typed prediction for one clip.

    multiclass -> vocabulary value; multilabel -> per-tag scores in [0,1];
    regression -> float vector; framewise -> per-frame activations in [0,1]
    at the encoder frame rate.
    """
    kind = probe.config.task_kind
    if kind == "framewise":
        frames = extract_layer_frames(model, samples)
        logits = probe.forward(Tensor(frames)).data[..., 0]
        return 1.0 / (1.0 + np.exp(-logits))
    emb = extract_layer_embeddings(model, samples, probe.window)
    logits = probe.forward(Tensor(emb[None, ...])).data[0]
    if kind == "multiclass":
        return probe.vocab[int(np.argmax(logits))]
    if kind == "multilabel":
        return 1.0 / (1.0 + np.exp(-logits))
    return logits


def save_probe(path, probe: ProbeModel) -> None:
    blob = {"config": probe.config.to_dict(), "vocab": probe.vocab,
            "window": probe.window.to_dict(), "config_hash": probe.config_hash,
            "n_outputs": probe.n_outputs,
            "n_layers": int(probe.layer_w.data.shape[0]),
            "input_dim": int(probe.w1.data.shape[0])}
    blob_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _PROBE_MAGIC, _PROBE_VERSION, len(blob_bytes)))
        fh.write(blob_bytes)
        for p in probe.parameters():
            data = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", data.size))
            fh.write(data.tobytes())


def load_probe(path) -> ProbeModel:
    if not Path(path).exists():
        raise WorkbenchError(f"probe file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise UnsupportedFormatError(f"{path}: not a probe file (truncated)")
        magic, version, blob_len = struct.unpack("<4sII", header)
        if magic != _PROBE_MAGIC:
            raise UnsupportedFormatError(f"{path}: not a probe file")
        if version != _PROBE_VERSION:
            raise UnsupportedFormatError(f"{path}: unsupported version {version}")
        blob = json.loads(fh.read(blob_len).decode("utf-8"))
        cfg = ProbeConfig(**blob["config"])
        probe = ProbeModel(blob["n_layers"], blob["input_dim"], blob["n_outputs"], cfg,
                           vocab=blob["vocab"], window=WindowPolicy(**blob["window"]),
                           config_hash=blob.get("config_hash", ""))
        for p in probe.parameters():
            (size,) = struct.unpack("<I", fh.read(4))
            data = np.frombuffer(fh.read(size * 4), dtype="<f4")
            p.data = data.reshape(p.data.shape).copy()
    return probe


# ---------------------------------------------------------------------------
# dataset assembly from a manifest + label sidecar


def build_probe_dataset(checkpoint_path, manifest_path, labels_path, audio_root,
                        task: str, policy: WindowPolicy | None = None,
                        n_tags: int = 8):
    """Extract features and targets for every split.

    Returns (model, dataset) where dataset maps split -> dict with keys
    x, y, paths (and raw labels for evaluation). Clip tasks produce
    (N, L+1, H) stacks; the framewise task produces per-clip frame stacks
    that the caller may concatenate.
    """
    from .audio import load_audio
    from .manifest import TASK_KIND, decode_label, read_labels, read_manifest

    if task not in TASK_KIND:
        raise WorkbenchError(f"unknown task {task!r}")
    kind = TASK_KIND[task]
    model = load_checkpoint(checkpoint_path).model
    manifest = read_manifest(manifest_path)
    raw_labels = read_labels(labels_path)
    policy = policy or WindowPolicy()
    frame_rate = model.config.frame_rate

    vocab = None
    if kind == "multiclass":
        decoded = {p: decode_label(task, raw_labels[p]) for p in manifest.paths()}
        vocab = sorted(set(decoded.values()))

    dataset = {}
    for split in ("train", "valid", "test"):
        paths = manifest.paths(split)
        xs, ys, raws = [], [], []
        for path in paths:
            if path not in raw_labels:
                raise WorkbenchError(f"no label for manifest clip {path}")
            label = decode_label(task, raw_labels[path])
            samples = load_audio(Path(audio_root) / path).samples
            if kind == "framewise":
                frames = extract_layer_frames(model, samples)
                target = framewise_probe_targets(label, frames.shape[0], frame_rate)
                xs.append(frames)
                ys.append(target)
            else:
                xs.append(extract_layer_embeddings(model, samples, policy))
                if kind == "multiclass":
                    ys.append(vocab.index(label))
                elif kind == "multilabel":
                    ys.append([(label >> b) & 1 for b in range(n_tags)])
                else:
                    ys.append(list(label))
            raws.append(label)
        if kind == "framewise":
            entry = {"x": xs, "y": ys, "paths": paths, "labels": raws}
        else:
            entry = {"x": np.asarray(xs, dtype=np.float32),
                     "y": np.asarray(ys,
                                     dtype=np.int64 if kind == "multiclass" else np.float32),
                     "paths": paths, "labels": raws}
        dataset[split] = entry
    return model, dataset, vocab
