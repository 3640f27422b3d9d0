"""K-means codebooks over frame features and per-frame pseudo-label assignment.

Features are standardized per dimension before clustering (the stats are
stored in the codebook and re-applied at assignment time), initialization
is k-means++ from an explicit seed, and every tie/repair rule is
deterministic, so refitting with the same inputs reproduces the codebook
byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import FEATURE_KINDS, FeatureMatrix
from .errors import UnsupportedFormatError, WorkbenchError

DEFAULT_FRAME_BUDGET = 2_000_000

_CODEBOOK_MAGIC = b"SSLK"
_CODEBOOK_VERSION = 1
_LABEL_MAGIC = b"SSLL"

_ASSIGN_CHUNK = 16384


@dataclass
class Codebook:
    """K centroids in (optionally standardized) feature space."""

    centroids: np.ndarray
    feature_kind: str
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise WorkbenchError("centroids must be a (K, D) matrix with K >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise WorkbenchError("centroids contain non-finite values")
        if self.feature_kind not in FEATURE_KINDS:
            raise WorkbenchError(f"unknown feature kind {self.feature_kind!r}")
        if (self.norm_mean is None) != (self.norm_std is None):
            raise WorkbenchError("norm_mean and norm_std must be given together")
        if self.norm_std is not None and np.any(np.asarray(self.norm_std) <= 0):
            raise WorkbenchError("norm_std must be positive per dimension")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def normalize(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if self.norm_mean is None:
            return rows
        return (rows - self.norm_mean) / self.norm_std


@dataclass
class LabelSequence:
    """Per-frame cluster ids aligned with a feature matrix."""

    ids: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint32)
        if self.ids.ndim != 1:
            raise WorkbenchError("label ids must be 1-D")


def _nearest(rows: np.ndarray, centroids: np.ndarray):
    """Nearest centroid ids and squared distances; ties go to the lowest id."""
    ids = np.empty(len(rows), dtype=np.int64)
    dists = np.empty(len(rows), dtype=np.float64)
    c_sq = np.sum(centroids ** 2, axis=1)
    for start in range(0, len(rows), _ASSIGN_CHUNK):
        chunk = rows[start:start + _ASSIGN_CHUNK]
        d2 = np.sum(chunk ** 2, axis=1)[:, None] - 2.0 * chunk @ centroids.T + c_sq[None, :]
        ids[start:start + len(chunk)] = np.argmin(d2, axis=1)
        dists[start:start + len(chunk)] = np.maximum(d2[np.arange(len(chunk)),
                                                        ids[start:start + len(chunk)]], 0.0)
    return ids, dists


def _kmeanspp_init(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(rows)
    centroids = np.empty((k, rows.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = rows[first]
    d2 = np.sum((rows - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: take the first unused row
            idx = int(np.argmax(d2 == 0))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = rows[idx]
        d2 = np.minimum(d2, np.sum((rows - centroids[j]) ** 2, axis=1))
    return centroids


def fit_kmeans(features: np.ndarray, k: int, max_iter: int = 100, tol: float = 1e-7,
               seed: int = 0, feature_kind: str = "mfcc", standardize: bool = True,
               frame_budget: int = DEFAULT_FRAME_BUDGET) -> Codebook:
    """Lloyd's algorithm with k-means++ init on per-dim standardized rows.

    Empty clusters are re-seeded to the point currently farthest from its
    assigned centroid. Inertia is checked to be non-increasing on every
    iteration. When the input exceeds frame_budget rows, fitting runs on a
    seeded uniform subsample (assignment still covers everything).
    """
    rows = np.asarray(features, dtype=np.float64)
    if rows.ndim != 2:
        raise WorkbenchError("features must be a (N, D) matrix")
    if not np.all(np.isfinite(rows)):
        raise WorkbenchError("features contain non-finite values")
    if k < 1 or len(rows) < k:
        raise WorkbenchError(f"need at least k={k} rows, got {len(rows)}")

    rng = np.random.default_rng(seed)
    if len(rows) > frame_budget:
        keep = np.sort(rng.choice(len(rows), size=frame_budget, replace=False))
        rows = rows[keep]

    norm_mean = norm_std = None
    if standardize:
        norm_mean = rows.mean(axis=0)
        norm_std = np.maximum(rows.std(axis=0), 1e-8)
        rows = (rows - norm_mean) / norm_std

    centroids = _kmeanspp_init(rows, k, rng)
    prev_inertia = np.inf
    for _ in range(max_iter):
        ids, d2 = _nearest(rows, centroids)
        counts = np.bincount(ids, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(d2))
            centroids[empty] = rows[far]
            ids[far] = empty
            d2[far] = 0.0
            counts = np.bincount(ids, minlength=k)
        step_inertia = float(d2.sum())
        if step_inertia > prev_inertia * (1 + 1e-12) + 1e-12:
            raise WorkbenchError("k-means inertia increased; numerical fault")
        if np.isfinite(prev_inertia) and \
                prev_inertia - step_inertia <= tol * max(prev_inertia, 1e-12):
            break  # converged; centroids stay consistent with the last assignment
        prev_inertia = step_inertia
        sums = np.zeros((k, rows.shape[1]), dtype=np.float64)
        np.add.at(sums, ids, rows)
        centroids = sums / counts[:, None]

    return Codebook(centroids=centroids, feature_kind=feature_kind,
                    norm_mean=norm_mean, norm_std=norm_std)


def inertia(codebook: Codebook, features: np.ndarray) -> float:
    rows = codebook.normalize(features)
    _, d2 = _nearest(rows, codebook.centroids)
    return float(d2.sum())


def assign(codebook: Codebook, features: FeatureMatrix) -> LabelSequence:
    """Nearest-centroid ids for every frame of a feature matrix."""
    if features.dim != codebook.dim:
        raise WorkbenchError(
            f"feature dim {features.dim} does not match codebook dim {codebook.dim}")
    rows = codebook.normalize(features.values)
    ids, _ = _nearest(rows, codebook.centroids)
    return LabelSequence(ids=ids.astype(np.uint32), frame_rate=features.frame_rate)


def fit_second_iteration(checkpoint_path, manifest_path, audio_root, layer: int,
                         k: int, max_iter: int = 100, tol: float = 1e-7, seed: int = 0,
                         frame_budget: int = DEFAULT_FRAME_BUDGET) -> Codebook:
    """Refit the codebook on a trained encoder's hidden activations.

    Runs a teacher-free, mask-free forward pass over every manifest clip,
    takes the chosen entry of the layer stack (0 = conv tokens, 1..L =
    transformer layers), and clusters those frames.
    """
    from .audio import load_audio
    from .encoder import load_checkpoint
    from .manifest import read_manifest

    model = load_checkpoint(checkpoint_path).model
    n_layers = model.config.n_transformer_layers
    if not 0 <= layer <= n_layers:
        raise WorkbenchError(f"layer {layer} outside [0, {n_layers}]")
    manifest = read_manifest(manifest_path)
    audio_root = Path(audio_root)
    chunks = []
    for path in manifest.paths():
        clip = load_audio(audio_root / path)
        out = model.forward(clip.samples[None, :])
        chunks.append(out.layers[layer].data[0].astype(np.float64))
    frames = np.concatenate(chunks, axis=0)
    return fit_kmeans(frames, k, max_iter=max_iter, tol=tol, seed=seed,
                      feature_kind="deep", frame_budget=frame_budget)


def write_codebook(path, codebook: Codebook) -> None:
    kind_id = FEATURE_KINDS.index(codebook.feature_kind)
    has_norm = codebook.norm_mean is not None
    header = struct.pack("<4sIIIBB", _CODEBOOK_MAGIC, _CODEBOOK_VERSION,
                         codebook.k, codebook.dim, kind_id, int(has_norm))
    with open(path, "wb") as fh:
        fh.write(header)
        if has_norm:
            fh.write(np.ascontiguousarray(codebook.norm_mean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(codebook.norm_std, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())


def read_codebook(path) -> Codebook:
    if not Path(path).exists():
        raise WorkbenchError(f"codebook not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIIBB"))
        if len(header) < struct.calcsize("<4sIIIBB"):
            raise UnsupportedFormatError(f"{path}: not a codebook file (truncated)")
        magic, version, k, d, kind_id, has_norm = struct.unpack("<4sIIIBB", header)
        if magic != _CODEBOOK_MAGIC:
            raise UnsupportedFormatError(f"{path}: not a codebook file")
        if version != _CODEBOOK_VERSION:
            raise UnsupportedFormatError(f"{path}: unsupported version {version}")
        norm_mean = norm_std = None
        if has_norm:
            norm_mean = np.frombuffer(fh.read(d * 4), dtype="<f4").astype(np.float64)
            norm_std = np.frombuffer(fh.read(d * 4), dtype="<f4").astype(np.float64)
        raw = fh.read(k * d * 4)
    if len(raw) != k * d * 4:
        raise WorkbenchError(f"{path}: truncated codebook")
    centroids = np.frombuffer(raw, dtype="<f4").reshape(k, d).astype(np.float64)
    return Codebook(centroids=centroids, feature_kind=FEATURE_KINDS[kind_id],
                    norm_mean=norm_mean, norm_std=norm_std)


def write_label_sequence(path, labels: LabelSequence) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sQ", _LABEL_MAGIC, len(labels.ids)))
        fh.write(np.ascontiguousarray(labels.ids, dtype="<u4").tobytes())


def read_label_sequence(path, frame_rate: float = 50.0) -> LabelSequence:
    if not Path(path).exists():
        raise WorkbenchError(f"label file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sQ"))
        if len(header) < struct.calcsize("<4sQ"):
            raise UnsupportedFormatError(f"{path}: not a label file (truncated)")
        magic, t = struct.unpack("<4sQ", header)
        if magic != _LABEL_MAGIC:
            raise UnsupportedFormatError(f"{path}: not a label file")
        raw = fh.read(t * 4)
    if len(raw) != t * 4:
        raise WorkbenchError(f"{path}: truncated label file")
    ids = np.frombuffer(raw, dtype="<u4").copy()
    return LabelSequence(ids=ids, frame_rate=frame_rate)
