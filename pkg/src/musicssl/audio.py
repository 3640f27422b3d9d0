"""Audio ingestion and handcrafted feature extraction.

Everything downstream runs at 16 kHz input / 50 Hz frames, so the default
analysis uses a 320-sample hop. Features (MFCC stacks, chroma) are computed
with an uncentered STFT: frame t covers samples [t*hop, t*hop + fft_size),
which keeps frames aligned 1:1 with the encoder's output grid.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import UnsupportedFormatError, WorkbenchError

SAMPLE_RATE = 16000
HOP = 320
FFT_SIZE = 1024
FRAME_RATE = SAMPLE_RATE / HOP  # 50 Hz

LOG_FLOOR = 1e-10

FEATURE_KINDS = ("mfcc", "chroma", "deep")

_FEATURE_MAGIC = b"SSLF"
_FEATURE_VERSION = 1


@dataclass
class AudioClip:
    """Mono waveform. Samples are float32 in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise WorkbenchError("AudioClip must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise WorkbenchError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise WorkbenchError("AudioClip contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    """Time-major frame features: values has shape (T, D)."""

    values: np.ndarray
    frame_rate: float
    feature_kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise WorkbenchError("FeatureMatrix values must be 2-D (T, D)")
        if self.feature_kind not in FEATURE_KINDS:
            raise WorkbenchError(f"unknown feature kind {self.feature_kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise WorkbenchError("FeatureMatrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class MfccConfig:
    """MFCC analysis settings.

    With deltas enabled the output dimension is 3 * n_coeffs (coefficients,
    deltas, delta-deltas): 39 for n_coeffs=13 and 60 for n_coeffs=20.
    pad_tail zero-pads the signal by fft_size - hop so that a frame exists
    for every hop-aligned offset; the label pipeline uses this to cover
    every encoder output frame.
    """

    n_mels: int = 40
    n_coeffs: int = 13
    fft_size: int = FFT_SIZE
    hop: int = HOP
    include_deltas: bool = True
    delta_width: int = 5
    pad_tail: bool = False

    def __post_init__(self):
        if self.n_coeffs > self.n_mels:
            raise WorkbenchError("n_coeffs must not exceed n_mels")
        if self.delta_width < 3 or self.delta_width % 2 == 0:
            raise WorkbenchError("delta_width must be odd and >= 3")
        if self.hop <= 0 or self.fft_size <= 0:
            raise WorkbenchError("hop and fft_size must be positive")

    @property
    def dim(self) -> int:
        return 3 * self.n_coeffs if self.include_deltas else self.n_coeffs


def load_audio(path) -> AudioClip:
    """Read a PCM WAV file (16-bit int or 32-bit float, mono or stereo).

    Stereo is averaged to mono. Integer samples are scaled to [-1, 1].
    """
    path = Path(path)
    if not path.exists():
        raise WorkbenchError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise UnsupportedFormatError(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = np.clip(data, -1.0, 1.0).astype(np.float32)
    else:
        raise UnsupportedFormatError(
            f"{path}: unsupported WAV sample format {data.dtype}; "
            "expected 16-bit PCM or 32-bit float"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise WorkbenchError(f"{path}: zero-length audio")
    return AudioClip(samples=samples, sample_rate=int(rate))


def save_audio(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM WAV (deterministic quantization)."""
    pcm = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited (windowed-sinc polyphase) resampling."""
    if target_rate <= 0:
        raise WorkbenchError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(samples=clip.samples.copy(), sample_rate=clip.sample_rate)
    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    out = resample_poly(clip.samples.astype(np.float64), up, down)
    out = np.clip(out, -1.0, 1.0)
    return AudioClip(samples=out.astype(np.float32), sample_rate=target_rate)


def frame_count(n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> int:
    """Number of uncentered analysis frames for a signal of n_samples."""
    if n_samples < fft_size:
        return 0
    return (n_samples - fft_size) // hop + 1


def _frame_signal(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    t = frame_count(len(x), fft_size, hop)
    if t == 0:
        return np.zeros((0, fft_size))
    view = np.lib.stride_tricks.sliding_window_view(x, fft_size)
    return view[:: hop][:t]


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Hann-windowed power spectrum, shape (T, fft_size // 2 + 1)."""
    frames = _frame_signal(np.asarray(x, dtype=np.float64), fft_size, hop)
    if frames.shape[0] == 0:
        return np.zeros((0, fft_size // 2 + 1))
    spec = np.fft.rfft(frames * _periodic_hann(fft_size), axis=1)
    return np.abs(spec) ** 2


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, fft_size // 2 + 1)."""
    n_bins = fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / fft_size
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def cepstral_coefficients(log_mel: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II along the mel axis, truncated to n_coeffs."""
    from scipy.fft import dct

    return dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_coeffs]


def delta_values(values: np.ndarray, width: int) -> np.ndarray:
    """Regression-slope deltas over a window of `width` frames.

    Edge frames use replicated padding; a constant input yields exact zeros.
    """
    if width < 3 or width % 2 == 0:
        raise WorkbenchError("delta width must be odd and >= 3")
    half = width // 2
    if values.shape[0] == 0:
        return values.copy()
    padded = np.pad(values, ((half, half), (0, 0)), mode="edge")
    num = np.zeros_like(values, dtype=np.float64)
    for j in range(1, half + 1):
        num += j * (padded[half + j : padded.shape[0] - half + j]
                    - padded[half - j : padded.shape[0] - half - j])
    denom = 2.0 * sum(j * j for j in range(1, half + 1))
    return (num / denom).astype(values.dtype)


def deltas(features: FeatureMatrix, width: int = 5) -> FeatureMatrix:
    """Frame-rate-preserving deltas of a feature matrix."""
    out = delta_values(features.values.astype(np.float64), width)
    return FeatureMatrix(values=out.astype(np.float32),
                         frame_rate=features.frame_rate,
                         feature_kind=features.feature_kind)


def mfcc(clip: AudioClip, cfg: MfccConfig | None = None) -> FeatureMatrix:
    """MFCCs (optionally stacked with deltas and delta-deltas) at 50 Hz."""
    cfg = cfg or MfccConfig()
    if clip.sample_rate != SAMPLE_RATE:
        raise WorkbenchError(
            f"mfcc expects {SAMPLE_RATE} Hz input, got {clip.sample_rate}"
        )
    x = clip.samples.astype(np.float64)
    if cfg.pad_tail:
        x = np.pad(x, (0, cfg.fft_size - cfg.hop))
    spec = power_spectrogram(x, cfg.fft_size, cfg.hop)
    fb = mel_filterbank(cfg.n_mels, cfg.fft_size, SAMPLE_RATE)
    log_mel = np.log(np.maximum(spec @ fb.T, LOG_FLOOR))
    coeffs = cepstral_coefficients(log_mel, cfg.n_coeffs)
    if cfg.include_deltas:
        d1 = delta_values(coeffs, cfg.delta_width)
        d2 = delta_values(d1, cfg.delta_width)
        coeffs = np.concatenate([coeffs, d1, d2], axis=1)
    return FeatureMatrix(values=coeffs.astype(np.float32),
                         frame_rate=SAMPLE_RATE / cfg.hop,
                         feature_kind="mfcc")


# Pitch-class index convention: C=0 ... B=11 (A=9).
_CHROMA_FMIN = 27.5
_CHROMA_FMAX = 4200.0


def chroma(clip: AudioClip, fft_size: int = FFT_SIZE, hop: int = HOP,
           pad_tail: bool = False) -> FeatureMatrix:
    """12-bin pitch-class profile per frame, L1-normalized where nonzero."""
    if clip.sample_rate != SAMPLE_RATE:
        raise WorkbenchError(
            f"chroma expects {SAMPLE_RATE} Hz input, got {clip.sample_rate}"
        )
    x = clip.samples.astype(np.float64)
    if pad_tail:
        x = np.pad(x, (0, fft_size - hop))
    spec = power_spectrogram(x, fft_size, hop)
    n_bins = fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * SAMPLE_RATE / fft_size
    usable = (bin_freqs >= _CHROMA_FMIN) & (bin_freqs <= _CHROMA_FMAX)
    pitch_class = np.zeros(n_bins, dtype=np.int64)
    midi = 69.0 + 12.0 * np.log2(np.maximum(bin_freqs, 1e-6) / 440.0)
    pitch_class[usable] = np.round(midi[usable]).astype(np.int64) % 12
    out = np.zeros((spec.shape[0], 12))
    for pc in range(12):
        cols = usable & (pitch_class == pc)
        if cols.any():
            out[:, pc] = spec[:, cols].sum(axis=1)
    totals = out.sum(axis=1, keepdims=True)
    nonzero = totals[:, 0] > 0
    out[nonzero] /= totals[nonzero]
    return FeatureMatrix(values=out.astype(np.float32),
                         frame_rate=SAMPLE_RATE / hop,
                         feature_kind="chroma")


def write_features(path, features: FeatureMatrix) -> None:
    """Binary feature dump: SSLF magic, version, kind, frame rate, T, D, f32 data."""
    kind_id = FEATURE_KINDS.index(features.feature_kind)
    t, d = features.values.shape
    header = struct.pack("<4sIBfQI", _FEATURE_MAGIC, _FEATURE_VERSION,
                         kind_id, float(features.frame_rate), t, d)
    data = np.ascontiguousarray(features.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_features(path) -> FeatureMatrix:
    if not Path(path).exists():
        raise WorkbenchError(f"feature dump not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIBfQI"))
        if len(header) < struct.calcsize("<4sIBfQI"):
            raise UnsupportedFormatError(f"{path}: not a feature dump (truncated)")
        magic, version, kind_id, frame_rate, t, d = struct.unpack("<4sIBfQI", header)
        if magic != _FEATURE_MAGIC:
            raise UnsupportedFormatError(f"{path}: not a feature dump (bad magic)")
        if version != _FEATURE_VERSION:
            raise UnsupportedFormatError(f"{path}: unsupported version {version}")
        raw = fh.read(t * d * 4)
    if len(raw) != t * d * 4:
        raise WorkbenchError(f"{path}: truncated feature dump")
    values = np.frombuffer(raw, dtype="<f4").reshape(t, d)
    return FeatureMatrix(values=values.copy(), frame_rate=frame_rate,
                         feature_kind=FEATURE_KINDS[kind_id])
