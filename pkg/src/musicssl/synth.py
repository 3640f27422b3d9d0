"""Deterministic synthetic labeled corpus for desk-scale end-to-end checks.

Every waveform is a pure function of (spec, clip index): generators derive
their RNG from explicit seeds, and the train/valid/test split orders clip
indices by a stable hash so regeneration reproduces the corpus byte for
byte. Labels are constructed to be recoverable from the audio itself
(fundamental via autocorrelation, click onsets via the envelope, scale
membership via chroma), so downstream stages can be validated against
independent analysis rather than trust.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, save_audio
from .errors import WorkbenchError
from .hashing import config_hash
from .manifest import Manifest, ManifestRow, encode_label, write_labels, write_manifest
from .metrics import KeyLabel

TAG_NAMES = ("sine", "saw", "square", "noise", "tremolo", "chirp", "bass", "bell")

MIDI_MIN, MIDI_MAX = 36, 84
BPM_MIN, BPM_MAX = 40, 240

PEAK_TARGET = 0.9

MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
MINOR_SCALE = (0, 2, 3, 5, 7, 8, 10)

# Default clip lengths chosen so each task has enough material for its probe
# (a handful of beats for beat tracking, several arpeggio cycles for key).
DEFAULT_DURATION = {"pitch": 2.0, "beat": 6.0, "key": 4.0, "tags": 3.0, "emotion": 4.0}


@dataclass
class SynthSpec:
    task: str
    n_clips: int
    duration: float
    seed: int
    sample_rate: int = 16000

    def __post_init__(self):
        if self.task not in DEFAULT_DURATION:
            raise WorkbenchError(f"unknown synth task {self.task!r}")
        if self.n_clips <= 0 or self.duration <= 0:
            raise WorkbenchError("n_clips and duration must be positive")

    def to_dict(self) -> dict:
        return {"task": self.task, "n_clips": self.n_clips, "duration": self.duration,
                "seed": self.seed, "sample_rate": self.sample_rate}


@dataclass
class LabeledClip:
    clip: AudioClip
    label: object


def derive_seed(*parts) -> int:
    """Stable 64-bit seed derived from integer parts."""
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69) / 12.0)


def _fade(x: np.ndarray, sr: int, ms: float = 5.0) -> np.ndarray:
    n = min(int(sr * ms / 1000.0), len(x) // 2)
    if n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n)
        x[:n] *= ramp
        x[-n:] *= ramp[::-1]
    return x


def _normalize(x: np.ndarray, peak: float = PEAK_TARGET) -> np.ndarray:
    m = np.max(np.abs(x))
    if m > 0:
        x = x * (peak / m)
    return x.astype(np.float32)


def _harmonic_tone(f0: float, duration: float, sr: int, amps, phases) -> np.ndarray:
    t = np.arange(int(round(duration * sr))) / sr
    x = np.zeros_like(t)
    for k, (amp, phase) in enumerate(zip(amps, phases), start=1):
        freq = k * f0
        if freq >= sr / 2 * 0.95:
            break
        x += amp * np.sin(2 * np.pi * freq * t + phase)
    return x


def gen_pitch_clip(midi: int, duration: float, seed: int, sr: int = 16000) -> LabeledClip:
    """Harmonic tone with 4-8 partials of seeded random amplitude."""
    if not MIDI_MIN <= midi <= MIDI_MAX:
        raise WorkbenchError(f"midi pitch {midi} outside [{MIDI_MIN}, {MIDI_MAX}]")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, midi])
    f0 = midi_to_hz(midi)
    n_partials = int(rng.integers(4, 9))
    n_partials = max(1, min(n_partials, int((sr / 2 * 0.95) / f0)))
    amps = rng.uniform(0.2, 1.0, n_partials) / np.arange(1, n_partials + 1)
    phases = rng.uniform(0, 2 * np.pi, n_partials)
    x = _harmonic_tone(f0, duration, sr, amps, phases)
    x = _normalize(_fade(x, sr))
    return LabeledClip(clip=AudioClip(samples=x, sample_rate=sr), label=int(midi))


def gen_click_track(bpm: float, duration: float, seed: int, sr: int = 16000) -> LabeledClip:
    """Decaying-noise clicks on an exact beat grid starting at t=0."""
    if not BPM_MIN <= bpm <= BPM_MAX:
        raise WorkbenchError(f"bpm {bpm} outside [{BPM_MIN}, {BPM_MAX}]")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, int(bpm * 1000)])
    n = int(round(duration * sr))
    n_beats = int(np.floor(duration * bpm / 60.0 + 1e-9))
    beat_times = np.arange(n_beats) * 60.0 / bpm
    x = 0.01 * rng.standard_normal(n)
    click_len = int(0.02 * sr)
    envelope = np.exp(-np.arange(click_len) / (0.004 * sr))
    for t in beat_times:
        start = int(round(t * sr))
        seg = min(click_len, n - start)
        if seg > 0:
            x[start:start + seg] += rng.standard_normal(seg) * envelope[:seg]
    x = _normalize(x)
    return LabeledClip(clip=AudioClip(samples=x, sample_rate=sr), label=beat_times)


def gen_key_clip(key: KeyLabel, duration: float, seed: int, sr: int = 16000) -> LabeledClip:
    """Arpeggiated diatonic tones of the key across octaves."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, key.tonic, 0 if key.mode == "major" else 1])
    scale = MAJOR_SCALE if key.mode == "major" else MINOR_SCALE
    n = int(round(duration * sr))
    x = np.zeros(n)
    step = 0.125
    note_len = 0.12
    # mostly-octave partials keep nearly all chroma mass inside the scale
    partial_amps = (1.0, 0.5, 0.25, 0.125)
    for k in range(int(duration / step)):
        degree = scale[int(rng.integers(0, len(scale)))]
        octave = int(rng.integers(4, 7))
        midi = 12 * octave + key.tonic + degree
        gain = rng.uniform(0.5, 1.0)
        phases = rng.uniform(0, 2 * np.pi, len(partial_amps))
        tone = _harmonic_tone(midi_to_hz(midi), note_len, sr, partial_amps, phases)
        tone = _fade(tone * gain, sr)
        start = int(round(k * step * sr))
        seg = min(len(tone), n - start)
        if seg > 0:
            x[start:start + seg] += tone[:seg]
    x = _normalize(x)
    return LabeledClip(clip=AudioClip(samples=x, sample_rate=sr), label=key)


def _tag_component(tag: str, n: int, sr: int, rng) -> np.ndarray:
    t = np.arange(n) / sr
    if tag == "sine":
        f = rng.uniform(300, 900)
        return np.sin(2 * np.pi * f * t)
    if tag == "saw":
        f = rng.uniform(100, 300)
        x = np.zeros(n)
        for k in range(1, int(sr / 2 * 0.9 / f) + 1):
            x += np.sin(2 * np.pi * k * f * t) / k
        return x
    if tag == "square":
        f = rng.uniform(150, 400)
        x = np.zeros(n)
        for k in range(1, int(sr / 2 * 0.9 / f) + 1, 2):
            x += np.sin(2 * np.pi * k * f * t) / k
        return x
    if tag == "noise":
        return rng.standard_normal(n)
    if tag == "tremolo":
        f = rng.uniform(400, 800)
        am = 0.5 * (1 + np.sin(2 * np.pi * 6.0 * t))
        return am * np.sin(2 * np.pi * f * t)
    if tag == "chirp":
        f0, f1 = rng.uniform(200, 400), rng.uniform(1500, 3000)
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * t[-1] if n > 1 else 1))
        return np.sin(phase)
    if tag == "bass":
        f = rng.uniform(60, 100)
        return np.sin(2 * np.pi * f * t)
    if tag == "bell":
        f = rng.uniform(500, 1000)
        x = np.zeros(n)
        for ratio, amp in ((1.0, 1.0), (2.76, 0.6), (5.4, 0.35)):
            if f * ratio < sr / 2 * 0.95:
                x += amp * np.sin(2 * np.pi * f * ratio * t) * np.exp(-t / 0.8)
        return x
    raise WorkbenchError(f"unknown tag {tag!r}")


def gen_tag_clip(tags: int, duration: float, seed: int, sr: int = 16000) -> LabeledClip:
    """Mixture clip whose audible components are selected by the tag bitset."""
    if tags <= 0 or tags >= 1 << len(TAG_NAMES):
        raise WorkbenchError(f"tag bitset must be nonzero and fit {len(TAG_NAMES)} tags")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, tags])
    n = int(round(duration * sr))
    x = np.zeros(n)
    for bit, name in enumerate(TAG_NAMES):
        if tags >> bit & 1:
            x += rng.uniform(0.6, 1.0) * _tag_component(name, n, sr, rng)
    x = _normalize(_fade(x, sr))
    return LabeledClip(clip=AudioClip(samples=x, sample_rate=sr), label=int(tags))


def gen_emotion_clip(valence: float, arousal: float, duration: float, seed: int,
                     sr: int = 16000) -> LabeledClip:
    """Valence maps to chord third (minor->major), arousal to event rate and brightness."""
    if not (-1 <= valence <= 1 and -1 <= arousal <= 1):
        raise WorkbenchError("valence and arousal must lie in [-1, 1]")
    rng = np.random.default_rng([seed & 0xFFFFFFFF,
                                 int((valence + 1) * 1000), int((arousal + 1) * 1000)])
    n = int(round(duration * sr))
    x = np.zeros(n)
    rate = 1.0 + 3.5 * (arousal + 1.0)  # 1..8 events per second
    brightness = 0.2 + 0.4 * (arousal + 1.0) / 2.0
    third = 3.5 + 0.5 * valence  # semitones above the root, minor..major
    root_midi = 57 + rng.integers(0, 5)
    n_events = int(duration * rate)
    for k in range(n_events):
        start_t = k / rate
        chord = (0.0, third, 7.0)
        note_len = min(0.9 / rate, 0.4)
        for interval in chord:
            f = midi_to_hz(root_midi + interval)
            amps = (1.0, brightness, brightness ** 2)
            phases = rng.uniform(0, 2 * np.pi, len(amps))
            tone = _fade(_harmonic_tone(f, note_len, sr, amps, phases), sr, ms=3.0)
            start = int(round(start_t * sr))
            seg = min(len(tone), n - start)
            if seg > 0:
                x[start:start + seg] += tone[:seg] / len(chord)
    x = _normalize(x)
    return LabeledClip(clip=AudioClip(samples=x, sample_rate=sr),
                       label=(float(valence), float(arousal)))


def _clip_for_index(spec: SynthSpec, index: int) -> LabeledClip:
    seed = derive_seed(spec.seed, index)
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, index, 7])
    if spec.task == "pitch":
        midi = MIDI_MIN + index % (MIDI_MAX - MIDI_MIN + 1)
        return gen_pitch_clip(midi, spec.duration, seed, spec.sample_rate)
    if spec.task == "beat":
        bpm = int(rng.integers(60, 181))
        return gen_click_track(bpm, spec.duration, seed, spec.sample_rate)
    if spec.task == "key":
        key = KeyLabel(tonic=index % 12, mode="major" if (index // 12) % 2 == 0 else "minor")
        return gen_key_clip(key, spec.duration, seed, spec.sample_rate)
    if spec.task == "tags":
        bits = int(rng.integers(1, 1 << len(TAG_NAMES)))
        return gen_tag_clip(bits, spec.duration, seed, spec.sample_rate)
    if spec.task == "emotion":
        valence, arousal = rng.uniform(-1.0, 1.0, 2)
        return gen_emotion_clip(float(valence), float(arousal), spec.duration, seed,
                                spec.sample_rate)
    raise WorkbenchError(f"unknown task {spec.task!r}")


def split_assignments(n_clips: int) -> list:
    """8:1:1 split with exact sizes, stable under regeneration.

    Clip indices are ordered by a fixed hash of the index, so membership
    depends only on the index set, never on RNG state.
    """
    n_valid = n_clips // 10
    n_test = n_clips // 10
    ranked = sorted(range(n_clips), key=lambda i: (zlib.crc32(str(i).encode()), i))
    split = ["train"] * n_clips
    for i in ranked[n_clips - n_valid - n_test: n_clips - n_test]:
        split[i] = "valid"
    for i in ranked[n_clips - n_test:]:
        split[i] = "test"
    return split


def gen_corpus(spec: SynthSpec, out_dir, run_hash: str | None = None) -> Path:
    """Write WAVs, labels.tsv and manifest.tsv; returns the manifest path."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    spec_hash = run_hash or config_hash(spec.to_dict())
    splits = split_assignments(spec.n_clips)
    rows, labels = [], {}
    for i in range(spec.n_clips):
        labeled = _clip_for_index(spec, i)
        rel_path = f"audio/clip_{i:05d}.wav"
        save_audio(out_dir / rel_path, labeled.clip)
        rows.append(ManifestRow(path=rel_path, duration=len(labeled.clip.samples),
                                split=splits[i]))
        labels[rel_path] = encode_label(spec.task, labeled.label)
    manifest = Manifest(rows=rows, config_hash=spec_hash)
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, manifest)
    write_labels(out_dir / "labels.tsv", labels)
    return manifest_path
