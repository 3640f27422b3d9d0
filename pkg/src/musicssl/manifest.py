"""Manifest and label sidecar files.

A manifest is tab-separated text, one clip per row: relative audio path,
duration in samples, optional split tag (train/valid/test). Comment lines
start with '#'; the writer records the producing config hash there.

Labels live in a sidecar TSV keyed by the same relative path. The label
string encoding depends on the task:
  pitch/multiclass  integer
  tags/multilabel   bitset as hex
  emotion           two floats separated by a space
  beat              space-separated beat times in seconds
  key               tonic:mode, e.g. "7:minor"
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import WorkbenchError

SPLITS = ("train", "valid", "test")

TASKS = ("pitch", "beat", "key", "tags", "emotion")

TASK_KIND = {
    "pitch": "multiclass",
    "key": "multiclass",
    "tags": "multilabel",
    "emotion": "regression",
    "beat": "framewise",
}


@dataclass
class ManifestRow:
    path: str
    duration: int
    split: str | None = None


@dataclass
class Manifest:
    rows: list
    config_hash: str | None = None

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.path in seen:
                raise WorkbenchError(f"duplicate manifest path: {row.path}")
            seen.add(row.path)
            if row.duration <= 0:
                raise WorkbenchError(f"non-positive duration for {row.path}")
            if row.split is not None and row.split not in SPLITS:
                raise WorkbenchError(f"unknown split {row.split!r} for {row.path}")

    def paths(self, split: str | None = None):
        return [r.path for r in self.rows if split is None or r.split == split]

    def __len__(self):
        return len(self.rows)


def write_manifest(path, manifest: Manifest) -> None:
    lines = ["# musicssl manifest"]
    if manifest.config_hash:
        lines.append(f"# config_hash={manifest.config_hash}")
    for row in manifest.rows:
        split = row.split or ""
        lines.append(f"{row.path}\t{row.duration}\t{split}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise WorkbenchError(f"manifest not found: {path}")
    rows = []
    cfg_hash = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            if "config_hash=" in line:
                cfg_hash = line.split("config_hash=", 1)[1].strip()
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise WorkbenchError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        split = parts[2] if len(parts) == 3 and parts[2] else None
        try:
            duration = int(parts[1])
        except ValueError as exc:
            raise WorkbenchError(f"{path}:{lineno}: bad duration {parts[1]!r}") from exc
        rows.append(ManifestRow(path=parts[0], duration=duration, split=split))
    return Manifest(rows=rows, config_hash=cfg_hash)


def write_labels(path, labels: dict) -> None:
    """labels maps relative clip path -> already-encoded label string."""
    lines = [f"{clip_path}\t{text}" for clip_path, text in labels.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise WorkbenchError(f"label file not found: {path}")
    labels = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise WorkbenchError(f"{path}:{lineno}: expected path<TAB>label")
        clip_path, text = line.split("\t", 1)
        labels[clip_path] = text
    return labels


def encode_label(task: str, value) -> str:
    if task == "pitch":
        return str(int(value))
    if task == "beat":
        return " ".join(f"{t:.6f}" for t in value)
    if task == "key":
        return f"{value.tonic}:{value.mode}"
    if task == "tags":
        return f"{int(value):02x}"
    if task == "emotion":
        return f"{value[0]:.6f} {value[1]:.6f}"
    raise WorkbenchError(f"unknown task {task!r}")


def decode_label(task: str, text: str):
    from .metrics import KeyLabel

    try:
        if task == "pitch":
            return int(text)
        if task == "beat":
            return np.array([float(t) for t in text.split()]) if text.strip() else np.zeros(0)
        if task == "key":
            tonic, mode = text.split(":")
            return KeyLabel(tonic=int(tonic), mode=mode)
        if task == "tags":
            return int(text, 16)
        if task == "emotion":
            v, a = text.split()
            return (float(v), float(a))
    except WorkbenchError:
        raise
    except Exception as exc:
        raise WorkbenchError(f"bad {task} label {text!r}") from exc
    raise WorkbenchError(f"unknown task {task!r}")
