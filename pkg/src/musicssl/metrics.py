"""Evaluation metrics and beat-activation decoding.

Tagging metrics (macro ROC-AUC, macro AP) follow the ranking definitions;
tags with a single class in the reference are excluded from the macro mean
and reported separately. Key detection uses a refined accuracy with partial
credit for fifth / relative / parallel confusions. Beat tracking scores an
event F-measure at a +/-20 ms window after decoding framewise activations
with a tempo-phase Viterbi decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import WorkbenchError

MODES = ("major", "minor")

KEY_SCORE_EXACT = 1.0
KEY_SCORE_FIFTH = 0.5
KEY_SCORE_RELATIVE = 0.3
KEY_SCORE_PARALLEL = 0.2

BEAT_TOLERANCE = 0.02  # seconds


@dataclass(frozen=True, order=True)
class KeyLabel:
    """Musical key: tonic pitch class (C=0) and mode."""

    tonic: int
    mode: str

    def __post_init__(self):
        if not 0 <= self.tonic < 12:
            raise WorkbenchError(f"tonic out of range: {self.tonic}")
        if self.mode not in MODES:
            raise WorkbenchError(f"mode must be major or minor, got {self.mode!r}")


@dataclass
class BeatGrid:
    """Strictly increasing beat times in seconds."""

    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1:
            raise WorkbenchError("beat times must be 1-D")
        if len(self.times) and (np.any(self.times < 0) or np.any(np.diff(self.times) <= 0)):
            raise WorkbenchError("beat times must be non-negative and strictly increasing")


@dataclass
class DbnConfig:
    """Tempo-phase decoder settings; fps must match the activation frame rate.

    With correct=True each decoded beat is moved to the highest-activation
    frame inside its beat-state region, which keeps beats locked onto the
    activation peaks when the integer frame grid cannot represent the tempo
    exactly.
    """

    fps: float = 50.0
    min_bpm: float = 55.0
    max_bpm: float = 215.0
    transition_lambda: float = 100.0
    observation_lambda: float = 1.0 / 16.0  # fraction of the interval emitting "beat"
    threshold: float = 0.0
    correct: bool = True

    def __post_init__(self):
        if self.min_bpm >= self.max_bpm:
            raise WorkbenchError("min_bpm must be below max_bpm")
        if self.fps <= 0 or self.transition_lambda <= 0:
            raise WorkbenchError("fps and transition_lambda must be positive")
        if not 0 < self.observation_lambda < 1:
            raise WorkbenchError("observation_lambda must be a fraction in (0, 1)")


@dataclass
class MetricReport:
    """Named metric values plus provenance for one evaluation."""

    task: str
    split: str
    metrics: dict
    config_hash: str = ""
    per_tag: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "split": self.split,
            "metrics": {k: float(v) for k, v in sorted(self.metrics.items())},
            "config_hash": self.config_hash,
            "per_tag": {k: float(v) for k, v in sorted(self.per_tag.items())},
            "notes": self.notes,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MetricReport":
        return cls(task=doc["task"], split=doc["split"], metrics=dict(doc["metrics"]),
                   config_hash=doc.get("config_hash", ""),
                   per_tag=dict(doc.get("per_tag", {})),
                   notes=dict(doc.get("notes", {})))

    def to_text(self) -> str:
        lines = ["[report]", f"task={self.task}", f"split={self.split}",
                 f"config_hash={self.config_hash}", "[metrics]"]
        lines += [f"{k}={self.metrics[k]:.6f}" for k in sorted(self.metrics)]
        if self.per_tag:
            lines.append("[per_tag]")
            lines += [f"{k}={self.per_tag[k]:.6f}" for k in sorted(self.per_tag)]
        for key in sorted(self.notes):
            lines.append(f"[{key}]")
            value = self.notes[key]
            if isinstance(value, (list, tuple)):
                lines += [str(v) for v in value]
            else:
                lines.append(str(value))
        return "\n".join(lines) + "\n"


def _check_score_matrix(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise WorkbenchError("scores and labels must be equal-shape 2-D arrays")
    return scores, labels.astype(bool)


def roc_auc_macro(scores, labels):
    """Macro ROC-AUC over tags.

    Per-tag AUC is the rank statistic P(score_pos > score_neg) + 0.5 P(tie).
    Returns (macro, per_tag, skipped) where skipped lists single-class tags.
    """
    scores, labels = _check_score_matrix(scores, labels)
    per_tag, skipped = {}, []
    for j in range(scores.shape[1]):
        pos = labels[:, j]
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            skipped.append(j)
            continue
        ranks = rankdata(scores[:, j])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per_tag[j] = float(auc)
    if not per_tag:
        raise WorkbenchError("no tag has both classes present")
    return float(np.mean(list(per_tag.values()))), per_tag, skipped


def average_precision_macro(scores, labels):
    """Macro average precision (step-interpolated PR-AUC) over tags.

    Ties are broken by original item order (stable descending sort).
    Returns (macro, per_tag, skipped).
    """
    scores, labels = _check_score_matrix(scores, labels)
    per_tag, skipped = {}, []
    for j in range(scores.shape[1]):
        pos = labels[:, j]
        n_pos = int(pos.sum())
        if n_pos == 0 or n_pos == len(pos):
            skipped.append(j)
            continue
        order = np.argsort(-scores[:, j], kind="stable")
        hits = pos[order]
        precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
        per_tag[j] = float(precision_at[hits].sum() / n_pos)
    if not per_tag:
        raise WorkbenchError("no tag has both classes present")
    return float(np.mean(list(per_tag.values()))), per_tag, skipped


def accuracy(preds, labels) -> float:
    if len(preds) != len(labels):
        raise WorkbenchError("preds and labels must have equal length")
    if len(preds) == 0:
        raise WorkbenchError("cannot score an empty set")
    return float(sum(p == t for p, t in zip(preds, labels)) / len(preds))


def r2(preds, labels) -> float:
    """Coefficient of determination, 1 - SSres/SStot. May be negative."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise WorkbenchError("preds and labels must have equal shape")
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0.0:
        raise WorkbenchError("r2 undefined: labels have zero variance")
    ss_res = float(np.sum((labels - preds) ** 2))
    return 1.0 - ss_res / ss_tot


def refined_key_score(est: KeyLabel, ref: KeyLabel, bidirectional_fifth: bool = False) -> float:
    """Partial-credit key score.

    Exact match 1.0; estimate a perfect fifth above the reference in the
    same mode 0.5 (both directions when bidirectional_fifth); relative
    major/minor 0.3; parallel (same tonic, other mode) 0.2; else 0.0.
    """
    if est == ref:
        return KEY_SCORE_EXACT
    if est.mode == ref.mode:
        if est.tonic == (ref.tonic + 7) % 12:
            return KEY_SCORE_FIFTH
        if bidirectional_fifth and est.tonic == (ref.tonic - 7) % 12:
            return KEY_SCORE_FIFTH
        return 0.0
    if ref.mode == "major" and est.mode == "minor" and est.tonic == (ref.tonic + 9) % 12:
        return KEY_SCORE_RELATIVE
    if ref.mode == "minor" and est.mode == "major" and est.tonic == (ref.tonic + 3) % 12:
        return KEY_SCORE_RELATIVE
    if est.tonic == ref.tonic:
        return KEY_SCORE_PARALLEL
    return 0.0


def refined_key_accuracy(estimates, references, bidirectional_fifth: bool = False) -> float:
    if len(estimates) != len(references) or not estimates:
        raise WorkbenchError("estimates and references must be equal-length and non-empty")
    scores = [refined_key_score(e, r, bidirectional_fifth)
              for e, r in zip(estimates, references)]
    return float(np.mean(scores))


def match_beats(est, ref, tolerance: float = BEAT_TOLERANCE) -> int:
    """One-to-one greedy matching count between two sorted beat grids.

    Both grids are walked in time order; on the line with a symmetric
    window this greedy matching has maximum cardinality.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    i = j = matches = 0
    while i < len(ref) and j < len(est):
        if abs(ref[i] - est[j]) <= tolerance:
            matches += 1
            i += 1
            j += 1
        elif est[j] < ref[i] - tolerance:
            j += 1
        else:
            i += 1
    return matches


def beat_f_measure(est, ref, tolerance: float = BEAT_TOLERANCE) -> float:
    """Event F1 with one-to-one matching inside a +/-tolerance window."""
    est = np.asarray(getattr(est, "times", est), dtype=np.float64)
    ref = np.asarray(getattr(ref, "times", ref), dtype=np.float64)
    if len(est) == 0 and len(ref) == 0:
        return 1.0
    if len(est) == 0 or len(ref) == 0:
        return 0.0
    matches = match_beats(est, ref, tolerance)
    precision = matches / len(est)
    recall = matches / len(ref)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


class _TempoPhaseStates:
    """State space over (interval tau in frames, countdown phase phi in [0, tau)).

    States are laid out contiguously per interval so that the deterministic
    phase decrement is an index shift; phi==0 states are the beat frames.
    Intervals are ordered slowest first so that exact score ties resolve to
    the slower tempo rather than a spurious subdivision.
    """

    def __init__(self, cfg: DbnConfig):
        tau_min = int(np.ceil(cfg.fps * 60.0 / cfg.max_bpm))
        tau_max = int(np.floor(cfg.fps * 60.0 / cfg.min_bpm))
        if tau_max < tau_min:
            raise WorkbenchError("bpm range admits no integer frame interval")
        self.taus = np.arange(tau_max, tau_min - 1, -1)
        self.base = np.concatenate([[0], np.cumsum(self.taus)[:-1]])
        self.n_states = int(self.taus.sum())
        self.zero_idx = self.base  # states with phi == 0
        self.entry_idx = self.base + self.taus - 1  # states with phi == tau-1

        state_tau = np.repeat(self.taus, self.taus)
        state_phi = np.concatenate([np.arange(t) for t in self.taus])
        beat_span = np.ceil(state_tau * cfg.observation_lambda)
        self.is_beat_state = state_phi < beat_span

        # log-weight of switching tau_i -> tau_j at a beat boundary; staying
        # on tempo costs nothing, switches pay the relative tempo change
        ratio = self.taus[None, :] / self.taus[:, None]
        self.log_trans = -cfg.transition_lambda * np.abs(ratio - 1.0)


def dbn_decode(activations, cfg: DbnConfig | None = None) -> BeatGrid:
    """Viterbi-decode framewise beat activations into a coherent beat grid.

    The hidden state couples a beat interval (frames per beat, bounded by
    the bpm range) with a countdown phase; the phase decrements every frame
    and the interval may change only when the phase wraps, penalized by
    transition_lambda times the relative tempo change. Frames whose decoded
    phase is zero are beats.
    """
    cfg = cfg or DbnConfig()
    act = np.asarray(activations, dtype=np.float64)
    if act.ndim != 1 or len(act) == 0:
        raise WorkbenchError("activations must be a non-empty 1-D array")
    if np.any(act < 0) or np.any(act > 1):
        raise WorkbenchError("activations must lie in [0, 1]")

    first = 0
    if cfg.threshold > 0:
        above = np.nonzero(act >= cfg.threshold)[0]
        if len(above) == 0:
            return BeatGrid(times=np.zeros(0))
        first, last = int(above[0]), int(above[-1]) + 1
        act = act[first:last]

    states = _TempoPhaseStates(cfg)
    eps = 1e-10
    a = np.clip(act, eps, 1.0 - eps)
    nonbeat_norm = 1.0 / cfg.observation_lambda - 1.0
    log_obs = np.where(states.is_beat_state[None, :], np.log(a)[:, None],
                       np.log((1.0 - a) / nonbeat_norm)[:, None])

    n = states.n_states
    shift_src = np.arange(1, n + 1)
    shift_src[states.entry_idx] = states.entry_idx  # placeholder, overwritten below

    delta = np.full(n, -np.log(n)) + log_obs[0]
    backptr = np.empty((len(a), n), dtype=np.int32)
    backptr[0] = -1
    for t in range(1, len(a)):
        from_zero = delta[states.zero_idx]
        entry_scores = from_zero[:, None] + states.log_trans
        best_prev = np.argmax(entry_scores, axis=0)
        entry_val = entry_scores[best_prev, np.arange(len(states.taus))]

        new_delta = delta[shift_src]
        bp = shift_src.copy()
        new_delta[states.entry_idx] = entry_val
        bp[states.entry_idx] = states.zero_idx[best_prev]

        delta = new_delta + log_obs[t]
        backptr[t] = bp

    state = int(np.argmax(delta))
    path = np.empty(len(a), dtype=np.int64)
    for t in range(len(a) - 1, -1, -1):
        path[t] = state
        state = backptr[t, state]

    zero_mask = np.zeros(n, dtype=bool)
    zero_mask[states.zero_idx] = True
    if cfg.correct:
        # snap each beat to the activation peak of its beat-state region;
        # a region counts only if the path actually wraps (phi reaches 0)
        in_beat = states.is_beat_state[path]
        edges = np.diff(in_beat.astype(np.int8))
        starts = list(np.nonzero(edges == 1)[0] + 1)
        ends = list(np.nonzero(edges == -1)[0] + 1)
        if in_beat[0]:
            starts.insert(0, 0)
        if in_beat[-1]:
            ends.append(len(a))
        beat_frames = np.array([s + int(np.argmax(act[s:e]))
                                for s, e in zip(starts, ends)
                                if zero_mask[path[s:e]].any()], dtype=np.int64)
    else:
        beat_frames = np.nonzero(zero_mask[path])[0]
    return BeatGrid(times=(beat_frames + first) / cfg.fps)
