"""Evaluation reports: scoring predictions, consolidated tables, figures.

The report path mirrors the results-table layout: one row per run, one
column per task/metric pair, written as TSV and JSON with matplotlib
figures rendered alongside (per-metric bar charts, loss curves).
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import WorkbenchError
from .manifest import TASK_KIND, decode_label
from .metrics import (DbnConfig, MetricReport, accuracy, average_precision_macro,
                      beat_f_measure, dbn_decode, r2, refined_key_accuracy,
                      roc_auc_macro)

_FIG_STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}


def evaluate_task(task: str, predictions: dict, labels: dict, metrics_cfg: dict,
                  config_hash: str = "", split: str = "test",
                  n_tags: int = 8) -> MetricReport:
    """Score a prediction map against reference labels for one task.

    predictions and labels are keyed by clip path; labels hold the encoded
    sidecar strings, predictions the JSON-dumped values from the probe.
    """
    paths = sorted(predictions)
    missing = [p for p in paths if p not in labels]
    if missing:
        raise WorkbenchError(f"labels missing for {len(missing)} predicted clips "
                             f"(first: {missing[0]})")
    if not paths:
        raise WorkbenchError("no predictions to evaluate")
    refs = [decode_label(task, labels[p]) for p in paths]
    kind = TASK_KIND[task]
    per_tag, notes = {}, {}

    if kind == "multiclass":
        preds = [decode_label(task, str(predictions[p])) for p in paths]
        values = {"accuracy": accuracy(preds, refs)}
        if task == "key":
            values["refined_accuracy"] = refined_key_accuracy(
                preds, refs, bidirectional_fifth=metrics_cfg.get(
                    "key_bidirectional_fifth", False))
    elif kind == "multilabel":
        scores = np.array([predictions[p] for p in paths], dtype=np.float64)
        truth = np.array([[(ref >> b) & 1 for b in range(n_tags)] for ref in refs])
        roc, roc_tags, skipped = roc_auc_macro(scores, truth)
        ap, ap_tags, _ = average_precision_macro(scores, truth)
        values = {"roc_auc": roc, "ap": ap}
        per_tag = {f"roc_tag{j}": v for j, v in roc_tags.items()}
        per_tag.update({f"ap_tag{j}": v for j, v in ap_tags.items()})
        if skipped:
            notes["skipped_tags"] = skipped
    elif kind == "regression":
        preds = np.array([predictions[p] for p in paths], dtype=np.float64)
        refs_arr = np.array(refs, dtype=np.float64)
        r2_v = r2(preds[:, 0], refs_arr[:, 0])
        r2_a = r2(preds[:, 1], refs_arr[:, 1])
        values = {"r2_valence": r2_v, "r2_arousal": r2_a,
                  "r2_mean": 0.5 * (r2_v + r2_a)}
    elif kind == "framewise":
        dbn_cfg = DbnConfig(**metrics_cfg.get("dbn", {}))
        tolerance = metrics_cfg.get("beat_tolerance", 0.02)
        f1s = []
        for p, ref in zip(paths, refs):
            activations = np.asarray(predictions[p], dtype=np.float64)
            decoded = dbn_decode(activations, dbn_cfg)
            f1s.append(beat_f_measure(decoded.times, ref, tolerance))
        values = {"f_measure": float(np.mean(f1s))}
    else:
        raise WorkbenchError(f"unknown task kind {kind!r}")

    return MetricReport(task=task, split=split, metrics=values,
                        config_hash=config_hash, per_tag=per_tag, notes=notes)


def save_report(out_dir, report: MetricReport) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(report.to_text())
    return json_path


def load_report(path) -> MetricReport:
    doc = json.loads(Path(path).read_text())
    return MetricReport.from_json_dict(doc)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def consolidate(named_reports: list) -> tuple:
    """(columns, rows) across runs: columns are task/metric pairs."""
    columns = []
    for _, report in named_reports:
        for metric in sorted(report.metrics):
            col = f"{report.task}/{metric}"
            if col not in columns:
                columns.append(col)
    rows = []
    for name, report in named_reports:
        row = {"run": name}
        for metric, value in report.metrics.items():
            row[f"{report.task}/{metric}"] = value
        rows.append(row)
    return columns, rows


def write_consolidated(out_dir, named_reports: list, render_figures: bool = True) -> Path:
    """Write the consolidated table (TSV + JSON) and per-metric figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns, rows = consolidate(named_reports)

    lines = ["run\t" + "\t".join(columns)]
    for row in rows:
        cells = [row["run"]] + [f"{row[c]:.6f}" if c in row else "" for c in columns]
        lines.append("\t".join(cells))
    table_path = out_dir / "report_table.tsv"
    table_path.write_text("\n".join(lines) + "\n")

    doc = {"columns": columns, "rows": rows}
    (out_dir / "report_table.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")

    if render_figures:
        for column in columns:
            render_metric_bar(out_dir / f"fig_{_slug(column)}.png", column, rows)
    return table_path


def render_metric_bar(path, column: str, rows: list) -> None:
    """Bar chart of one metric across runs."""
    names = [row["run"] for row in rows if column in row]
    values = [row[column] for row in rows if column in row]
    if not names:
        return
    with plt.rc_context(_FIG_STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(names)), 3.0))
        ax.bar(range(len(names)), values, color="#4878a8")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(column)
        ax.set_title(column)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def render_loss_curves(path, named_logs: list, smooth_window: int = 100) -> None:
    """Training loss curves (raw + moving average) from loss_log.tsv files."""
    with plt.rc_context(_FIG_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        for name, log_path in named_logs:
            rows = np.loadtxt(log_path, usecols=(0, 1), ndmin=2)
            if rows.size == 0:
                continue
            steps, losses = rows[:, 0], rows[:, 1]
            ax.plot(steps, losses, alpha=0.25)
            if len(losses) >= 2:
                w = max(1, min(smooth_window, len(losses) // 2))
                kernel = np.ones(w) / w
                smooth = np.convolve(losses, kernel, mode="valid")
                ax.plot(steps[w - 1:], smooth, label=name)
            else:
                ax.plot(steps, losses, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
