import json

import numpy as np
import pytest

from musicssl.errors import WorkbenchError
from musicssl.manifest import encode_label
from musicssl.metrics import KeyLabel, MetricReport
from musicssl.report import (consolidate, evaluate_task, load_report,
                             render_loss_curves, save_report, write_consolidated)

METRICS_CFG = {"beat_tolerance": 0.02, "key_bidirectional_fifth": False,
               "dbn": {"fps": 50.0}}


class TestEvaluateTask:
    def test_multiclass_exact_predictions(self):
        labels = {f"c{i}.wav": str(40 + i) for i in range(6)}
        preds = {path: text for path, text in labels.items()}
        report = evaluate_task("pitch", preds, labels, METRICS_CFG)
        assert report.metrics["accuracy"] == 1.0

    def test_key_reports_refined_accuracy(self):
        labels = {"a.wav": encode_label("key", KeyLabel(0, "major")),
                  "b.wav": encode_label("key", KeyLabel(5, "minor"))}
        preds = {"a.wav": encode_label("key", KeyLabel(7, "major")),  # fifth above
                 "b.wav": encode_label("key", KeyLabel(5, "minor"))}
        report = evaluate_task("key", preds, labels, METRICS_CFG)
        assert report.metrics["accuracy"] == 0.5
        assert report.metrics["refined_accuracy"] == pytest.approx(0.75)

    def test_tags_macro_metrics(self, rng):
        n = 40
        labels, preds = {}, {}
        for i in range(n):
            bits = int(rng.integers(1, 255))
            labels[f"c{i}.wav"] = f"{bits:02x}"
            scores = [(bits >> b & 1) * 0.8 + 0.1 * rng.random() for b in range(8)]
            preds[f"c{i}.wav"] = scores
        report = evaluate_task("tags", preds, labels, METRICS_CFG)
        assert report.metrics["roc_auc"] > 0.9
        assert report.metrics["ap"] > 0.8
        assert len(report.per_tag) > 0

    def test_emotion_r2(self, rng):
        labels, preds = {}, {}
        for i in range(20):
            v, a = rng.uniform(-1, 1, 2)
            labels[f"c{i}.wav"] = f"{v:.6f} {a:.6f}"
            preds[f"c{i}.wav"] = [v, a]
        report = evaluate_task("emotion", preds, labels, METRICS_CFG)
        assert report.metrics["r2_valence"] == pytest.approx(1.0)
        assert report.metrics["r2_arousal"] == pytest.approx(1.0)
        assert report.metrics["r2_mean"] == pytest.approx(1.0)

    def test_beat_decoding_pipeline(self):
        beats = np.arange(0.0, 8.0, 0.5)  # 120 bpm
        act = np.full(400, 0.02)
        act[np.round(beats * 50).astype(int)] = 0.95
        labels = {"c.wav": " ".join(f"{t:.6f}" for t in beats)}
        preds = {"c.wav": act.tolist()}
        report = evaluate_task("beat", preds, labels, METRICS_CFG)
        assert report.metrics["f_measure"] == 1.0

    def test_missing_label_rejected(self):
        with pytest.raises(WorkbenchError):
            evaluate_task("pitch", {"a.wav": "40"}, {}, METRICS_CFG)

    def test_empty_predictions_rejected(self):
        with pytest.raises(WorkbenchError):
            evaluate_task("pitch", {}, {}, METRICS_CFG)


class TestConsolidation:
    def _reports(self):
        r1 = MetricReport(task="pitch", split="test", metrics={"accuracy": 0.8})
        r2 = MetricReport(task="pitch", split="test", metrics={"accuracy": 0.9})
        return [("runA", r1), ("runB", r2)]

    def test_one_row_per_run_same_columns(self):
        columns, rows = consolidate(self._reports())
        assert columns == ["pitch/accuracy"]
        assert len(rows) == 2
        assert all("pitch/accuracy" in row for row in rows)

    def test_mixed_tasks_union_columns(self):
        named = self._reports() + [
            ("runC", MetricReport(task="beat", split="test",
                                  metrics={"f_measure": 0.7}))]
        columns, rows = consolidate(named)
        assert set(columns) == {"pitch/accuracy", "beat/f_measure"}

    def test_write_consolidated_outputs(self, tmp_path):
        table = write_consolidated(tmp_path, self._reports())
        assert table.exists()
        lines = table.read_text().strip().split("\n")
        assert len(lines) == 3
        doc = json.loads((tmp_path / "report_table.json").read_text())
        assert doc["columns"] == ["pitch/accuracy"]
        assert (tmp_path / "fig_pitch_accuracy.png").stat().st_size > 0

    def test_report_roundtrip(self, tmp_path):
        report = MetricReport(task="tags", split="test",
                              metrics={"roc_auc": 0.5}, config_hash="xyz")
        save_report(tmp_path, report)
        back = load_report(tmp_path / "report.json")
        assert back.config_hash == "xyz"
        assert back.metrics == {"roc_auc": 0.5}

    def test_loss_curves_figure(self, tmp_path):
        log = tmp_path / "loss_log.tsv"
        lines = [f"{s}\t{1.0 / s:.6f}\t0.0005\t0.999" for s in range(1, 120)]
        log.write_text("\n".join(lines) + "\n")
        out = tmp_path / "fig.png"
        render_loss_curves(out, [("run", log)])
        assert out.stat().st_size > 0
