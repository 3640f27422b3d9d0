"""Command-line surface tying the pipeline together.

Subcommands: synth, features, kmeans, pretrain, probe, eval, report. Every
subcommand accepts --config/--seed/--out, exits 0 on success, 1 on usage
errors, and 2 on data errors; files written before a failure are removed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import WorkbenchError
from .manifest import (TASK_KIND, TASKS, encode_label, read_labels, read_manifest)
from .synth import DEFAULT_DURATION, SynthSpec, gen_corpus

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 (2 is for data errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Outputs:
    """Files created by the running subcommand; removed if it fails."""

    def __init__(self):
        self.paths = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self):
        for path in reversed(self.paths):
            try:
                if path.is_file():
                    path.unlink()
            except OSError:
                pass


def _add_common(parser):
    parser.add_argument("--config", help="run config JSON file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="musicssl",
                     description="self-supervised music representation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic labeled corpus")
    _add_common(p)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--n", type=int, dest="n_clips")
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract frame features for a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root", help="defaults to the manifest directory")
    p.add_argument("--kind", choices=("mfcc", "chroma"))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("kmeans", help="fit a codebook and write pseudo-labels")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", help="feature dumps (iteration-1 mode)")
    p.add_argument("--k", type=int)
    p.add_argument("--iter2", action="store_true",
                   help="refit on checkpoint activations instead of features")
    p.add_argument("--ckpt", help="checkpoint for --iter2")
    p.add_argument("--layer", type=int, help="layer index for --iter2")
    p.add_argument("--audio-root")
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("pretrain", help="run masked pre-training")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root")
    p.add_argument("--paradigm", choices=("discrete", "continuous"))
    p.add_argument("--steps", type=int)
    p.add_argument("--labels-dir", help="pseudo-label directory (discrete)")
    p.add_argument("--codebook", help="codebook file giving the class count (discrete)")
    p.add_argument("--features-dir", help="feature dumps for the iteration pipeline")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train a frozen-encoder probe and predict")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--audio-root")
    p.add_argument("--task", required=True, choices=TASKS)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="score predictions against labels")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--manifest", help="manifest used for the config-hash check")
    p.add_argument("--force", action="store_true",
                   help="evaluate even if config hashes disagree")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="consolidate metric reports into tables+figures")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="report.json files")
    p.add_argument("--loss-log", action="append", default=[],
                   metavar="NAME=PATH", help="loss log to plot (repeatable)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def _load_cfg(args, **dotted_overrides):
    overrides = {k: v for k, v in dotted_overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _out_dir(args, outputs) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(outputs, out_dir: Path, payload: dict) -> None:
    path = outputs.add(out_dir / "meta.json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, outputs) -> int:
    cfg = _load_cfg(args, **{"synth.task": args.task, "synth.n_clips": args.n_clips,
                             "synth.duration": args.duration})
    s = cfg["synth"]
    duration = s["duration"] if s["duration"] is not None else DEFAULT_DURATION[s["task"]]
    spec = SynthSpec(task=s["task"], n_clips=s["n_clips"], duration=float(duration),
                     seed=cfg["seed"], sample_rate=s["sample_rate"])
    out = _out_dir(args, outputs)
    manifest_path = gen_corpus(spec, out, run_hash=cfg["_hash"])
    log.info("wrote corpus with %d clips to %s", spec.n_clips, out)
    print(manifest_path)
    return 0


def _feature_job(payload):
    from .audio import MfccConfig, chroma, load_audio, mfcc, write_features

    audio_path, out_path, kind, mfcc_cfg = payload
    clip = load_audio(audio_path)
    if kind == "mfcc":
        features = mfcc(clip, MfccConfig(**mfcc_cfg))
    else:
        features = chroma(clip, pad_tail=mfcc_cfg.get("pad_tail", False))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_features(out_path, features)
    return out_path


def feature_path(features_dir, clip_path: str) -> Path:
    return Path(features_dir) / Path(clip_path).with_suffix(".sslf")


def cmd_features(args, outputs) -> int:
    cfg = _load_cfg(args, **{"dsp.feature_kind": args.kind})
    manifest = read_manifest(args.manifest)
    audio_root = Path(args.audio_root or Path(args.manifest).parent)
    out = _out_dir(args, outputs)
    kind = cfg["dsp"]["feature_kind"]
    jobs = []
    for path in manifest.paths():
        target = outputs.add(feature_path(out, path))
        jobs.append((str(audio_root / path), str(target), kind, cfg["dsp"]["mfcc"]))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_feature_job, jobs))
    else:
        for job in jobs:
            _feature_job(job)
    _write_meta(outputs, out, {"config_hash": cfg["_hash"], "kind": kind,
                               "n_clips": len(manifest)})
    log.info("wrote %d feature dumps to %s", len(jobs), out)
    return 0


def cmd_kmeans(args, outputs) -> int:
    from .audio import read_features
    from .pretrain import assign_labels_for_manifest
    from .quantize import fit_kmeans, fit_second_iteration, write_codebook

    cfg = _load_cfg(args, **{"quantize.k": args.k})
    q = cfg["quantize"]
    manifest = read_manifest(args.manifest)
    out = _out_dir(args, outputs)

    if args.iter2:
        if not args.ckpt:
            raise WorkbenchError("--iter2 requires --ckpt")
        audio_root = Path(args.audio_root or Path(args.manifest).parent)
        layer = args.layer if args.layer is not None else q["iter2_layer"]
        if layer is None:
            from .encoder import load_checkpoint

            n_layers = load_checkpoint(args.ckpt).model.config.n_transformer_layers
            layer = max(1, n_layers // 2)
        codebook = fit_second_iteration(args.ckpt, args.manifest, audio_root,
                                        layer=layer, k=q["k"], max_iter=q["max_iter"],
                                        tol=q["tol"], seed=cfg["seed"],
                                        frame_budget=q["frame_budget"])
        from .audio import FeatureMatrix, load_audio
        from .encoder import load_checkpoint

        model = load_checkpoint(args.ckpt).model

        def features_for(path):
            clip = load_audio(audio_root / path)
            forward = model.forward(clip.samples[None, :])
            return FeatureMatrix(values=forward.layers[layer].data[0],
                                 frame_rate=model.config.frame_rate,
                                 feature_kind="deep")
    else:
        if not args.features_dir:
            raise WorkbenchError("kmeans needs --features-dir (or --iter2 with --ckpt)")

        def features_for(path):
            return read_features(feature_path(args.features_dir, path))

        stacked = np.concatenate([features_for(p).values for p in manifest.paths()])
        codebook = fit_kmeans(stacked, q["k"], max_iter=q["max_iter"], tol=q["tol"],
                              seed=cfg["seed"], feature_kind="mfcc",
                              frame_budget=q["frame_budget"])

    codebook_path = outputs.add(out / "codebook.sslk")
    write_codebook(codebook_path, codebook)
    labels_dir = out / "labels"
    for path in manifest.paths():
        outputs.add(labels_dir / Path(path).with_suffix(".ssll"))
    assign_labels_for_manifest(codebook, manifest, features_for, labels_dir)
    _write_meta(outputs, out, {"config_hash": cfg["_hash"], "k": codebook.k,
                               "dim": codebook.dim, "feature_kind": codebook.feature_kind})
    log.info("codebook with k=%d written to %s", codebook.k, codebook_path)
    return 0


def cmd_pretrain(args, outputs) -> int:
    from .encoder import EncoderConfig
    from .pretrain import TrainConfig, run_iteration_pipeline, run_pretraining

    cfg = _load_cfg(args, **{"pretrain.paradigm": args.paradigm,
                             "pretrain.steps": args.steps,
                             "pretrain.iterations": args.iterations})
    p = dict(cfg["pretrain"])
    iterations = p.pop("iterations")
    train_cfg = TrainConfig(**p, seed=cfg["seed"], config_hash=cfg["_hash"])
    encoder_cfg = EncoderConfig.from_dict(cfg["encoder"])
    out = _out_dir(args, outputs)
    audio_root = Path(args.audio_root or Path(args.manifest).parent)

    if iterations > 1:
        if not args.features_dir:
            raise WorkbenchError("the iteration pipeline needs --features-dir")
        from .audio import read_features

        def mfcc_features_for(path):
            return read_features(feature_path(args.features_dir, path))

        final = run_iteration_pipeline(iterations, train_cfg, encoder_cfg,
                                       args.manifest, audio_root, mfcc_features_for,
                                       k=cfg["quantize"]["k"], out_dir=out,
                                       kmeans_seed=cfg["seed"],
                                       iter2_layer=cfg["quantize"]["iter2_layer"],
                                       frame_budget=cfg["quantize"]["frame_budget"])
        print(final)
        return 0

    n_codes = None
    if train_cfg.paradigm == "discrete":
        if not args.codebook or not args.labels_dir:
            raise WorkbenchError("discrete pre-training needs --codebook and --labels-dir")
        from .quantize import read_codebook

        n_codes = read_codebook(args.codebook).k
    result = run_pretraining(train_cfg, encoder_cfg, args.manifest, audio_root, out,
                             labels_dir=args.labels_dir, n_codes=n_codes,
                             resume_from=args.resume)
    print(result.final_checkpoint)
    return 0


def cmd_probe(args, outputs) -> int:
    from .probe import (ProbeConfig, ProbeModel, Tensor, WindowPolicy,
                        build_probe_dataset, predict, save_probe, train_probe)

    cfg = _load_cfg(args)
    pr = cfg["probe"]
    task = args.task
    kind = TASK_KIND[task]
    policy = WindowPolicy(window_seconds=pr["window_seconds"],
                          hop_seconds=pr["hop_seconds"])
    probe_cfg = ProbeConfig(task_kind=kind, hidden=pr["hidden"], lr=pr["lr"],
                            epochs=pr["epochs"], batch_size=pr["batch_size"],
                            patience=pr["patience"], seed=cfg["seed"])
    audio_root = Path(args.audio_root or Path(args.manifest).parent)
    out = _out_dir(args, outputs)

    model, dataset, vocab = build_probe_dataset(args.ckpt, args.manifest, args.labels,
                                                audio_root, task, policy,
                                                n_tags=pr["n_tags"])
    n_layers = model.config.n_transformer_layers + 1
    if kind == "multiclass":
        n_outputs = len(vocab)
    elif kind == "multilabel":
        n_outputs = pr["n_tags"]
    elif kind == "regression":
        n_outputs = len(dataset["train"]["y"][0])
    else:
        n_outputs = 1
    probe = ProbeModel(n_layers, model.config.hidden, n_outputs, probe_cfg,
                       vocab=vocab, window=policy, config_hash=cfg["_hash"])

    if kind == "framewise":
        train_x = np.concatenate(dataset["train"]["x"]).astype(np.float32)
        train_y = np.concatenate(dataset["train"]["y"])[:, None].astype(np.float32)
        valid_x = (np.concatenate(dataset["valid"]["x"]).astype(np.float32)
                   if dataset["valid"]["x"] else None)
        valid_y = (np.concatenate(dataset["valid"]["y"])[:, None].astype(np.float32)
                   if dataset["valid"]["x"] else None)
    else:
        train_x, train_y = dataset["train"]["x"], dataset["train"]["y"]
        valid_x, valid_y = dataset["valid"]["x"], dataset["valid"]["y"]
    if len(train_x) == 0:
        raise WorkbenchError("train split is empty")
    train_probe(probe, train_x, train_y, valid_x, valid_y, probe_cfg)

    from .audio import load_audio

    predictions = {}
    for path in dataset["test"]["paths"]:
        samples = load_audio(audio_root / path).samples
        value = predict(probe, model, samples)
        if kind == "multiclass":
            predictions[path] = encode_label(task, value)
        else:
            predictions[path] = np.asarray(value, dtype=np.float64).tolist()

    probe_path = outputs.add(out / "probe.sslp")
    save_probe(probe_path, probe)
    pred_path = outputs.add(out / "predictions.json")
    pred_path.write_text(json.dumps(
        {"task": task, "split": "test", "config_hash": cfg["_hash"],
         "predictions": predictions}, indent=2, sort_keys=True) + "\n")
    log.info("probe written to %s, %d test predictions", probe_path, len(predictions))
    print(pred_path)
    return 0


def cmd_eval(args, outputs) -> int:
    from .report import evaluate_task, save_report

    cfg = _load_cfg(args)
    pred_path = Path(args.predictions)
    if not pred_path.exists():
        raise WorkbenchError(f"predictions file not found: {pred_path}")
    doc = json.loads(pred_path.read_text())
    labels = read_labels(args.labels)
    pred_hash = doc.get("config_hash", "")
    ref_hash = None
    if args.manifest:
        ref_hash = read_manifest(args.manifest).config_hash
    elif (Path(args.labels).parent / "manifest.tsv").exists():
        ref_hash = read_manifest(Path(args.labels).parent / "manifest.tsv").config_hash
    if ref_hash and pred_hash and ref_hash != pred_hash and not args.force:
        raise WorkbenchError(
            f"config hash mismatch: predictions {pred_hash} vs corpus {ref_hash} "
            "(pass --force to evaluate anyway)")
    report = evaluate_task(args.task, doc["predictions"], labels, cfg["metrics"],
                           config_hash=pred_hash or cfg["_hash"],
                           split=doc.get("split", "test"),
                           n_tags=cfg["probe"]["n_tags"])
    out = _out_dir(args, outputs)
    outputs.add(out / "report.json")
    outputs.add(out / "report.txt")
    path = save_report(out, report)
    print(path)
    return 0


def cmd_report(args, outputs) -> int:
    from .report import load_report, render_loss_curves, write_consolidated

    _load_cfg(args)
    named = []
    for item in args.inputs:
        path = Path(item)
        named.append((path.parent.name or path.stem, load_report(path)))
    out = _out_dir(args, outputs)
    table = write_consolidated(out, named, render_figures=not args.no_figures)
    logs = []
    for spec in args.loss_log:
        if "=" not in spec:
            raise WorkbenchError(f"--loss-log expects NAME=PATH, got {spec!r}")
        name, log_path = spec.split("=", 1)
        logs.append((name, log_path))
    if logs and not args.no_figures:
        render_loss_curves(out / "fig_loss_curves.png", logs)
    print(table)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    outputs = _Outputs()
    try:
        return args.func(args, outputs)
    except WorkbenchError as exc:
        outputs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
