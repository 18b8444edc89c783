"""Command-line entry points: synth, pretrain, train, eval, detect, inspect.

All commands print a single-line JSON summary on stdout and log progress
to stderr. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure. Flag precedence: CLI flag > --config file > built-in defaults
(the built-in defaults mirror configs/paper.json).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import metrics as M
from .errors import ConfigError, DataError, EngineSedError, NumericError
from .features import FeatureConfig, zscore
from .model import CRNNConfig, build_model, param_count
from .signal_io import (SoundEvent, load_manifest, prepare_record,
                        read_strong_labels, read_vibration_csv, read_wav,
                        WaveformRecord, write_strong_labels)
from .synthgen import SceneConfig, generate_corpus
from .training import (Checkpoint, TrainConfig, evaluation_report,
                       load_checkpoint, model_from_checkpoint, prepare_split,
                       pretrain_weak, train_strong)
from .features import extract_features

log = logging.getLogger("enginesed")


def _emit(doc: dict):
    print(json.dumps(doc, sort_keys=True))


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"missing config file: {path}")
    with open(path) as fh:
        return json.load(fh)


def _merged_dataclass(cls, section: dict, overrides: dict):
    """defaults < config-file section < explicitly passed CLI flags"""
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**merged)


def _prepare_out_dir(path, force: bool):
    if os.path.exists(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    _prepare_out_dir(args.out, args.force)
    scene_doc = file_cfg.get("scene", {})
    if args.polyphony is not None:
        scene_doc["polyphony"] = args.polyphony
    scene = _merged_dataclass(SceneConfig, scene_doc, {})
    manifest = generate_corpus(args.out, args.n, seed=args.seed, scene=scene,
                               label_mode=args.label_mode)
    _emit({"command": "synth", "out": args.out, "n_records": len(manifest.records),
           "label_mode": manifest.label_mode, "seed": args.seed})
    return 0


def _train_common(args, weak: bool):
    file_cfg = _load_config_file(args.config)
    manifest = load_manifest(args.manifest)
    _prepare_out_dir(args.out, args.force)
    feature_config = _merged_dataclass(FeatureConfig, file_cfg.get("features", {}), {})
    train_overrides = {
        "lr": args.lr, "weight_decay": args.weight_decay,
        "batch_size": args.batch, "epochs": args.epochs, "seed": args.seed,
    }
    if weak:
        train_overrides.update({"lambda1": args.lambda1, "lambda2": args.lambda2,
                                "tau": args.tau})
    train_config = _merged_dataclass(TrainConfig, file_cfg.get("train", {}),
                                     train_overrides)
    model_overrides = {"n_classes": manifest.n_classes}
    if not weak and args.modality is not None:
        model_overrides["modality"] = args.modality
    model_section = dict(file_cfg.get("model", {}))
    model_section.update(model_overrides)
    model_config = _merged_dataclass(CRNNConfig, model_section, {})
    return manifest, model_config, train_config, feature_config


def cmd_train(args) -> int:
    manifest, model_config, train_config, feature_config = _train_common(args, weak=False)
    init = None
    if args.init_checkpoint:
        init = load_checkpoint(args.init_checkpoint)
    seeds = args.seeds if args.seeds else [train_config.seed]
    results = []
    for seed in seeds:
        run_cfg = replace(train_config, seed=seed)
        run_dir = (args.out if len(seeds) == 1
                   else os.path.join(args.out, f"seed{seed}"))
        os.makedirs(run_dir, exist_ok=True)
        result = train_strong(manifest, model_config, run_cfg, feature_config,
                              run_dir, init=init, cache_dir=args.cache_dir)
        results.append(result)
        if result.aborted:
            _emit({"command": "train", "aborted": True,
                   "checkpoint": result.checkpoint_path})
            return 4
    psds1 = [r.best_psds1 for r in results if not np.isnan(r.best_psds1)]
    _emit({
        "command": "train", "modality": model_config.modality,
        "seeds": seeds,
        "checkpoints": [r.checkpoint_path for r in results],
        "mean_valid_psds1": float(np.mean(psds1)) if psds1 else None,
    })
    return 0


def cmd_pretrain(args) -> int:
    manifest, model_config, train_config, feature_config = _train_common(args, weak=True)
    result = pretrain_weak(manifest, model_config, train_config, feature_config,
                           args.out, cache_dir=args.cache_dir)
    if result.aborted:
        _emit({"command": "pretrain", "aborted": True,
               "checkpoint": result.checkpoint_path})
        return 4
    _emit({"command": "pretrain", "checkpoint": result.checkpoint_path,
           "epochs": train_config.epochs,
           "lambda1": train_config.lambda1, "lambda2": train_config.lambda2})
    return 0


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    manifest = load_manifest(args.manifest)
    _prepare_out_dir(args.out, args.force)
    feature_config = _merged_dataclass(FeatureConfig, file_cfg.get("features", {}), {})
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, force=args.force_config)
    stats = ckpt.norm_stats
    if stats is None:
        raise DataError("checkpoint lacks normalization statistics")
    split = prepare_split(manifest, args.split, feature_config, args.cache_dir)
    if len(split) == 0:
        raise DataError(f"split {args.split!r} is empty")
    step_s = 30.0 / model.config.n_t
    report = evaluation_report(model, split, stats, step_s)
    per_class = {manifest.class_names[c]: v
                 for c, v in report.pop("per_class_psds1").items()}
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    with open(os.path.join(args.out, "per_class_psds1.json"), "w") as fh:
        json.dump(per_class, fh, indent=1, sort_keys=True)
    if args.save_predictions:
        from .training import predict_split
        y_hat = predict_split(model, split, stats)
        with open(os.path.join(args.out, "predictions.jsonl"), "w") as fh:
            for record in split.records:
                pred = y_hat[record.id]
                fh.write(json.dumps({
                    "id": record.id,
                    "y_hat_s": np.round(pred, 6).tolist(),
                    "y_hat_w": np.round(pred.max(axis=0), 6).tolist(),
                }) + "\n")
    _emit({"command": "eval", "split": args.split, "out": args.out,
           **{k: report[k] for k in ("psds1", "psds2", "psds3", "eb_f1",
                                     "sb_f1", "mroc", "map")}})
    return 0


def cmd_detect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, force=args.force_config)
    stats = ckpt.norm_stats
    if stats is None:
        raise DataError("checkpoint lacks normalization statistics")
    file_cfg = _load_config_file(args.config)
    feature_config = _merged_dataclass(FeatureConfig, file_cfg.get("features", {}), {})
    os.makedirs(args.out, exist_ok=True)

    rate, audio = read_wav(args.audio)
    vib_rate, vibration = read_vibration_csv(args.vibration)
    record = WaveformRecord(id=os.path.basename(args.audio), audio=audio,
                            audio_rate=rate, vibration=vibration,
                            vibration_rate=int(vib_rate))
    record = prepare_record(record)
    class_names = ckpt.header.get("class_names") or [
        f"class{i}" for i in range(model.config.n_classes)]
    gt_events = []
    if args.labels:
        gt_events = read_strong_labels(args.labels, class_names)

    audio_spec, vib_spec = extract_features(record, feature_config)
    xa = zscore(audio_spec, stats.audio_mean, stats.audio_std)[None]
    xv = zscore(vib_spec, stats.vib_mean, stats.vib_std)[None]
    model.eval()
    pred = model.forward(
        xa if model.config.uses_audio else None,
        xv if model.config.uses_vibration else None,
    ).data[0]
    step_s = 30.0 / model.config.n_t
    events = M.binarize_to_events(pred, args.threshold, step_s)
    events_path = os.path.join(args.out, "events.csv")
    write_strong_labels(events_path, events, class_names)
    svg_path = os.path.join(args.out, "event_roll.svg")
    with open(svg_path, "w") as fh:
        fh.write(event_roll_svg(gt_events, events, class_names))
    _emit({"command": "detect", "events": len(events),
           "events_csv": events_path, "event_roll_svg": svg_path})
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model = model_from_checkpoint(ckpt)
        config = model.config
        provenance = ckpt.provenance
    else:
        file_cfg = _load_config_file(args.config)
        config = _merged_dataclass(CRNNConfig, file_cfg.get("model", {}),
                                   {"modality": args.modality})
        model = build_model(config)
        provenance = None
    t_a, f_a = config.audio_out(1292) if config.uses_audio else (None, None)
    t_v, f_v = config.vib_out(391) if config.uses_vibration else (None, None)
    _emit({
        "command": "inspect",
        "provenance": provenance,
        "modality": config.modality,
        "n_classes": config.n_classes,
        "param_count": param_count(model),
        "gru_input_dim": config.gru_input_dim,
        "audio_cnn_out": [t_a, f_a],
        "vibration_cnn_out": [t_v, f_v],
        "n_t": config.n_t,
    })
    return 0


# ---------------------------------------------------------------------------
# event-roll SVG (ground truth above the divider, predictions below)

def event_roll_svg(gt_events: list[SoundEvent], pred_events: list[SoundEvent],
                   class_names: list[str], duration_s: float = 30.0) -> str:
    row_h, label_w, plot_w = 16, 150, 640
    n = len(class_names)
    height = (2 * n + 1) * row_h + 40
    width = label_w + plot_w + 20
    palette = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4",
               "#8c613c", "#dc7ec0", "#797979", "#d5bb67", "#82c6e2"]

    def bar(ev, row):
        x = label_w + ev.onset / duration_s * plot_w
        w = max(ev.duration / duration_s * plot_w, 1.0)
        y = 20 + row * row_h + 2
        color = palette[ev.class_id % len(palette)]
        return (f'<rect x="{x:.1f}" y="{y}" width="{w:.1f}" '
                f'height="{row_h - 4}" fill="{color}"/>')

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        '<text x="4" y="14" font-size="12" font-family="sans-serif">'
        'event roll: ground truth (top) / predictions (bottom)</text>',
    ]
    for i, name in enumerate(class_names):
        for row in (i, n + 1 + i):
            y = 20 + row * row_h + row_h - 5
            parts.append(f'<text x="4" y="{y}" font-size="9" '
                         f'font-family="sans-serif">{name}</text>')
    divider_y = 20 + n * row_h + row_h // 2
    parts.append(f'<line x1="0" y1="{divider_y}" x2="{width}" y2="{divider_y}" '
                 'stroke="red" stroke-width="2"/>')
    for ev in gt_events:
        parts.append(bar(ev, ev.class_id))
    for ev in pred_events:
        parts.append(bar(ev, n + 1 + ev.class_id))
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enginesed",
        description="Engine-fault sound event detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (sections: features, model, train, scene)")
        p.add_argument("--force", action="store_true",
                       help="overwrite non-empty output directories")

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of records (>= 10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-mode", choices=("strong", "weak"), default="strong")
    p.add_argument("--polyphony", action=argparse.BooleanOptionalAction, default=None,
                   help="allow overlapping events of different classes")

    def train_like(p, weak):
        common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--cache-dir", help="feature cache directory")
        p.add_argument("--lr", type=float, default=None, help="learning rate (default 0.001)")
        p.add_argument("--weight-decay", type=float, default=None,
                       help="decoupled weight decay (default 0.02)")
        p.add_argument("--batch", type=int, default=None, help="batch size (default 48)")
        p.add_argument("--epochs", type=int, default=None,
                       help="default 100 (train) / 40 (pretrain)")
        p.add_argument("--seed", type=int, default=None)
        if weak:
            p.add_argument("--lambda1", type=float, default=None,
                           help="classification weight (default 1.0)")
            p.add_argument("--lambda2", type=float, default=None,
                           help="contrastive weight (default 0.5)")
            p.add_argument("--tau", type=float, default=None,
                           help="contrastive temperature (default 0.07)")

    p = sub.add_parser("train", help="strong-label training (100 epochs default)")
    train_like(p, weak=False)
    p.add_argument("--modality", choices=("audio", "vibration", "fusion"), default=None)
    p.add_argument("--init-checkpoint", help="pretrained checkpoint to transfer CNN weights from")
    p.add_argument("--seeds", type=int, nargs="+",
                   help="train one model per seed and report the mean")

    p = sub.add_parser("pretrain", help="weak-label pretraining (40 epochs default)")
    train_like(p, weak=True)

    p = sub.add_parser("eval", help="compute all metrics for a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--save-predictions", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--force-config", action="store_true",
                   help="load despite config-hash mismatch")

    p = sub.add_parser("detect", help="run detection on one record")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="mono WAV")
    p.add_argument("--vibration", required=True, help="3-column vibration CSV")
    p.add_argument("--labels", help="optional ground-truth label CSV for the event roll")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--force-config", action="store_true")

    p = sub.add_parser("inspect", help="print shapes and parameter counts")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--modality", choices=("audio", "vibration", "fusion"),
                   default=None)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "pretrain" and args.epochs is None:
        args.epochs = 40
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        _emit({"command": args.command, "error": "config", "message": str(exc)})
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        _emit({"command": args.command, "error": "data", "message": str(exc)})
        return 3
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        _emit({"command": args.command, "error": "numeric", "message": str(exc)})
        return 4
    except EngineSedError as exc:
        log.error("%s", exc)
        _emit({"command": args.command, "error": "general", "message": str(exc)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
