"""AdamW optimization, checkpointing, and the strong/weak training loops.

Checkpoints are single-file archives: an 8-byte magic, a little-endian u32
header length, a JSON header (model config + hashes, normalization stats,
provenance, epoch, RNG state, parameter manifest) and raw little-endian
parameter blobs in manifest order.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import metrics as M
from .errors import ConfigError, DataError, NumericError
from .features import (FeatureConfig, NormalizationStats, compute_stats,
                       extract_features, load_cached_features,
                       save_cached_features, zscore)
from .losses import frame_bce, pretrain_loss, rasterize_events
from .model import (CRNNConfig, FusionCRNN, build_model, cnn_config_hash,
                    config_hash, transfer_weights)
from .signal_io import (DatasetManifest, SoundEvent, load_record,
                        prepare_record)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EFSEDCP1"
INIT_SCHEME = "uniform_fanin_v1"


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.02
    batch_size: int = 48
    epochs: int = 100
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.5
    tau: float = 0.07
    supcon_paper_literal: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 1
    val_thresholds: int = 50

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


class AdamW:
    """Adam with decoupled weight decay (p <- p - lr*wd*p before the
    bias-corrected moment update)."""

    def __init__(self, named_params, lr: float = 0.001, weight_decay: float = 0.02,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.named_params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for (name, p), m, v in zip(self.named_params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name!r}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bias1
            v_hat = v / bias2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint archive

@dataclass
class Checkpoint:
    header: dict
    state: dict[str, np.ndarray]

    @property
    def config(self) -> CRNNConfig:
        return CRNNConfig.from_dict(self.header["config"])

    @property
    def provenance(self) -> str:
        return self.header["provenance"]

    @property
    def norm_stats(self) -> NormalizationStats | None:
        doc = self.header.get("norm_stats")
        return None if doc is None else NormalizationStats.from_dict(doc)


def save_checkpoint(path, model: FusionCRNN, provenance: str, epoch: int,
                    norm_stats: NormalizationStats | None = None,
                    train_config: TrainConfig | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for kind, pairs in (("param", model.named_parameters()),
                        ("buffer", model.named_buffers())):
        for name, item in pairs:
            arr = item.data if kind == "param" else item
            blob = np.ascontiguousarray(arr).astype(arr.dtype, copy=False)
            raw = blob.astype("<" + arr.dtype.str[1:]).tobytes()
            entries.append({
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format": 1,
        "provenance": provenance,
        "epoch": epoch,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "cnn_hash": cnn_config_hash(model.config),
        "init_scheme": INIT_SCHEME,
        "norm_stats": None if norm_stats is None else norm_stats.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "rng_state": rng_state,
        "entries": entries,
    }
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len))
        body = fh.read()
    state = {}
    for entry in header["entries"]:
        dtype = np.dtype(entry["dtype"])
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
        state[entry["name"]] = arr.reshape(entry["shape"])
    return Checkpoint(header, state)


def model_from_checkpoint(ckpt: Checkpoint, expect_config: CRNNConfig | None = None,
                          force: bool = False) -> FusionCRNN:
    if expect_config is not None and not force:
        if config_hash(expect_config) != ckpt.header["config_hash"]:
            raise ConfigError(
                "checkpoint config hash mismatch (pass force=True to override)"
            )
    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.state)
    return model


# ---------------------------------------------------------------------------
# dataset preparation

@dataclass
class PreparedRecord:
    id: str
    audio: np.ndarray
    vibration: np.ndarray
    events: list[SoundEvent]
    weak: np.ndarray


@dataclass
class PreparedSplit:
    records: list[PreparedRecord]
    n_classes: int

    def __len__(self):
        return len(self.records)


def prepare_split(manifest: DatasetManifest, split: str,
                  feature_config: FeatureConfig,
                  cache_dir: str | None = None) -> PreparedSplit:
    """Load, resample/pad and feature-extract every record of a split."""
    entries = manifest.split(split)
    records = []
    for entry in entries:
        feats = None
        cache_base = None
        if cache_dir is not None:
            cache_base = os.path.join(cache_dir, entry.id)
            feats = load_cached_features(cache_base, feature_config)
        if feats is None:
            record = prepare_record(load_record(entry, manifest))
            feats = extract_features(record, feature_config)
            if cache_base is not None:
                os.makedirs(cache_dir, exist_ok=True)
                save_cached_features(cache_base, feats[0], feats[1], feature_config)
            events, weak = record.strong_events, record.weak_labels
        else:
            record = None
            events, weak = _load_labels_only(entry, manifest)
        records.append(PreparedRecord(entry.id, feats[0], feats[1], events, weak))
    return PreparedSplit(records, manifest.n_classes)


def _load_labels_only(entry, manifest):
    from .signal_io import read_strong_labels, read_weak_labels, weak_from_events
    if entry.labels_path is None:
        return [], None
    path = os.path.join(manifest.root, entry.labels_path)
    if manifest.label_mode == "weak":
        return [], read_weak_labels(path, manifest.n_classes)
    events = read_strong_labels(path, manifest.class_names)
    return events, weak_from_events(events, manifest.n_classes)


def split_stats(split: PreparedSplit) -> NormalizationStats:
    return compute_stats((r.audio, r.vibration) for r in split.records)


def _normalized_batch(split: PreparedSplit, idx, stats: NormalizationStats,
                      config: CRNNConfig, dtype):
    audio = vib = None
    if config.uses_audio:
        audio = np.stack([
            zscore(split.records[i].audio, stats.audio_mean, stats.audio_std)
            for i in idx
        ]).astype(dtype, copy=False)
    if config.uses_vibration:
        vib = np.stack([
            zscore(split.records[i].vibration, stats.vib_mean, stats.vib_std)
            for i in idx
        ]).astype(dtype, copy=False)
    return audio, vib


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the final short batch is padded by cycling
    the epoch order so every batch has equal size."""
    order = rng.permutation(n)
    size = min(batch_size, n)
    for start in range(0, n, size):
        chunk = order[start:start + size]
        if len(chunk) < size:
            chunk = np.concatenate([chunk, order[:size - len(chunk)]])
        yield chunk


# ---------------------------------------------------------------------------
# evaluation helpers

def predict_split(model: FusionCRNN, split: PreparedSplit,
                  stats: NormalizationStats, batch_size: int = 16) -> dict[str, np.ndarray]:
    """Frame predictions per record id, eval mode, (n_t, C) float arrays."""
    model.eval()
    out = {}
    idx_all = np.arange(len(split))
    for start in range(0, len(split), batch_size):
        idx = idx_all[start:start + batch_size]
        audio, vib = _normalized_batch(split, idx, stats, model.config, model.dtype)
        pred = model.forward(audio, vib).data
        for row, i in enumerate(idx):
            out[split.records[i].id] = pred[row].copy()
    return out


def ground_truth_events(split: PreparedSplit) -> dict[str, list[SoundEvent]]:
    return {r.id: list(r.events) for r in split.records}


def validation_psds(model, split, stats, step_s, n_thresholds=50,
                    record_duration_s=30.0) -> dict[str, float]:
    if len(split) == 0:
        return {"psds1": float("nan"), "psds2": float("nan"), "psds3": float("nan")}
    y_hat = predict_split(model, split, stats)
    gt = ground_truth_events(split)
    hours = len(split) * record_duration_s / 3600.0
    thresholds = M.operating_thresholds(n_thresholds)
    suite = M.psds_suite(y_hat, gt, split.n_classes, step_s, hours, thresholds)
    return {name: res.value for name, res in suite.items()}


def evaluation_report(model: FusionCRNN, split: PreparedSplit,
                      stats: NormalizationStats, step_s: float,
                      record_duration_s: float = 30.0,
                      n_thresholds: int = 50) -> dict:
    """All paper metrics on one split: PSDS presets, optimal-threshold
    segment/event F1, and sample-level mROC/mAP."""
    y_hat = predict_split(model, split, stats)
    gt = ground_truth_events(split)
    hours = len(split) * record_duration_s / 3600.0
    thresholds = M.operating_thresholds(n_thresholds)
    suite = M.psds_suite(y_hat, gt, split.n_classes, step_s, hours, thresholds)
    seg = M.optimal_threshold_search(y_hat, gt, split.n_classes, "segment", step_s,
                                     record_duration_s=record_duration_s)
    evt = M.optimal_threshold_search(y_hat, gt, split.n_classes, "event", step_s,
                                     record_duration_s=record_duration_s)
    weak_scores = np.stack([y_hat[r.id].max(axis=0) for r in split.records])
    weak_labels = np.stack([r.weak for r in split.records])
    mroc, mean_ap = M.mroc_map(weak_scores, weak_labels)
    return {
        "psds1": suite["psds1"].value,
        "psds2": suite["psds2"].value,
        "psds3": suite["psds3"].value,
        "eb_f1": evt.macro_f1,
        "sb_f1": seg.macro_f1,
        "mroc": mroc,
        "map": mean_ap,
        "per_class_psds1": suite["psds1"].per_class,
        "eb_thresholds": evt.thresholds.tolist(),
        "sb_thresholds": seg.thresholds.tolist(),
    }


# ---------------------------------------------------------------------------
# training loops

def _write_log(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    log_rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_psds1: float = float("nan")
    aborted: bool = False


def train_strong(manifest: DatasetManifest, model_config: CRNNConfig,
                 train_config: TrainConfig, feature_config: FeatureConfig,
                 out_dir: str, init: Checkpoint | None = None,
                 cache_dir: str | None = None,
                 train_split: PreparedSplit | None = None,
                 valid_split: PreparedSplit | None = None) -> TrainResult:
    """Strong-label training minimizing frame BCE; keeps the checkpoint
    with the best validation PSDS1 (last epoch when no validation split)."""
    os.makedirs(out_dir, exist_ok=True)
    if train_split is None:
        train_split = prepare_split(manifest, "train", feature_config, cache_dir)
    if valid_split is None:
        valid_split = prepare_split(manifest, "valid", feature_config, cache_dir)
    if len(train_split) == 0:
        raise DataError("training split is empty")

    stats = split_stats(train_split)
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    model = FusionCRNN(model_config, seed=seeds[0])
    if init is not None:
        transfer_weights(init.state, init.config, model)
    shuffle_rng = np.random.default_rng(seeds[1])
    opt = AdamW(list(model.named_parameters()), train_config.lr,
                train_config.weight_decay,
                (train_config.beta1, train_config.beta2), train_config.eps)

    n_t = model_config.n_t
    step_s = 30.0 / n_t
    targets = [rasterize_events(r.events, n_t, 30.0, model_config.n_classes)
               for r in train_split.records]

    log_rows = []
    best = {"psds1": -np.inf, "epoch": -1, "state": None}
    last_good_state = model.state_dict()
    aborted = False

    for epoch in range(train_config.epochs):
        model.train()
        epoch_loss, n_batches = 0.0, 0
        try:
            for idx in iterate_batches(len(train_split), train_config.batch_size,
                                       shuffle_rng):
                audio, vib = _normalized_batch(train_split, idx, stats,
                                               model_config, model.dtype)
                pred = model.forward(audio, vib)
                loss = frame_bce(pred, np.stack([targets[i] for i in idx]))
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                model.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += loss.item()
                n_batches += 1
        except NumericError as exc:
            log.error("aborting training: %s", exc)
            aborted = True
            model.load_state_dict(last_good_state)
            break
        mean_loss = epoch_loss / max(n_batches, 1)
        row = {"epoch": epoch, "split": "train", "loss": f"{mean_loss:.6f}",
               "psds1": "", "psds2": "", "psds3": ""}
        log_rows.append(row)
        state = model.state_dict()
        if all(np.isfinite(v).all() for v in state.values()):
            last_good_state = state
        if len(valid_split) and (epoch + 1) % train_config.eval_every == 0:
            scores = validation_psds(model, valid_split, stats, step_s,
                                     train_config.val_thresholds)
            log_rows.append({"epoch": epoch, "split": "valid", "loss": "",
                             "psds1": f"{scores['psds1']:.6f}",
                             "psds2": f"{scores['psds2']:.6f}",
                             "psds3": f"{scores['psds3']:.6f}"})
            if scores["psds1"] > best["psds1"]:
                best = {"psds1": scores["psds1"], "epoch": epoch,
                        "state": model.state_dict()}

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    provenance = "finetuned" if init is not None else "scratch"
    ckpt_path = os.path.join(out_dir, f"{provenance}.ckpt")
    save_checkpoint(
        ckpt_path, model, provenance,
        epoch=best["epoch"] if best["state"] is not None else train_config.epochs - 1,
        norm_stats=stats, train_config=train_config,
        rng_state=_rng_state(model.rng),
        extra={"aborted": aborted, "class_names": manifest.class_names},
    )
    log_path = os.path.join(out_dir, "train_log.csv")
    _write_log(log_path, log_rows,
               ["epoch", "split", "loss", "psds1", "psds2", "psds3"])
    return TrainResult(ckpt_path, log_path, log_rows,
                       best_epoch=best["epoch"],
                       best_psds1=best["psds1"] if best["state"] is not None else float("nan"),
                       aborted=aborted)


def pretrain_weak(manifest: DatasetManifest, model_config: CRNNConfig,
                  train_config: TrainConfig, feature_config: FeatureConfig,
                  out_dir: str, cache_dir: str | None = None,
                  train_split: PreparedSplit | None = None) -> TrainResult:
    """Weak-label pretraining with the combined classification +
    contrastive objective; saves the final-epoch checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    if train_split is None:
        train_split = prepare_split(manifest, "train", feature_config, cache_dir)
    if len(train_split) == 0:
        raise DataError("pretraining split is empty")
    for record in train_split.records:
        if record.weak is None:
            raise DataError(f"record {record.id} lacks weak labels")

    stats = split_stats(train_split)
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    model = FusionCRNN(model_config, seed=seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    opt = AdamW(list(model.named_parameters()), train_config.lr,
                train_config.weight_decay,
                (train_config.beta1, train_config.beta2), train_config.eps)
    weak = [r.weak for r in train_split.records]

    log_rows = []
    last_good_state = model.state_dict()
    aborted = False
    for epoch in range(train_config.epochs):
        model.train()
        sums = np.zeros(3)
        n_batches = 0
        try:
            for idx in iterate_batches(len(train_split), train_config.batch_size,
                                       shuffle_rng):
                audio, vib = _normalized_batch(train_split, idx, stats,
                                               model_config, model.dtype)
                y_bar, z = model.forward_pretrain(audio, vib)
                total, bce, con = pretrain_loss(
                    y_bar, z, np.stack([weak[i] for i in idx]),
                    train_config.lambda1, train_config.lambda2, train_config.tau,
                    train_config.supcon_paper_literal)
                if not np.isfinite(total.data):
                    raise NumericError(f"non-finite pretraining loss at epoch {epoch}")
                model.zero_grad()
                total.backward()
                opt.step()
                sums += (total.item(), bce.item(), con.item())
                n_batches += 1
        except NumericError as exc:
            log.error("aborting pretraining: %s", exc)
            aborted = True
            model.load_state_dict(last_good_state)
            break
        mean = sums / max(n_batches, 1)
        log_rows.append({"epoch": epoch, "split": "train",
                         "loss": f"{mean[0]:.6f}", "bce": f"{mean[1]:.6f}",
                         "supcon": f"{mean[2]:.6f}"})
        state = model.state_dict()
        if all(np.isfinite(v).all() for v in state.values()):
            last_good_state = state

    ckpt_path = os.path.join(out_dir, "pretrained.ckpt")
    save_checkpoint(ckpt_path, model, "pretrained",
                    epoch=train_config.epochs - 1, norm_stats=stats,
                    train_config=train_config, rng_state=_rng_state(model.rng),
                    extra={"aborted": aborted, "class_names": manifest.class_names})
    log_path = os.path.join(out_dir, "pretrain_log.csv")
    _write_log(log_path, log_rows, ["epoch", "split", "loss", "bce", "supcon"])
    return TrainResult(ckpt_path, log_path, log_rows, aborted=aborted)


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))
