"""Loading, validation and preparation of paired audio/vibration recordings.

File containers:
  * audio: mono WAV, 16-bit PCM or 32-bit float
  * vibration: 3-column CSV of floats with a `# sample_rate_hz=<rate>` header
  * strong labels: CSV rows `class_name,onset_s,offset_s`
  * weak labels: single CSV row of C binary flags
  * manifest: JSON {version, class_names, label_mode, records[...]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataError

AUDIO_RATE = 44100
VIBRATION_RATE = 416
RAW_VIBRATION_RATE = 100
TARGET_DURATION_S = 30.0

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SoundEvent:
    class_id: int
    onset: float
    offset: float

    def __post_init__(self):
        if not self.onset < self.offset:
            raise DataError(
                f"event onset must precede offset, got ({self.onset}, {self.offset})"
            )

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass
class WaveformRecord:
    id: str
    audio: np.ndarray          # mono float32
    audio_rate: int
    vibration: np.ndarray      # (3, N) float32
    vibration_rate: int
    strong_events: list[SoundEvent] = field(default_factory=list)
    weak_labels: np.ndarray | None = None   # (C,) 0/1

    @property
    def duration_s(self) -> float:
        return len(self.audio) / self.audio_rate


@dataclass
class ManifestEntry:
    id: str
    audio_path: str
    vibration_path: str
    labels_path: str | None
    split: str


@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[ManifestEntry]
    label_mode: str = "strong"   # strong | weak
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    root: str = "."

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [r for r in self.records if r.split == tag]


# ---------------------------------------------------------------------------
# container I/O

def read_wav(path) -> tuple[int, np.ndarray]:
    if not os.path.exists(path):
        raise DataError(f"missing audio file: {path}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise DataError(f"audio must be mono, got {data.ndim} channels: {path}")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype != np.float32:
        data = data.astype(np.float32)
    return int(rate), data


def write_wav(path, rate: int, samples: np.ndarray, encoding: str = "float32") -> None:
    if encoding == "float32":
        wavfile.write(path, rate, samples.astype(np.float32))
    elif encoding == "int16":
        clipped = np.clip(samples, -1.0, 1.0 - 1.0 / 32768)
        wavfile.write(path, rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ConfigError(f"unsupported wav encoding: {encoding}")


def read_vibration_csv(path) -> tuple[float, np.ndarray]:
    """Returns (sample_rate_hz, signal (3, N) float32)."""
    if not os.path.exists(path):
        raise DataError(f"missing vibration file: {path}")
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#") or "sample_rate_hz=" not in header:
            raise DataError(f"vibration file lacks sample-rate header: {path}")
        rate = float(header.split("sample_rate_hz=")[1])
        try:
            rows = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise DataError(f"malformed vibration row in {path}: {exc}") from exc
    if rows.shape[1] != 3:
        raise DataError(
            f"vibration must have exactly 3 channels, got {rows.shape[1]}: {path}"
        )
    return rate, rows.T.astype(np.float32)


def write_vibration_csv(path, rate: float, signal: np.ndarray) -> None:
    signal = np.asarray(signal, dtype=np.float32)
    if signal.ndim != 2 or signal.shape[0] != 3:
        raise ConfigError(f"vibration signal must be (3, N), got {signal.shape}")
    with open(path, "w") as fh:
        fh.write(f"# sample_rate_hz={rate:g}\n")
        # %.9g round-trips float32 exactly
        np.savetxt(fh, signal.T, fmt="%.9g", delimiter=",")


def read_strong_labels(path, class_names: list[str]) -> list[SoundEvent]:
    if not os.path.exists(path):
        raise DataError(f"missing label file: {path}")
    index = {name: i for i, name in enumerate(class_names)}
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected class,onset,offset")
            name, onset_s, offset_s = parts
            if name not in index:
                raise DataError(f"{path}:{lineno}: unknown class {name!r}")
            try:
                onset, offset = float(onset_s), float(offset_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric time") from exc
            if not onset < offset:
                raise DataError(
                    f"{path}:{lineno}: onset {onset} must be < offset {offset}"
                )
            events.append(SoundEvent(index[name], onset, offset))
    return events


def write_strong_labels(path, events: list[SoundEvent], class_names: list[str]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(f"{class_names[ev.class_id]},{ev.onset:.6f},{ev.offset:.6f}\n")


def read_weak_labels(path, n_classes: int) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"missing weak-label file: {path}")
    with open(path) as fh:
        parts = fh.read().strip().split(",")
    if len(parts) != n_classes:
        raise DataError(f"weak labels must have {n_classes} flags, got {len(parts)}")
    try:
        flags = np.array([int(p) for p in parts], dtype=np.float32)
    except ValueError as exc:
        raise DataError(f"non-integer weak flag in {path}") from exc
    if not np.all((flags == 0) | (flags == 1)):
        raise DataError(f"weak flags must be 0/1 in {path}")
    return flags


def write_weak_labels(path, flags: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(str(int(v)) for v in flags) + "\n")


# ---------------------------------------------------------------------------
# record operations

def load_record(entry: ManifestEntry, manifest: DatasetManifest) -> WaveformRecord:
    root = manifest.root
    rate, audio = read_wav(os.path.join(root, entry.audio_path))
    vib_rate, vibration = read_vibration_csv(os.path.join(root, entry.vibration_path))
    record = WaveformRecord(
        id=entry.id,
        audio=audio,
        audio_rate=rate,
        vibration=vibration,
        vibration_rate=int(vib_rate),
    )
    if entry.labels_path is not None:
        labels_path = os.path.join(root, entry.labels_path)
        if manifest.label_mode == "weak":
            record.weak_labels = read_weak_labels(labels_path, manifest.n_classes)
        else:
            record.strong_events = read_strong_labels(labels_path, manifest.class_names)
            record.weak_labels = weak_from_events(record.strong_events, manifest.n_classes)
    return record


def weak_from_events(events: list[SoundEvent], n_classes: int) -> np.ndarray:
    flags = np.zeros(n_classes, dtype=np.float32)
    for ev in events:
        flags[ev.class_id] = 1.0
    return flags


def resample_vibration(signal: np.ndarray, src_rate: float = RAW_VIBRATION_RATE,
                       dst_rate: float = VIBRATION_RATE) -> np.ndarray:
    """Linear per-axis upsampling; endpoints preserved. M = round(N * dst/src)."""
    signal = np.asarray(signal)
    if signal.ndim != 2 or signal.shape[0] != 3:
        raise DataError(f"vibration signal must be (3, N), got {signal.shape}")
    n = signal.shape[1]
    if n == 0:
        raise DataError("cannot resample an empty vibration signal")
    m = int(round(n * dst_rate / src_rate))
    if n == 1:
        return np.repeat(signal, m, axis=1).astype(np.float32)
    positions = np.linspace(0.0, n - 1.0, m)
    out = np.empty((3, m), dtype=np.float32)
    src_idx = np.arange(n)
    for axis in range(3):
        out[axis] = np.interp(positions, src_idx, signal[axis].astype(np.float64))
    return out


def pad_or_crop(record: WaveformRecord, target_s: float = TARGET_DURATION_S) -> WaveformRecord:
    """Force both modalities to exactly `target_s` seconds.

    Padding appends trailing zeros; cropping keeps the first `target_s`
    seconds. Strong events are clipped to [0, target_s] and dropped when
    fully outside.
    """
    def fit(sig, rate, axis):
        n_target = int(round(target_s * rate))
        n = sig.shape[axis]
        if n == n_target:
            return sig
        if n > n_target:
            sl = [slice(None)] * sig.ndim
            sl[axis] = slice(0, n_target)
            return sig[tuple(sl)].copy()
        pad = [(0, 0)] * sig.ndim
        pad[axis] = (0, n_target - n)
        return np.pad(sig, pad)

    events = []
    for ev in record.strong_events:
        if ev.onset >= target_s:
            continue
        events.append(SoundEvent(ev.class_id, ev.onset, min(ev.offset, target_s)))
    return WaveformRecord(
        id=record.id,
        audio=fit(record.audio, record.audio_rate, 0),
        audio_rate=record.audio_rate,
        vibration=fit(record.vibration, record.vibration_rate, 1),
        vibration_rate=record.vibration_rate,
        strong_events=events,
        weak_labels=None if record.weak_labels is None else record.weak_labels.copy(),
    )


def prepare_record(record: WaveformRecord, target_s: float = TARGET_DURATION_S) -> WaveformRecord:
    """Resample vibration to 416 Hz if needed, then pad/crop to `target_s`."""
    if record.vibration_rate != VIBRATION_RATE:
        record = WaveformRecord(
            id=record.id,
            audio=record.audio,
            audio_rate=record.audio_rate,
            vibration=resample_vibration(record.vibration, record.vibration_rate, VIBRATION_RATE),
            vibration_rate=VIBRATION_RATE,
            strong_events=record.strong_events,
            weak_labels=record.weak_labels,
        )
    return pad_or_crop(record, target_s)


def write_record(out_dir, record: WaveformRecord, class_names: list[str],
                 label_mode: str = "strong", audio_encoding: str = "float32") -> ManifestEntry:
    os.makedirs(out_dir, exist_ok=True)
    audio_path = f"{record.id}.wav"
    vib_path = f"{record.id}_vibration.csv"
    write_wav(os.path.join(out_dir, audio_path), record.audio_rate, record.audio, audio_encoding)
    write_vibration_csv(os.path.join(out_dir, vib_path), record.vibration_rate, record.vibration)
    if label_mode == "weak":
        labels_path = f"{record.id}_weak.csv"
        write_weak_labels(os.path.join(out_dir, labels_path), record.weak_labels)
    else:
        labels_path = f"{record.id}_labels.csv"
        write_strong_labels(os.path.join(out_dir, labels_path), record.strong_events, class_names)
    return ManifestEntry(record.id, audio_path, vib_path, labels_path, split="train")


# ---------------------------------------------------------------------------
# manifest I/O and splitting

def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "class_names": manifest.class_names,
        "label_mode": manifest.label_mode,
        "split_fractions": list(manifest.split_fractions),
        "records": [
            {
                "id": r.id,
                "audio_path": r.audio_path,
                "vibration_path": r.vibration_path,
                "labels_path": r.labels_path,
                "split": r.split,
            }
            for r in manifest.records
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    if not os.path.exists(path):
        raise DataError(f"missing manifest: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('version')!r}")
    records = [
        ManifestEntry(
            id=r["id"],
            audio_path=r["audio_path"],
            vibration_path=r["vibration_path"],
            labels_path=r.get("labels_path"),
            split=r["split"],
        )
        for r in doc["records"]
    ]
    return DatasetManifest(
        class_names=doc["class_names"],
        records=records,
        label_mode=doc.get("label_mode", "strong"),
        split_fractions=tuple(doc.get("split_fractions", (0.70, 0.15, 0.15))),
        root=os.path.dirname(os.path.abspath(path)),
    )


SPLIT_NAMES = ("train", "valid", "test")


def stratified_split(class_weights: list[tuple[str, np.ndarray]],
                     fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
                     seed: int = 0) -> dict[str, str]:
    """Assign record ids to train/valid/test, balancing per-class event counts.

    `class_weights` maps each record id to a (C,) vector of per-class event
    counts (or weak flags). Greedy: records are visited rarest-class first
    and land in the split currently most deficient for their classes.
    """
    if not class_weights:
        raise DataError("cannot split an empty record list")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    weights = np.stack([w for _, w in class_weights]).astype(np.float64)
    totals = weights.sum(axis=0)
    targets = np.outer(fractions, totals)          # (3, C)
    have = np.zeros_like(targets)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(class_weights))
    class_total = np.where(totals > 0, totals, np.inf)

    def rarity(idx):
        present = np.nonzero(weights[idx] > 0)[0]
        if len(present) == 0:
            return (np.inf, -1)
        rare = present[np.argmin(class_total[present])]
        return (class_total[rare], int(rare))

    visit = sorted(order, key=lambda i: (rarity(i)[0], rarity(i)[1]))
    assignment: dict[str, str] = {}
    denom = np.where(targets > 0, targets, 1.0)
    for idx in visit:
        w = weights[idx]
        # relative deficit of each split for this record's classes
        deficit = (((targets - have) / denom) * w).sum(axis=1)
        split = int(np.argmax(deficit))
        have[split] += w
        assignment[class_weights[idx][0]] = SPLIT_NAMES[split]
    return assignment
