"""Spectrogram features: audio log-Mel and tri-axial vibration magnitude.

Framing is Hann-windowed and center-padded (reflect), so a signal of N
samples yields T = 1 + floor(N / hop) frames. For the default parameters a
30 s recording gives a 1292x128 audio grid and a 3x391x129 vibration grid.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .signal_io import WaveformRecord

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureConfig:
    audio_rate: int = 44100
    audio_frame: int = 2048
    audio_hop: int = 1024
    n_mels: int = 128
    vib_rate: int = 416
    vib_frame: int = 256
    vib_hop: int = 32

    @property
    def vib_bins(self) -> int:
        return self.vib_frame // 2 + 1

    def frames_for(self, n_samples: int, modality: str) -> int:
        hop = self.audio_hop if modality == "audio" else self.vib_hop
        return 1 + n_samples // hop

    def params_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class NormalizationStats:
    audio_mean: float
    audio_std: float
    vib_mean: np.ndarray    # (3,)
    vib_std: np.ndarray     # (3,)

    def to_dict(self) -> dict:
        return {
            "audio_mean": float(self.audio_mean),
            "audio_std": float(self.audio_std),
            "vib_mean": [float(v) for v in self.vib_mean],
            "vib_std": [float(v) for v in self.vib_std],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationStats":
        return cls(
            audio_mean=doc["audio_mean"],
            audio_std=doc["audio_std"],
            vib_mean=np.asarray(doc["vib_mean"], dtype=np.float64),
            vib_std=np.asarray(doc["vib_std"], dtype=np.float64),
        )


def hann_window(frame: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame) / frame)


def stft_magnitude(signal: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Magnitude STFT, (T, frame//2+1), T = 1 + floor(N/hop)."""
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise ConfigError(f"stft expects a 1-D signal, got shape {signal.shape}")
    n = len(signal)
    if n == 0:
        raise DataError("cannot compute STFT of an empty signal")
    if frame <= 0 or (frame & (frame - 1)) != 0:
        raise ConfigError(f"frame size must be a power of two, got {frame}")
    if hop > frame or hop <= 0:
        raise ConfigError(f"hop must be in (0, frame], got hop={hop} frame={frame}")
    half = frame // 2
    if n < half + 1:
        raise DataError(f"signal too short for reflect padding: {n} < {half + 1}")
    padded = np.pad(signal.astype(np.float64), half, mode="reflect")
    frames = sliding_window_view(padded, frame)[::hop]
    window = hann_window(frame)
    spectrum = np.fft.rfft(frames * window, axis=1)
    return np.abs(spectrum).astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular peak-1 filters on the HTK mel scale, (n_mels, n_fft//2+1)."""
    if fmax is None:
        fmax = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bin_hz)))
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_center_frequencies(n_mels: int, sample_rate: int,
                           fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    if fmax is None:
        fmax = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def log_mel(mag_spec: np.ndarray, n_mels: int, sample_rate: int, frame: int) -> np.ndarray:
    """Natural-log Mel spectrogram of a magnitude STFT, (T, n_mels)."""
    mag_spec = np.asarray(mag_spec)
    expected_bins = frame // 2 + 1
    if mag_spec.ndim != 2 or mag_spec.shape[1] != expected_bins:
        raise ConfigError(
            f"expected (T, {expected_bins}) magnitude grid, got {mag_spec.shape}"
        )
    fb = mel_filterbank(n_mels, frame, sample_rate)
    power = mag_spec.astype(np.float64) ** 2
    mel_power = power @ fb.T
    return np.log(np.maximum(mel_power, LOG_FLOOR)).astype(np.float32)


def zscore(spec: np.ndarray, mean, std) -> np.ndarray:
    """(x - mean)/max(std, floor) per channel.

    2-D grids take scalar stats; (3, T, F) grids take 3-vector stats.
    """
    spec = np.asarray(spec)
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    n_channels = 1 if spec.ndim == 2 else spec.shape[0]
    if len(mean) != n_channels or len(std) != n_channels:
        raise ConfigError(
            f"stats have {len(mean)} channels but spectrogram has {n_channels}"
        )
    std = np.maximum(std, STD_FLOOR)
    if spec.ndim == 2:
        return ((spec - mean[0]) / std[0]).astype(np.float32)
    return ((spec - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def extract_features(record: WaveformRecord, config: FeatureConfig) -> tuple[np.ndarray, np.ndarray]:
    """Audio log-Mel (T_a, n_mels) and vibration magnitude (3, T_v, vib_bins)."""
    if record.audio_rate != config.audio_rate:
        raise DataError(
            f"{record.id}: audio rate {record.audio_rate} != {config.audio_rate}"
        )
    if record.vibration_rate != config.vib_rate:
        raise DataError(
            f"{record.id}: vibration rate {record.vibration_rate} != {config.vib_rate}"
        )
    mag = stft_magnitude(record.audio, config.audio_frame, config.audio_hop)
    audio_spec = log_mel(mag, config.n_mels, config.audio_rate, config.audio_frame)
    vib_spec = np.stack([
        stft_magnitude(axis, config.vib_frame, config.vib_hop)
        for axis in record.vibration
    ])
    return audio_spec, vib_spec


def compute_stats(feature_pairs) -> NormalizationStats:
    """Pooled per-channel mean/std over an iterable of (audio, vib) grids."""
    a_sum = a_sq = a_n = 0.0
    v_sum = np.zeros(3)
    v_sq = np.zeros(3)
    v_n = 0.0
    for audio_spec, vib_spec in feature_pairs:
        a = audio_spec.astype(np.float64)
        a_sum += a.sum()
        a_sq += (a * a).sum()
        a_n += a.size
        v = vib_spec.astype(np.float64)
        v_sum += v.sum(axis=(1, 2))
        v_sq += (v * v).sum(axis=(1, 2))
        v_n += v.shape[1] * v.shape[2]
    if a_n == 0:
        raise DataError("cannot compute normalization stats from zero records")
    a_mean = a_sum / a_n
    v_mean = v_sum / v_n
    a_std = np.sqrt(max(a_sq / a_n - a_mean ** 2, 0.0))
    v_std = np.sqrt(np.maximum(v_sq / v_n - v_mean ** 2, 0.0))
    return NormalizationStats(
        audio_mean=a_mean,
        audio_std=max(a_std, STD_FLOOR),
        vib_mean=v_mean,
        vib_std=np.maximum(v_std, STD_FLOOR),
    )


def normalize_features(audio_spec, vib_spec, stats: NormalizationStats):
    return (
        zscore(audio_spec, stats.audio_mean, stats.audio_std),
        zscore(vib_spec, stats.vib_mean, stats.vib_std),
    )


# ---------------------------------------------------------------------------
# optional on-disk feature cache: flat binary grid + JSON sidecar

def save_cached_features(path_base: str, audio_spec: np.ndarray, vib_spec: np.ndarray,
                         config: FeatureConfig) -> None:
    meta = {
        "params_hash": config.params_hash(),
        "audio": {"shape": list(audio_spec.shape), "dtype": str(audio_spec.dtype)},
        "vibration": {"shape": list(vib_spec.shape), "dtype": str(vib_spec.dtype)},
    }
    with open(path_base + ".bin", "wb") as fh:
        fh.write(np.ascontiguousarray(audio_spec).tobytes())
        fh.write(np.ascontiguousarray(vib_spec).tobytes())
    with open(path_base + ".json", "w") as fh:
        json.dump(meta, fh)


def load_cached_features(path_base: str, config: FeatureConfig):
    if not (os.path.exists(path_base + ".bin") and os.path.exists(path_base + ".json")):
        return None
    with open(path_base + ".json") as fh:
        meta = json.load(fh)
    if meta.get("params_hash") != config.params_hash():
        return None
    a_shape = tuple(meta["audio"]["shape"])
    v_shape = tuple(meta["vibration"]["shape"])
    a_dtype = np.dtype(meta["audio"]["dtype"])
    v_dtype = np.dtype(meta["vibration"]["dtype"])
    with open(path_base + ".bin", "rb") as fh:
        audio = np.frombuffer(fh.read(int(np.prod(a_shape)) * a_dtype.itemsize),
                              dtype=a_dtype).reshape(a_shape)
        vib = np.frombuffer(fh.read(), dtype=v_dtype).reshape(v_shape)
    return audio, vib
