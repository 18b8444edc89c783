"""Fusion CRNN for frame-wise engine fault detection.

Two CNN stacks (audio log-Mel, tri-axial vibration) feed a shared
bidirectional GRU after nearest-neighbor alignment of the vibration time
axis, followed by a per-step linear classifier with sigmoid outputs.
Audio-only and vibration-only ablations drop the other CNN while keeping
the rest identical. A two-layer projection head supplies embeddings for
contrastive pretraining and is discarded at finetune time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .nn import (AvgPool2d, BatchNorm2d, BiGRU, Conv2d, Dropout, Linear,
                 Module, ModuleList, interp_nearest_time)

MODALITIES = ("audio", "vibration", "fusion")


@dataclass(frozen=True)
class CRNNConfig:
    n_classes: int = 10
    modality: str = "fusion"
    audio_bins: int = 128
    vib_bins: int = 129
    audio_channels: tuple = (16, 32, 64, 128, 128, 128, 128)
    audio_pooling: tuple = ((2, 2), (2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2))
    vib_channels: tuple = (16, 32, 64, 128, 128, 128)
    vib_pooling: tuple = ((2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2))
    gru_hidden: int = 128
    dropout: float = 0.5
    n_t: int = 161
    projection_dim: int = 128
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if len(self.audio_channels) != len(self.audio_pooling):
            raise ConfigError("audio channels/pooling length mismatch")
        if len(self.vib_channels) != len(self.vib_pooling):
            raise ConfigError("vibration channels/pooling length mismatch")

    @property
    def uses_audio(self) -> bool:
        return self.modality in ("audio", "fusion")

    @property
    def uses_vibration(self) -> bool:
        return self.modality in ("vibration", "fusion")

    def audio_out(self, t_in: int) -> tuple[int, int]:
        return ladder_shape(t_in, self.audio_bins, self.audio_pooling)

    def vib_out(self, t_in: int) -> tuple[int, int]:
        return ladder_shape(t_in, self.vib_bins, self.vib_pooling)

    @property
    def audio_feature_dim(self) -> int:
        return self.audio_channels[-1] * _freq_out(self.audio_bins, self.audio_pooling)

    @property
    def vib_feature_dim(self) -> int:
        return self.vib_channels[-1] * _freq_out(self.vib_bins, self.vib_pooling)

    @property
    def gru_input_dim(self) -> int:
        dim = 0
        if self.uses_audio:
            dim += self.audio_feature_dim
        if self.uses_vibration:
            dim += self.vib_feature_dim
        return dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "CRNNConfig":
        doc = dict(doc)
        for key in ("audio_channels", "vib_channels"):
            if key in doc:
                doc[key] = tuple(doc[key])
        for key in ("audio_pooling", "vib_pooling"):
            if key in doc:
                doc[key] = tuple(tuple(p) for p in doc[key])
        return cls(**doc)


def ladder_shape(t_in: int, f_in: int, pooling) -> tuple[int, int]:
    t, f = t_in, f_in
    for kt, kf in pooling:
        t, f = t // kt, f // kf
        if t < 1 or f < 1:
            raise ConfigError(
                f"pooling ladder collapses a dimension: reached ({t}, {f})"
            )
    return t, f


def _freq_out(f_in: int, pooling) -> int:
    f = f_in
    for _, kf in pooling:
        f //= kf
    if f < 1:
        raise ConfigError("pooling ladder collapses the frequency axis")
    return f


def config_hash(config: CRNNConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cnn_config_hash(config: CRNNConfig) -> str:
    """Hash of the CNN-architecture fields only (transfer compatibility)."""
    doc = {
        "audio_bins": config.audio_bins,
        "vib_bins": config.vib_bins,
        "audio_channels": list(config.audio_channels),
        "audio_pooling": [list(p) for p in config.audio_pooling],
        "vib_channels": list(config.vib_channels),
        "vib_pooling": [list(p) for p in config.vib_pooling],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


class ConvBlock(Module):
    def __init__(self, c_in, c_out, pool, p_dropout, rng, dtype, momentum, eps):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, rng, dtype)
        self.bn = BatchNorm2d(c_out, momentum, eps, dtype)
        self.drop = Dropout(p_dropout, rng)
        self.pool = AvgPool2d(pool)

    def forward(self, x):
        return self.pool(self.drop(T.relu(self.bn(self.conv(x)))))


class FusionCRNN(Module):
    def __init__(self, config: CRNNConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)

        def stack(channels, pooling, c_first):
            blocks = []
            prev = c_first
            for c_out, pool in zip(channels, pooling):
                blocks.append(ConvBlock(prev, c_out, pool, config.dropout,
                                        self.rng, dtype, config.bn_momentum,
                                        config.bn_eps))
                prev = c_out
            return ModuleList(blocks)

        if config.uses_audio:
            self.audio_cnn = stack(config.audio_channels, config.audio_pooling, 1)
        if config.uses_vibration:
            self.vib_cnn = stack(config.vib_channels, config.vib_pooling, 3)
        self.gru = BiGRU(config.gru_input_dim, config.gru_hidden, self.rng, dtype)
        gru_out = 2 * config.gru_hidden
        self.classifier = Linear(gru_out, config.n_classes, self.rng, dtype)
        self.proj_hidden = Linear(gru_out, gru_out, self.rng, dtype)
        self.proj_out = Linear(gru_out, config.projection_dim, self.rng, dtype)

    # -- helpers ------------------------------------------------------------
    def _check_input(self, x, name, expected_ndim, bins):
        if x is None:
            raise ConfigError(f"{name} input required for modality {self.config.modality!r}")
        data = x.data if isinstance(x, T.Tensor) else x
        if data.ndim != expected_ndim:
            raise ConfigError(
                f"{name} must have {expected_ndim} dims (batched), got {data.shape}"
            )
        if data.shape[-1] != bins:
            raise ConfigError(f"{name} has {data.shape[-1]} bins, expected {bins}")
        if np.isnan(data).any():
            raise DataError(f"NaN values in {name} input")
        return x if isinstance(x, T.Tensor) else T.Tensor(data)

    def _cnn_path(self, x: T.Tensor, blocks) -> T.Tensor:
        for block in blocks:
            x = block(x)
        b, c, t, f = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, c * f))

    def temporal_features(self, audio=None, vibration=None) -> T.Tensor:
        """Per-step features after the GRU, (B, n_t, 2*hidden)."""
        cfg = self.config
        parts = []
        if cfg.uses_audio:
            xa = self._check_input(audio, "audio", 3, cfg.audio_bins)
            b, t_a, f_a = xa.shape
            la = self._cnn_path(T.reshape(xa, (b, 1, t_a, f_a)), self.audio_cnn)
            if la.shape[1] != cfg.n_t:
                raise ConfigError(
                    f"audio CNN produced {la.shape[1]} steps, config expects {cfg.n_t}"
                )
            parts.append(la)
        if cfg.uses_vibration:
            xv = self._check_input(vibration, "vibration", 4, cfg.vib_bins)
            if xv.shape[1] != 3:
                raise ConfigError(
                    f"vibration must have 3 channels, got {xv.shape[1]}"
                )
            lv = self._cnn_path(xv, self.vib_cnn)
            parts.append(interp_nearest_time(lv, cfg.n_t))
        fused = parts[0] if len(parts) == 1 else T.concat(parts, axis=2)
        return self.gru(fused)

    # -- public heads ---------------------------------------------------------
    def forward(self, audio=None, vibration=None) -> T.Tensor:
        """Frame-wise class probabilities, (B, n_t, C)."""
        return T.sigmoid(self.classifier(self.temporal_features(audio, vibration)))

    def forward_weak(self, audio=None, vibration=None) -> T.Tensor:
        """Sample-level scores: per-class max across time steps, (B, C)."""
        return T.tmax(self.forward(audio, vibration), axis=1)

    def forward_pretrain(self, audio=None, vibration=None):
        """(mean frame predictions (B, C), unit-norm projections (B, P))."""
        feats = self.temporal_features(audio, vibration)
        y_hat_s = T.sigmoid(self.classifier(feats))
        y_bar = T.tmean(y_hat_s, axis=1)
        pooled = T.tmean(feats, axis=1)
        z = self.proj_out(T.relu(self.proj_hidden(pooled)))
        norm = T.sqrt(T.tsum(T.mul(z, z), axis=1, keepdims=True) + 1e-12)
        z_unit = T.mul(z, T.reciprocal(norm))
        return y_bar, z_unit


def build_model(config: CRNNConfig, seed: int = 0, dtype=np.float32) -> FusionCRNN:
    return FusionCRNN(config, seed, dtype)


def param_count(model: Module) -> int:
    return sum(int(np.prod(p.data.shape)) for p in model.parameters())


CNN_PREFIXES = ("audio_cnn.", "vib_cnn.")


def transfer_weights(source_state: dict[str, np.ndarray], source_config: CRNNConfig,
                     target: FusionCRNN) -> FusionCRNN:
    """Copy CNN parameters and running stats from a pretrained state dict.

    GRU, classifier and projection head keep their fresh initialization.
    Raises when the CNN architectures differ.
    """
    if cnn_config_hash(source_config) != cnn_config_hash(target.config):
        raise ConfigError(
            "CNN architecture mismatch between pretrained checkpoint and target model"
        )
    own_params = dict(target.named_parameters())
    own_buffers = dict(target.named_buffers())
    copied = 0
    for name, value in source_state.items():
        if not name.startswith(CNN_PREFIXES):
            continue
        if name in own_params:
            own_params[name].data[...] = value.astype(own_params[name].data.dtype)
            copied += 1
        elif name in own_buffers:
            own_buffers[name][...] = value.astype(own_buffers[name].dtype)
            copied += 1
    if copied == 0:
        raise ConfigError("checkpoint contains no CNN parameters to transfer")
    return target
