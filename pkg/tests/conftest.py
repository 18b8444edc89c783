import numpy as np
import pytest

from enginesed.features import FeatureConfig
from enginesed.model import CRNNConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_fd_config(**overrides):
    """Small fusion config for 64-bit finite-difference checks.

    8 Mel bins / 9 vibration bins, 2 classes, 16 audio steps -> n_t = 8.
    Dropout off and batchnorm momentum 0 so repeated forwards are pure.
    """
    base = dict(
        n_classes=2,
        modality="fusion",
        audio_bins=8,
        vib_bins=9,
        audio_channels=(2, 3),
        audio_pooling=((2, 2), (1, 2)),
        vib_channels=(2, 3),
        vib_pooling=((1, 2), (1, 2)),
        gru_hidden=5,
        dropout=0.0,
        n_t=8,
        projection_dim=6,
        bn_momentum=0.0,
    )
    base.update(overrides)
    return CRNNConfig(**base)


def desk_model_config(**overrides):
    """Reduced config used for fast end-to-end runs (see configs/desk.json)."""
    base = dict(
        n_classes=10,
        modality="fusion",
        audio_bins=128,
        vib_bins=129,
        audio_channels=(4, 8, 8, 8, 8, 8, 8),
        audio_pooling=((2, 2),) + ((1, 2),) * 6,
        vib_channels=(4, 8, 8, 8, 8, 8),
        vib_pooling=((1, 2),) * 6,
        gru_hidden=16,
        dropout=0.1,
        n_t=161,
        projection_dim=16,
    )
    base.update(overrides)
    return CRNNConfig(**base)


def desk_feature_config():
    return FeatureConfig(audio_frame=4096, audio_hop=4096, vib_hop=64)


@pytest.fixture
def fd_config():
    return tiny_fd_config()
