import numpy as np
import pytest

from enginesed import tensor as T
from enginesed.errors import ConfigError, DataError
from enginesed.losses import frame_bce
from enginesed.model import (CRNNConfig, FusionCRNN, build_model,
                             cnn_config_hash, config_hash, param_count,
                             transfer_weights)

from conftest import tiny_fd_config
from oracles import fd_gradient, max_rel_err


def paper_config(**overrides):
    return CRNNConfig(**overrides)


def small_inputs(rng, config, batch=2, t_a=None, t_v=None, dtype=np.float32):
    t_a = t_a or config.n_t * 2
    t_v = t_v or 12
    xa = rng.standard_normal((batch, t_a, config.audio_bins)).astype(dtype)
    xv = rng.standard_normal((batch, 3, t_v, config.vib_bins)).astype(dtype)
    return xa, xv


# ---------------------------------------------------------------------------
# configuration / shape algebra

def test_paper_config_shape_chain():
    cfg = paper_config()
    assert cfg.audio_out(1292) == (161, 1)
    assert cfg.vib_out(391) == (195, 2)
    assert cfg.audio_feature_dim == 128
    assert cfg.vib_feature_dim == 256
    assert cfg.gru_input_dim == 384


def test_config_rejects_bad_modality():
    with pytest.raises(ConfigError):
        CRNNConfig(modality="video")


def test_config_rejects_collapsing_ladder():
    cfg = CRNNConfig(audio_bins=8)   # 7 freq halvings of 8 bins hit zero
    with pytest.raises(ConfigError):
        cfg.audio_out(1292)


def test_shape_algebra_property_random_ladders():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_blocks = int(rng.integers(1, 6))
        pooling = tuple((int(rng.integers(1, 3)), int(rng.integers(1, 3)))
                        for _ in range(n_blocks))
        t, f = int(rng.integers(16, 400)), int(rng.integers(16, 200))
        expect_t, expect_f = t, f
        for kt, kf in pooling:
            expect_t //= kt
            expect_f //= kf
        if expect_t < 1 or expect_f < 1:
            continue
        from enginesed.model import ladder_shape
        assert ladder_shape(t, f, pooling) == (expect_t, expect_f)


# ---------------------------------------------------------------------------
# forward heads

def test_forward_output_shape_and_range():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(1)
    xa, xv = small_inputs(rng, cfg, batch=3, t_a=16, t_v=12)
    out = model.eval().forward(xa, xv)
    assert out.data.shape == (3, cfg.n_t, cfg.n_classes)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_forward_zero_classifier_gives_half():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=0).eval()
    model.classifier.weight.data[...] = 0.0
    model.classifier.bias.data[...] = 0.0
    rng = np.random.default_rng(2)
    xa, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
    out = model.forward(xa, xv)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-12)


def test_forward_batch_permutation_equivariance():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=3).eval()
    rng = np.random.default_rng(4)
    xa, xv = small_inputs(rng, cfg, batch=4, t_a=16, t_v=12)
    out = model.forward(xa, xv).data
    perm = np.array([2, 0, 3, 1])
    out_p = model.forward(xa[perm], xv[perm]).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-6)


def test_forward_rejects_nan_inputs():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(5)
    xa, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
    xa[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        model.forward(xa, xv)


def test_forward_rejects_wrong_bins():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(6)
    xa = rng.standard_normal((1, 16, cfg.audio_bins + 1))
    xv = rng.standard_normal((1, 3, 12, cfg.vib_bins))
    with pytest.raises(ConfigError):
        model.forward(xa, xv)


def test_weak_head_is_max_over_steps():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=7).eval()
    rng = np.random.default_rng(8)
    xa, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
    strong = model.forward(xa, xv).data
    weak = model.forward_weak(xa, xv).data
    np.testing.assert_allclose(weak, strong.max(axis=1), atol=1e-7)
    assert np.all(weak >= strong.mean(axis=1) - 1e-9)    # max >= mean


def test_pretrain_head_mean_and_unit_norm():
    cfg = tiny_fd_config(n_classes=5)
    model = build_model(cfg, seed=9).eval()
    rng = np.random.default_rng(10)
    xa, xv = small_inputs(rng, cfg, batch=3, t_a=16, t_v=12)
    y_bar, z = model.forward_pretrain(xa, xv)
    strong = model.forward(xa, xv).data
    np.testing.assert_allclose(y_bar.data, strong.mean(axis=1), atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-6)
    weak = model.forward_weak(xa, xv).data
    assert np.all(y_bar.data <= weak + 1e-7)             # mean <= max


def test_constant_predictions_average_to_same_constant():
    cfg = tiny_fd_config()
    model = build_model(cfg, seed=0).eval()
    model.classifier.weight.data[...] = 0.0
    model.classifier.bias.data[...] = 0.0   # every step predicts 0.5
    rng = np.random.default_rng(11)
    xa, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
    y_bar, _ = model.forward_pretrain(xa, xv)
    np.testing.assert_allclose(y_bar.data, 0.5, atol=1e-12)


# ---------------------------------------------------------------------------
# ablations

def test_ablation_param_counts():
    fusion = build_model(paper_config(), seed=0)
    audio = build_model(paper_config(modality="audio"), seed=0)
    vib = build_model(paper_config(modality="vibration"), seed=0)
    assert param_count(audio) < param_count(fusion)
    assert param_count(vib) < param_count(fusion)


def test_all_ablations_emit_same_output_shape():
    rng = np.random.default_rng(12)
    for modality in ("audio", "vibration", "fusion"):
        cfg = tiny_fd_config(modality=modality)
        model = build_model(cfg, seed=1).eval()
        xa, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
        out = model.forward(audio=xa if cfg.uses_audio else None,
                            vibration=xv if cfg.uses_vibration else None)
        assert out.data.shape == (2, cfg.n_t, cfg.n_classes)


class _Poison:
    """Raises on any attribute access: proves an input is never touched."""
    def __getattr__(self, name):
        raise AssertionError(f"input was accessed via {name!r}")


def test_vibration_only_never_reads_audio():
    cfg = tiny_fd_config(modality="vibration")
    model = build_model(cfg, seed=2).eval()
    rng = np.random.default_rng(13)
    _, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
    out = model.forward(audio=_Poison(), vibration=xv)
    assert out.data.shape == (2, cfg.n_t, cfg.n_classes)


def test_audio_only_never_reads_vibration():
    cfg = tiny_fd_config(modality="audio")
    model = build_model(cfg, seed=2).eval()
    rng = np.random.default_rng(14)
    xa, _ = small_inputs(rng, cfg, t_a=16, t_v=12)
    out = model.forward(audio=xa, vibration=_Poison())
    assert out.data.shape == (2, cfg.n_t, cfg.n_classes)


def test_vibration_only_still_interpolates_to_common_time_base():
    cfg = tiny_fd_config(modality="vibration")
    model = build_model(cfg, seed=2).eval()
    rng = np.random.default_rng(15)
    _, xv = small_inputs(rng, cfg, t_v=12)
    assert model.forward(vibration=xv).data.shape[1] == cfg.n_t


# ---------------------------------------------------------------------------
# weight transfer

def test_transfer_copies_cnn_bit_exact_and_reinits_rest():
    pre_cfg = tiny_fd_config(n_classes=5)
    pretrained = build_model(pre_cfg, seed=100)
    # make the pretrained weights distinctive, including running stats
    for _, p in pretrained.named_parameters():
        p.data += 0.25
    for _, b in pretrained.named_buffers():
        b += 0.5
    state = pretrained.state_dict()

    fine_cfg = tiny_fd_config(n_classes=2)    # classifier discarded anyway
    target = build_model(fine_cfg, seed=101)
    fresh_gru = target.gru.fw_w_ih.data.copy()
    fresh_cls = target.classifier.weight.data.copy()
    transfer_weights(state, pre_cfg, target)

    for name, p in target.named_parameters():
        if name.startswith(("audio_cnn.", "vib_cnn.")):
            np.testing.assert_array_equal(p.data, state[name])
    for name, b in target.named_buffers():
        if name.startswith(("audio_cnn.", "vib_cnn.")):
            np.testing.assert_array_equal(b, state[name])
    np.testing.assert_array_equal(target.gru.fw_w_ih.data, fresh_gru)
    np.testing.assert_array_equal(target.classifier.weight.data, fresh_cls)
    assert not np.array_equal(target.gru.fw_w_ih.data, pretrained.gru.fw_w_ih.data)


def test_transfer_rejects_architecture_mismatch():
    pre_cfg = tiny_fd_config()
    other_cfg = tiny_fd_config(audio_channels=(3, 3))
    pretrained = build_model(pre_cfg, seed=0)
    target = build_model(other_cfg, seed=1)
    with pytest.raises(ConfigError):
        transfer_weights(pretrained.state_dict(), pre_cfg, target)


def test_cnn_hash_ignores_class_count_and_gru():
    a = tiny_fd_config(n_classes=5, gru_hidden=5)
    b = tiny_fd_config(n_classes=2, gru_hidden=7)
    assert cnn_config_hash(a) == cnn_config_hash(b)
    assert config_hash(a) != config_hash(b)


# ---------------------------------------------------------------------------
# eval-mode purity and whole-model gradient check

def test_eval_forward_is_pure():
    cfg = tiny_fd_config(dropout=0.5)
    model = build_model(cfg, seed=16).eval()
    rng = np.random.default_rng(17)
    xa, xv = small_inputs(rng, cfg, t_a=16, t_v=12)
    a = model.forward(xa, xv).data
    b = model.forward(xa, xv).data
    np.testing.assert_array_equal(a, b)


def test_whole_model_gradient_check_64bit():
    cfg = tiny_fd_config()
    rng = np.random.default_rng(18)
    model = FusionCRNN(cfg, seed=19, dtype=np.float64)
    model.train()
    xa = rng.standard_normal((2, 16, cfg.audio_bins))
    xv = rng.standard_normal((2, 3, 12, cfg.vib_bins))
    y = (rng.random((2, cfg.n_t, cfg.n_classes)) < 0.3).astype(np.float64)

    def loss_value():
        return float(frame_bce(model.forward(xa, xv), y).data)

    loss = frame_bce(model.forward(xa, xv), y)
    model.zero_grad()
    loss.backward()
    worst = 0.0
    for name, p in model.named_parameters():
        if name.startswith("proj_"):
            continue   # projection head is not in the strong-path graph
        numeric = fd_gradient(loss_value, p.data, h=1e-6)
        err = max_rel_err(p.grad, numeric)
        worst = max(worst, err)
        assert err < 1e-3, f"{name}: {err:.2e}"
    assert worst < 1e-3
