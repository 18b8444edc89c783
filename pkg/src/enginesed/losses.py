"""Training objectives: frame-wise BCE, sample-level BCE, and the
multilabel supervised contrastive loss used during weak pretraining.

The pretraining objective is  lambda1 * classification + lambda2 * contrastive,
where the contrastive term averages, per sample and positive class, the
negative log-probability of same-class partners against all other batch
members at temperature tau. A `paper_literal` switch drops the log and
scores the raw softmax ratios instead.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .signal_io import SoundEvent

BCE_CLAMP = 1e-7


def rasterize_events(events: list[SoundEvent], n_t: int, duration_s: float,
                     n_classes: int) -> np.ndarray:
    """Strong events -> (n_t, C) binary grid. A step is positive when its
    [t*d, (t+1)*d) interval overlaps the event by any amount."""
    grid = np.zeros((n_t, n_classes), dtype=np.float32)
    step = duration_s / n_t
    for ev in events:
        if not 0 <= ev.class_id < n_classes:
            raise ConfigError(f"event class {ev.class_id} outside [0, {n_classes})")
        first = int(np.floor(ev.onset / step))
        last = int(np.ceil(ev.offset / step))
        grid[max(first, 0):min(last, n_t), ev.class_id] = 1.0
    return grid


def _check_same_shape(pred: T.Tensor, target: np.ndarray):
    if pred.data.shape != target.shape:
        raise ConfigError(
            f"prediction shape {pred.data.shape} != target shape {target.shape}"
        )


def frame_bce(y_hat_s, y_s: np.ndarray) -> T.Tensor:
    """Mean binary cross entropy over all steps and classes."""
    y_hat_s = T.ensure_tensor(y_hat_s)
    y_s = np.asarray(y_s, dtype=y_hat_s.data.dtype)
    _check_same_shape(y_hat_s, y_s)
    p = T.clip(y_hat_s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = T.mul(y_s, T.log(p)) + T.mul(1.0 - y_s, T.log(1.0 - p))
    return -T.tmean(ll)


def weak_bce(y_bar, y: np.ndarray) -> T.Tensor:
    """Per-sample -(1/C) sum of BCE terms, averaged over the batch."""
    y_bar = T.ensure_tensor(y_bar)
    y = np.asarray(y, dtype=y_bar.data.dtype)
    _check_same_shape(y_bar, y)
    p = T.clip(y_bar, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = T.mul(y, T.log(p)) + T.mul(1.0 - y, T.log(1.0 - p))
    return -T.tmean(ll)


def supcon_pair_weights(y: np.ndarray) -> np.ndarray:
    """W[i, p] = (1/C) sum_c [y_ic * y_pc / |P(i_c)|] for p != i.

    |P(i_c)| counts the other batch members sharing positive class c with
    sample i; classes without partners contribute nothing.
    """
    y = np.asarray(y, dtype=np.float64)
    n, c = y.shape
    partners = y.sum(axis=0, keepdims=True) - y      # (N, C): |P(i_c)| when y_ic=1
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where((y > 0) & (partners > 0), 1.0 / partners, 0.0)
    weights = (inv * y) @ y.T / c                     # (N, N)
    np.fill_diagonal(weights, 0.0)
    return weights


def multilabel_supcon(z, y: np.ndarray, tau: float = 0.07,
                      paper_literal: bool = False) -> T.Tensor:
    """Supervised contrastive loss over unit embeddings with multilabel
    targets; batches without any shared positive class score 0."""
    z = T.ensure_tensor(z)
    y = np.asarray(y)
    n = z.data.shape[0]
    if y.shape[0] != n:
        raise ConfigError(f"labels have {y.shape[0]} rows for {n} embeddings")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise NumericError("contrastive embeddings must be unit-normalized")
    if n < 2:
        return T.Tensor(np.zeros((), dtype=z.data.dtype))

    weights = supcon_pair_weights(y).astype(z.data.dtype)
    off_diag = (1.0 - np.eye(n, dtype=z.data.dtype))
    sims = T.mul(T.matmul(z, T.transpose(z)), 1.0 / tau)          # (N, N)
    row_max = sims.data.max(axis=1, keepdims=True)                # detached shift
    shifted = sims - row_max
    masked_exp = T.mul(T.exp(shifted), off_diag)
    denom = T.tsum(masked_exp, axis=1, keepdims=True)
    if paper_literal:
        ratios = T.mul(masked_exp, T.reciprocal(denom))
        return T.mul(T.tsum(T.mul(ratios, weights)), -1.0 / n)
    log_prob = shifted - T.log(denom)
    return T.mul(T.tsum(T.mul(log_prob, weights)), -1.0 / n)


def pretrain_loss(y_bar, z, y: np.ndarray, lambda1: float = 1.0,
                  lambda2: float = 0.5, tau: float = 0.07,
                  paper_literal: bool = False):
    """Returns (total, classification_term, contrastive_term) tensors."""
    bce = weak_bce(y_bar, y)
    if lambda2 == 0.0:
        zero = T.Tensor(np.zeros((), dtype=bce.data.dtype))
        return T.mul(bce, lambda1), bce, zero
    con = multilabel_supcon(z, y, tau, paper_literal)
    total = T.mul(bce, lambda1) + T.mul(con, lambda2)
    return total, bce, con
