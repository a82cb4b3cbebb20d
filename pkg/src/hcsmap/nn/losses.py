"""Masked regression losses. Reductions accumulate in float64."""

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _valid(valid, shape):
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        valid = np.broadcast_to(valid, shape)
    return valid


def masked_mse_loss(pred, target, valid=None):
    """Mean of ``(pred - target)**2`` over valid cells and its gradient."""
    pred = np.asarray(pred)
    if pred.shape != np.shape(target):
        raise ValueError(f"shape mismatch {pred.shape} vs {np.shape(target)}")
    valid = _valid(valid, pred.shape)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("empty supervision")
    diff = np.where(valid, pred.astype(np.float64) - np.asarray(target, dtype=np.float64), 0.0)
    loss = float(np.sum(diff * diff) / n)
    grad = (2.0 / n) * diff
    return loss, grad.astype(pred.dtype)


def gaussian_nll_loss(mean, log_var, target, valid=None):
    """Gaussian negative log-likelihood averaged over valid cells.

    Per cell: ``0.5 * (log_var + (target - mean)**2 * exp(-log_var) + log(2*pi))``.
    Returns ``(loss, (grad_mean, grad_log_var))``.
    """
    mean = np.asarray(mean)
    if mean.shape != np.shape(log_var) or mean.shape != np.shape(target):
        raise ValueError("shape mismatch between mean, log_var and target")
    valid = _valid(valid, mean.shape)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("empty supervision")
    lv = np.where(valid, np.asarray(log_var, dtype=np.float64), 0.0)
    r = np.where(valid, np.asarray(target, dtype=np.float64) - mean.astype(np.float64), 0.0)
    inv = np.exp(-lv)
    per = 0.5 * (lv + r * r * inv + LOG_2PI)
    loss = float(np.sum(per[valid]) / n)
    g_mean = np.where(valid, -r * inv / n, 0.0)
    g_lv = np.where(valid, 0.5 * (1.0 - r * r * inv) / n, 0.0)
    return loss, (g_mean.astype(mean.dtype), g_lv.astype(mean.dtype))
