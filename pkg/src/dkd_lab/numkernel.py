"""Numeric primitives: stable softmax, the distillation divergence, its
analytic gradient, and a central-difference oracle used by the test suite."""

from __future__ import annotations

from typing import Callable

import numpy as np


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along `axis`, stabilised by max subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log of softmax along `axis`; finite for all finite inputs."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_softmax of an empty vector is undefined")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def kd_divergence(v_s: np.ndarray, v_t: np.ndarray) -> float:
    """KL divergence KL(softmax(v_t) || softmax(v_s)) between two logit vectors.

    Nonnegative, and zero exactly when the two softmax distributions agree.
    The result is clamped at 0 so rounding noise never produces a negative
    loss.
    """
    v_s = np.asarray(v_s, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if v_s.shape != v_t.shape:
        raise ValueError(f"logit length mismatch: {v_s.shape} vs {v_t.shape}")
    log_s = log_softmax(v_s)
    log_t = log_softmax(v_t)
    # exp(log_t) may underflow to 0 for extreme logits; 0 * finite == 0 keeps
    # the x*log(x) -> 0 limit without NaNs.
    kd = float(np.sum(np.exp(log_t) * (log_t - log_s)))
    return max(kd, 0.0)


def kd_gradient(v_s: np.ndarray, v_t: np.ndarray) -> np.ndarray:
    """Gradient of kd_divergence with respect to the student logits v_s.

    Equals softmax(v_s) - softmax(v_t); entries always sum to zero.
    """
    v_s = np.asarray(v_s, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if v_s.shape != v_t.shape:
        raise ValueError(f"logit length mismatch: {v_s.shape} vs {v_t.shape}")
    return softmax(v_s) - softmax(v_t)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function at x."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.array(x, dtype=np.float64)  # private copy; perturbed in place below
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad
