"""Probability kernels: densities, closed-form KL divergences, special functions, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {mean.shape} != var shape {var.shape}")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.a}, {self.b})")


# ---------------------------------------------------------------------------
# special functions (elementwise, x > 0)

def _shift_up(x: np.ndarray, target: float = 6.0, steps: int = 7):
    """Move every entry to >= target by unit steps; yields (shifted x, list of (mask, old x))."""
    x = np.array(x, dtype=np.float64, copy=True)
    history = []
    for _ in range(steps):
        mask = x < target
        if not mask.any():
            break
        history.append((mask, np.where(mask, x, 1.0)))
        x = np.where(mask, x + 1.0, x)
    if np.any(x < target):
        # values below ~1e-300 would need more steps; they are out of range anyway
        raise ValueError("argument too small for the special-function recurrence")
    return x, history


def digamma(x):
    """psi(x) via psi(x) = psi(x+1) - 1/x up to x >= 6, then the asymptotic series."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("digamma is only implemented for x > 0")
    z, history = _shift_up(x)
    acc = np.zeros_like(z)
    for mask, old in history:
        acc -= np.where(mask, 1.0 / old, 0.0)
    r2 = 1.0 / (z * z)
    series = r2 * (1.0 / 12 - r2 * (1.0 / 120 - r2 * (1.0 / 252 - r2 * (1.0 / 240 - r2 * (
        1.0 / 132 - r2 * (691.0 / 32760 - r2 / 12.0))))))
    out = np.log(z) - 0.5 / z - series + acc
    return out if out.ndim else float(out)


def trigamma(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("trigamma is only implemented for x > 0")
    z, history = _shift_up(x)
    acc = np.zeros_like(z)
    for mask, old in history:
        acc += np.where(mask, 1.0 / (old * old), 0.0)
    r = 1.0 / z
    r2 = r * r
    series = r + 0.5 * r2 + r * r2 * (1.0 / 6 - r2 * (1.0 / 30 - r2 * (1.0 / 42 - r2 * (
        1.0 / 30 - r2 * (5.0 / 66 - r2 * 691.0 / 2730)))))
    out = series + acc
    return out if out.ndim else float(out)


def log_gamma(x):
    """ln Gamma(x) for x > 0 (recurrence plus Stirling series)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("log_gamma is only implemented for x > 0")
    z, history = _shift_up(x)
    acc = np.zeros_like(z)
    for mask, old in history:
        acc -= np.where(mask, np.log(old), 0.0)
    r = 1.0 / z
    r2 = r * r
    series = r * (1.0 / 12 - r2 * (1.0 / 360 - r2 * (1.0 / 1260 - r2 * (1.0 / 1680 - r2 / 1188.0))))
    out = (z - 0.5) * np.log(z) - z + 0.5 * LOG_2PI + series + acc
    return out if out.ndim else float(out)


def log_beta_fn(a, b):
    return log_gamma(a) + log_gamma(b) - log_gamma(np.asarray(a) + np.asarray(b))


# ---------------------------------------------------------------------------
# log-space helpers

def log_sum_exp(v, axis=None):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if out.ndim else float(out)


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty array")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.logaddexp(0.0, x)
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(-np.logaddexp(0.0, -x))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# densities and divergences

def gaussian_logpdf(x, p: GaussianParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: x {x.shape} vs mean {p.mean.shape}")
    return float(-0.5 * np.sum(LOG_2PI + np.log(p.var) + (x - p.mean) ** 2 / p.var))


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> float:
    """KL(q || p) between diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    return float(0.5 * np.sum(np.log(p.var / q.var) + (q.var + (q.mean - p.mean) ** 2) / p.var - 1.0))


def beta_kl(q: BetaParams, p: BetaParams) -> float:
    """KL(Beta(q.a, q.b) || Beta(p.a, p.b))."""
    a, b, a0, b0 = q.a, q.b, p.a, p.b
    return float(log_beta_fn(a0, b0) - log_beta_fn(a, b)
                 + (a - a0) * digamma(a) + (b - b0) * digamma(b)
                 + (a0 - a + b0 - b) * digamma(a + b))


def beta_expect_log(p: BetaParams) -> tuple[float, float]:
    """(E[ln eta], E[ln(1 - eta)]) for eta ~ Beta(p.a, p.b)."""
    total = digamma(p.a + p.b)
    return float(digamma(p.a) - total), float(digamma(p.b) - total)


def bernoulli_entropy(q):
    q = np.clip(np.asarray(q, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(q > 0, q * np.log(q), 0.0) + np.where(q < 1, (1 - q) * np.log1p(-q), 0.0))
    return h


def categorical_logpmf(k: int, probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    return float(np.log(probs[k]))


# ---------------------------------------------------------------------------
# sampling

def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    # guard the open interval
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Relaxed one-hot sample; the argmax is distributed as softmax(logits)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    return softmax((logits + sample_gumbel(logits.shape, rng)) / temperature, axis=-1)
