"""Seeded RNG streams, elementary distributions, stable reductions, dense Cholesky.

Everything downstream builds on this module: all randomness flows through
:class:`RngStream` substreams (counter-based seeding, so replications can run
in any order), densities are handled in the log domain, and posterior moments
use the divide-by-S population convention.

Matrices are plain 2-D float64 ``numpy`` arrays in row-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "RngStream",
    "substream",
    "normal",
    "uniform",
    "cauchy",
    "laplace",
    "normal_logpdf",
    "laplace_logpdf",
    "cauchy_logpdf",
    "log_mean_exp",
    "moments_over_draws",
    "mean_var_cov",
    "chol_factor",
    "chol_solve",
    "chol_inverse",
    "DecompositionError",
]

_LOG_2PI = math.log(2.0 * math.pi)


class DecompositionError(ValueError):
    """Cholesky failure; ``pivot`` is the 0-based index of the failing pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot} is {value:.6g}"
        )


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (master_seed, stream_index).

    Streams with the same identity yield identical sequences; streams with
    distinct ``stream_index`` under one master seed are statistically
    independent (SeedSequence spawn-key construction), so concurrent or
    out-of-order use cannot change results.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if self.master_seed < 0 or self.stream_index < 0:
            raise ValueError("master_seed and stream_index must be non-negative")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        return np.random.default_rng(seq)


def substream(master_seed: int, index: int) -> RngStream:
    """Derive the ``index``-th child stream of ``master_seed``."""
    return RngStream(master_seed, index)


# ---------------------------------------------------------------------------
# Elementary distributions
# ---------------------------------------------------------------------------

def normal(rng: np.random.Generator, mu: float = 0.0, sigma: float = 1.0, size=None):
    """Normal variates (ziggurat via the generator's standard_normal)."""
    if sigma <= 0:
        raise ValueError(f"normal scale must be positive, got {sigma}")
    return mu + sigma * rng.standard_normal(size)


def uniform(rng: np.random.Generator, a: float, b: float, size=None):
    """Uniform variates on [a, b)."""
    if not b > a:
        raise ValueError(f"uniform requires b > a, got a={a}, b={b}")
    return a + (b - a) * rng.random(size)


def cauchy(rng: np.random.Generator, x0: float = 0.0, gamma: float = 1.0, size=None):
    """Cauchy variates via tan of a uniform."""
    if gamma <= 0:
        raise ValueError(f"cauchy scale must be positive, got {gamma}")
    u = rng.random(size)
    return x0 + gamma * np.tan(np.pi * (u - 0.5))


def laplace(rng: np.random.Generator, mu: float = 0.0, b: float = 1.0, size=None):
    """Laplace variates via the inverse CDF."""
    if b <= 0:
        raise ValueError(f"laplace scale must be positive, got {b}")
    u = rng.random(size) - 0.5
    return mu - b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def normal_logpdf(x, mu=0.0, sigma=1.0):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return -0.5 * z * z - math.log(sigma) - 0.5 * _LOG_2PI


def laplace_logpdf(x, mu=0.0, b=1.0):
    return -np.abs(np.asarray(x, dtype=float) - mu) / b - math.log(2.0 * b)


def cauchy_logpdf(x, x0=0.0, gamma=1.0):
    z = (np.asarray(x, dtype=float) - x0) / gamma
    return -np.log1p(z * z) - math.log(math.pi * gamma)


# ---------------------------------------------------------------------------
# Stable reductions over draws
# ---------------------------------------------------------------------------

def log_mean_exp(values, axis=None):
    """log((1/S) sum exp(v)) computed with a max shift.

    Entries may be -inf; the result is -inf exactly when every entry along
    the reduction axis is -inf. +inf and NaN entries are rejected.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise ValueError("log_mean_exp requires at least one value")
    if np.isnan(v).any() or np.isposinf(v).any():
        raise ValueError("log_mean_exp input contains NaN or +inf")
    m = np.max(v, axis=axis, keepdims=axis is not None)
    # exp(-inf - -inf) would be NaN; substitute a finite shift for all-(-inf)
    safe_m = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(v - safe_m), axis=axis))
    if axis is None:
        return float(out + safe_m)
    return out + np.squeeze(safe_m, axis=axis)


def mean_var_cov(f, g, axis=-1):
    """Mean of f, population variance of f, population covariance of (f, g).

    Divide-by-S moments throughout: these estimate posterior expectations,
    not unbiased sample statistics.  Computed from centred products, so
    cov(f, f) equals var(f) bit for bit and var is never negative.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {g.shape}")
    if f.shape[axis] == 0:
        raise ValueError("moments require at least one draw")
    mean_f = np.mean(f, axis=axis, keepdims=True)
    mean_g = np.mean(g, axis=axis, keepdims=True)
    df = f - mean_f
    var_f = np.mean(df * df, axis=axis)
    cov_fg = np.mean(df * (g - mean_g), axis=axis)
    return np.squeeze(mean_f, axis=axis), var_f, cov_fg


def moments_over_draws(f, g):
    """Scalar contract for 1-D draw sequences: (mean_f, var_f, cov_fg)."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    if f.ndim != 1 or g.ndim != 1:
        raise ValueError("moments_over_draws expects 1-D sequences")
    mean_f, var_f, cov_fg = mean_var_cov(f, g, axis=-1)
    return float(mean_f), float(var_f), float(cov_fg)


# ---------------------------------------------------------------------------
# Dense Cholesky (d small; failing pivot reported by index)
# ---------------------------------------------------------------------------

def chol_factor(a, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower-triangular L with L @ L.T = a for symmetric positive definite a."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if float(np.max(np.abs(a - a.T), initial=0.0)) > sym_tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    d = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(d):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise DecompositionError(j, pivot)
        ljj = math.sqrt(pivot)
        lower[j, j] = ljj
        if j + 1 < d:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / ljj
    return lower


def chol_solve(lower: np.ndarray, b):
    """Solve (L L^T) x = b given the factor from :func:`chol_factor`."""
    y = solve_triangular(lower, np.asarray(b, dtype=float), lower=True)
    return solve_triangular(lower.T, y, lower=False)


def chol_inverse(lower: np.ndarray) -> np.ndarray:
    return chol_solve(lower, np.eye(lower.shape[0]))
