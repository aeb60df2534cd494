"""Quasi-posterior sampling: exact conjugate draws and adaptive random-walk
Metropolis, with an effective-sample-size diagnostic.

The conjugate path is preferred wherever the score is a weighted Gaussian
log likelihood with Gaussian prior (the posterior is then exactly normal);
the Metropolis path covers everything else.  Both are deterministic given
an :class:`~pcic.numkit.RngStream`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numkit import RngStream, chol_factor, chol_inverse, chol_solve

__all__ = [
    "ChainConfig",
    "Draws",
    "rwm_sample",
    "conjugate_gaussian_posterior",
    "sample_mvn",
    "ess",
    "InitializationError",
    "TargetError",
    "ConstantChainWarning",
]

TARGET_ACCEPTANCE = 0.3


class InitializationError(ValueError):
    """log target is -inf at the chain's initial point."""


class TargetError(ValueError):
    """log target returned NaN; the offending parameter value is attached."""

    def __init__(self, theta):
        self.theta = np.array(theta)
        super().__init__(f"log target returned NaN at theta={self.theta}")


class ConstantChainWarning(UserWarning):
    """Zero-variance chain passed to the ESS estimator."""


@dataclass(frozen=True)
class ChainConfig:
    """Random-walk Metropolis settings.

    ``n_draws`` samples are retained after ``burn_in`` iterations and
    ``thin``-fold thinning; the proposal scale is adapted only during
    burn-in and frozen afterwards, so the retained chain is a genuine
    Markov chain with the correct invariant law.
    """

    n_draws: int
    burn_in: int = 2000
    thin: int = 1
    init: np.ndarray = None
    init_step: float = 1.0
    rng: RngStream = RngStream(0)

    def __post_init__(self):
        if self.n_draws < 1 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("need n_draws >= 1, burn_in >= 0, thin >= 1")
        if self.init_step <= 0:
            raise ValueError("init_step must be positive")
        object.__setattr__(self, "init", np.atleast_1d(np.asarray(self.init, float)))


@dataclass(frozen=True)
class Draws:
    """S x d parameter samples plus chain metadata."""

    samples: np.ndarray
    acceptance_rate: float
    ess_per_dim: np.ndarray
    method: str  # "exact" | "metropolis"

    @property
    def n_draws(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def rwm_sample(log_target, config: ChainConfig) -> Draws:
    """Adaptive Gaussian random-walk Metropolis.

    During burn-in the log proposal scale follows a Robbins-Monro update
    toward acceptance rate 0.3; the scale is then frozen and ``n_draws``
    post-burn-in states are retained at the configured thinning.

    Raises
    ------
    InitializationError
        If the target is -inf at ``config.init``.
    TargetError
        If the target evaluates to NaN anywhere along the chain.
    """
    theta = config.init.copy()
    d = theta.shape[0]
    lp = float(log_target(theta))
    if math.isnan(lp):
        raise TargetError(theta)
    if lp == -math.inf:
        raise InitializationError(f"log target is -inf at init {theta}")

    rng = config.rng.generator()
    log_step = math.log(config.init_step)
    kept = np.empty((config.n_draws, d))
    n_kept = 0
    accepted = 0
    post_iters = config.n_draws * config.thin

    for t in range(config.burn_in + post_iters):
        proposal = theta + math.exp(log_step) * rng.standard_normal(d)
        lp_prop = float(log_target(proposal))
        if math.isnan(lp_prop):
            raise TargetError(proposal)
        log_alpha = min(0.0, lp_prop - lp)
        accept = math.log(rng.random()) < log_alpha if log_alpha < 0.0 else True
        if accept:
            theta = proposal
            lp = lp_prop
        if t < config.burn_in:
            # Robbins-Monro on the log scale, step size (t+1)^-0.6
            gamma = (t + 1.0) ** -0.6
            log_step += gamma * (math.exp(log_alpha) - TARGET_ACCEPTANCE)
        else:
            accepted += accept
            k = t - config.burn_in
            if (k + 1) % config.thin == 0:
                kept[n_kept] = theta
                n_kept += 1

    rate = accepted / post_iters
    ess_dims = np.array([ess(kept[:, j]) for j in range(d)])
    return Draws(kept, rate, ess_dims, "metropolis")


def conjugate_gaussian_posterior(features, y, omega, sigma2, prior_mean, prior_cov):
    """Exact posterior for weighted Gaussian regression with Gaussian prior.

    The score sum_i omega_i * log N(y_i; features_i . theta, sigma2) combined
    with a N(prior_mean, prior_cov) prior gives an exactly normal posterior:

        precision = prior_cov^-1 + sum_i omega_i x_i x_i^T / sigma2
        mean      = precision^-1 (prior_cov^-1 prior_mean
                                  + sum_i omega_i x_i y_i / sigma2)

    Returns (mean, cov); n = 0 recovers the prior.
    """
    x = np.atleast_2d(np.asarray(features, float))
    y = np.atleast_1d(np.asarray(y, float))
    omega = np.atleast_1d(np.asarray(omega, float))
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if (omega <= 0).any():
        raise ValueError("score weights must be positive")
    prior_mean = np.atleast_1d(np.asarray(prior_mean, float))
    prior_prec = chol_inverse(chol_factor(np.asarray(prior_cov, float)))
    if x.shape[0]:
        precision = prior_prec + (x.T * omega) @ x / sigma2
        rhs = prior_prec @ prior_mean + x.T @ (omega * y) / sigma2
    else:
        precision = prior_prec
        rhs = prior_prec @ prior_mean
    factor = chol_factor(precision)
    mean = chol_solve(factor, rhs)
    cov = chol_inverse(factor)
    return mean, 0.5 * (cov + cov.T)


def sample_mvn(mean, cov, n_draws: int, rng: RngStream) -> Draws:
    """``n_draws`` independent multivariate normal draws via Cholesky."""
    mean = np.atleast_1d(np.asarray(mean, float))
    factor = chol_factor(np.asarray(cov, float))
    z = rng.generator().standard_normal((n_draws, mean.shape[0]))
    samples = mean + z @ factor.T
    ess_dims = np.full(mean.shape[0], float(n_draws))
    return Draws(samples, 1.0, ess_dims, "exact")


def ess(chain) -> float:
    """Effective sample size S / (1 + 2 sum rho_k).

    Autocorrelations are accumulated until the first negative estimate
    (initial-positive-sequence truncation) and the result is clipped to
    [1, S].  A zero-variance chain returns S and emits
    :class:`ConstantChainWarning`.
    """
    x = np.asarray(chain, float)
    if x.ndim != 1 or x.size < 10:
        raise ValueError("ess requires a 1-D chain of length >= 10")
    s = x.size
    level = float(x.mean())
    x = x - level
    c0 = float(x @ x) / s
    # centring a constant chain leaves rounding residue ~ eps * |level|
    if c0 <= (4.0 * np.finfo(float).eps * max(1.0, abs(level))) ** 2:
        warnings.warn("constant chain passed to ess", ConstantChainWarning)
        return float(s)
    nfft = 1 << (2 * s - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:s].real / s
    rho = acov / acov[0]
    tail = 0.0
    for k in range(1, s):
        if rho[k] < 0.0:
            break
        tail += rho[k]
    return float(np.clip(s / (1.0 + 2.0 * tail), 1.0, s))
