"""Predictive criteria computed from quasi-posterior draws.

All three criteria consume the same :class:`EvalBundle`: an n x S matrix of
per-observation log predictive densities, the matching matrix of
per-observation score values, and a length-n weight vector.  Each criterion
returns a :class:`CriterionValue` split into a fit term and a penalty
(bias-correction) term, with unweighted per-observation contributions
exposed for downstream reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import log_mean_exp, mean_var_cov

__all__ = [
    "EvalBundle",
    "CriterionValue",
    "DataError",
    "compute_pcic",
    "compute_waic",
    "compute_iscv_wq",
    "penalty_gap",
]

_RATIO_FLAG = math.log(1e3)


class DataError(ValueError):
    """Invalid evaluation data (NaN, +inf, shape or weight violations)."""


@dataclass(frozen=True)
class EvalBundle:
    """Per-draw evaluations of the predictive density and the score.

    Parameters
    ----------
    log_pred : ndarray, shape (n, S)
        log h_i(X_i | theta_s).  -inf is allowed (zero predictive density);
        +inf and NaN are not.
    score : ndarray, shape (n, S)
        s_i(X_i, theta_s).  Must be finite.
    weights : ndarray, shape (n,)
        Positive observation weights w_i.
    penalty_weights : ndarray, shape (n,), optional
        Separate weights for the penalty term of the weighted-variance
        criterion (e.g. squared inverse-propensity weights).  Criteria that
        do not use them ignore this field.
    """

    log_pred: np.ndarray
    score: np.ndarray
    weights: np.ndarray
    penalty_weights: np.ndarray | None = None

    def __post_init__(self):
        lp = np.atleast_2d(np.asarray(self.log_pred, dtype=float))
        sc = np.atleast_2d(np.asarray(self.score, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if lp.shape != sc.shape:
            raise DataError(f"log_pred {lp.shape} and score {sc.shape} differ in shape")
        if lp.ndim != 2 or lp.shape[1] < 1:
            raise DataError(f"expected an n x S matrix, got shape {lp.shape}")
        if w.shape != (lp.shape[0],):
            raise DataError(f"weights shape {w.shape} does not match n={lp.shape[0]}")
        if np.isnan(lp).any() or np.isposinf(lp).any():
            raise DataError("log_pred contains NaN or +inf")
        if not np.isfinite(sc).all():
            raise DataError("score contains non-finite values")
        if not np.isfinite(w).all() or (w <= 0).any():
            raise DataError("weights must be positive and finite")
        object.__setattr__(self, "log_pred", lp)
        object.__setattr__(self, "score", sc)
        object.__setattr__(self, "weights", w)
        if self.penalty_weights is not None:
            pw = np.atleast_1d(np.asarray(self.penalty_weights, dtype=float))
            if pw.shape != w.shape:
                raise DataError("penalty_weights shape does not match weights")
            if not np.isfinite(pw).all() or (pw <= 0).any():
                raise DataError("penalty_weights must be positive and finite")
            object.__setattr__(self, "penalty_weights", pw)

    @property
    def n(self) -> int:
        return self.log_pred.shape[0]

    @property
    def n_draws(self) -> int:
        return self.log_pred.shape[1]


@dataclass(frozen=True)
class CriterionValue:
    """A criterion split into fit and penalty terms.

    ``total = fit + penalty`` exactly, and both aggregate terms equal the
    weighted average of the unweighted ``per_observation`` columns.
    ``infinite_rows`` lists observations whose log predictive density hit
    -inf on some draw (their contribution is +inf rather than aborting the
    run); ``unstable_rows`` flags observations whose largest importance
    ratio exceeded 1000x the mean ratio (diagnostic only).
    """

    total: float
    fit: float
    penalty: float
    per_observation: np.ndarray
    infinite_rows: tuple = ()
    unstable_rows: tuple = ()


def _assemble(fit_i, pen_i, fit_w, pen_w, infinite_rows=(), unstable_rows=()):
    n = fit_i.shape[0]
    fit = float(np.sum(fit_w * fit_i) / n)
    penalty = float(np.sum(pen_w * pen_i) / n)
    per_obs = np.column_stack([fit_i, pen_i])
    return CriterionValue(
        total=fit + penalty,
        fit=fit,
        penalty=penalty,
        per_observation=per_obs,
        infinite_rows=tuple(infinite_rows),
        unstable_rows=tuple(unstable_rows),
    )


def _fit_terms(log_pred):
    """-log of the posterior-mean density per observation, -inf rows -> +inf."""
    return -log_mean_exp(log_pred, axis=1)


def compute_pcic(bundle: EvalBundle) -> CriterionValue:
    """Posterior covariance information criterion.

    fit_i = -log E_pos[h_i(X_i | theta)], estimated by a log-mean-exp over
    draws; penalty_i = Cov_pos[log h_i, s_i], the posterior covariance of
    the log predictive density with the score.  Totals are (1/n)-weighted
    sums with the bundle weights on both terms.
    """
    lp, sc, w = bundle.log_pred, bundle.score, bundle.weights
    fit_i = _fit_terms(lp)
    bad = ~np.isfinite(lp).all(axis=1)
    pen_i = np.full(bundle.n, np.inf)
    if (~bad).any():
        _, _, cov = mean_var_cov(lp[~bad], sc[~bad], axis=1)
        pen_i[~bad] = cov
    return _assemble(fit_i, pen_i, w, w, infinite_rows=np.flatnonzero(bad))


def compute_waic(bundle: EvalBundle, penalty_weights=None) -> CriterionValue:
    """Widely applicable information criterion, optionally with distinct
    penalty weights.

    fit_i as in :func:`compute_pcic`; penalty_i = V_pos[log h_i], the
    posterior variance of the log predictive density.  The fit term uses the
    bundle weights; the penalty uses, in order of precedence, the
    ``penalty_weights`` argument, the bundle's stored ``penalty_weights``,
    or the bundle weights.
    """
    lp, w = bundle.log_pred, bundle.weights
    if penalty_weights is None:
        penalty_weights = bundle.penalty_weights
    pw = w if penalty_weights is None else np.asarray(penalty_weights, dtype=float)
    fit_i = _fit_terms(lp)
    bad = ~np.isfinite(lp).all(axis=1)
    pen_i = np.full(bundle.n, np.inf)
    if (~bad).any():
        _, var, _ = mean_var_cov(lp[~bad], lp[~bad], axis=1)
        pen_i[~bad] = var
    return _assemble(fit_i, pen_i, w, pw, infinite_rows=np.flatnonzero(bad))


def compute_iscv_wq(bundle: EvalBundle) -> CriterionValue:
    """Weighted quasi-Bayesian importance-sampling leave-one-out CV.

    fit_i = -log E_pos[exp(log h_i - s_i)] and penalty_i =
    +log E_pos[exp(-s_i)], so that fit_i + penalty_i estimates the
    leave-observation-i-out expected log predictive density.  Observations
    whose largest importance ratio exp(-s_i) exceeds 1000x the mean ratio
    are reported in ``unstable_rows`` (a warning channel; no truncation or
    smoothing is applied).
    """
    lp, sc, w = bundle.log_pred, bundle.score, bundle.weights
    fit_i = -log_mean_exp(lp - sc, axis=1)
    lme_neg_score = log_mean_exp(-sc, axis=1)
    pen_i = lme_neg_score
    bad = ~np.isfinite(lp).all(axis=1)
    unstable = np.flatnonzero(np.max(-sc, axis=1) > _RATIO_FLAG + lme_neg_score)
    return _assemble(
        fit_i, pen_i, w, w,
        infinite_rows=np.flatnonzero(bad),
        unstable_rows=unstable,
    )


def penalty_gap(bundle: EvalBundle) -> float:
    """Difference between the covariance penalty and the variance penalty,
    with the bundle weights applied to both."""
    pcic = compute_pcic(bundle)
    waic = compute_waic(bundle, penalty_weights=bundle.weights)
    return pcic.penalty - waic.penalty
