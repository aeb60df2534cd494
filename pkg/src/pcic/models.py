"""Concrete model specifications for the three applications, plus
M-estimation, empirical information matrices, the asymptotic penalty
formula, and the GIC baseline.

A model supplies, for every observation, a score (the training objective
whose sum defines the quasi-posterior), a log predictive density (the
validation objective), and a weight.  Score and predictive density may
differ; that gap is exactly what the covariance penalty accounts for.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .criteria import DataError, EvalBundle
from .numkit import (
    cauchy_logpdf,
    chol_factor,
    laplace_logpdf,
    normal_logpdf,
)
from .sampler import Draws

__all__ = [
    "ModelSpec",
    "CovariateShiftModel",
    "IpwCausalModel",
    "LocationFamilyModel",
    "RegressionData",
    "CausalObservations",
    "InfoMatrices",
    "MEstimate",
    "EstimationError",
    "EstimationWarning",
    "NumericalError",
    "density_ratio",
    "eval_bundle",
    "m_estimate",
    "weighted_median",
    "empirical_info_matrices",
    "theoretical_penalty",
    "compute_gic",
]

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)
_MAX_CONDITION = 1e12


class EstimationError(RuntimeError):
    """M-estimation failed; ``best`` holds the best point found."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class EstimationWarning(UserWarning):
    """Suspicious curvature (e.g. indefinite score Hessian at an optimum)."""


class NumericalError(RuntimeError):
    """Singular or ill-conditioned linear algebra in a criterion formula."""


@dataclass(frozen=True)
class RegressionData:
    """Covariate/response pairs."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, float)))
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have equal length")

    def __len__(self):
        return self.x.size


@dataclass(frozen=True)
class CausalObservations:
    """Observed slice of a causal dataset: one treatment per individual.

    ``weight`` is the inverse-propensity weight T/e of the treatment the
    individual actually received; unobserved treatment arms contribute
    nothing and are omitted.
    """

    y: np.ndarray
    x: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        for name in ("y", "x", "weight"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if not (self.y.shape == self.x.shape == self.weight.shape):
            raise ValueError("y, x, weight must have equal length")

    def __len__(self):
        return self.y.size


class ModelSpec:
    """Interface shared by all models.

    Subclasses implement the vectorised evaluations; the optional derivative
    hooks return None when no analytic form is available, in which case
    central finite differences are used.
    """

    dim: int
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    def log_pred(self, data, thetas) -> np.ndarray:
        """(n, S) matrix of log h_i(X_i | theta_s)."""
        raise NotImplementedError

    def score(self, data, thetas) -> np.ndarray:
        """(n, S) matrix of s_i(X_i, theta_s)."""
        raise NotImplementedError

    def weights(self, data) -> np.ndarray:
        raise NotImplementedError

    def penalty_weights(self, data):
        """Optional separate penalty weights attached to bundles."""
        return None

    def _prior_terms(self):
        # cached: the prior is fixed per instance and this sits on the
        # sampler's per-iteration path
        cached = getattr(self, "_prior_cache", None)
        if cached is None:
            factor = chol_factor(self.prior_cov)
            log_det = 2.0 * float(np.sum(np.log(np.diag(factor))))
            cached = (np.linalg.inv(factor), log_det)
            object.__setattr__(self, "_prior_cache", cached)
        return cached

    def log_prior(self, theta) -> float:
        theta = np.atleast_1d(np.asarray(theta, float))
        inv_factor, log_det = self._prior_terms()
        half = inv_factor @ (theta - self.prior_mean)
        return -0.5 * (half @ half + log_det + self.dim * math.log(2.0 * math.pi))

    def log_posterior(self, data, theta) -> float:
        """Unnormalised log quasi-posterior: summed score plus log prior."""
        theta = np.atleast_1d(np.asarray(theta, float))
        return float(np.sum(self.score(data, theta[None, :]))) + self.log_prior(theta)

    # -- optional analytic derivatives ------------------------------------
    def log_pred_grad(self, data, theta):
        return None

    def score_grad(self, data, theta):
        return None

    def log_pred_hess(self, data, theta):
        return None

    def score_hess(self, data, theta):
        return None

    def log_pred_curvature(self, data, theta, weights):
        """Direct estimate of -(1/n) sum_i w_i hess log h_i when
        per-observation Hessians do not exist (kinked densities)."""
        return None

    def score_curvature(self, data, theta):
        """Direct estimate of -(1/n) sum_i hess s_i (see above)."""
        return None


def density_ratio(x, train, test):
    """p_test(x) / p_train(x) for two normal laws, via log densities.

    ``train`` and ``test`` are (mean, sd) pairs.
    """
    mu_tr, sd_tr = train
    mu_te, sd_te = test
    if sd_tr <= 0 or sd_te <= 0:
        raise ValueError("normal scale parameters must be positive")
    return np.exp(normal_logpdf(x, mu_te, sd_te) - normal_logpdf(x, mu_tr, sd_tr))


@dataclass(frozen=True)
class CovariateShiftModel(ModelSpec):
    """Gaussian linear regression trained under a density-ratio-tilted score.

    The predictive density is N(y; theta_1 + theta_2 x, sigma^2) with known
    sigma; the score multiplies its log by r(x)^lam, where r is the
    test/train covariate density ratio; observation weights are r(x).
    lam = 0 recovers unweighted likelihood training.
    """

    lam: float = 1.0
    sigma: float = 0.25
    train: tuple = (0.0, 1.0)
    test: tuple = (0.5, 0.3)
    prior_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    prior_cov: np.ndarray = field(default_factory=lambda: np.eye(2))

    dim = 2

    def features(self, x):
        x = np.atleast_1d(np.asarray(x, float))
        return np.column_stack([np.ones_like(x), x])

    def ratio(self, x):
        return density_ratio(x, self.train, self.test)

    def score_weights(self, data):
        """r(x)^lam, the per-observation multipliers inside the score."""
        return self.ratio(data.x) ** self.lam

    def log_pred(self, data, thetas):
        mean = self.features(data.x) @ np.asarray(thetas, float).T
        return normal_logpdf(data.y[:, None], mean, self.sigma)

    def score(self, data, thetas):
        return self.score_weights(data)[:, None] * self.log_pred(data, thetas)

    def weights(self, data):
        return self.ratio(data.x)

    def log_pred_grad(self, data, theta):
        phi = self.features(data.x)
        resid = data.y - phi @ theta
        return phi * (resid / self.sigma**2)[:, None]

    def score_grad(self, data, theta):
        return self.score_weights(data)[:, None] * self.log_pred_grad(data, theta)

    def log_pred_hess(self, data, theta):
        phi = self.features(data.x)
        return -phi[:, :, None] * phi[:, None, :] / self.sigma**2

    def score_hess(self, data, theta):
        return self.score_weights(data)[:, None, None] * self.log_pred_hess(data, theta)


@dataclass(frozen=True)
class IpwCausalModel(ModelSpec):
    """Inverse-propensity-weighted Gaussian outcome regression.

    The outcome mean is polynomial in the treatment covariate with the
    powers in ``powers`` (subsets of {1, x, x^2}); the outcome variance is
    known.  The score multiplies the log density by the T/e weight of the
    observed treatment; criterion penalty weights are the squared weights.
    """

    powers: tuple = (0, 1, 2)
    outcome_var: float = 2.0
    prior_scale2: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "powers", tuple(self.powers))

    @property
    def dim(self):
        return len(self.powers)

    @property
    def prior_mean(self):
        return np.zeros(self.dim)

    @property
    def prior_cov(self):
        return self.prior_scale2 * np.eye(self.dim)

    def features(self, x):
        x = np.atleast_1d(np.asarray(x, float))
        return np.column_stack([x**p for p in self.powers])

    def log_pred(self, data, thetas):
        mean = self.features(data.x) @ np.asarray(thetas, float).T
        return normal_logpdf(data.y[:, None], mean, math.sqrt(self.outcome_var))

    def score(self, data, thetas):
        return data.weight[:, None] * self.log_pred(data, thetas)

    def weights(self, data):
        return data.weight.copy()

    def penalty_weights(self, data):
        return data.weight**2

    def log_pred_grad(self, data, theta):
        phi = self.features(data.x)
        resid = data.y - phi @ theta
        return phi * (resid / self.outcome_var)[:, None]

    def score_grad(self, data, theta):
        return data.weight[:, None] * self.log_pred_grad(data, theta)

    def log_pred_hess(self, data, theta):
        phi = self.features(data.x)
        return -phi[:, :, None] * phi[:, None, :] / self.outcome_var

    def score_hess(self, data, theta):
        return data.weight[:, None, None] * self.log_pred_hess(data, theta)


_FAMILIES = ("normal", "laplace", "cauchy")


@dataclass(frozen=True)
class LocationFamilyModel(ModelSpec):
    """Location model with a unit-scale Laplace score shared by all
    candidate families.

    ``family`` selects the predictive density (normal, laplace, or cauchy,
    all unit scale); the score is the Laplace log density regardless, so
    the quasi-posterior is common to every candidate.
    """

    family: str = "normal"
    prior_sd: float = 10.0

    dim = 1

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}, got {self.family!r}")

    @property
    def prior_mean(self):
        return np.zeros(1)

    @property
    def prior_cov(self):
        return np.array([[self.prior_sd**2]])

    def _deltas(self, data, thetas):
        y = np.atleast_1d(np.asarray(data, float))
        locs = np.asarray(thetas, float).reshape(-1)
        return y[:, None] - locs[None, :]

    def log_pred(self, data, thetas):
        u = self._deltas(data, thetas)
        if self.family == "normal":
            return normal_logpdf(u)
        if self.family == "laplace":
            return laplace_logpdf(u)
        return cauchy_logpdf(u)

    def score(self, data, thetas):
        return laplace_logpdf(self._deltas(data, thetas))

    def weights(self, data):
        return np.ones(np.atleast_1d(np.asarray(data, float)).size)

    def log_pred_grad(self, data, theta):
        u = self._deltas(data, theta[None, :])[:, 0]
        if self.family == "normal":
            return u[:, None]
        if self.family == "laplace":
            return np.sign(u)[:, None]
        return (2.0 * u / (1.0 + u * u))[:, None]

    def score_grad(self, data, theta):
        u = self._deltas(data, theta[None, :])[:, 0]
        return np.sign(u)[:, None]

    def log_pred_hess(self, data, theta):
        u = self._deltas(data, theta[None, :])[:, 0]
        if self.family == "normal":
            return -np.ones((u.size, 1, 1))
        if self.family == "laplace":
            return None  # kink: use log_pred_curvature
        h = -2.0 * (1.0 - u * u) / (1.0 + u * u) ** 2
        return h[:, None, None]

    def log_pred_curvature(self, data, theta, weights):
        if self.family != "laplace":
            return None
        return _kink_curvature(np.asarray(data, float), float(theta[0]), weights)

    def score_curvature(self, data, theta):
        y = np.atleast_1d(np.asarray(data, float))
        return _kink_curvature(y, float(theta[0]), np.ones(y.size))


def _kink_curvature(y, theta, weights):
    """Curvature of a summed absolute-error term: twice the (weighted)
    density at ``theta``, estimated with a boxcar kernel at the n^(-1/5)
    bandwidth.  Pointwise second differences are inconsistent here."""
    n = y.size
    bandwidth = 1.06 * max(float(np.std(y)), 1e-12) * n ** -0.2
    inside = np.abs(y - theta) <= bandwidth
    dens = float(np.sum(weights[inside])) / (2.0 * n * bandwidth)
    return np.array([[2.0 * dens]])


# ---------------------------------------------------------------------------
# Bundle assembly
# ---------------------------------------------------------------------------

def eval_bundle(model: ModelSpec, data, draws: Draws) -> EvalBundle:
    """Evaluate log predictive density and score at every draw.

    Raises
    ------
    DataError
        If any model evaluation produces NaN; the message names the first
        offending (observation, draw) pair.
    """
    thetas = draws.samples
    if thetas.shape[1] != model.dim:
        raise ValueError(
            f"draws have dimension {thetas.shape[1]}, model expects {model.dim}"
        )
    log_pred = model.log_pred(data, thetas)
    score = model.score(data, thetas)
    for name, mat in (("log_pred", log_pred), ("score", score)):
        nan_at = np.argwhere(np.isnan(mat))
        if nan_at.size:
            i, s = nan_at[0]
            raise DataError(f"{name} is NaN at observation {i}, draw {s}")
    return EvalBundle(
        log_pred=log_pred,
        score=score,
        weights=model.weights(data),
        penalty_weights=model.penalty_weights(data),
    )


# ---------------------------------------------------------------------------
# M-estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MEstimate:
    theta: np.ndarray
    objective: float
    converged: bool
    iterations: int


def weighted_median(values, weights=None) -> float:
    """Weighted median with the midpoint rule on flat optima.

    Minimises sum_i w_i |v_i - t|; when the optimum is an interval (total
    weight splits exactly in half) the midpoint is returned.
    """
    v = np.asarray(values, float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, float)
    if v.size == 0:
        raise ValueError("weighted_median requires at least one value")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w)
    total = cum[-1]
    k = int(np.searchsorted(cum, 0.5 * total))
    if k + 1 < v.size and abs(cum[k] - 0.5 * total) <= 1e-12 * total:
        return 0.5 * (v[k] + v[k + 1])
    return float(v[k])


def _score_objective(model, data):
    def objective(theta):
        return float(np.sum(model.score(data, np.atleast_1d(theta)[None, :])))

    return objective


def m_estimate(model: ModelSpec, data, init=None) -> MEstimate:
    """Maximise the summed score.

    Location-family models use the exact weighted-median solution; other
    models run Nelder-Mead from the given initial point plus three seeded
    random restarts, converging when the simplex collapses below 1e-9.
    """
    objective = _score_objective(model, data)
    if isinstance(model, LocationFamilyModel):
        theta = np.array([weighted_median(np.asarray(data, float))])
        return MEstimate(theta, objective(theta), True, 0)

    init = np.zeros(model.dim) if init is None else np.atleast_1d(np.asarray(init, float))
    if not np.isfinite(objective(init)):
        raise EstimationError(f"objective is not finite at init {init}", best=init)

    rng = np.random.default_rng(20210607)
    starts = [init] + [
        init + 0.5 * (1.0 + np.abs(init)) * rng.standard_normal(model.dim)
        for _ in range(3)
    ]
    best = None
    iterations = 0
    for start in starts:
        res = minimize(
            lambda t: -objective(t),
            start,
            method="Nelder-Mead",
            options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 4000 * model.dim},
        )
        iterations += res.nit
        if best is None or res.fun < best.fun:
            best = res
    if not best.success:
        raise EstimationError(
            f"Nelder-Mead failed to converge: {best.message}", best=best.x
        )
    return MEstimate(best.x, -float(best.fun), True, iterations)


# ---------------------------------------------------------------------------
# Information matrices and asymptotic penalty
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InfoMatrices:
    """Empirical I_H, J_H (weighted), I_S, J_S (unweighted) at theta_hat."""

    i_h: np.ndarray
    j_h: np.ndarray
    i_s: np.ndarray
    j_s: np.ndarray
    theta_hat: np.ndarray


def _column_at(model_fn, data, theta):
    return model_fn(data, theta[None, :])[:, 0]


def _fd_gradient(model_fn, data, theta):
    d = theta.size
    grad = np.empty((_column_at(model_fn, data, theta).size, d))
    for j in range(d):
        h = _FD_STEP * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        grad[:, j] = (
            _column_at(model_fn, data, up) - _column_at(model_fn, data, down)
        ) / (2.0 * h)
    return grad


def _fd_hessian(model_fn, data, theta):
    d = theta.size
    center = _column_at(model_fn, data, theta)
    n = center.size
    steps = np.array([_FD_STEP * max(1.0, abs(theta[j])) for j in range(d)])
    hess = np.empty((n, d, d))
    for j in range(d):
        up, down = theta.copy(), theta.copy()
        up[j] += steps[j]
        down[j] -= steps[j]
        hess[:, j, j] = (
            _column_at(model_fn, data, up)
            - 2.0 * center
            + _column_at(model_fn, data, down)
        ) / steps[j] ** 2
    for j in range(d):
        for k in range(j + 1, d):
            pts = []
            for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                t = theta.copy()
                t[j] += sj * steps[j]
                t[k] += sk * steps[k]
                pts.append(_column_at(model_fn, data, t))
            cross = (pts[0] - pts[1] - pts[2] + pts[3]) / (4.0 * steps[j] * steps[k])
            hess[:, j, k] = cross
            hess[:, k, j] = cross
    return hess


def _gradients(model, data, theta, analytic, model_fn):
    g = analytic(data, theta)
    return g if g is not None else _fd_gradient(model_fn, data, theta)


def _neg_mean_hessian(data, theta, analytic_hess, curvature, model_fn, weights):
    """-(1/n) sum_i w_i hess_i, preferring analytic forms."""
    hess = analytic_hess(data, theta)
    if hess is not None:
        return -np.einsum("i,ijk->jk", weights, hess) / weights.size
    direct = curvature(data, theta)
    if direct is not None:
        return np.asarray(direct, float)
    hess = _fd_hessian(model_fn, data, theta)
    return -np.einsum("i,ijk->jk", weights, hess) / weights.size


def empirical_info_matrices(model: ModelSpec, data, theta, weights=None) -> InfoMatrices:
    """Empirical information matrices at ``theta``.

    I_H and J_H carry the observation weights; I_S and J_S do not.
    Derivatives are analytic where the model provides them and central
    finite differences (step eps^(1/3) scaled by the parameter) otherwise.
    An indefinite J_S triggers :class:`EstimationWarning`.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    w = model.weights(data) if weights is None else np.asarray(weights, float)
    n = w.size
    unit = np.ones(n)

    g_h = _gradients(model, data, theta, model.log_pred_grad, model.log_pred)
    g_s = _gradients(model, data, theta, model.score_grad, model.score)
    i_h = (g_h * w[:, None]).T @ g_h / n
    i_s = g_s.T @ g_s / n
    j_h = _neg_mean_hessian(
        data, theta, model.log_pred_hess,
        lambda d_, t_: model.log_pred_curvature(d_, t_, w),
        model.log_pred, w,
    )
    j_s = _neg_mean_hessian(
        data, theta, model.score_hess, model.score_curvature, model.score, unit
    )
    i_h = 0.5 * (i_h + i_h.T)
    i_s = 0.5 * (i_s + i_s.T)
    j_h = 0.5 * (j_h + j_h.T)
    j_s = 0.5 * (j_s + j_s.T)
    if np.linalg.eigvalsh(j_s).min() <= 0:
        warnings.warn("J_S is not positive definite at theta", EstimationWarning)
    return InfoMatrices(i_h, j_h, i_s, j_s, theta)


def theoretical_penalty(info: InfoMatrices, n: int) -> float:
    """Asymptotic bias correction
    [tr(J_H J_S^-1 I_S J_S^-1) + tr(J_H J_S^-1) - tr(I_H J_S^-1)] / (2n)."""
    j_s = info.j_s
    if np.linalg.cond(j_s) >= _MAX_CONDITION:
        raise NumericalError("J_S is singular or nearly singular")
    inv = np.linalg.inv(j_s)
    first = float(np.trace(info.j_h @ inv @ info.i_s @ inv))
    second = float(np.trace(info.j_h @ inv))
    third = float(np.trace(info.i_h @ inv))
    return (first + second - third) / (2.0 * n)


def compute_gic(model: ModelSpec, data, init=None) -> float:
    """Score-based information criterion at the M-estimate.

    Fit is the mean negative log predictive density at theta_hat; the
    penalty is tr(J_S^-1 C) / n with C the mean cross product of score and
    log-density gradients, keeping both terms on the per-observation scale.
    """
    est = m_estimate(model, data, init)
    theta = est.theta
    n = model.weights(data).size
    fit = -float(np.mean(_column_at(model.log_pred, data, theta)))
    g_h = _gradients(model, data, theta, model.log_pred_grad, model.log_pred)
    g_s = _gradients(model, data, theta, model.score_grad, model.score)
    cross = g_s.T @ g_h / n
    j_s = _neg_mean_hessian(
        data, theta, model.score_hess, model.score_curvature, model.score,
        np.ones(n),
    )
    if np.linalg.cond(j_s) >= _MAX_CONDITION:
        raise NumericalError("J_S is singular or nearly singular")
    penalty = float(np.trace(np.linalg.solve(j_s, cross))) / n
    return fit + penalty
