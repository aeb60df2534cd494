"""Data generators, replication drivers, and Monte Carlo oracles for the
three simulation studies.

Each driver runs independent replications on disjoint RNG substreams (one
block per replication index), collects per-replication records, and builds
aggregates from those records with a fixed reduction order, so reports are
reproducible bit for bit from (config, master seed).  Failed replications
are recorded with their cause, never silently dropped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numkit
from .criteria import EvalBundle, compute_pcic, compute_waic
from .models import (
    CausalObservations,
    CovariateShiftModel,
    IpwCausalModel,
    LocationFamilyModel,
    RegressionData,
    eval_bundle,
)
from .numkit import RngStream, chol_factor, log_mean_exp, substream
from .sampler import (
    ChainConfig,
    Draws,
    conjugate_gaussian_posterior,
    rwm_sample,
    sample_mvn,
)

__all__ = [
    "CovariateShiftConfig",
    "CausalConfig",
    "QuasiBayesConfig",
    "CausalDataset",
    "ReplicationReport",
    "gen_covariate_shift",
    "run_covariate_shift",
    "covshift_draws",
    "exact_loo_loss",
    "gen_causal",
    "run_causal",
    "run_quasibayes",
    "oracle_generalization_error",
    "recompute_aggregates",
]

# Substream layout: each replication owns a block of 2**20 indices; slots
# within the block are fixed per purpose, so execution order is irrelevant.
_BLOCK = 1 << 20
_SLOT_DATA = 0
_SLOT_ORACLE = 1
_SLOT_NOISE = 2
_SLOT_DRAWS = 1024  # + grid/candidate index


def _stream(seed: int, rep: int, slot: int) -> RngStream:
    return substream(seed, rep * _BLOCK + slot)


def _mean_se(values):
    v = np.asarray(values, float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass(frozen=True)
class ReplicationReport:
    """Per-replication records plus aggregates and full provenance."""

    experiment: str
    config: dict
    records: list
    replication_summaries: list
    aggregates: dict
    failures: list


# ---------------------------------------------------------------------------
# Covariate shift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateShiftConfig:
    n_train: int = 50
    n_test: int = 50
    train_mean: float = 0.0
    train_sd: float = 1.0
    test_mean: float = 0.5
    test_sd: float = 0.3
    noise_sd: float = 0.25
    lambda_grid: tuple = tuple(i / 100.0 for i in range(1, 201))
    prior_sd: float = 1.0
    seed: int = 0
    replications: int = 1
    n_draws: int = 4000
    oracle_points: int = 100_000
    truth: str = "sinc"  # "sinc" | "linear"
    truth_coef: tuple = (0.0, 1.0)

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])) or any(v <= 0 for v in grid):
            raise ValueError("lambda_grid must be strictly increasing and positive")
        object.__setattr__(self, "lambda_grid", grid)
        object.__setattr__(self, "truth_coef", tuple(float(v) for v in self.truth_coef))

    def truth_fn(self, x):
        if self.truth == "sinc":
            return np.sinc(x)
        c0, c1 = self.truth_coef
        return c0 + c1 * x

    def model(self, lam: float) -> CovariateShiftModel:
        return CovariateShiftModel(
            lam=lam,
            sigma=self.noise_sd,
            train=(self.train_mean, self.train_sd),
            test=(self.test_mean, self.test_sd),
            prior_mean=np.zeros(2),
            prior_cov=self.prior_sd**2 * np.eye(2),
        )


def gen_covariate_shift(cfg: CovariateShiftConfig, rng: np.random.Generator):
    """Training pairs under the train covariate law and test pairs under the
    test law, both with y = truth(x) + Gaussian noise."""
    x_tr = numkit.normal(rng, cfg.train_mean, cfg.train_sd, cfg.n_train)
    y_tr = cfg.truth_fn(x_tr) + cfg.noise_sd * rng.standard_normal(cfg.n_train)
    x_te = numkit.normal(rng, cfg.test_mean, cfg.test_sd, cfg.n_test)
    y_te = cfg.truth_fn(x_te) + cfg.noise_sd * rng.standard_normal(cfg.n_test)
    return RegressionData(x_tr, y_tr), RegressionData(x_te, y_te)


def covshift_draws(model: CovariateShiftModel, train: RegressionData,
                   n_draws: int, stream: RngStream) -> Draws:
    """Exact draws from the tilted quasi-posterior (conjugate Gaussian)."""
    mean, cov = conjugate_gaussian_posterior(
        model.features(train.x),
        train.y,
        model.score_weights(train),
        model.sigma**2,
        model.prior_mean,
        model.prior_cov,
    )
    return sample_mvn(mean, cov, n_draws, stream)


def _predictive_moments(model, train, x):
    """Exact posterior predictive mean and variance at covariates x."""
    mean, cov = conjugate_gaussian_posterior(
        model.features(train.x),
        train.y,
        model.score_weights(train),
        model.sigma**2,
        model.prior_mean,
        model.prior_cov,
    )
    phi = model.features(x)
    mu = phi @ mean
    half = phi @ chol_factor(cov)
    s2 = model.sigma**2 + np.sum(half * half, axis=1)
    return mu, s2


def _exact_expected_nll(mu, s2, truth_mean, noise_var):
    """E[-log N(y; mu, s2)] for y ~ N(truth_mean, noise_var), averaged."""
    return float(
        np.mean(0.5 * np.log(2.0 * np.pi * s2)
                + ((truth_mean - mu) ** 2 + noise_var) / (2.0 * s2))
    )


def run_covariate_shift(cfg: CovariateShiftConfig) -> ReplicationReport:
    """Tilting-parameter sweep: criteria and errors over the lambda grid.

    Per replication and lambda: exact quasi-posterior draws, PCIC (weights
    r, score weights r^lambda), WAIC with unit weights on both terms, the
    held-out test error over the n_test pairs, and a large-sample oracle
    error computed from the exact predictive over ``oracle_points`` fresh
    test covariates with the Gaussian outcome integrated analytically.
    """
    records, summaries, failures = [], [], []
    grid = np.array(cfg.lambda_grid)
    for rep in range(cfg.replications):
        try:
            rec, summ = _covshift_replication(cfg, rep, grid)
        except (ValueError, RuntimeError, ArithmeticError) as err:
            failures.append({"replication": rep, "error": f"{type(err).__name__}: {err}"})
            continue
        records.extend(rec)
        summaries.append(summ)
    aggregates = _aggregate_covshift(records, summaries, cfg)
    return ReplicationReport(
        "covariate-shift", asdict(cfg), records, summaries, aggregates, failures
    )


def _covshift_replication(cfg, rep, grid):
    rng_data = _stream(cfg.seed, rep, _SLOT_DATA).generator()
    train, test = gen_covariate_shift(cfg, rng_data)
    rng_oracle = _stream(cfg.seed, rep, _SLOT_ORACLE).generator()
    x_oracle = numkit.normal(rng_oracle, cfg.test_mean, cfg.test_sd, cfg.oracle_points)
    truth_oracle = cfg.truth_fn(x_oracle)
    noise_var = cfg.noise_sd**2

    rows = []
    for j, lam in enumerate(grid):
        model = cfg.model(lam)
        draws = covshift_draws(model, train, cfg.n_draws, _stream(cfg.seed, rep, _SLOT_DRAWS + j))
        bundle = eval_bundle(model, train, draws)
        pcic = compute_pcic(bundle)
        unit = EvalBundle(bundle.log_pred, bundle.log_pred, np.ones(bundle.n))
        waic = compute_waic(unit)
        test_lp = model.log_pred(test, draws.samples)
        test_error = -float(np.mean(log_mean_exp(test_lp, axis=1)))
        mu, s2 = _predictive_moments(model, train, x_oracle)
        oracle_error = _exact_expected_nll(mu, s2, truth_oracle, noise_var)
        rows.append({
            "replication": rep,
            "lambda": float(lam),
            "pcic": pcic.total, "pcic_fit": pcic.fit, "pcic_penalty": pcic.penalty,
            "waic": waic.total, "waic_fit": waic.fit, "waic_penalty": waic.penalty,
            "test_error": test_error,
            "oracle_error": oracle_error,
        })

    pcic_curve = np.array([r["pcic"] for r in rows])
    oracle_curve = np.array([r["oracle_error"] for r in rows])
    waic_curve = np.array([r["waic"] for r in rows])
    test_curve = np.array([r["test_error"] for r in rows])
    best_pcic = int(np.argmin(pcic_curve))
    best_oracle = int(np.argmin(oracle_curve))
    corr = (
        float(np.corrcoef(pcic_curve, oracle_curve)[0, 1])
        if grid.size >= 2 else float("nan")
    )
    regret = float(
        (oracle_curve[best_pcic] - oracle_curve[best_oracle])
        / abs(oracle_curve[best_oracle])
    )
    summary = {
        "replication": rep,
        "best_lambda_pcic": float(grid[best_pcic]),
        "best_lambda_waic": float(grid[int(np.argmin(waic_curve))]),
        "best_lambda_test": float(grid[int(np.argmin(test_curve))]),
        "best_lambda_oracle": float(grid[best_oracle]),
        "pcic_oracle_corr": corr,
        "oracle_regret_rel": regret,
    }
    return rows, summary


def _aggregate_covshift(records, summaries, cfg):
    per_lambda = []
    for lam in cfg.lambda_grid:
        rows = [r for r in records if r["lambda"] == lam]
        if not rows:
            continue
        entry = {"lambda": lam}
        for key in ("pcic", "waic", "test_error", "oracle_error",
                    "pcic_penalty", "waic_penalty"):
            entry[f"mean_{key}"] = float(np.mean([r[key] for r in rows]))
        per_lambda.append(entry)
    agg = {"per_lambda": per_lambda, "completed": len(summaries)}
    if summaries:
        for key in ("pcic_oracle_corr", "oracle_regret_rel",
                    "best_lambda_pcic", "best_lambda_oracle"):
            agg[f"mean_{key}"] = float(np.mean([s[key] for s in summaries]))
    return agg


def exact_loo_loss(model: CovariateShiftModel, train: RegressionData) -> float:
    """Weighted leave-one-out predictive loss by n exact conjugate refits.

    For each i the quasi-posterior is refit without observation i's score
    contribution and the exact Gaussian predictive density is evaluated at
    the held-out pair; the losses are combined with the model weights.
    Serves as the refit oracle for the importance-sampling criterion.
    """
    phi = model.features(train.x)
    omega = model.score_weights(train)
    w = model.weights(train)
    n = len(train)
    losses = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        mean, cov = conjugate_gaussian_posterior(
            phi[keep], train.y[keep], omega[keep], model.sigma**2,
            model.prior_mean, model.prior_cov,
        )
        mu = float(phi[i] @ mean)
        s2 = model.sigma**2 + float(phi[i] @ cov @ phi[i])
        losses[i] = 0.5 * math.log(2.0 * math.pi * s2) + (train.y[i] - mu) ** 2 / (2.0 * s2)
    return float(np.sum(w * losses) / n)


# ---------------------------------------------------------------------------
# Causal inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CausalConfig:
    n: int = 50
    treatment_x: tuple = (-1.0, -0.6, -0.2, 0.2, 0.6, 1.0)
    outcome_var: float = 2.0
    prior_scale2: float = 1000.0
    feature_sets: tuple = ((0,), (0, 1), (0, 1, 2))
    assignment_sharpness: float = 0.5
    seed: int = 0
    replications: int = 1
    n_draws: int = 4000
    wloss_replicates: int = 500

    def __post_init__(self):
        arms = tuple(float(v) for v in self.treatment_x)
        if len(set(arms)) != len(arms):
            raise ValueError("treatment_x values must be distinct")
        object.__setattr__(self, "treatment_x", arms)
        object.__setattr__(
            self, "feature_sets", tuple(tuple(int(p) for p in fs) for fs in self.feature_sets)
        )

    @property
    def n_treatments(self):
        return len(self.treatment_x)


_FEATURE_NAMES = {(0,): "intercept", (0, 1): "linear", (0, 1, 2): "quadratic"}


def _feature_name(powers):
    return _FEATURE_NAMES.get(tuple(powers), "x^" + "".join(str(p) for p in powers))


def _outcome_mean(x):
    return 1.0 + x + 0.5 * x**2


@dataclass(frozen=True)
class CausalDataset:
    """Complete generated state: all potential outcomes plus the observed
    assignment and its exact propensities."""

    z: np.ndarray             # (n,) confounder
    potential_y: np.ndarray   # (n, H)
    assigned: np.ndarray      # (n,) treatment index received
    propensities: np.ndarray  # (n, H), rows sum to 1
    treatment_x: np.ndarray   # (H,)

    def observed(self) -> CausalObservations:
        idx = np.arange(self.z.size)
        e_obs = self.propensities[idx, self.assigned]
        return CausalObservations(
            y=self.potential_y[idx, self.assigned],
            x=self.treatment_x[self.assigned],
            weight=1.0 / e_obs,
        )


def gen_causal(cfg: CausalConfig, rng: np.random.Generator) -> CausalDataset:
    """Potential outcomes for every treatment arm, a softmax treatment
    assignment driven by the confounder, and the exact propensities."""
    h = cfg.n_treatments
    x = np.array(cfg.treatment_x)
    z = numkit.uniform(rng, -math.sqrt(3.0), math.sqrt(3.0), cfg.n)
    eps = rng.standard_normal((cfg.n, h))
    potential = _outcome_mean(x)[None, :] + z[:, None] + eps
    logits = cfg.assignment_sharpness * z[:, None] * x[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(cfg.n)
    assigned = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    assigned = np.minimum(assigned, h - 1)  # cumsum rounding guard
    return CausalDataset(z, potential, assigned, probs, x)


def run_causal(cfg: CausalConfig) -> ReplicationReport:
    """Candidate-model sweep under inverse-propensity weighting.

    Per replication and candidate: exact quasi-posterior draws with T/e
    score weights, the weighted criterion (squared weights enter its
    penalty through the covariance), and a weighted-loss oracle averaging
    the exact predictive log density over fresh potential outcomes.  The
    fresh outcomes are independent copies of the observed ones: treatment
    assignment and propensities stay fixed while the outcome's own noise
    (confounder draw and error) is resampled.
    """
    records, summaries, failures = [], [], []
    for rep in range(cfg.replications):
        try:
            rec, summ = _causal_replication(cfg, rep)
        except (ValueError, RuntimeError, ArithmeticError) as err:
            failures.append({"replication": rep, "error": f"{type(err).__name__}: {err}"})
            continue
        records.extend(rec)
        summaries.append(summ)
    aggregates = _aggregate_causal(records, cfg)
    return ReplicationReport(
        "causal", asdict(cfg), records, summaries, aggregates, failures
    )


def _causal_replication(cfg, rep):
    data = gen_causal(cfg, _stream(cfg.seed, rep, _SLOT_DATA).generator())
    obs = data.observed()
    # one set of fresh outcome replicates shared by all candidates; each is
    # a full independent copy of Y_i (fresh confounder and error draws)
    rng_noise = _stream(cfg.seed, rep, _SLOT_NOISE).generator()
    shape = (cfg.wloss_replicates, cfg.n)
    root3 = math.sqrt(3.0)
    fresh = (
        _outcome_mean(obs.x)[None, :]
        + numkit.uniform(rng_noise, -root3, root3, shape)
        + rng_noise.standard_normal(shape)
    )

    rows = []
    for c, powers in enumerate(cfg.feature_sets):
        model = IpwCausalModel(powers=powers, outcome_var=cfg.outcome_var,
                               prior_scale2=cfg.prior_scale2)
        phi = model.features(obs.x)
        mean, cov = conjugate_gaussian_posterior(
            phi, obs.y, obs.weight, cfg.outcome_var, model.prior_mean, model.prior_cov
        )
        draws = sample_mvn(mean, cov, cfg.n_draws, _stream(cfg.seed, rep, _SLOT_DRAWS + c))
        bundle = eval_bundle(model, obs, draws)
        pcic_w = compute_pcic(bundle)
        # exact posterior predictive at each observed arm
        mu = phi @ mean
        half = phi @ chol_factor(cov)
        s2 = cfg.outcome_var + np.sum(half * half, axis=1)
        log_dens = (-0.5 * np.log(2.0 * np.pi * s2)[None, :]
                    - (fresh - mu[None, :]) ** 2 / (2.0 * s2)[None, :])
        wloss = float(np.mean(-(log_dens @ obs.weight)))
        rows.append({
            "replication": rep,
            "candidate": _feature_name(powers),
            "pcic_w": pcic_w.total,
            "pcic_w_fit": pcic_w.fit,
            "pcic_w_penalty": pcic_w.penalty,
            "wloss": wloss,
            "wloss_per_n": wloss / cfg.n,
        })
    selected = min(rows, key=lambda r: r["pcic_w"])["candidate"]
    return rows, {"replication": rep, "selected_by_pcic_w": selected}


def _aggregate_causal(records, cfg):
    agg = {"per_candidate": [], "completed": 0}
    for powers in cfg.feature_sets:
        name = _feature_name(powers)
        rows = [r for r in records if r["candidate"] == name]
        if not rows:
            continue
        pcic_vals = [r["pcic_w"] for r in rows]
        wloss_vals = [r["wloss_per_n"] for r in rows]
        diff = np.asarray(pcic_vals) - np.asarray(wloss_vals)
        mean_pcic, se_pcic = _mean_se(pcic_vals)
        mean_wloss, se_wloss = _mean_se(wloss_vals)
        mean_diff, se_diff = _mean_se(diff)
        agg["per_candidate"].append({
            "candidate": name,
            "mean_pcic_w": mean_pcic, "se_pcic_w": se_pcic,
            "mean_wloss_per_n": mean_wloss, "se_wloss_per_n": se_wloss,
            "mean_diff": mean_diff, "se_diff": se_diff,
            "mean_penalty": float(np.mean([r["pcic_w_penalty"] for r in rows])),
            "penalty_positive": int(sum(r["pcic_w_penalty"] > 0 for r in rows)),
            "n_rows": len(rows),
        })
        agg["completed"] = max(agg["completed"], len(rows))
    return agg


# ---------------------------------------------------------------------------
# Quasi-Bayesian model selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuasiBayesConfig:
    sample_sizes: tuple = (10, 20, 100)
    truths: tuple = ("normal", "cauchy")
    candidates: tuple = ("normal", "laplace", "cauchy")
    repetitions: int = 100
    seed: int = 0
    n_draws: int = 4000
    burn_in: int = 2000
    thin: int = 1
    init_step: float = 1.0
    prior_sd: float = 10.0
    oracle_test_points: int = 10_000  # 0 disables the error oracle

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "truths", tuple(self.truths))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ValueError("candidate list must be nonempty")


def _sample_truth(truth, rng, size):
    if truth == "normal":
        return rng.standard_normal(size)
    if truth == "cauchy":
        return numkit.cauchy(rng, 0.0, 1.0, size)
    raise ValueError(f"unknown truth {truth!r}")


def run_quasibayes(cfg: QuasiBayesConfig) -> ReplicationReport:
    """Surrogate-score model selection study.

    Per repetition: data from the true location family at theta = 0, one
    Metropolis run on the shared Laplace-score quasi-posterior, one bundle
    per candidate family (common score rows, family-specific predictive
    rows, unit weights), selection by each criterion, and optionally a
    fresh-sample generalisation-error oracle per candidate.
    """
    records, summaries, failures = [], [], []
    cell_index = 0
    for truth in cfg.truths:
        for n in cfg.sample_sizes:
            for rep in range(cfg.repetitions):
                stream_rep = cell_index * cfg.repetitions + rep
                try:
                    rec, summ = _quasibayes_repetition(cfg, truth, n, rep, stream_rep)
                except (ValueError, RuntimeError, ArithmeticError) as err:
                    failures.append({
                        "truth": truth, "n": n, "replication": rep,
                        "error": f"{type(err).__name__}: {err}",
                    })
                    continue
                records.extend(rec)
                summaries.append(summ)
            cell_index += 1
    aggregates = _aggregate_quasibayes(records, summaries, cfg, failures)
    return ReplicationReport(
        "quasi-bayes", asdict(cfg), records, summaries, aggregates, failures
    )


def _quasibayes_repetition(cfg, truth, n, rep, stream_rep):
    rng_data = _stream(cfg.seed, stream_rep, _SLOT_DATA).generator()
    y = _sample_truth(truth, rng_data, n)
    scorer = LocationFamilyModel(family="laplace", prior_sd=cfg.prior_sd)
    target = lambda theta: scorer.log_posterior(y, theta)
    chain = ChainConfig(
        n_draws=cfg.n_draws,
        burn_in=cfg.burn_in,
        thin=cfg.thin,
        init=np.array([float(np.median(y))]),
        init_step=cfg.init_step,
        rng=_stream(cfg.seed, stream_rep, _SLOT_DRAWS),
    )
    draws = rwm_sample(target, chain)

    oracle_rng = _stream(cfg.seed, stream_rep, _SLOT_ORACLE).generator()
    fresh = (
        _sample_truth(truth, oracle_rng, cfg.oracle_test_points)
        if cfg.oracle_test_points > 0 else None
    )

    rows = {}
    for family in cfg.candidates:
        model = LocationFamilyModel(family=family, prior_sd=cfg.prior_sd)
        bundle = eval_bundle(model, y, draws)
        pcic = compute_pcic(bundle)
        waic = compute_waic(bundle)
        row = {
            "truth": truth, "n": n, "replication": rep, "family": family,
            "pcic": pcic.total, "pcic_penalty": pcic.penalty,
            "waic": waic.total, "waic_penalty": waic.penalty,
        }
        if fresh is not None:
            row["oracle_error"] = _location_oracle_error(model, fresh, draws)
        rows[family] = row

    pick_pcic = min(cfg.candidates, key=lambda f: rows[f]["pcic"])
    pick_waic = min(cfg.candidates, key=lambda f: rows[f]["waic"])
    summary = {
        "truth": truth, "n": n, "replication": rep,
        "pcic_choice": pick_pcic, "waic_choice": pick_waic,
        "acceptance_rate": draws.acceptance_rate,
        "min_ess": float(np.min(draws.ess_per_dim)),
    }
    return list(rows.values()), summary


def _location_oracle_error(model, fresh, draws, chunk=2000):
    """Mean negative log posterior-predictive density over fresh points."""
    total = 0.0
    for start in range(0, fresh.size, chunk):
        part = fresh[start : start + chunk]
        lp = model.log_pred(part, draws.samples)
        total += float(np.sum(-log_mean_exp(lp, axis=1)))
    return total / fresh.size


def _aggregate_quasibayes(records, summaries, cfg, failures):
    table = []
    for truth in cfg.truths:
        for n in cfg.sample_sizes:
            cell = [s for s in summaries if s["truth"] == truth and s["n"] == n]
            n_failed = sum(1 for f in failures if f["truth"] == truth and f["n"] == n)
            for crit in ("pcic", "waic"):
                row = {"truth": truth, "n": n, "criterion": crit,
                       "completed": len(cell), "failed": n_failed}
                for family in cfg.candidates:
                    row[family] = sum(1 for s in cell if s[f"{crit}_choice"] == family)
                table.append(row)
    agg = {"selection_table": table, "completed": len(summaries)}
    per_family = []
    for truth in cfg.truths:
        for n in cfg.sample_sizes:
            for family in cfg.candidates:
                rows = [r for r in records
                        if r["truth"] == truth and r["n"] == n and r["family"] == family]
                if not rows:
                    continue
                entry = {"truth": truth, "n": n, "family": family,
                         "mean_pcic": float(np.mean([r["pcic"] for r in rows])),
                         "mean_waic": float(np.mean([r["waic"] for r in rows]))}
                if rows and "oracle_error" in rows[0]:
                    entry["mean_oracle_error"] = float(
                        np.mean([r["oracle_error"] for r in rows])
                    )
                per_family.append(entry)
    agg["per_family"] = per_family
    return agg


# ---------------------------------------------------------------------------
# Generalisation-error oracle
# ---------------------------------------------------------------------------

def oracle_generalization_error(model, regenerate, draws: Draws,
                                n_test_replicates: int, stream: RngStream):
    """Monte Carlo estimate of the weighted generalisation error.

    For each of ``n_test_replicates`` fresh dataset copies produced by
    ``regenerate(rng)``, computes -(1/n) sum_i w_i log E_pos[h_i] with the
    posterior expectation taken over the supplied draws, then averages.

    Returns
    -------
    (estimate, standard_error)
    """
    rng = stream.generator()
    values = np.empty(n_test_replicates)
    for t in range(n_test_replicates):
        data = regenerate(rng)
        w = model.weights(data)
        lp = model.log_pred(data, draws.samples)
        values[t] = -float(np.sum(w * log_mean_exp(lp, axis=1))) / w.size
    return _mean_se(values)


def recompute_aggregates(report: ReplicationReport) -> dict:
    """Rebuild the aggregate block from the stored records; the result must
    match ``report.aggregates`` exactly."""
    cfg_cls = {
        "covariate-shift": CovariateShiftConfig,
        "causal": CausalConfig,
        "quasi-bayes": QuasiBayesConfig,
    }[report.experiment]
    cfg = cfg_cls(**report.config)
    if report.experiment == "covariate-shift":
        return _aggregate_covshift(report.records, report.replication_summaries, cfg)
    if report.experiment == "causal":
        return _aggregate_causal(report.records, cfg)
    return _aggregate_quasibayes(
        report.records, report.replication_summaries, cfg, report.failures
    )
