"""Predictive information criteria from quasi-posterior draws.

The criterion family evaluates models whose training objective (the score
defining the quasi-posterior) need not equal the predictive log density:
the bias correction is the posterior covariance between the two.  The
package covers three applications (density-ratio-tilted regression under
covariate shift, inverse-propensity-weighted causal regression, and
surrogate-score location models), exact and Metropolis samplers, and
seeded replication drivers with Monte Carlo error oracles.
"""

from .criteria import (
    CriterionValue,
    DataError,
    EvalBundle,
    compute_iscv_wq,
    compute_pcic,
    compute_waic,
    penalty_gap,
)
from .models import (
    CausalObservations,
    CovariateShiftModel,
    InfoMatrices,
    IpwCausalModel,
    LocationFamilyModel,
    MEstimate,
    ModelSpec,
    RegressionData,
    compute_gic,
    density_ratio,
    empirical_info_matrices,
    eval_bundle,
    m_estimate,
    theoretical_penalty,
)
from .numkit import (
    RngStream,
    chol_factor,
    log_mean_exp,
    moments_over_draws,
    substream,
)
from .sampler import (
    ChainConfig,
    Draws,
    conjugate_gaussian_posterior,
    ess,
    rwm_sample,
    sample_mvn,
)
from .experiments import (
    CausalConfig,
    CovariateShiftConfig,
    QuasiBayesConfig,
    ReplicationReport,
    gen_causal,
    gen_covariate_shift,
    oracle_generalization_error,
    run_causal,
    run_covariate_shift,
    run_quasibayes,
)

__version__ = "0.1.0"
