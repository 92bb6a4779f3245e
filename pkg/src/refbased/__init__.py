"""Reference-based estimators and a Bayesian maintained-effect causal model
for longitudinal trials where data after treatment discontinuation are
missing."""

from .causal import (
    EffectDecomposition,
    EffectDraws,
    EffectModelKind,
    EstimateSummary,
    IntervalKind,
    K0Prior,
    MaintainedEffectModel,
    PiPosterior,
    adjusted_contrasts,
    carry_forward_K,
    decay_K,
    default_interval_kind,
    draw_k0,
    draw_pi,
    effect_draws,
    implied_trajectory,
    parse_prior,
    pi_posterior,
    summarize,
    summarize_affine,
)
from .data import (
    Arm,
    IcePatternCounts,
    PatientRecord,
    TrialDataset,
    load_csv,
    pattern_counts,
    write_csv,
)
from .errors import (
    DataValidationError,
    EstimationError,
    InvalidParameterError,
    NumericError,
    RefbasedError,
)
from .estimators import (
    ImputationDistribution,
    PooledEstimate,
    RbiMethod,
    analyze_ancova,
    build_imputation_distribution,
    condmean_estimator,
    condmean_jackknife,
    conditional_mean_impute,
    impute_multiple,
    jackknife_se,
    rubin_estimate,
    rubins_rules,
)
from .gaussian import (
    ConditionalMvn,
    MvnParams,
    VisitSchedule,
    chol_pd,
    condition_mvn,
    sample_mvn,
    spatial_power_cov,
    substream,
)
from .mmrm import (
    GibbsConfig,
    MleFit,
    PosteriorDraws,
    dump_draws_csv,
    fit_mle,
    fit_monotone_mle,
    gibbs_sample,
)
from .simulation import (
    ArmDropout,
    DropoutModel,
    EstimateRecord,
    EstimatorMetrics,
    EstimatorSpec,
    MetricsReport,
    ReplicationResult,
    ScenarioConfig,
    StudyResult,
    compute_metrics,
    load_scenario,
    parse_estimator,
    run_replication,
    run_study,
    simulate_trial,
    true_effect_oracle,
    write_replications_csv,
    write_summary_csv,
)

__version__ = "0.1.0"
