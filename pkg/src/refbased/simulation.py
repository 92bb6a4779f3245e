"""Frequentist-calibration simulation harness.

Generates two-arm longitudinal trials (multivariate-normal outcomes with
sequential logistic dropout), runs a configurable estimator suite over
many replications with independent deterministic streams, and reduces the
results to the usual coverage/type-1 metrics. A large Monte Carlo oracle
pins the true treatment-policy effect for any maintained-effect value as
``A + k * B``.
"""

from __future__ import annotations

import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .causal import (
    EffectModelKind,
    K0Prior,
    MaintainedEffectModel,
    default_interval_kind,
    draw_k0,
    draw_pi,
    effect_draws,
    parse_prior,
    summarize,
    summarize_affine,
)
from .data import Arm, PatientRecord, TrialDataset, pattern_counts
from .errors import EstimationError, InvalidParameterError
from .estimators import RbiMethod, condmean_jackknife, rubin_estimate
from .gaussian import MvnParams, VisitSchedule, chol_pd, spatial_power_cov, substream
from .mmrm import GibbsConfig, gibbs_sample

Z975 = 1.959963984540054

# stream roles under (master_seed, replication, role, ...)
_SIM, _GIBBS, _MI, _PI, _KDRAW, _TRUTH = 0, 1, 2, 3, 4, 5
_ORACLE_STREAM = 2**31 - 1


@dataclass(frozen=True)
class ArmDropout:
    """Logistic discontinuation-hazard coefficients for one arm."""

    intercept: float
    base: tuple  # baseline coefficient per eligible visit
    prev: tuple  # previous-outcome coefficient per eligible visit


@dataclass(frozen=True)
class DropoutModel:
    """Sequential dropout hazards at the eligible visits.

    An event at visit ``v`` makes the outcome at ``v`` and all later
    outcomes missing, so the patient's last observed visit is ``v - 1``;
    the hazard depends on baseline and the visit ``v - 1`` outcome.
    """

    eligible_visits: tuple  # visit indices, each >= 2
    active: ArmDropout
    reference: ArmDropout

    def __post_init__(self):
        visits = tuple(int(v) for v in self.eligible_visits)
        object.__setattr__(self, "eligible_visits", visits)
        if any(v < 2 for v in visits):
            raise InvalidParameterError(
                "dropout cannot occur at baseline or the first follow-up visit"
            )
        if list(visits) != sorted(set(visits)):
            raise InvalidParameterError("eligible visits must be strictly increasing")
        for arm_cfg in (self.active, self.reference):
            if len(arm_cfg.base) != len(visits) or len(arm_cfg.prev) != len(visits):
                raise InvalidParameterError(
                    "per-visit dropout coefficients must match the eligible visits"
                )

    def for_arm(self, arm: Arm) -> ArmDropout:
        return self.active if arm is Arm.ACTIVE else self.reference


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator in the study suite."""

    kind: str  # rubin | condmean | bcm
    method: RbiMethod | None
    prior: K0Prior | None
    label: str

    @property
    def fixed_k(self) -> float | None:
        """The maintained-effect value this estimator assumes, if fixed."""
        if self.kind in ("rubin", "condmean"):
            return 0.0 if self.method is RbiMethod.J2R else 1.0
        if self.prior.kind == "point":
            return self.prior.params[0]
        return None


def parse_estimator(spec: str) -> EstimatorSpec:
    """Parse ``rubin:j2r``, ``condmean:cir``, or ``bcm:<prior spec>``."""
    kind, _, rest = spec.strip().partition(":")
    kind = kind.lower()
    if kind in ("rubin", "condmean"):
        try:
            method = RbiMethod(rest.lower())
        except ValueError:
            raise InvalidParameterError(
                f"unknown method {rest!r} in estimator spec {spec!r}"
            ) from None
        return EstimatorSpec(kind=kind, method=method, prior=None, label=f"{kind}:{method.value}")
    if kind == "bcm":
        prior = parse_prior(rest)
        return EstimatorSpec(kind=kind, method=None, prior=prior, label=f"bcm:{prior.label()}")
    raise InvalidParameterError(
        f"unknown estimator kind {kind!r}; expected rubin, condmean, or bcm"
    )


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully resolved study configuration."""

    name: str
    schedule: VisitSchedule
    active_params: MvnParams
    reference_params: MvnParams
    dropout: DropoutModel
    hypothesis: str  # "null" | "alternative"
    ice_level: str  # "low" | "high"
    n_per_arm: int
    estimators: tuple
    replications: int
    master_seed: int
    gibbs_total: int = 5200
    gibbs_burn: int = 200
    gibbs_thin: int = 1
    iw_df_offset: int = 2
    n_imputations: int = 100
    pi_support_start: int = 1
    oracle_n_mc: int = 1_000_000

    def __post_init__(self):
        if self.hypothesis not in ("null", "alternative"):
            raise InvalidParameterError(f"bad hypothesis {self.hypothesis!r}")
        if self.ice_level not in ("low", "high"):
            raise InvalidParameterError(f"bad ice_level {self.ice_level!r}")
        if self.hypothesis == "null" and not np.array_equal(
            self.active_params.mean, self.reference_params.mean
        ):
            raise InvalidParameterError(
                "a null scenario must use the reference means for both arms"
            )
        if self.n_per_arm < 2:
            raise InvalidParameterError("need at least 2 patients per arm")
        if self.replications < 1:
            raise InvalidParameterError("need at least 1 replication")
        if not self.estimators:
            raise InvalidParameterError("the estimator suite is empty")

    def gibbs_config(self, seed: int) -> GibbsConfig:
        return GibbsConfig(
            n_total=self.gibbs_total,
            n_burn=self.gibbs_burn,
            thin=self.gibbs_thin,
            seed=seed,
            iw_df_offset=self.iw_df_offset,
        )


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def _simulate_arm_raw(
    params: MvnParams,
    dropout: ArmDropout,
    eligible: tuple,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Outcomes and last-observed-visit indices for one arm."""
    p = params.dim
    lower = chol_pd(params.cov, "outcome covariance")
    y = params.mean + rng.standard_normal((n, p)) @ lower.T
    last = np.full(n, p - 1, dtype=np.int64)
    at_risk = np.ones(n, dtype=bool)
    for t, visit in enumerate(eligible):
        lp = dropout.intercept + dropout.base[t] * y[:, 0] + dropout.prev[t] * y[:, visit - 1]
        events = at_risk & (rng.random(n) < expit(lp))
        last[events] = visit - 1
        at_risk &= ~events
    return y, last


def simulate_trial(scenario: ScenarioConfig, rng: np.random.Generator) -> TrialDataset:
    """One simulated trial: both arms, dropout applied, no post-event data."""
    records = []
    for arm, params, tag in (
        (Arm.ACTIVE, scenario.active_params, "a"),
        (Arm.REFERENCE, scenario.reference_params, "r"),
    ):
        y, last = _simulate_arm_raw(
            params,
            scenario.dropout.for_arm(arm),
            scenario.dropout.eligible_visits,
            scenario.n_per_arm,
            rng,
        )
        for i in range(scenario.n_per_arm):
            d = int(last[i])
            outcomes = tuple(y[i, : d + 1]) + (None,) * (scenario.schedule.j_max - d)
            records.append(
                PatientRecord(
                    id=f"{tag}{i:05d}", arm=arm, outcomes=outcomes, last_observed=d
                )
            )
    return TrialDataset(schedule=scenario.schedule, patients=tuple(records))


def true_effect_oracle(
    scenario: ScenarioConfig, n_mc: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte Carlo estimate of the effect pieces ``(A, B)``.

    ``A`` is the completer probability times the final-visit mean contrast;
    ``B`` sums the earlier pattern-weighted contrasts. The true effect for
    any maintained-effect value ``k`` is ``A + k * B``. Pattern
    probabilities come from simulating the active arm at scale ``n_mc``.
    """
    if n_mc < 1:
        raise InvalidParameterError("n_mc must be positive")
    j_max = scenario.schedule.j_max
    _, last = _simulate_arm_raw(
        scenario.active_params,
        scenario.dropout.for_arm(Arm.ACTIVE),
        scenario.dropout.eligible_visits,
        n_mc,
        rng,
    )
    pi = np.bincount(last, minlength=j_max + 1) / n_mc
    delta = scenario.active_params.mean - scenario.reference_params.mean
    a_true = float(pi[j_max] * delta[j_max])
    b_true = float(pi[:j_max] @ delta[:j_max])
    return a_true, b_true


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateRecord:
    label: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    k_true: float
    theta_true: float


@dataclass(frozen=True)
class ReplicationResult:
    index: int
    records: tuple


def _derived_seed(master_seed: int, *path: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(path))
    return int(ss.generate_state(1)[0])


def run_replication(
    scenario: ScenarioConfig, index: int, a_true: float, b_true: float
) -> ReplicationResult:
    """One replication, fully determined by ``(master_seed, index)``."""
    seed = scenario.master_seed
    data = simulate_trial(scenario, substream(seed, index, _SIM))
    suite = scenario.estimators

    needs_draws = any(s.kind in ("rubin", "bcm") for s in suite)
    draws = None
    if needs_draws:
        draws = gibbs_sample(
            data, scenario.gibbs_config(_derived_seed(seed, index, _GIBBS))
        )

    condmean_methods = [s.method for s in suite if s.kind == "condmean"]
    condmean_results = (
        condmean_jackknife(data, condmean_methods) if condmean_methods else {}
    )

    bcm_specs = [s for s in suite if s.kind == "bcm"]
    decomposition = None
    if bcm_specs:
        counts = pattern_counts(data, Arm.ACTIVE)
        pi = draw_pi(
            counts, draws.n_draws, substream(seed, index, _PI), scenario.pi_support_start
        )
        zero_k = np.zeros(draws.n_draws)
        model = MaintainedEffectModel(EffectModelKind.CONSTANT, K0Prior.point(0.0))
        decomposition = effect_draws(draws, pi, zero_k, model).decomposition

    mi_rng = substream(seed, index, _MI)
    records = []
    for est_idx, spec in enumerate(suite):
        if spec.kind == "rubin":
            pooled = rubin_estimate(
                data, draws, spec.method, scenario.n_imputations, mi_rng
            )
            point, se, lo, hi = pooled.point, pooled.se, pooled.ci_low, pooled.ci_high
        elif spec.kind == "condmean":
            point, se = condmean_results[spec.method]
            lo, hi = point - Z975 * se, point + Z975 * se
        else:
            prior = spec.prior
            if prior.kind in ("point", "normal"):
                summary = summarize_affine(decomposition, prior)
            else:
                k = draw_k0(prior, len(decomposition.a), substream(seed, index, _KDRAW, est_idx))
                theta = decomposition.theta(k)
                summary = summarize(theta, default_interval_kind(prior))
            point, se, lo, hi = summary.point, summary.sd, summary.ci_low, summary.ci_high
        k_true = spec.fixed_k
        if k_true is None:
            k_true = float(
                draw_k0(spec.prior, 1, substream(seed, index, _TRUTH, est_idx))[0]
            )
        theta_true = a_true + k_true * b_true
        records.append(
            EstimateRecord(
                label=spec.label,
                point=float(point),
                se=float(se),
                ci_low=float(lo),
                ci_high=float(hi),
                k_true=float(k_true),
                theta_true=float(theta_true),
            )
        )
    return ReplicationResult(index=index, records=tuple(records))


def _replication_worker(args):
    scenario, index, a_true, b_true = args
    try:
        return run_replication(scenario, index, a_true, b_true)
    except Exception as exc:
        raise EstimationError(
            f"replication {index} failed (master seed {scenario.master_seed}): {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorMetrics:
    label: str
    n_reps: int
    mean: float
    true_mean: float
    true_sd: float
    emp_se: float
    est_se: float
    coverage_pct: float
    type1_pct: float
    mcse_mean: float
    mcse_coverage_pct: float


@dataclass(frozen=True)
class MetricsReport:
    n_replications: int
    rows: tuple


def compute_metrics(results) -> MetricsReport:
    """Reduce replication results to per-estimator frequentist metrics."""
    results = list(results)
    if len(results) < 2:
        raise InvalidParameterError("need at least 2 replications for metrics")
    labels = [rec.label for rec in results[0].records]
    rows = []
    n = len(results)
    for pos, label in enumerate(labels):
        recs = [r.records[pos] for r in results]
        points = np.array([r.point for r in recs])
        ses = np.array([r.se for r in recs])
        lo = np.array([r.ci_low for r in recs])
        hi = np.array([r.ci_high for r in recs])
        truth = np.array([r.theta_true for r in recs])
        covered = float(np.mean((lo <= truth) & (truth <= hi)))
        rejected = float(np.mean((lo > 0.0) | (hi < 0.0)))
        emp_se = float(points.std(ddof=1))
        rows.append(
            EstimatorMetrics(
                label=label,
                n_reps=n,
                mean=float(points.mean()),
                true_mean=float(truth.mean()),
                true_sd=float(truth.std(ddof=1)),
                emp_se=emp_se,
                est_se=float(ses.mean()),
                coverage_pct=100.0 * covered,
                type1_pct=100.0 * rejected,
                mcse_mean=emp_se / np.sqrt(n),
                mcse_coverage_pct=100.0 * float(np.sqrt(covered * (1 - covered) / n)),
            )
        )
    return MetricsReport(n_replications=n, rows=tuple(rows))


@dataclass(frozen=True)
class StudyResult:
    scenario: ScenarioConfig
    metrics: MetricsReport
    replications: tuple
    a_true: float
    b_true: float


def run_study(
    scenario: ScenarioConfig, threads: int | None = None, progress: bool = False
) -> StudyResult:
    """Run the full study: oracle, replications (parallel), metrics."""
    a_true, b_true = true_effect_oracle(
        scenario, scenario.oracle_n_mc, substream(scenario.master_seed, _ORACLE_STREAM)
    )
    tasks = [(scenario, i, a_true, b_true) for i in range(scenario.replications)]
    if threads is not None and threads < 1:
        raise InvalidParameterError("threads must be positive")
    if threads == 1 or scenario.replications == 1:
        results = [_replication_worker(t) for t in _progress_iter(tasks, progress)]
    else:
        chunk = max(1, scenario.replications // (8 * (threads or 2)))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(
                _progress_iter(
                    pool.map(_replication_worker, tasks, chunksize=chunk),
                    progress,
                    total=len(tasks),
                )
            )
    return StudyResult(
        scenario=scenario,
        metrics=compute_metrics(results),
        replications=tuple(results),
        a_true=a_true,
        b_true=b_true,
    )


def _progress_iter(iterable, enabled, total=None):
    if not enabled:
        yield from iterable
        return
    total = total if total is not None else len(iterable)
    for i, item in enumerate(iterable, start=1):
        if i % 25 == 0 or i == total:
            print(f"  replication {i}/{total}", file=sys.stderr, flush=True)
        yield item


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


def load_scenario(path, **overrides) -> ScenarioConfig:
    """Load a scenario TOML file; keyword overrides replace loaded fields."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    try:
        schedule = VisitSchedule(tuple(raw["schedule"]["weeks"]))
        om = raw["outcome_model"]
        sds = np.sqrt(np.asarray(om["variances"], dtype=float))
        cov = spatial_power_cov(
            sds, schedule, om["correlation"], om.get("correlation_scale_weeks", 4.0)
        )
        reference = MvnParams(np.asarray(om["reference_means"], float), cov)
        hypothesis = raw["hypothesis"]
        if hypothesis == "null":
            active = reference
        else:
            active = MvnParams(np.asarray(om["active_means"], float), cov)
        ice_level = raw["ice_level"]
        dr = raw["dropout"]
        weeks = list(dr["weeks"])
        visit_of_week = {w: i for i, w in enumerate(schedule.times)}
        try:
            eligible = tuple(visit_of_week[float(w)] for w in weeks)
        except KeyError as exc:
            raise InvalidParameterError(
                f"dropout week {exc.args[0]} is not on the schedule"
            ) from None
        icpts = dr["intercepts"]
        dropout = DropoutModel(
            eligible_visits=eligible,
            active=ArmDropout(
                intercept=float(icpts[f"active_{ice_level}"]),
                base=tuple(dr["active_base"]),
                prev=tuple(dr["active_prev"]),
            ),
            reference=ArmDropout(
                intercept=float(icpts[f"reference_{ice_level}"]),
                base=tuple(dr["reference_base"]),
                prev=tuple(dr["reference_prev"]),
            ),
        )
        sampler = raw.get("sampler", {})
        analysis = raw.get("analysis", {})
        estimators = tuple(
            parse_estimator(s) for s in analysis.get("estimators", ["bcm:point:0"])
        )
        config = ScenarioConfig(
            name=raw.get("name", "scenario"),
            schedule=schedule,
            active_params=active,
            reference_params=reference,
            dropout=dropout,
            hypothesis=hypothesis,
            ice_level=ice_level,
            n_per_arm=int(raw["n_per_arm"]),
            estimators=estimators,
            replications=int(raw.get("replications", 1000)),
            master_seed=int(raw.get("master_seed", 0)),
            gibbs_total=int(sampler.get("iterations", 5200)),
            gibbs_burn=int(sampler.get("burn_in", 200)),
            gibbs_thin=int(sampler.get("thin", 1)),
            iw_df_offset=int(sampler.get("iw_df_offset", 2)),
            n_imputations=int(analysis.get("imputations", 100)),
            pi_support_start=int(analysis.get("pi_support_start", 1)),
            oracle_n_mc=int(analysis.get("oracle_draws", 1_000_000)),
        )
    except KeyError as exc:
        raise InvalidParameterError(f"scenario file {path}: missing key {exc}") from None
    if overrides:
        if "estimators" in overrides and isinstance(overrides["estimators"][0], str):
            overrides["estimators"] = tuple(
                parse_estimator(s) for s in overrides["estimators"]
            )
        config = replace(config, **overrides)
    return config


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.10g}"


SUMMARY_COLUMNS = [
    "estimator",
    "n_reps",
    "mean",
    "true_mean",
    "true_sd",
    "emp_se",
    "est_se",
    "coverage_pct",
    "type1_pct",
    "mcse_mean",
    "mcse_coverage_pct",
]


def write_summary_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in report.rows:
            fh.write(
                ",".join(
                    [
                        row.label,
                        str(row.n_reps),
                        _fmt(row.mean),
                        _fmt(row.true_mean),
                        _fmt(row.true_sd),
                        _fmt(row.emp_se),
                        _fmt(row.est_se),
                        _fmt(row.coverage_pct),
                        _fmt(row.type1_pct),
                        _fmt(row.mcse_mean),
                        _fmt(row.mcse_coverage_pct),
                    ]
                )
                + "\n"
            )


def write_replications_csv(replications, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("replication,estimator,point,se,ci_low,ci_high,k_true,theta_true\n")
        for rep in replications:
            for rec in rep.records:
                fh.write(
                    ",".join(
                        [
                            str(rep.index),
                            rec.label,
                            _fmt(rec.point),
                            _fmt(rec.se),
                            _fmt(rec.ci_low),
                            _fmt(rec.ci_high),
                            _fmt(rec.k_true),
                            _fmt(rec.theta_true),
                        ]
                    )
                    + "\n"
                )
