"""Classical reference-based estimators.

J2R and CIR imputation distributions, Bayesian multiple imputation pooled
with Rubin's rules, deterministic conditional-mean imputation paired with
jackknife standard errors, and the ANCOVA analysis model.

Active-arm dropouts are imputed under the chosen reference-based
assumption; reference-arm dropouts are always imputed under their own
arm's (missing-at-random) distribution.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import Arm, PatientRecord, TrialDataset
from .errors import EstimationError, InvalidParameterError
from .gaussian import MvnParams, chol_pd
from .mmrm import MleFit, PosteriorDraws, _arm_mle, fit_mle

Z975 = 1.959963984540054  # normal 97.5% quantile


class RbiMethod(enum.Enum):
    J2R = "j2r"
    CIR = "cir"


@dataclass(frozen=True)
class ImputationDistribution:
    """Joint law of a dropout pattern's full outcome vector.

    Pre-ICE components keep the active-arm means and covariance; the
    post-ICE block follows the reference arm's conditional law given the
    pre-ICE values, with the mean set by the method (reference means for
    J2R, reference means plus the visit-D difference for CIR).
    """

    pattern: int  # D, the last observed visit
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        chol_pd(cov, "imputation covariance")


def _conditional_pieces(cov: np.ndarray, k: int):
    """Regression of the suffix on the first ``k`` components and the
    conditional (Schur-complement) covariance."""
    lower = chol_pd(cov[:k, :k], "pre-ICE covariance block")
    half = solve_triangular(lower, cov[:k, k:], lower=True)
    x = solve_triangular(lower.T, half, lower=False)
    regression = x.T  # (p-k, k)
    cond = cov[k:, k:] - regression @ cov[:k, k:]
    return regression, 0.5 * (cond + cond.T)


def build_imputation_distribution(
    method: RbiMethod, active: MvnParams, reference: MvnParams, pattern: int
) -> ImputationDistribution:
    """Assemble the joint imputation distribution for dropout pattern ``pattern``.

    With ``pattern == j_max`` there is nothing to impute and the active-arm
    parameters are returned unchanged.
    """
    p = active.dim
    if reference.dim != p:
        raise InvalidParameterError("arm parameter dimensions differ")
    if not 0 <= pattern <= p - 1:
        raise InvalidParameterError(f"pattern {pattern} out of range for {p} visits")
    if pattern == p - 1:
        return ImputationDistribution(pattern=pattern, mean=active.mean, cov=active.cov)
    k = pattern + 1
    mean = np.empty(p)
    mean[:k] = active.mean[:k]
    if method is RbiMethod.J2R:
        mean[k:] = reference.mean[k:]
    else:  # CIR: carry the visit-D difference forward along reference increments
        mean[k:] = reference.mean[k:] + (active.mean[pattern] - reference.mean[pattern])
    regression, cond = _conditional_pieces(reference.cov, k)
    cov = np.empty((p, p))
    pre = active.cov[:k, :k]
    cov[:k, :k] = pre
    cross = regression @ pre
    cov[k:, :k] = cross
    cov[:k, k:] = cross.T
    cov[k:, k:] = cond + cross @ regression.T
    cov = 0.5 * (cov + cov.T)
    return ImputationDistribution(pattern=pattern, mean=mean, cov=cov)


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------


def _pattern_groups(data: TrialDataset):
    """Indices of dropout patients grouped by (arm, pattern), plus their
    observed prefixes; completers are left untouched by imputation."""
    p = data.schedule.n_visits
    groups = {}
    for idx, rec in enumerate(data.patients):
        if rec.last_observed == p - 1:
            continue
        groups.setdefault((rec.arm, rec.last_observed), []).append(idx)
    out = []
    for (arm, pattern), indices in sorted(
        groups.items(), key=lambda kv: (kv[0][0].value, kv[0][1])
    ):
        prefix = np.array(
            [data.patients[i].outcomes[: pattern + 1] for i in indices], dtype=float
        )
        out.append((arm, pattern, np.array(indices), prefix))
    return out


def _group_distribution(method, arm, pattern, active, reference):
    if arm is Arm.ACTIVE:
        return build_imputation_distribution(method, active, reference, pattern)
    # own-arm (MAR) imputation for the reference arm
    return build_imputation_distribution(method, reference, reference, pattern)


def _complete_from_matrix(data: TrialDataset, completed: np.ndarray) -> TrialDataset:
    recs = []
    j_max = data.schedule.j_max
    for i, rec in enumerate(data.patients):
        if rec.last_observed == j_max:
            recs.append(rec)
        else:
            recs.append(
                PatientRecord(
                    id=rec.id,
                    arm=rec.arm,
                    outcomes=tuple(completed[i]),
                    last_observed=j_max,
                )
            )
    return TrialDataset(schedule=data.schedule, patients=tuple(recs))


def _full_matrix(data: TrialDataset) -> np.ndarray:
    p = data.schedule.n_visits
    out = np.zeros((len(data.patients), p))
    for i, rec in enumerate(data.patients):
        k = rec.last_observed + 1
        out[i, :k] = rec.outcomes[:k]
    return out


def _draw_selection(n_available: int, m: int) -> np.ndarray:
    """Evenly spaced draw indices: the last of each of ``m`` blocks, so a
    chain kept at stride 1 is consumed at stride ``n_available // m``."""
    return np.array([(i + 1) * n_available // m - 1 for i in range(m)], dtype=int)


def impute_multiple(
    data: TrialDataset,
    draws: PosteriorDraws,
    method: RbiMethod,
    m: int,
    rng: np.random.Generator,
) -> list[TrialDataset]:
    """Draw ``m`` completed datasets, one per selected posterior draw."""
    if m < 1 or m > draws.n_draws:
        raise InvalidParameterError(
            f"m must be between 1 and the {draws.n_draws} available draws, got {m}"
        )
    groups = _pattern_groups(data)
    base = _full_matrix(data)
    selection = _draw_selection(draws.n_draws, m)
    out = []
    for sel in selection:
        active = draws.params(Arm.ACTIVE, int(sel))
        reference = draws.params(Arm.REFERENCE, int(sel))
        completed = base.copy()
        for arm, pattern, indices, prefix in groups:
            dist = _group_distribution(method, arm, pattern, active, reference)
            k = pattern + 1
            regression, cond = _conditional_pieces(dist.cov, k)
            cond_chol = chol_pd(cond, "conditional covariance")
            means = dist.mean[k:] + (prefix - dist.mean[:k]) @ regression.T
            noise = rng.standard_normal((len(indices), dist.mean.size - k))
            completed[indices, k:] = means + noise @ cond_chol.T
        out.append(_complete_from_matrix(data, completed))
    return out


def conditional_mean_impute(
    data: TrialDataset, mle: MleFit, method: RbiMethod
) -> TrialDataset:
    """Replace each missing block by its conditional mean at the MLE."""
    completed = _full_matrix(data)
    for arm, pattern, indices, prefix in _pattern_groups(data):
        dist = _group_distribution(method, arm, pattern, mle.active, mle.reference)
        k = pattern + 1
        regression, _ = _conditional_pieces(dist.cov, k)
        completed[indices, k:] = dist.mean[k:] + (prefix - dist.mean[:k]) @ regression.T
    return _complete_from_matrix(data, completed)


# ---------------------------------------------------------------------------
# Analysis model and pooling
# ---------------------------------------------------------------------------


def _ancova_arrays(y0: np.ndarray, yf: np.ndarray, treat: np.ndarray):
    """OLS of final outcome on (1, baseline, treatment); returns the
    treatment coefficient and its model-based variance."""
    n = y0.size
    x = np.column_stack([np.ones(n), y0, treat])
    gram = x.T @ x
    if np.linalg.matrix_rank(gram) < 3:
        warnings.warn(
            "collinear ANCOVA design; falling back to difference in means",
            stacklevel=3,
        )
        a = yf[treat == 1.0]
        r = yf[treat == 0.0]
        point = float(a.mean() - r.mean())
        var = float(a.var(ddof=1) / a.size + r.var(ddof=1) / r.size)
        return point, var
    xty = x.T @ yf
    coef = np.linalg.solve(gram, xty)
    rss = float(yf @ yf - coef @ xty)
    sigma2 = rss / (n - 3)
    gram_inv_tt = float(np.linalg.solve(gram, np.array([0.0, 0.0, 1.0]))[2])
    return float(coef[2]), sigma2 * gram_inv_tt


def analyze_ancova(completed: TrialDataset) -> tuple[float, float]:
    """Treatment effect at the final visit, baseline-adjusted.

    Requires a completed dataset (no missing final values).
    """
    j_max = completed.schedule.j_max
    y0, yf, treat = [], [], []
    for rec in completed.patients:
        if rec.last_observed < j_max:
            raise EstimationError(
                f"patient {rec.id} has a missing final visit; impute first"
            )
        y0.append(rec.outcomes[0])
        yf.append(rec.outcomes[j_max])
        treat.append(1.0 if rec.arm is Arm.ACTIVE else 0.0)
    return _ancova_arrays(np.array(y0), np.array(yf), np.array(treat))


@dataclass(frozen=True)
class PooledEstimate:
    """Rubin's-rules pooled point estimate and variance decomposition."""

    point: float
    se: float
    ci_low: float
    ci_high: float
    m: int
    within: float
    between: float


def rubins_rules(points, variances) -> PooledEstimate:
    """Pool ``m`` completed-data analyses.

    Total variance is ``W + (1 + 1/m) B``; the interval uses normal
    quantiles.
    """
    points = np.asarray(points, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if points.ndim != 1 or points.shape != variances.shape or points.size < 2:
        raise InvalidParameterError("need m >= 2 aligned points and variances")
    m = points.size
    point = float(points.mean())
    within = float(variances.mean())
    between = float(points.var(ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    se = float(np.sqrt(total))
    return PooledEstimate(
        point=point,
        se=se,
        ci_low=point - Z975 * se,
        ci_high=point + Z975 * se,
        m=m,
        within=within,
        between=between,
    )


def rubin_estimate(
    data: TrialDataset,
    draws: PosteriorDraws,
    method: RbiMethod,
    m: int,
    rng: np.random.Generator,
) -> PooledEstimate:
    """Multiple imputation, per-dataset ANCOVA, Rubin's-rules pooling."""
    pts, variances = _rubin_points(data, draws, method, m, rng)
    return rubins_rules(pts, variances)


def _rubin_points(data, draws, method, m, rng):
    """ANCOVA results per imputation without materializing datasets.

    Mathematically identical to running :func:`impute_multiple` and
    :func:`analyze_ancova` with the same stream (the conditional law of
    the post-ICE block under the joint construction is the imputing arm's
    own conditional law), but skips assembling the joint covariance and
    shares the conditional pieces across groups with equal prefix length.
    """
    if m < 1 or m > draws.n_draws:
        raise InvalidParameterError(
            f"m must be between 1 and the {draws.n_draws} available draws, got {m}"
        )
    groups = _pattern_groups(data)
    j_max = data.schedule.j_max
    base = _full_matrix(data)
    y0 = base[:, 0].copy()
    treat = np.array(
        [1.0 if rec.arm is Arm.ACTIVE else 0.0 for rec in data.patients]
    )
    selection = _draw_selection(draws.n_draws, m)
    mu_a = draws.means(Arm.ACTIVE)
    mu_r = draws.means(Arm.REFERENCE)
    cov_r = draws.covs(Arm.REFERENCE)
    pts = np.empty(m)
    variances = np.empty(m)
    for i, sel in enumerate(selection):
        ma, mr, cr = mu_a[sel], mu_r[sel], cov_r[sel]
        pieces = {}
        yf = base[:, j_max].copy()
        for arm, pattern, indices, prefix in groups:
            k = pattern + 1
            if k not in pieces:
                regression, cond = _conditional_pieces(cr, k)
                pieces[k] = (regression, chol_pd(cond, "conditional covariance"))
            regression, cond_chol = pieces[k]
            if arm is Arm.ACTIVE:
                pre = ma[:k]
                post = mr[k:].copy()
                if method is RbiMethod.CIR:
                    post += ma[pattern] - mr[pattern]
            else:
                pre = mr[:k]
                post = mr[k:]
            means = post + (prefix - pre) @ regression.T
            noise = rng.standard_normal((len(indices), ma.size - k))
            yf[indices] = (means + noise @ cond_chol.T)[:, -1]
        pts[i], variances[i] = _ancova_arrays(y0, yf, treat)
    return pts, variances


# ---------------------------------------------------------------------------
# Conditional mean + jackknife
# ---------------------------------------------------------------------------


def condmean_estimator(method: RbiMethod):
    """Full conditional-mean pipeline as a dataset -> point callable."""

    def pipeline(data: TrialDataset) -> float:
        mle = fit_mle(data)
        completed = conditional_mean_impute(data, mle, method)
        point, _ = analyze_ancova(completed)
        return point

    return pipeline


def jackknife_se(data: TrialDataset, estimator) -> tuple[float, float]:
    """Leave-one-patient-out jackknife standard error for any estimator.

    ``estimator`` maps a dataset to a scalar; each leave-one-out refit that
    fails is fatal, naming the left-out patient.
    """
    for arm in Arm:
        if data.n_in_arm(arm) < 3:
            raise InvalidParameterError("jackknife needs at least 3 patients per arm")
    point = float(estimator(data))
    n = len(data.patients)
    loo = np.empty(n)
    for i in range(n):
        reduced = TrialDataset(
            schedule=data.schedule,
            patients=data.patients[:i] + data.patients[i + 1 :],
        )
        try:
            loo[i] = estimator(reduced)
        except EstimationError as exc:
            raise EstimationError(
                f"leave-one-out refit failed for patient {data.patients[i].id}: {exc}"
            ) from exc
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return point, se


def condmean_jackknife(
    data: TrialDataset, methods
) -> dict[RbiMethod, tuple[float, float]]:
    """Conditional-mean points with jackknife SEs for several methods at once.

    Shares the leave-one-out MLE refits across methods and re-uses the
    untouched arm's full-data fit for every refit, so it is much faster
    than calling :func:`jackknife_se` per method while giving identical
    numbers.
    """
    methods = list(methods)
    for arm in Arm:
        if data.n_in_arm(arm) < 3:
            raise InvalidParameterError("jackknife needs at least 3 patients per arm")
    j_max = data.schedule.j_max
    arrays = {arm: data.outcome_matrix(arm) for arm in Arm}
    full_fit = {}
    for arm in Arm:
        y, dlen = arrays[arm]
        full_fit[arm] = _arm_mle(y, dlen)

    base = _full_matrix(data)
    groups = _pattern_groups(data)
    y0_all = base[:, 0]
    treat_all = np.array(
        [1.0 if rec.arm is Arm.ACTIVE else 0.0 for rec in data.patients]
    )

    def ancova_at(params_by_arm, keep_mask):
        mu_a, cov_a = params_by_arm[Arm.ACTIVE]
        mu_r, cov_r = params_by_arm[Arm.REFERENCE]
        yfm = {method: base[:, j_max].copy() for method in methods}
        for arm, pattern, indices, prefix in groups:
            k = pattern + 1
            # the post-ICE conditional law always comes from the imputing
            # arm's own reference: reference cov for active-arm dropouts
            # (reference-based), own cov for reference-arm dropouts (MAR)
            regression, _ = _conditional_pieces(cov_r, k)
            last_row = regression[-1]
            if arm is Arm.ACTIVE:
                resid = (prefix - mu_a[:k]) @ last_row
                for method in methods:
                    if method is RbiMethod.J2R:
                        post_mean = mu_r[j_max]
                    else:
                        post_mean = mu_r[j_max] + (mu_a[pattern] - mu_r[pattern])
                    yfm[method][indices] = post_mean + resid
            else:
                filled = mu_r[j_max] + (prefix - mu_r[:k]) @ last_row
                for method in methods:
                    yfm[method][indices] = filled
        results = {}
        for method in methods:
            pt, _ = _ancova_arrays(
                y0_all[keep_mask], yfm[method][keep_mask], treat_all[keep_mask]
            )
            results[method] = pt
        return results

    full_mask = np.ones(len(data.patients), dtype=bool)
    full_points = ancova_at(full_fit, full_mask)

    n = len(data.patients)
    loo = {method: np.empty(n) for method in methods}
    arm_positions = {
        arm: [i for i, rec in enumerate(data.patients) if rec.arm is arm] for arm in Arm
    }
    for arm in Arm:
        y, dlen = arrays[arm]
        positions = arm_positions[arm]
        for local, global_i in enumerate(positions):
            mask = np.ones(len(positions), dtype=bool)
            mask[local] = False
            try:
                refit = _arm_mle(y[mask], dlen[mask])
            except EstimationError as exc:
                raise EstimationError(
                    f"leave-one-out refit failed for patient "
                    f"{data.patients[global_i].id}: {exc}"
                ) from exc
            params = dict(full_fit)
            params[arm] = refit
            keep = np.ones(n, dtype=bool)
            keep[global_i] = False
            pts = ancova_at(params, keep)
            for method in methods:
                loo[method][global_i] = pts[method]
    out = {}
    for method in methods:
        dev = loo[method] - loo[method].mean()
        se = float(np.sqrt((n - 1) / n * np.sum(dev**2)))
        out[method] = (full_points[method], se)
    return out
