"""Per-arm longitudinal model estimation.

Two fitting routes share the same saturated model (unstructured mean and
covariance over the visit schedule, baseline included as visit 0):

* :func:`fit_monotone_mle` computes the exact maximum-likelihood estimate
  under monotone missingness via the sequential-regression factorization.
  It reduces to the closed-form sample estimators on complete data and is
  cheap enough to re-run inside a jackknife.
* :func:`gibbs_sample` runs a data-augmentation Gibbs sampler per arm with
  a flat prior on the mean and an inverse-Wishart prior on the covariance
  (degrees of freedom ``p + iw_df_offset``, scale centred on the
  completers' ML covariance).

The chain consumes pre-generated randomness from a seeded stream, so a
run is bit-reproducible regardless of thread count; the inner loop is
compiled with numba when available and falls back to pure Python
otherwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Arm, TrialDataset
from .errors import EstimationError, InvalidParameterError, NumericError
from .gaussian import PD_PIVOT_RTOL, MvnParams, VisitSchedule, chol_pd, substream

_DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------------------
# Chain kernel (numba-compiled when available)
# ---------------------------------------------------------------------------


def _chol_lower(a, out):
    """Lower Cholesky of ``a`` into ``out``; returns the smallest pivot
    (diagonal of the Schur complements), or -1.0 on breakdown."""
    p = a.shape[0]
    min_piv = np.inf
    for i in range(p):
        s = a[i, i]
        for k in range(i):
            s -= out[i, k] * out[i, k]
        if s <= 0.0:
            return -1.0
        if s < min_piv:
            min_piv = s
        d = np.sqrt(s)
        out[i, i] = d
        for j in range(i + 1, p):
            t = a[j, i]
            for k in range(i):
                t -= out[j, k] * out[i, k]
            out[j, i] = t / d
        for j in range(i + 1, p):
            out[i, j] = 0.0
    return min_piv


def _gibbs_chain_impl(
    yobs,
    dlen,
    mu0,
    cov0,
    prior_scale,
    nu_post,
    n_iter,
    n_burn,
    thin,
    imp_norm,
    bart_norm,
    mu_norm,
    chis,
    pivot_rtol,
    div_limit,
):
    """One sequential data-augmentation chain for a single arm.

    Returns ``(mu_out, cov_out, kept, status, fail_iter)`` where status is
    0 on success, 1 on a positive-definiteness failure and 2 on divergence.
    """
    n, p = yobs.shape
    n_keep = (n_iter - n_burn) // thin
    mu_out = np.zeros((n_keep, p))
    cov_out = np.zeros((n_keep, p, p))
    ycomp = yobs.copy()
    mu = mu0.copy()
    cov = cov0.copy()
    low = np.zeros((p, p))
    lam = np.zeros((p, p))
    lam_chol = np.zeros((p, p))
    bart = np.zeros((p, p))
    x = np.zeros((p, p))
    w = np.zeros(p)
    ybar = np.zeros(p)
    sqrt_n = np.sqrt(n)
    kept = 0
    for t in range(n_iter):
        # impute missing suffixes from the conditional law under (mu, cov)
        max_diag = 0.0
        for i in range(p):
            if cov[i, i] > max_diag:
                max_diag = cov[i, i]
        piv = _chol_lower(cov, low)
        if piv < pivot_rtol * max_diag:
            return mu_out, cov_out, kept, 1, t
        pos = 0
        for i in range(n):
            k = dlen[i]
            if k == p:
                continue
            for r in range(k):
                s = yobs[i, r] - mu[r]
                for c in range(r):
                    s -= low[r, c] * w[c]
                w[r] = s / low[r, r]
            for r in range(k, p):
                m = mu[r]
                for c in range(k):
                    m += low[r, c] * w[c]
                for c in range(k, r + 1):
                    m += low[r, c] * imp_norm[t, pos + (c - k)]
                ycomp[i, r] = m
            pos += p - k
        # completed-data statistics: column means and scatter about mu
        for r in range(p):
            ybar[r] = 0.0
        for i in range(n):
            for r in range(p):
                ybar[r] += ycomp[i, r]
        for r in range(p):
            ybar[r] /= n
        for r in range(p):
            for c in range(r + 1):
                s = 0.0
                for i in range(n):
                    s += (ycomp[i, r] - mu[r]) * (ycomp[i, c] - mu[c])
                lam[r, c] = prior_scale[r, c] + s
                lam[c, r] = lam[r, c]
        # covariance draw: inverse Wishart via the Bartlett construction
        max_diag = 0.0
        for i in range(p):
            if lam[i, i] > max_diag:
                max_diag = lam[i, i]
        piv = _chol_lower(lam, lam_chol)
        if piv < pivot_rtol * max_diag:
            return mu_out, cov_out, kept, 1, t
        idx = 0
        for r in range(p):
            for c in range(p):
                bart[r, c] = 0.0
        for r in range(p):
            bart[r, r] = np.sqrt(chis[t, r])
            for c in range(r):
                bart[r, c] = bart_norm[t, idx]
                idx += 1
        # solve bart @ x = lam_chol^T, then cov = x^T x  ~ IW(nu_post, lam)
        for col in range(p):
            for r in range(p):
                s = lam_chol[col, r]
                for c in range(r):
                    s -= bart[r, c] * x[c, col]
                x[r, col] = s / bart[r, r]
        for r in range(p):
            for c in range(r + 1):
                s = 0.0
                for k in range(p):
                    s += x[k, r] * x[k, c]
                cov[r, c] = s
                cov[c, r] = s
        # mean draw given the new covariance
        max_diag = 0.0
        for i in range(p):
            if cov[i, i] > max_diag:
                max_diag = cov[i, i]
        piv = _chol_lower(cov, low)
        if piv < pivot_rtol * max_diag:
            return mu_out, cov_out, kept, 1, t
        for r in range(p):
            s = 0.0
            for c in range(r + 1):
                s += low[r, c] * mu_norm[t, c]
            mu[r] = ybar[r] + s / sqrt_n
        for r in range(p):
            if np.abs(mu[r]) > div_limit:
                return mu_out, cov_out, kept, 2, t
        if t >= n_burn and (t - n_burn) % thin == thin - 1:
            for r in range(p):
                mu_out[kept, r] = mu[r]
                for c in range(p):
                    cov_out[kept, r, c] = cov[r, c]
            kept += 1
    return mu_out, cov_out, kept, 0, -1


_gibbs_chain_py = _gibbs_chain_impl

try:  # pragma: no cover - exercised indirectly
    from numba import njit

    _chol_lower = njit(cache=True)(_chol_lower)
    _gibbs_chain = njit(cache=True)(_gibbs_chain_impl)
except ImportError:  # pragma: no cover
    _gibbs_chain = _gibbs_chain_impl


# ---------------------------------------------------------------------------
# Maximum likelihood under monotone missingness
# ---------------------------------------------------------------------------


def _arm_mle(y: np.ndarray, dlen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact MLE of (mean, covariance) from ``(y, dlen)`` arm arrays.

    Sequential regressions of each visit on all earlier visits over the
    patients still observed, recomposed into the joint parameters. The
    residual variances use the ML (divide-by-n) convention so the result
    equals the ML sample estimators when nothing is missing.
    """
    n, p = y.shape
    if n < 2:
        raise EstimationError("need at least 2 patients to fit an arm")
    mu = np.zeros(p)
    sig = np.zeros((p, p))
    mu[0] = y[:, 0].mean()
    sig[0, 0] = float(np.mean((y[:, 0] - mu[0]) ** 2))
    if sig[0, 0] <= 0:
        raise EstimationError("degenerate baseline variance (all values equal)")
    for j in range(1, p):
        mask = dlen >= j + 1
        nj = int(mask.sum())
        if nj < j + 2:
            raise EstimationError(
                f"visit {j}: only {nj} patients observed, need at least {j + 2} "
                f"for the sequential regression"
            )
        yj = y[mask, j]
        x = np.empty((nj, j + 1))
        x[:, 0] = 1.0
        x[:, 1:] = y[mask, :j]
        gram = x.T @ x
        xty = x.T @ yj
        try:
            b = np.linalg.solve(gram, xty)
        except np.linalg.LinAlgError:
            raise EstimationError(f"visit {j}: singular regression design") from None
        rss = float(yj @ yj - b @ xty)
        tau = rss / nj
        if tau <= 0:
            raise EstimationError(f"visit {j}: degenerate residual variance")
        beta = b[1:]
        mu[j] = b[0] + beta @ mu[:j]
        row = beta @ sig[:j, :j]
        sig[j, :j] = row
        sig[:j, j] = row
        sig[j, j] = tau + row @ beta
    return mu, sig


def fit_monotone_mle(data: TrialDataset, arm: Arm) -> MvnParams:
    """Exact per-arm MLE of the saturated model under monotone missingness."""
    y, dlen = data.outcome_matrix(arm)
    mu, sig = _arm_mle(y, dlen)
    return MvnParams(mean=mu, cov=sig)


def _observed_loglik(y: np.ndarray, dlen: np.ndarray, params: MvnParams) -> float:
    """Observed-data log-likelihood of one arm at ``params``."""
    total = 0.0
    for k in np.unique(dlen):
        rows = y[dlen == k, :k]
        sub = params.cov[:k, :k]
        lower = chol_pd(sub, "prefix covariance")
        resid = rows - params.mean[:k]
        half = np.linalg.solve(lower, resid.T)
        quad = np.sum(half**2, axis=0)
        logdet = 2.0 * float(np.sum(np.log(np.diag(lower))))
        total += float(
            -0.5 * np.sum(quad) - 0.5 * rows.shape[0] * (logdet + k * np.log(2 * np.pi))
        )
    return total


@dataclass(frozen=True)
class MleFit:
    """Joint MLE for both arms plus the observed-data log-likelihood."""

    active: MvnParams
    reference: MvnParams
    loglik: float
    n_active: int
    n_reference: int

    def params(self, arm: Arm) -> MvnParams:
        return self.active if arm is Arm.ACTIVE else self.reference


def fit_mle(data: TrialDataset) -> MleFit:
    """Fit both arms by :func:`fit_monotone_mle` and record the log-likelihood."""
    fits = {}
    loglik = 0.0
    for arm in (Arm.ACTIVE, Arm.REFERENCE):
        y, dlen = data.outcome_matrix(arm)
        mu, sig = _arm_mle(y, dlen)
        fits[arm] = MvnParams(mean=mu, cov=sig)
        loglik += _observed_loglik(y, dlen, fits[arm])
    return MleFit(
        active=fits[Arm.ACTIVE],
        reference=fits[Arm.REFERENCE],
        loglik=loglik,
        n_active=data.n_in_arm(Arm.ACTIVE),
        n_reference=data.n_in_arm(Arm.REFERENCE),
    )


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GibbsConfig:
    """Chain length, thinning, seed, and the inverse-Wishart df offset."""

    n_total: int
    n_burn: int
    thin: int = 1
    seed: int = 0
    iw_df_offset: int = 2

    def __post_init__(self):
        if self.n_burn < 0 or self.n_total <= self.n_burn:
            raise InvalidParameterError(
                f"need n_total > n_burn >= 0, got {self.n_total}, {self.n_burn}"
            )
        if self.thin < 1:
            raise InvalidParameterError(f"thin must be >= 1, got {self.thin}")
        if self.iw_df_offset < 2:
            raise InvalidParameterError(
                "iw_df_offset must be >= 2 so the prior mean exists"
            )
        if self.n_draws < 1:
            raise InvalidParameterError("configuration keeps zero draws")

    @property
    def n_draws(self) -> int:
        return (self.n_total - self.n_burn) // self.thin


@dataclass(frozen=True)
class PosteriorDraws:
    """Kept draws of the per-arm model parameters from one Gibbs run."""

    schedule: VisitSchedule
    active_means: np.ndarray  # (L, p)
    active_covs: np.ndarray  # (L, p, p)
    reference_means: np.ndarray
    reference_covs: np.ndarray
    config: GibbsConfig

    @property
    def n_draws(self) -> int:
        return self.active_means.shape[0]

    def means(self, arm: Arm) -> np.ndarray:
        return self.active_means if arm is Arm.ACTIVE else self.reference_means

    def covs(self, arm: Arm) -> np.ndarray:
        return self.active_covs if arm is Arm.ACTIVE else self.reference_covs

    def params(self, arm: Arm, draw: int) -> MvnParams:
        return MvnParams(mean=self.means(arm)[draw], cov=self.covs(arm)[draw])

    def running_means(self, arm: Arm) -> tuple[np.ndarray, np.ndarray]:
        """Average of the kept draws per parameter, as a chain diagnostic."""
        return self.means(arm).mean(axis=0), self.covs(arm).mean(axis=0)


_ARM_STREAM = {Arm.ACTIVE: 0, Arm.REFERENCE: 1}


def _run_arm_chain(
    y: np.ndarray, dlen: np.ndarray, config: GibbsConfig, stream_id: int
) -> tuple[np.ndarray, np.ndarray]:
    n, p = y.shape
    mu0, sig0 = _arm_mle(y, dlen)
    completers = dlen == p
    n_comp = int(completers.sum())
    if n_comp < p + 1:
        raise EstimationError(
            f"need at least {p + 1} completers to centre the covariance prior, "
            f"got {n_comp}"
        )
    yc = y[completers]
    centred = yc - yc.mean(axis=0)
    s_comp = centred.T @ centred / n_comp
    prior_scale = s_comp * (config.iw_df_offset - 1)
    chol_pd(prior_scale, "covariance prior scale")
    nu_post = n + p + config.iw_df_offset
    rng = substream(config.seed, stream_id)
    n_missing = int(np.sum(p - dlen))
    n_bart = p * (p - 1) // 2
    normals = rng.standard_normal((config.n_total, n_missing + n_bart + p))
    imp = np.ascontiguousarray(normals[:, :n_missing])
    bart = np.ascontiguousarray(normals[:, n_missing : n_missing + n_bart])
    mu_norm = np.ascontiguousarray(normals[:, n_missing + n_bart :])
    chis = np.empty((config.n_total, p))
    for j in range(p):
        chis[:, j] = rng.chisquare(nu_post - j, size=config.n_total)
    mu_d, cov_d, kept, status, fail_iter = _gibbs_chain(
        y,
        dlen,
        mu0,
        sig0,
        prior_scale,
        float(nu_post),
        config.n_total,
        config.n_burn,
        config.thin,
        imp,
        bart,
        mu_norm,
        chis,
        PD_PIVOT_RTOL,
        _DIVERGENCE_LIMIT,
    )
    if status == 1:
        raise NumericError(
            f"non-positive-definite scale matrix at iteration {fail_iter}"
        )
    if status == 2:
        raise NumericError(
            f"chain divergence (|mean| > {_DIVERGENCE_LIMIT:g}) at iteration {fail_iter}"
        )
    return mu_d[:kept], cov_d[:kept]


def gibbs_sample(data: TrialDataset, config: GibbsConfig) -> PosteriorDraws:
    """Run one sequential chain per arm and return the thinned draws.

    Chains start at the monotone MLE; patients with no missing visits
    contribute no augmentation work. Deterministic given ``config.seed``.
    """
    out = {}
    for arm in (Arm.ACTIVE, Arm.REFERENCE):
        y, dlen = data.outcome_matrix(arm)
        out[arm] = _run_arm_chain(y, dlen, config, _ARM_STREAM[arm])
    return PosteriorDraws(
        schedule=data.schedule,
        active_means=out[Arm.ACTIVE][0],
        active_covs=out[Arm.ACTIVE][1],
        reference_means=out[Arm.REFERENCE][0],
        reference_covs=out[Arm.REFERENCE][1],
        config=config,
    )


def dump_draws_csv(draws: PosteriorDraws, path) -> None:
    """Write every kept draw in long format for audit."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["draw", "arm", "param", "visit_i", "visit_j", "value"])
        p = draws.schedule.n_visits
        for arm in (Arm.ACTIVE, Arm.REFERENCE):
            means = draws.means(arm)
            covs = draws.covs(arm)
            for ell in range(draws.n_draws):
                for i in range(p):
                    writer.writerow([ell, arm.value, "mean", i, "", f"{means[ell, i]:.10g}"])
                for i in range(p):
                    for j in range(i + 1):
                        writer.writerow(
                            [ell, arm.value, "cov", i, j, f"{covs[ell, i, j]:.10g}"]
                        )
