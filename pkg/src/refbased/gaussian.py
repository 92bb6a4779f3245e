"""Multivariate-normal primitives shared by all statistical modules.

Covariance construction, conditioning and sampling all live here, as does
the single positive-definiteness gate used across the package: a Cholesky
factorization whose pivots must not fall below ``PD_PIVOT_RTOL`` times the
largest diagonal entry.

Random streams follow one convention package-wide: every consumer derives
its own generator from ``(master_seed, *path)`` via :func:`substream`, so
parallel consumers get independent, reproducible streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidParameterError, NumericError

# Cholesky pivot threshold, relative to the largest diagonal entry.
PD_PIVOT_RTOL = 1e-10


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator for stream ``path`` under ``master_seed``.

    Streams with distinct paths are statistically independent and
    reproducible regardless of the order in which they are consumed.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(path))
    return np.random.default_rng(ss)


def chol_pd(matrix: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``matrix``, gated for positive definiteness.

    Raises
    ------
    NumericError
        If the factorization fails or any pivot falls below
        ``PD_PIVOT_RTOL * max(diag)``.
    """
    matrix = np.asarray(matrix, dtype=float)
    try:
        lower = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        cond = _condition_estimate(matrix)
        raise NumericError(
            f"{what} is not positive definite (Cholesky failed; "
            f"condition estimate {cond:.3e})"
        ) from exc
    pivots = np.diag(lower) ** 2
    floor = PD_PIVOT_RTOL * float(np.max(np.diag(matrix)))
    if np.any(pivots < floor):
        cond = _condition_estimate(matrix)
        raise NumericError(
            f"{what} fails the positive-definite gate: pivot "
            f"{pivots.min():.3e} below {floor:.3e} "
            f"(condition estimate {cond:.3e})"
        )
    return lower


def _condition_estimate(matrix: np.ndarray) -> float:
    try:
        eig = np.linalg.eigvalsh(matrix)
        small = max(abs(eig).min(), np.finfo(float).tiny)
        return float(abs(eig).max() / small)
    except np.linalg.LinAlgError:
        return float("inf")


def _frozen_array(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise InvalidParameterError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VisitSchedule:
    """Ordered visit times in weeks; index 0 is baseline."""

    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2:
            raise InvalidParameterError("a schedule needs at least two visits")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidParameterError(f"visit times must be strictly increasing: {times}")

    @property
    def j_max(self) -> int:
        return len(self.times) - 1

    @property
    def n_visits(self) -> int:
        return len(self.times)

    def as_array(self) -> np.ndarray:
        return np.array(self.times)


@dataclass(frozen=True)
class MvnParams:
    """Mean vector and positive-definite covariance over a visit schedule."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean, 1)
        cov = _frozen_array(self.cov, 2)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        p = mean.shape[0]
        if cov.shape != (p, p):
            raise InvalidParameterError(
                f"covariance shape {cov.shape} does not match mean length {p}"
            )
        if not np.allclose(cov, cov.T, rtol=1e-8, atol=1e-12):
            raise InvalidParameterError("covariance must be symmetric")
        chol_pd(cov, "covariance")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class ConditionalMvn:
    """Conditional law of the unobserved block given observed components.

    ``regression`` maps observed residuals to the shift in the conditional
    mean; ``cov`` is the Schur complement of the observed block.
    """

    mean: np.ndarray
    cov: np.ndarray
    regression: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen_array(self.mean, 1))
        object.__setattr__(self, "cov", _frozen_array(self.cov, 2))
        object.__setattr__(self, "regression", _frozen_array(self.regression, 2))


def spatial_power_cov(
    sds: np.ndarray,
    schedule: VisitSchedule,
    rho: float,
    scale_weeks: float = 4.0,
) -> np.ndarray:
    """Covariance with correlation decaying as ``rho ** (|t_i - t_j| / scale_weeks)``.

    Parameters
    ----------
    sds : per-visit standard deviations (all positive).
    schedule : visit times in weeks.
    rho : correlation parameter in (0, 1).
    scale_weeks : time gap, in weeks, over which correlation decays by one
        power of ``rho``.

    Returns
    -------
    Positive-definite covariance matrix with ``sds**2`` on the diagonal.
    """
    sds = np.asarray(sds, dtype=float)
    if sds.shape != (schedule.n_visits,):
        raise InvalidParameterError(
            f"need {schedule.n_visits} standard deviations, got {sds.shape}"
        )
    if np.any(sds <= 0):
        raise InvalidParameterError("standard deviations must all be positive")
    if not 0.0 < rho < 1.0:
        raise InvalidParameterError(f"rho must lie in (0, 1), got {rho}")
    if scale_weeks <= 0:
        raise InvalidParameterError(f"scale_weeks must be positive, got {scale_weeks}")
    t = schedule.as_array()
    gaps = np.abs(t[:, None] - t[None, :]) / scale_weeks
    return sds[:, None] * sds[None, :] * rho**gaps


def _block_conditional(
    mean: np.ndarray, cov: np.ndarray, obs: np.ndarray, unobs: np.ndarray
):
    """Regression matrix and conditional covariance of ``unobs`` given ``obs``.

    Uses a Cholesky solve of the observed block; no explicit inverse.
    """
    s_oo = cov[np.ix_(obs, obs)]
    s_ou = cov[np.ix_(obs, unobs)]
    lower = chol_pd(s_oo, "observed block")
    half = solve_triangular(lower, s_ou, lower=True)
    x = solve_triangular(lower.T, half, lower=False)  # S_oo^{-1} S_ou
    regression = x.T
    cond_cov = cov[np.ix_(unobs, unobs)] - regression @ s_ou
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    return regression, cond_cov


def condition_mvn(
    params: MvnParams, observed_idx, observed_values
) -> ConditionalMvn:
    """Condition a multivariate normal on a subset of its components.

    Parameters
    ----------
    params : joint distribution.
    observed_idx : indices of the observed components (nonempty proper
        subset, any order; duplicates rejected).
    observed_values : values taken by the observed components, aligned
        with ``observed_idx``.
    """
    obs = np.asarray(observed_idx, dtype=int)
    values = np.asarray(observed_values, dtype=float)
    p = params.dim
    if obs.size == 0 or obs.size >= p:
        raise InvalidParameterError(
            "observed indices must form a nonempty proper subset"
        )
    if np.unique(obs).size != obs.size or obs.min() < 0 or obs.max() >= p:
        raise InvalidParameterError(f"bad observed index set {obs}")
    if values.shape != obs.shape:
        raise InvalidParameterError("observed values must align with observed indices")
    unobs = np.setdiff1d(np.arange(p), obs)
    regression, cond_cov = _block_conditional(params.mean, params.cov, obs, unobs)
    mean = params.mean[unobs] + regression @ (values - params.mean[obs])
    return ConditionalMvn(mean=mean, cov=cond_cov, regression=regression)


def sample_mvn(params: MvnParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` vectors from ``params`` via its Cholesky factor.

    Deterministic given the generator state; returns shape ``(n, dim)``.
    """
    if n < 0:
        raise InvalidParameterError(f"n must be nonnegative, got {n}")
    lower = chol_pd(params.cov, "covariance")
    z = rng.standard_normal((n, params.dim))
    return params.mean + z @ lower.T
