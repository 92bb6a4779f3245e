"""Bayesian causal model with a prior on the maintained treatment effect.

The treatment-policy effect at the final visit decomposes, draw by draw,
as ``theta = A + k * B`` where ``A`` weights the final-visit arm contrast
by the completer probability and ``B`` collects the pattern-weighted
pre-discontinuation contrasts carried forward. ``k`` is the maintained
effect parameter: 0 recovers jump-to-reference, 1 copy-increments-in-
reference. A prior on ``k`` propagates assumption uncertainty into the
posterior; since no post-discontinuation data exist, its posterior equals
the prior.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Arm, IcePatternCounts
from .errors import InvalidParameterError
from .gaussian import MvnParams, VisitSchedule
from .mmrm import PosteriorDraws

Z975 = 1.959963984540054


class EffectModelKind(enum.Enum):
    CONSTANT = "constant_k0"
    DECAY = "decay_k1"


@dataclass(frozen=True)
class K0Prior:
    """Prior on the maintained-effect parameter.

    Kinds: ``point`` (value,), ``normal`` (mean, sd), ``triangular``
    (min, mode, max), ``truncated_normal`` (untruncated mean, sd, lower).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        kind, p = self.kind, self.params
        if kind == "point":
            if len(p) != 1:
                raise InvalidParameterError("point prior takes exactly one value")
        elif kind == "normal":
            if len(p) != 2 or p[1] < 0:
                raise InvalidParameterError("normal prior takes (mean, sd >= 0)")
        elif kind == "triangular":
            if len(p) != 3 or not (p[0] <= p[1] <= p[2]) or p[0] >= p[2]:
                raise InvalidParameterError(
                    "triangular prior takes (min <= mode <= max, min < max)"
                )
        elif kind == "truncated_normal":
            if len(p) != 3 or p[1] < 0:
                raise InvalidParameterError(
                    "truncated normal prior takes (mean, sd >= 0, lower)"
                )
        else:
            raise InvalidParameterError(f"unknown prior kind {kind!r}")

    @classmethod
    def point(cls, value: float) -> "K0Prior":
        return cls("point", (value,))

    @classmethod
    def normal(cls, mean: float, sd: float) -> "K0Prior":
        return cls("normal", (mean, sd))

    @classmethod
    def triangular(cls, minimum: float, mode: float, maximum: float) -> "K0Prior":
        return cls("triangular", (minimum, mode, maximum))

    @classmethod
    def truncated_normal(cls, mean: float, sd: float, lower: float = 0.0) -> "K0Prior":
        return cls("truncated_normal", (mean, sd, lower))

    @property
    def is_degenerate(self) -> bool:
        return self.kind == "point" or (self.kind == "normal" and self.params[1] == 0.0)

    def label(self) -> str:
        return f"{self.kind}:" + ",".join(f"{v:g}" for v in self.params)


def parse_prior(spec: str) -> K0Prior:
    """Parse ``kind:p1[,p2[,p3]]`` prior specifications.

    Grammar: ``point:v`` | ``normal:mean,sd`` | ``triangular:min,mode,max``
    | ``truncnorm:mean,sd[,lower]`` (lower defaults to 0).
    """
    try:
        kind, _, rest = spec.partition(":")
        values = [float(v) for v in rest.split(",")] if rest else []
    except ValueError:
        raise InvalidParameterError(f"malformed prior spec {spec!r}") from None
    kind = kind.strip().lower()
    if kind == "point" and len(values) == 1:
        return K0Prior.point(values[0])
    if kind == "normal" and len(values) == 2:
        return K0Prior.normal(*values)
    if kind == "triangular" and len(values) == 3:
        return K0Prior.triangular(*values)
    if kind in ("truncnorm", "truncated_normal") and len(values) in (2, 3):
        return K0Prior.truncated_normal(*values)
    raise InvalidParameterError(
        f"malformed prior spec {spec!r}; expected point:v | normal:m,s | "
        f"triangular:min,mode,max | truncnorm:m,s[,lower]"
    )


@dataclass(frozen=True)
class MaintainedEffectModel:
    """Maintained-effect structure plus the prior its parameter is drawn from."""

    kind: EffectModelKind
    prior: K0Prior

    def __post_init__(self):
        if self.kind is EffectModelKind.DECAY and self.prior.kind == "point":
            v = self.prior.params[0]
            if not 0.0 < v < 1.0:
                raise InvalidParameterError(
                    f"decay model requires a parameter in (0, 1), got {v}"
                )


def carry_forward_K(j: int, j_max: int, k0: float) -> np.ndarray:
    """Constant maintained-effect matrix: zeros except a last column of ``k0``."""
    if not 0 <= j < j_max:
        raise InvalidParameterError(f"need 0 <= j < j_max, got j={j}, j_max={j_max}")
    out = np.zeros((j_max - j, j + 1))
    out[:, -1] = k0
    return out


def decay_K(j: int, j_max: int, k1: float, schedule: VisitSchedule) -> np.ndarray:
    """Decaying maintained-effect matrix: last column ``k1 ** (v_u - v_j)``."""
    if not 0 <= j < j_max:
        raise InvalidParameterError(f"need 0 <= j < j_max, got j={j}, j_max={j_max}")
    if not 0.0 < k1 < 1.0:
        raise InvalidParameterError(f"k1 must lie in (0, 1), got {k1}")
    times = schedule.as_array()
    out = np.zeros((j_max - j, j + 1))
    out[:, -1] = k1 ** (times[j + 1 :] - times[j])
    return out


# ---------------------------------------------------------------------------
# Posterior ingredients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiPosterior:
    """Dirichlet posterior over dropout patterns on a contiguous support."""

    support_start: int  # earliest pattern given prior mass
    n_patterns: int  # full pattern count (j_max + 1)
    alpha: tuple  # concentrations over support_start..j_max

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if any(a <= 0 for a in self.alpha):
            raise InvalidParameterError("Dirichlet concentrations must be positive")
        if self.support_start + len(self.alpha) != self.n_patterns:
            raise InvalidParameterError("support does not reach the final pattern")


def pi_posterior(counts: IcePatternCounts, d_min: int | None = None) -> PiPosterior:
    """Flat-Dirichlet posterior from observed pattern counts.

    ``d_min`` sets the earliest pattern in the support (defaults to the
    earliest observed); patterns outside get zero probability.
    """
    n_patterns = len(counts.counts)
    if d_min is None:
        observed = [j for j, c in enumerate(counts.counts) if c > 0]
        d_min = min(observed) if observed else n_patterns - 1
    if not 0 <= d_min < n_patterns:
        raise InvalidParameterError(f"d_min {d_min} out of range")
    if any(c > 0 for c in counts.counts[:d_min]):
        raise InvalidParameterError(
            f"observed patterns earlier than the configured support start {d_min}"
        )
    alpha = tuple(c + 1.0 for c in counts.counts[d_min:])
    return PiPosterior(support_start=d_min, n_patterns=n_patterns, alpha=alpha)


def draw_pi(
    counts: IcePatternCounts,
    n_draws: int,
    rng: np.random.Generator,
    d_min: int | None = None,
) -> np.ndarray:
    """Draw pattern probability vectors from the flat-Dirichlet posterior.

    Returns shape ``(n_draws, j_max + 1)``; entries outside the support are
    exactly zero and every row sums to one.
    """
    if n_draws < 1:
        raise InvalidParameterError("need at least one draw")
    post = pi_posterior(counts, d_min)
    out = np.zeros((n_draws, post.n_patterns))
    out[:, post.support_start :] = rng.dirichlet(np.array(post.alpha), size=n_draws)
    return out


def draw_k0(prior: K0Prior, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. draws from the maintained-effect prior (its posterior)."""
    if n_draws < 1:
        raise InvalidParameterError("need at least one draw")
    kind, p = prior.kind, prior.params
    if kind == "point":
        return np.full(n_draws, p[0])
    if kind == "normal":
        return rng.normal(p[0], p[1], size=n_draws)
    if kind == "triangular":
        return rng.triangular(p[0], p[1], p[2], size=n_draws)
    mean, sd, lower = p
    a = (lower - mean) / sd
    return stats.truncnorm.rvs(a, np.inf, loc=mean, scale=sd, size=n_draws, random_state=rng)


@dataclass(frozen=True)
class EffectDecomposition:
    """Per-draw split ``theta = A + k * B`` of the treatment-policy effect."""

    a: np.ndarray
    b: np.ndarray

    def theta(self, k: np.ndarray) -> np.ndarray:
        return self.a + np.asarray(k) * self.b


@dataclass(frozen=True)
class EffectDraws:
    """Posterior draws of the effect plus their affine decomposition."""

    theta: np.ndarray
    decomposition: EffectDecomposition
    k: np.ndarray

    def __len__(self) -> int:
        return self.theta.size

    def __iter__(self):
        for ell in range(self.theta.size):
            yield self.theta[ell], (
                self.decomposition.a[ell],
                self.decomposition.b[ell],
            )


def adjusted_contrasts(posterior: PosteriorDraws) -> np.ndarray:
    """Per-draw arm mean contrasts, baseline-adjusted.

    The raw contrast at each visit is reduced by the pooled per-draw
    baseline slope times the baseline contrast, mirroring the
    baseline-adjusted analysis model applied to imputed datasets. Since
    randomization equalizes true baseline means, the adjustment changes
    no estimand, only removes baseline noise; the baseline column itself
    becomes exactly zero.
    """
    raw = posterior.means(Arm.ACTIVE) - posterior.means(Arm.REFERENCE)  # (L, p)
    cov_a = posterior.covs(Arm.ACTIVE)
    cov_r = posterior.covs(Arm.REFERENCE)
    slope = (cov_a[:, 0, :] + cov_r[:, 0, :]) / (
        cov_a[:, 0, 0] + cov_r[:, 0, 0]
    )[:, None]
    return raw - slope * raw[:, [0]]


def effect_draws(
    posterior: PosteriorDraws,
    pi: np.ndarray,
    k: np.ndarray,
    model: MaintainedEffectModel,
) -> EffectDraws:
    """Combine parameter, pattern and maintained-effect draws, index-aligned.

    Per draw: ``A = pi[j_max] * delta[j_max]`` and, for the constant model,
    ``B = sum_{j<j_max} pi[j] * delta[j]`` with ``theta = A + k*B``, where
    ``delta`` are the baseline-adjusted contrasts of
    :func:`adjusted_contrasts`. The decay model folds ``k ** (v_max - v_j)``
    into the carried contrasts; its ``B`` is defined so ``theta = A + k*B``
    still holds exactly.
    """
    pi = np.asarray(pi, dtype=float)
    k = np.asarray(k, dtype=float)
    n_draws = posterior.n_draws
    if pi.shape[0] != n_draws or k.shape[0] != n_draws:
        raise InvalidParameterError(
            f"draw counts differ: parameters {n_draws}, pi {pi.shape[0]}, "
            f"k {k.shape[0]}"
        )
    j_max = posterior.schedule.j_max
    if pi.shape[1] != j_max + 1:
        raise InvalidParameterError("pi draws do not cover every pattern")
    delta = adjusted_contrasts(posterior)
    a = pi[:, j_max] * delta[:, j_max]
    if model.kind is EffectModelKind.CONSTANT:
        b = np.einsum("lj,lj->l", pi[:, :j_max], delta[:, :j_max])
        theta = a + k * b
    else:
        times = posterior.schedule.as_array()
        gaps = times[j_max] - times[:j_max]  # > 0
        weights = k[:, None] ** gaps[None, :]
        carried = np.einsum("lj,lj->l", pi[:, :j_max] * weights, delta[:, :j_max])
        theta = a + carried
        b = carried / k
    return EffectDraws(theta=theta, decomposition=EffectDecomposition(a=a, b=b), k=k)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


class IntervalKind(enum.Enum):
    NORMAL_APPROX = "normal_approx"
    PERCENTILE = "percentile"


@dataclass(frozen=True)
class EstimateSummary:
    point: float
    sd: float
    ci_low: float
    ci_high: float
    interval_kind: IntervalKind
    n_draws: int


def default_interval_kind(prior: K0Prior) -> IntervalKind:
    """Normal intervals for point/normal priors, percentile otherwise."""
    if prior.kind in ("point", "normal"):
        return IntervalKind.NORMAL_APPROX
    return IntervalKind.PERCENTILE


def summarize(
    draws, interval_kind: IntervalKind = IntervalKind.NORMAL_APPROX
) -> EstimateSummary:
    """Posterior mean, SD and interval of the effect draws.

    Percentile intervals use the 2.5th/97.5th order statistics of the
    draws; normal intervals use mean +/- 1.96 SD. Requires >= 100 draws.
    """
    theta = draws.theta if isinstance(draws, EffectDraws) else np.asarray(draws, float)
    if theta.size < 100:
        raise InvalidParameterError(f"need at least 100 draws, got {theta.size}")
    point = float(theta.mean())
    sd = float(theta.std(ddof=1))
    if interval_kind is IntervalKind.NORMAL_APPROX:
        lo, hi = point - Z975 * sd, point + Z975 * sd
    else:
        lo = float(np.quantile(theta, 0.025, method="inverted_cdf"))
        hi = float(np.quantile(theta, 0.975, method="inverted_cdf"))
    return EstimateSummary(
        point=point,
        sd=sd,
        ci_low=lo,
        ci_high=hi,
        interval_kind=interval_kind,
        n_draws=theta.size,
    )


def summarize_affine(
    decomposition: EffectDecomposition, prior: K0Prior
) -> EstimateSummary:
    """Moments with the maintained-effect prior integrated analytically.

    Valid for point and normal priors: since the parameter is independent
    of (A, B), ``E[theta] = E[A] + mu_k E[B]`` and
    ``Var[theta] = Var[A + mu_k B] + sd_k^2 E[B^2]``. This is the exact
    large-draw limit of :func:`summarize` on sampled parameter values; the
    point estimate is exactly invariant to the prior SD, and the SD is
    exactly non-decreasing in it.
    """
    if prior.kind == "point":
        mu_k, sd_k = prior.params[0], 0.0
    elif prior.kind == "normal":
        mu_k, sd_k = prior.params
    else:
        raise InvalidParameterError(
            "analytic moments need a point or normal prior; use summarize()"
        )
    a, b = decomposition.a, decomposition.b
    if a.size < 100:
        raise InvalidParameterError(f"need at least 100 draws, got {a.size}")
    centre = a + mu_k * b
    point = float(centre.mean())
    var = float(centre.var(ddof=1)) + sd_k**2 * float(np.mean(b**2))
    sd = float(np.sqrt(var))
    return EstimateSummary(
        point=point,
        sd=sd,
        ci_low=point - Z975 * sd,
        ci_high=point + Z975 * sd,
        interval_kind=IntervalKind.NORMAL_APPROX,
        n_draws=a.size,
    )


def implied_trajectory(
    active: MvnParams,
    reference: MvnParams,
    pattern: int,
    model_kind: EffectModelKind,
    k: float,
    schedule: VisitSchedule,
) -> np.ndarray:
    """Mean trajectory for a patient stopping active treatment after ``pattern``.

    Active means through the stopping visit; afterwards the reference mean
    plus the carried share of the visit-``pattern`` contrast (constant
    ``k``, or ``k ** (v_u - v_pattern)`` under decay).
    """
    p = active.dim
    if not 0 <= pattern < p - 1:
        raise InvalidParameterError(f"pattern must lie in [0, {p - 2}], got {pattern}")
    diff = active.mean[pattern] - reference.mean[pattern]
    out = np.array(reference.mean, dtype=float, copy=True)
    out[: pattern + 1] = active.mean[: pattern + 1]
    if model_kind is EffectModelKind.CONSTANT:
        weights = np.full(p - pattern - 1, k)
    else:
        times = schedule.as_array()
        weights = k ** (times[pattern + 1 :] - times[pattern])
    out[pattern + 1 :] += weights * diff
    return out
