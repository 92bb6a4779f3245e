"""Command-line surface: analyze, study, sweep, oracle, trajectories.

Every command writes its primary outputs as CSV plus a JSON run manifest
carrying the fully resolved configuration, seed and version, sufficient
to replay the run exactly. Exit codes: 0 success, 2 usage error, 3 data
validation error, 4 numeric/estimation error.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import asdict, dataclass
from importlib import metadata, resources
from pathlib import Path

import click
import numpy as np

from .causal import (
    EffectModelKind,
    K0Prior,
    MaintainedEffectModel,
    default_interval_kind,
    draw_k0,
    draw_pi,
    effect_draws,
    implied_trajectory,
    parse_prior,
    summarize,
    summarize_affine,
)
from .data import Arm, TrialDataset, load_csv, pattern_counts
from .errors import (
    DataValidationError,
    EstimationError,
    InvalidParameterError,
    NumericError,
)
from .estimators import RbiMethod, condmean_jackknife, rubin_estimate
from .gaussian import VisitSchedule, substream
from .mmrm import GibbsConfig, dump_draws_csv, gibbs_sample
from .simulation import (
    ScenarioConfig,
    _simulate_arm_raw,
    load_scenario,
    run_study,
    write_replications_csv,
    write_summary_csv,
)

Z975 = 1.959963984540054
_MI_STREAM, _PI_STREAM, _K_STREAM = 100, 101, 102


def _version() -> str:
    try:
        return metadata.version("refbased")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "0.0.0+local"


@dataclass
class RunManifest:
    """Everything needed to replay a command run."""

    command: str
    config: dict
    master_seed: int
    version: str
    started: str
    finished: str
    outputs: list


def _write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Analysis pipeline (shared by the analyze command and tests)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisResult:
    method: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    m: int  # imputations for MI methods, kept draws for Bayesian ones


def analyze_dataset(
    data: TrialDataset,
    method: str,
    prior: K0Prior | None = None,
    n_draws: int = 10_000,
    n_burn: int = 200,
    thin: int = 1,
    n_imputations: int = 100,
    seed: int = 0,
    d_min: int | None = None,
    iw_df_offset: int = 2,
    return_draws: bool = False,
):
    """Run one estimator on a dataset.

    ``method`` is one of ``rubin:j2r``, ``rubin:cir``, ``condmean:j2r``,
    ``condmean:cir``, ``bcm`` (the latter requires ``prior``).
    """
    method = method.strip().lower()
    draws = None

    def fit_draws():
        config = GibbsConfig(
            n_total=n_burn + n_draws * thin,
            n_burn=n_burn,
            thin=thin,
            seed=seed,
            iw_df_offset=iw_df_offset,
        )
        return gibbs_sample(data, config)

    if method.startswith("rubin:"):
        rbi = RbiMethod(method.split(":", 1)[1])
        draws = fit_draws()
        pooled = rubin_estimate(
            data, draws, rbi, n_imputations, substream(seed, _MI_STREAM)
        )
        result = AnalysisResult(
            method=method,
            point=pooled.point,
            se=pooled.se,
            ci_low=pooled.ci_low,
            ci_high=pooled.ci_high,
            m=pooled.m,
        )
    elif method.startswith("condmean:"):
        rbi = RbiMethod(method.split(":", 1)[1])
        point, se = condmean_jackknife(data, [rbi])[rbi]
        result = AnalysisResult(
            method=method,
            point=point,
            se=se,
            ci_low=point - Z975 * se,
            ci_high=point + Z975 * se,
            m=len(data.patients),
        )
    elif method == "bcm":
        if prior is None:
            raise InvalidParameterError("the bcm method requires a prior")
        draws = fit_draws()
        counts = pattern_counts(data, Arm.ACTIVE)
        pi = draw_pi(counts, draws.n_draws, substream(seed, _PI_STREAM), d_min)
        zero_k = np.zeros(draws.n_draws)
        model = MaintainedEffectModel(EffectModelKind.CONSTANT, prior)
        decomposition = effect_draws(draws, pi, zero_k, model).decomposition
        if prior.kind in ("point", "normal"):
            summary = summarize_affine(decomposition, prior)
        else:
            k = draw_k0(prior, draws.n_draws, substream(seed, _K_STREAM))
            summary = summarize(decomposition.theta(k), default_interval_kind(prior))
        result = AnalysisResult(
            method=f"bcm:{prior.label()}",
            point=summary.point,
            se=summary.sd,
            ci_low=summary.ci_low,
            ci_high=summary.ci_high,
            m=summary.n_draws,
        )
    else:
        raise InvalidParameterError(
            f"unknown method {method!r}; expected rubin:j2r, rubin:cir, "
            f"condmean:j2r, condmean:cir, or bcm"
        )
    if return_draws:
        return result, draws
    return result


def _write_analysis_csv(results, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("method,point,se,ci_low,ci_high,m\n")
        for r in results:
            fh.write(
                f"{r.method},{r.point:.10g},{r.se:.10g},"
                f"{r.ci_low:.10g},{r.ci_high:.10g},{r.m}\n"
            )


def _write_analysis_json(results, path) -> None:
    payload = [asdict(r) for r in results]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Click plumbing
# ---------------------------------------------------------------------------


class _DataError(click.ClickException):
    exit_code = 3


class _NumericError(click.ClickException):
    exit_code = 4


def _mapped(fn):
    """Map library errors onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvalidParameterError as exc:
            raise click.UsageError(str(exc)) from exc
        except DataValidationError as exc:
            raise _DataError(str(exc)) from exc
        except (EstimationError, NumericError) as exc:
            raise _NumericError(str(exc)) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _parse_schedule(text: str) -> VisitSchedule:
    try:
        return VisitSchedule(tuple(float(v) for v in text.split(",")))
    except ValueError:
        raise click.UsageError(f"bad schedule {text!r}; expected e.g. 0,4,8,14,20,26")


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise click.UsageError(f"bad {what} {text!r}; expected comma-separated numbers")


def _resolve_scenario_path(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = resources.files("refbased").joinpath("scenarios", f"{name_or_path}.toml")
    if bundled.is_file():
        return Path(str(bundled))
    raise click.UsageError(
        f"scenario {name_or_path!r} is neither a file nor a bundled scenario"
    )


def _prepare_out_dir(out_dir: str) -> Path:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
@click.version_option(_version(), prog_name="refbased")
def main():
    """Reference-based estimators for longitudinal trials with
    post-discontinuation missing data."""


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--schedule", required=True, help="Visit weeks, e.g. 0,4,8,14,20,26.")
@click.option(
    "--method",
    required=True,
    help="rubin:j2r | rubin:cir | condmean:j2r | condmean:cir | bcm",
)
@click.option(
    "--prior",
    "prior_spec",
    default=None,
    help="For bcm: point:v | normal:m,s | triangular:min,mode,max | truncnorm:m,s[,lower]",
)
@click.option("--draws", default=10_000, show_default=True, help="Kept posterior draws.")
@click.option("--burn-in", default=200, show_default=True)
@click.option("--thin", default=1, show_default=True)
@click.option("--imputations", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--d-min", default=None, type=int, help="Earliest dropout pattern given prior mass.")
@click.option("--dump-draws", is_flag=True, help="Also write every posterior draw to draws.csv.")
@click.option("--out-dir", default="refbased_out", show_default=True)
@_mapped
def analyze(
    data_path,
    schedule,
    method,
    prior_spec,
    draws,
    burn_in,
    thin,
    imputations,
    seed,
    d_min,
    dump_draws,
    out_dir,
):
    """Estimate the treatment-policy effect on a trial CSV."""
    started = _now()
    sched = _parse_schedule(schedule)
    prior = parse_prior(prior_spec) if prior_spec is not None else None
    if method.strip().lower() == "bcm" and prior is None:
        raise click.UsageError(
            "--method bcm requires --prior (point:v | normal:m,s | "
            "triangular:min,mode,max | truncnorm:m,s[,lower])"
        )
    data = load_csv(data_path, sched)
    result, posterior = analyze_dataset(
        data,
        method,
        prior=prior,
        n_draws=draws,
        n_burn=burn_in,
        thin=thin,
        n_imputations=imputations,
        seed=seed,
        d_min=d_min,
        return_draws=True,
    )
    out = _prepare_out_dir(out_dir)
    csv_path = out / "analysis.csv"
    json_path = out / "analysis.json"
    _write_analysis_csv([result], csv_path)
    _write_analysis_json([result], json_path)
    outputs = [str(csv_path), str(json_path)]
    if dump_draws and posterior is not None:
        draws_path = out / "draws.csv"
        dump_draws_csv(posterior, draws_path)
        outputs.append(str(draws_path))
    manifest = RunManifest(
        command="analyze",
        config={
            "data": str(data_path),
            "schedule": list(sched.times),
            "method": method,
            "prior": prior.label() if prior else None,
            "draws": draws,
            "burn_in": burn_in,
            "thin": thin,
            "imputations": imputations,
            "d_min": d_min,
        },
        master_seed=seed,
        version=_version(),
        started=started,
        finished=_now(),
        outputs=outputs,
    )
    _write_manifest(manifest, out)
    click.echo(
        f"{result.method}: {result.point:.3f} (SE {result.se:.3f}) "
        f"95% CI [{result.ci_low:.3f}, {result.ci_high:.3f}]"
    )


def _scenario_config_dict(sc: ScenarioConfig) -> dict:
    return {
        "name": sc.name,
        "schedule": list(sc.schedule.times),
        "active_means": list(map(float, sc.active_params.mean)),
        "reference_means": list(map(float, sc.reference_params.mean)),
        "covariance_diag": list(map(float, np.diag(sc.active_params.cov))),
        "hypothesis": sc.hypothesis,
        "ice_level": sc.ice_level,
        "n_per_arm": sc.n_per_arm,
        "estimators": [e.label for e in sc.estimators],
        "replications": sc.replications,
        "gibbs": {
            "iterations": sc.gibbs_total,
            "burn_in": sc.gibbs_burn,
            "thin": sc.gibbs_thin,
            "iw_df_offset": sc.iw_df_offset,
        },
        "imputations": sc.n_imputations,
        "pi_support_start": sc.pi_support_start,
        "oracle_draws": sc.oracle_n_mc,
        "dropout": {
            "eligible_visits": list(sc.dropout.eligible_visits),
            "active": asdict(sc.dropout.active),
            "reference": asdict(sc.dropout.reference),
        },
    }


@main.command()
@click.option("--scenario", required=True, help="Scenario TOML path or bundled name.")
@click.option("--reps", default=None, type=int, help="Override the replication count.")
@click.option("--seed", default=None, type=int, help="Override the master seed.")
@click.option(
    "--estimators", default=None, help="Override the suite, comma-separated specs."
)
@click.option("--threads", default=None, type=int, help="Worker processes (default: all cores).")
@click.option("--progress", is_flag=True, help="Print progress to stderr.")
@click.option("--out-dir", default="refbased_out", show_default=True)
@_mapped
def study(scenario, reps, seed, estimators, threads, progress, out_dir):
    """Run a replicated simulation study from a scenario file."""
    started = _now()
    path = _resolve_scenario_path(scenario)
    overrides = {}
    if reps is not None:
        overrides["replications"] = reps
    if seed is not None:
        overrides["master_seed"] = seed
    if estimators is not None:
        overrides["estimators"] = [s.strip() for s in estimators.split(",")]
    config = load_scenario(path, **overrides)
    result = run_study(config, threads=threads, progress=progress)
    out = _prepare_out_dir(out_dir)
    summary_path = out / "summary.csv"
    reps_path = out / "replications.csv"
    write_summary_csv(result.metrics, summary_path)
    write_replications_csv(result.replications, reps_path)
    manifest = RunManifest(
        command="study",
        config={
            "scenario_file": str(path),
            "resolved": _scenario_config_dict(config),
            "threads": threads,
            "true_effect_pieces": {"a": result.a_true, "b": result.b_true},
        },
        master_seed=config.master_seed,
        version=_version(),
        started=started,
        finished=_now(),
        outputs=[str(summary_path), str(reps_path)],
    )
    _write_manifest(manifest, out)
    click.echo(f"study {config.name}: {config.replications} replications")
    for row in result.metrics.rows:
        click.echo(
            f"  {row.label}: mean {row.mean:.3f} (true {row.true_mean:.3f}) "
            f"emp.se {row.emp_se:.3f} est.se {row.est_se:.3f} "
            f"cov {row.coverage_pct:.1f}% type1 {row.type1_pct:.1f}%"
        )


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--schedule", required=True)
@click.option("--prior-mean", default=0.0, show_default=True)
@click.option("--sigmas", required=True, help="Prior SD grid, e.g. 0,0.1,0.5.")
@click.option("--draws", default=10_000, show_default=True)
@click.option("--burn-in", default=200, show_default=True)
@click.option("--thin", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--d-min", default=None, type=int)
@click.option("--out-dir", default="refbased_out", show_default=True)
@_mapped
def sweep(
    data_path, schedule, prior_mean, sigmas, draws, burn_in, thin, seed, d_min, out_dir
):
    """Posterior summaries over a grid of maintained-effect prior SDs.

    The parameter draws are shared across the grid, so the point column is
    constant and the SD column non-decreasing by construction.
    """
    started = _now()
    sched = _parse_schedule(schedule)
    grid = _parse_floats(sigmas, "sigma grid")
    if not grid:
        raise click.UsageError("the sigma grid is empty")
    if any(s < 0 for s in grid):
        raise click.UsageError("prior SDs must be nonnegative")
    data = load_csv(data_path, sched)
    config = GibbsConfig(
        n_total=burn_in + draws * thin, n_burn=burn_in, thin=thin, seed=seed
    )
    posterior = gibbs_sample(data, config)
    counts = pattern_counts(data, Arm.ACTIVE)
    pi = draw_pi(counts, posterior.n_draws, substream(seed, _PI_STREAM), d_min)
    model = MaintainedEffectModel(EffectModelKind.CONSTANT, K0Prior.point(0.0))
    decomposition = effect_draws(
        posterior, pi, np.zeros(posterior.n_draws), model
    ).decomposition
    out = _prepare_out_dir(out_dir)
    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("sigma_k0,point,sd,ci_low,ci_high\n")
        for sigma in grid:
            summary = summarize_affine(decomposition, K0Prior.normal(prior_mean, sigma))
            fh.write(
                f"{sigma:.10g},{summary.point:.10g},{summary.sd:.10g},"
                f"{summary.ci_low:.10g},{summary.ci_high:.10g}\n"
            )
    manifest = RunManifest(
        command="sweep",
        config={
            "data": str(data_path),
            "schedule": list(sched.times),
            "prior_mean": prior_mean,
            "sigmas": grid,
            "draws": draws,
            "burn_in": burn_in,
            "thin": thin,
            "d_min": d_min,
        },
        master_seed=seed,
        version=_version(),
        started=started,
        finished=_now(),
        outputs=[str(sweep_path)],
    )
    _write_manifest(manifest, out)
    click.echo(f"wrote {sweep_path}")


@main.command()
@click.option("--scenario", required=True)
@click.option("--k0", "k0_list", default="0,0.5,1", show_default=True)
@click.option("--n-mc", default=1_000_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", default="refbased_out", show_default=True)
@_mapped
def oracle(scenario, k0_list, n_mc, seed, out_dir):
    """True treatment-policy effects for a scenario at chosen k values."""
    started = _now()
    path = _resolve_scenario_path(scenario)
    config = load_scenario(path)
    ks = _parse_floats(k0_list, "k0 list")
    rng = substream(seed, 0)
    j_max = config.schedule.j_max
    _, last = _simulate_arm_raw(
        config.active_params,
        config.dropout.for_arm(Arm.ACTIVE),
        config.dropout.eligible_visits,
        n_mc,
        rng,
    )
    pi = np.bincount(last, minlength=j_max + 1) / n_mc
    delta = config.active_params.mean - config.reference_params.mean
    a_true = float(pi[j_max] * delta[j_max])
    b_true = float(pi[:j_max] @ delta[:j_max])
    out = _prepare_out_dir(out_dir)
    oracle_path = out / "oracle.csv"
    with open(oracle_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("k0,true_effect,a_true,b_true,mcse\n")
        for k in ks:
            weights = np.where(np.arange(j_max + 1) == j_max, 1.0, k) * delta
            var = float(weights @ (pi * weights) - (weights @ pi) ** 2) / n_mc
            fh.write(
                f"{k:.10g},{a_true + k * b_true:.10g},{a_true:.10g},"
                f"{b_true:.10g},{np.sqrt(max(var, 0.0)):.10g}\n"
            )
    manifest = RunManifest(
        command="oracle",
        config={"scenario_file": str(path), "k0": ks, "n_mc": n_mc},
        master_seed=seed,
        version=_version(),
        started=started,
        finished=_now(),
        outputs=[str(oracle_path)],
    )
    _write_manifest(manifest, out)
    click.echo(f"wrote {oracle_path}")


@main.command()
@click.option("--scenario", required=True, help="Scenario TOML supplying the arm parameters.")
@click.option("--pattern", "-d", "pattern", default=2, show_default=True, help="Last on-treatment visit.")
@click.option("--model", default="constant", type=click.Choice(["constant", "decay"]), show_default=True)
@click.option("--k", "k_list", default="0,0.5,1", show_default=True)
@click.option("--out-dir", default="refbased_out", show_default=True)
@_mapped
def trajectories(scenario, pattern, model, k_list, out_dir):
    """Implied mean trajectories for a dropout pattern over a k grid."""
    started = _now()
    path = _resolve_scenario_path(scenario)
    config = load_scenario(path)
    ks = _parse_floats(k_list, "k list")
    kind = EffectModelKind.CONSTANT if model == "constant" else EffectModelKind.DECAY
    out = _prepare_out_dir(out_dir)
    traj_path = out / "trajectories.csv"
    with open(traj_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("k,visit,week,mean\n")
        for k in ks:
            traj = implied_trajectory(
                config.active_params,
                config.reference_params,
                pattern,
                kind,
                k,
                config.schedule,
            )
            for j, week in enumerate(config.schedule.times):
                fh.write(f"{k:.10g},{j},{week:.10g},{traj[j]:.10g}\n")
    manifest = RunManifest(
        command="trajectories",
        config={
            "scenario_file": str(path),
            "pattern": pattern,
            "model": model,
            "k": ks,
        },
        master_seed=0,
        version=_version(),
        started=started,
        finished=_now(),
        outputs=[str(traj_path)],
    )
    _write_manifest(manifest, out)
    click.echo(f"wrote {traj_path}")


if __name__ == "__main__":  # pragma: no cover
    main()
