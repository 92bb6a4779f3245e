"""Bundled datasets.

``synthetic_trial.csv`` is a small two-arm depression-score-like trial
drawn from the configuration returned by :func:`synthetic_trial_scenario`
(master seed 7294, first 83 of the simulated active patients kept so the
arms are 83/88). Because the generating parameters are known, the true
treatment-policy effect pieces can be recovered with
:func:`refbased.true_effect_oracle`, which makes the file suitable for
end-to-end pipeline checks when no real trial export is at hand.
"""

from importlib import resources

import numpy as np

from ..data import TrialDataset, load_csv
from ..gaussian import MvnParams, VisitSchedule, spatial_power_cov
from ..simulation import ArmDropout, DropoutModel, ScenarioConfig, parse_estimator

SYNTHETIC_SEED = 7294


def synthetic_trial_scenario() -> ScenarioConfig:
    """The configuration the bundled synthetic trial was drawn from."""
    schedule = VisitSchedule((0.0, 1.0, 2.0, 4.0, 6.0))
    sds = np.sqrt(np.array([16.0, 20.0, 24.0, 28.0, 32.0]))
    cov = spatial_power_cov(sds, schedule, 0.75, 2.0)
    active = MvnParams(np.array([18.0, 16.2, 14.2, 12.4, 11.2]), cov)
    reference = MvnParams(np.array([18.0, 16.8, 15.6, 14.4, 13.6]), cov)
    coefs = dict(base=(0.05, 0.05, 0.05), prev=(0.25, 0.25, 0.25))
    dropout = DropoutModel(
        eligible_visits=(2, 3, 4),
        active=ArmDropout(intercept=-7.3, **coefs),
        reference=ArmDropout(intercept=-7.3, **coefs),
    )
    return ScenarioConfig(
        name="synthetic_trial",
        schedule=schedule,
        active_params=active,
        reference_params=reference,
        dropout=dropout,
        hypothesis="alternative",
        ice_level="low",
        n_per_arm=88,
        estimators=(parse_estimator("bcm:point:0"),),
        replications=1,
        master_seed=SYNTHETIC_SEED,
        pi_support_start=1,
    )


def load_synthetic_trial() -> TrialDataset:
    """Load the bundled synthetic trial dataset."""
    path = resources.files("refbased").joinpath("datasets", "synthetic_trial.csv")
    return load_csv(str(path), synthetic_trial_scenario().schedule)
