import numpy as np
import pytest

from refbased import (
    Arm,
    MvnParams,
    PatientRecord,
    TrialDataset,
    VisitSchedule,
    spatial_power_cov,
    substream,
)

HBA1C_WEEKS = (0.0, 4.0, 8.0, 14.0, 20.0, 26.0)
HBA1C_ACTIVE_MEANS = np.array([7.92, 7.55, 7.20, 7.10, 7.05, 7.05])
HBA1C_REFERENCE_MEANS = np.array([7.92, 7.82, 7.80, 7.80, 7.78, 7.78])
HBA1C_VARIANCES = np.array([0.48, 0.8, 1.1, 1.4, 1.23, 1.48])


@pytest.fixture(scope="session")
def schedule6():
    return VisitSchedule(HBA1C_WEEKS)


@pytest.fixture(scope="session")
def hba1c_cov(schedule6):
    return spatial_power_cov(np.sqrt(HBA1C_VARIANCES), schedule6, 0.8, 4.0)


@pytest.fixture(scope="session")
def active_params(hba1c_cov):
    return MvnParams(HBA1C_ACTIVE_MEANS, hba1c_cov)


@pytest.fixture(scope="session")
def reference_params(hba1c_cov):
    return MvnParams(HBA1C_REFERENCE_MEANS, hba1c_cov)


def make_monotone_dataset(
    seed,
    n_per_arm=40,
    schedule=None,
    active=None,
    reference=None,
    dropout_prob=0.12,
    first_dropout_visit=1,
):
    """Random monotone dataset: geometric-ish dropout from a given visit on."""
    schedule = schedule or VisitSchedule(HBA1C_WEEKS)
    p = schedule.n_visits
    if active is None or reference is None:
        cov = spatial_power_cov(np.sqrt(HBA1C_VARIANCES[:p]), schedule, 0.8, 4.0)
        active = MvnParams(HBA1C_ACTIVE_MEANS[:p], cov)
        reference = MvnParams(HBA1C_REFERENCE_MEANS[:p], cov)
    rng = substream(seed, 77)
    records = []
    for arm, params, tag in ((Arm.ACTIVE, active, "a"), (Arm.REFERENCE, reference, "r")):
        lower = np.linalg.cholesky(params.cov)
        y = params.mean + rng.standard_normal((n_per_arm, p)) @ lower.T
        for i in range(n_per_arm):
            d = p - 1
            for j in range(first_dropout_visit, p):
                if rng.random() < dropout_prob:
                    d = j - 1
                    break
            outcomes = tuple(y[i, : d + 1]) + (None,) * (p - 1 - d)
            records.append(
                PatientRecord(id=f"{tag}{i:03d}", arm=arm, outcomes=outcomes, last_observed=d)
            )
    data = TrialDataset(schedule=schedule, patients=tuple(records))
    # keep enough completers for the covariance prior and MLE preconditions
    for arm in Arm:
        completers = sum(
            1 for r in data.by_arm(arm) if r.last_observed == p - 1
        )
        assert completers >= p + 1, "fixture produced too few completers; adjust seed"
    return data


@pytest.fixture
def small_dataset():
    return make_monotone_dataset(seed=11, n_per_arm=40)
