"""Trial dataset representation, CSV ingestion, and pattern tabulation.

Datasets are two-arm, with outcomes on a fixed visit schedule and a
monotone missingness pattern: every patient is observed from baseline
through their last on-treatment visit ``D`` and missing afterwards.
Intermittent missingness is rejected outright, with the offending patient
named, since everything downstream assumes fully observed pre-ICE data.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .errors import DataValidationError, InvalidParameterError
from .gaussian import VisitSchedule


class Arm(enum.Enum):
    REFERENCE = "reference"
    ACTIVE = "active"


@dataclass(frozen=True)
class PatientRecord:
    """One patient's outcome vector under monotone missingness."""

    id: str
    arm: Arm
    outcomes: tuple  # per-visit float or None
    last_observed: int  # D: index of last observed visit

    def __post_init__(self):
        out = tuple(None if v is None else float(v) for v in self.outcomes)
        object.__setattr__(self, "outcomes", out)
        d = self.last_observed
        if not 0 <= d < len(out):
            raise DataValidationError(f"patient {self.id}: last_observed {d} out of range")
        for j, v in enumerate(out):
            if j <= d and v is None:
                raise DataValidationError(
                    f"patient {self.id}: missing value at visit {j} before D={d}"
                )
            if j > d and v is not None:
                raise DataValidationError(
                    f"patient {self.id}: observed value at visit {j} after D={d}"
                )

    def observed_values(self) -> np.ndarray:
        return np.array(self.outcomes[: self.last_observed + 1], dtype=float)


@dataclass(frozen=True)
class TrialDataset:
    """Immutable two-arm dataset over a shared visit schedule."""

    schedule: VisitSchedule
    patients: tuple

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        p = self.schedule.n_visits
        for rec in self.patients:
            if len(rec.outcomes) != p:
                raise DataValidationError(
                    f"patient {rec.id}: {len(rec.outcomes)} outcomes for a "
                    f"{p}-visit schedule"
                )
        for arm in Arm:
            if sum(1 for r in self.patients if r.arm is arm) < 2:
                raise DataValidationError(f"need at least 2 patients in the {arm.value} arm")

    def by_arm(self, arm: Arm) -> list:
        return [r for r in self.patients if r.arm is arm]

    def n_in_arm(self, arm: Arm) -> int:
        return sum(1 for r in self.patients if r.arm is arm)

    def outcome_matrix(self, arm: Arm) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(y, dlen)`` for one arm.

        ``y`` is ``(n, p)`` with zeros in unobserved slots; ``dlen[i]`` is the
        number of observed leading visits (``D + 1``).
        """
        recs = self.by_arm(arm)
        p = self.schedule.n_visits
        y = np.zeros((len(recs), p))
        dlen = np.zeros(len(recs), dtype=np.int64)
        for i, rec in enumerate(recs):
            k = rec.last_observed + 1
            y[i, :k] = rec.outcomes[:k]
            dlen[i] = k
        return y, dlen


@dataclass(frozen=True)
class IcePatternCounts:
    """Patients per last-observed-visit pattern within one arm."""

    arm: Arm
    counts: tuple  # n_j for D = j, j = 0..j_max

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if any(c < 0 for c in counts):
            raise InvalidParameterError("pattern counts must be nonnegative")

    @property
    def total(self) -> int:
        return sum(self.counts)


def pattern_counts(data: TrialDataset, arm: Arm) -> IcePatternCounts:
    """Tabulate the last-observed-visit patterns for one arm."""
    counts = [0] * data.schedule.n_visits
    for rec in data.by_arm(arm):
        counts[rec.last_observed] += 1
    return IcePatternCounts(arm=arm, counts=tuple(counts))


def _expected_header(n_visits: int) -> list[str]:
    return ["id", "arm"] + [f"y{j}" for j in range(n_visits)]


def _parse_row(row: list[str], schedule: VisitSchedule, line_no: int) -> PatientRecord:
    pid = row[0].strip()
    arm_label = row[1].strip()
    try:
        arm = Arm(arm_label)
    except ValueError:
        raise DataValidationError(
            f"line {line_no}: unknown arm label {arm_label!r} for patient {pid!r} "
            f"(expected 'reference' or 'active')"
        ) from None
    cells = [c.strip() for c in row[2:]]
    outcomes: list = []
    for j, cell in enumerate(cells):
        if cell == "":
            outcomes.append(None)
        else:
            try:
                outcomes.append(float(cell))
            except ValueError:
                raise DataValidationError(
                    f"line {line_no}: patient {pid!r} has non-numeric value "
                    f"{cell!r} at visit {j}"
                ) from None
    if outcomes[0] is None:
        raise DataValidationError(f"patient {pid!r}: baseline (visit 0) is missing")
    # D is the last contiguously observed visit; anything observed later is
    # intermittent missingness and rejected.
    d = 0
    while d + 1 < len(outcomes) and outcomes[d + 1] is not None:
        d += 1
    for j in range(d + 1, len(outcomes)):
        if outcomes[j] is not None:
            raise DataValidationError(
                f"patient {pid!r}: intermittent missingness (visit {j} observed "
                f"after a missing visit)"
            )
    return PatientRecord(id=pid, arm=arm, outcomes=tuple(outcomes), last_observed=d)


def load_csv(path, schedule: VisitSchedule) -> TrialDataset:
    """Load a wide-format trial CSV.

    Expected header is ``id,arm,y0,...,y{j_max}``; arm labels are
    ``reference``/``active``; empty cells are missing values. Monotonicity
    and a present baseline are enforced per patient.
    """
    n_visits = schedule.n_visits
    expected = _expected_header(n_visits)
    patients = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected:
            raise DataValidationError(
                f"{path}: header {header} does not match expected {expected}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(expected):
                raise DataValidationError(
                    f"{path} line {line_no}: expected {len(expected)} fields, got {len(row)}"
                )
            patients.append(_parse_row(row, schedule, line_no))
    return TrialDataset(schedule=schedule, patients=tuple(patients))


def write_csv(data: TrialDataset, path) -> None:
    """Write a dataset back out in the wide format accepted by ``load_csv``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(data.schedule.n_visits))
        for rec in data.patients:
            # repr round-trips floats exactly, keeping re-load an identity
            cells = ["" if v is None else repr(v) for v in rec.outcomes]
            writer.writerow([rec.id, rec.arm.value] + cells)
