"""Phenotype detection, inclusion gates, observation windows, labels, split.

The observation window runs from the first record to strictly before the
first complication date (the index date); patients without complications use
their last event as the index. Labels are 3-bit vectors per prediction
window, ordered (nephropathy, retinopathy, neuropathy).
"""

from __future__ import annotations

import calendar
import enum
import json
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .ingest import ClinicalEvent, Patient, Registry, Sex
from .ontology import Codelist, CodeSystem

PHENOTYPES = ("t2dm", "retinopathy", "nephropathy", "neuropathy")
COMPLICATIONS = ("nephropathy", "retinopathy", "neuropathy")  # label order
DEFAULT_WINDOWS = (1, 5, 10)


class CohortError(Exception):
    """Base class for cohort construction failures."""


class MissingCodelist(CohortError):
    """One of the four required phenotype codelists is absent."""


class EmptyWindow(CohortError):
    """A complication exists but no events precede it."""


class InvalidRatios(CohortError):
    """Split ratios do not sum to 1."""


class ExclusionReason(enum.Enum):
    NO_T2DM = "NO_T2DM"
    UNDER_18 = "UNDER_18"
    COMPLICATION_BEFORE_T2DM = "COMPLICATION_BEFORE_T2DM"
    TOO_FEW_EVENTS = "TOO_FEW_EVENTS"
    EMPTY_WINDOW = "EMPTY_WINDOW"


@dataclass(frozen=True)
class PhenotypeDates:
    """First occurrence date per phenotype, or None when never coded."""

    t2dm: Optional[date] = None
    retinopathy: Optional[date] = None
    nephropathy: Optional[date] = None
    neuropathy: Optional[date] = None

    def complication_dates(self) -> dict[str, Optional[date]]:
        return {
            "nephropathy": self.nephropathy,
            "retinopathy": self.retinopathy,
            "neuropathy": self.neuropathy,
        }

    def first_complication(self) -> Optional[tuple[str, date]]:
        """Earliest complication as (name, date); ties resolve in label order."""
        best: Optional[tuple[str, date]] = None
        for name, when in self.complication_dates().items():
            if when is not None and (best is None or when < best[1]):
                best = (name, when)
        return best


@dataclass
class CohortExample:
    patient_id: str
    input_events: list[ClinicalEvent]
    index_date: date
    labels: dict[int, tuple[int, int, int]]
    had_any_complication: bool

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "index_date": self.index_date.isoformat(),
            "had_any_complication": self.had_any_complication,
            "labels": {str(w): list(bits) for w, bits in self.labels.items()},
            "input_events": [
                {
                    "date": e.date.isoformat() if e.date else "",
                    "system": e.system.label,
                    "code": e.code,
                    "descriptor": e.descriptor or "",
                    "source_registry": e.source_registry.value,
                }
                for e in self.input_events
            ],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "CohortExample":
        events = [
            ClinicalEvent(
                patient_id=record["patient_id"],
                date=date.fromisoformat(e["date"]),
                system=CodeSystem.parse(e["system"]),
                code=e["code"],
                descriptor=e["descriptor"] or None,
                source_registry=Registry.parse(e["source_registry"]),
            )
            for e in record["input_events"]
        ]
        return cls(
            patient_id=record["patient_id"],
            input_events=events,
            index_date=date.fromisoformat(record["index_date"]),
            labels={int(w): tuple(bits) for w, bits in record["labels"].items()},
            had_any_complication=record["had_any_complication"],
        )


@dataclass
class SplitAssignment:
    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int

    def __post_init__(self) -> None:
        groups = (set(self.train), set(self.validation), set(self.test))
        total = len(self.train) + len(self.validation) + len(self.test)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValueError("split groups overlap or contain duplicates")

    def to_dict(self) -> dict:
        return {
            "train": self.train,
            "validation": self.validation,
            "test": self.test,
            "seed": self.seed,
        }


def detect_phenotypes(
    events: Sequence[ClinicalEvent], codelists: dict[str, Codelist]
) -> PhenotypeDates:
    """Earliest matching event date per phenotype over date-sorted events.

    Raises MissingCodelist unless all four phenotype codelists are present.
    """
    missing = [p for p in PHENOTYPES if p not in codelists]
    if missing:
        raise MissingCodelist(f"no codelist for: {', '.join(missing)}")
    members = {p: codelists[p].members for p in PHENOTYPES}
    found: dict[str, date] = {}
    for event in events:
        if len(found) == len(PHENOTYPES):
            break
        key = (event.system, event.code)
        for phenotype in PHENOTYPES:
            if phenotype not in found and key in members[phenotype]:
                found[phenotype] = event.date
    return PhenotypeDates(**{p: found.get(p) for p in PHENOTYPES})


def build_observation_window(
    events: Sequence[ClinicalEvent], phen: PhenotypeDates
) -> tuple[list[ClinicalEvent], date, bool]:
    """Return (input_events, index_date, had_any_complication).

    With a complication the index is its first date and inputs are events
    strictly before it; otherwise the index is the last event date and all
    events are inputs. Raises EmptyWindow when a complication exists but no
    event precedes it.
    """
    if not events:
        raise ValueError("no events to build a window from")
    first = phen.first_complication()
    if first is None:
        return list(events), events[-1].date, False
    _, index_date = first
    inputs = [e for e in events if e.date < index_date]
    if not inputs:
        raise EmptyWindow(f"no events before first complication at {index_date}")
    return inputs, index_date, True


def apply_inclusion(
    patient: Patient, phen: PhenotypeDates, events: Sequence[ClinicalEvent]
) -> Optional[ExclusionReason]:
    """Evaluate the inclusion gates; None means accepted.

    Gates fire in fixed precedence: NO_T2DM, COMPLICATION_BEFORE_T2DM,
    UNDER_18 (age at index date), EMPTY_WINDOW, TOO_FEW_EVENTS (distinct
    (system, code) pairs inside the observation window).
    """
    if phen.t2dm is None:
        return ExclusionReason.NO_T2DM
    for when in phen.complication_dates().values():
        if when is not None and when < phen.t2dm:
            return ExclusionReason.COMPLICATION_BEFORE_T2DM
    if not events:
        return ExclusionReason.TOO_FEW_EVENTS
    first = phen.first_complication()
    index_date = first[1] if first is not None else events[-1].date
    if _age_at(patient.birth_date, index_date) < 18:
        return ExclusionReason.UNDER_18
    try:
        window_events, _, _ = build_observation_window(events, phen)
    except EmptyWindow:
        return ExclusionReason.EMPTY_WINDOW
    if len({(e.system, e.code) for e in window_events}) < 3:
        return ExclusionReason.TOO_FEW_EVENTS
    return None


def _age_at(birth: date, when: date) -> int:
    years = when.year - birth.year
    if (when.month, when.day) < (birth.month, birth.day):
        years -= 1
    return years


def add_years(anchor: date, years: int) -> date:
    """Calendar-year addition clamped to month end (Feb 29 + 1y -> Feb 28)."""
    year = anchor.year + years
    day = min(anchor.day, calendar.monthrange(year, anchor.month)[1])
    return date(year, anchor.month, day)


def assign_labels(
    phen: PhenotypeDates,
    index_date: date,
    windows: Sequence[int] = DEFAULT_WINDOWS,
) -> dict[int, tuple[int, int, int]]:
    """3-bit label vector (nephropathy, retinopathy, neuropathy) per window.

    A bit is set iff that complication's first date falls inside
    [index_date, index_date + W years]; complication-free patients get zero
    vectors everywhere.
    """
    dates = phen.complication_dates()
    labels: dict[int, tuple[int, int, int]] = {}
    for window in windows:
        horizon = add_years(index_date, window)
        bits = tuple(
            int(dates[c] is not None and index_date <= dates[c] <= horizon)
            for c in COMPLICATIONS
        )
        labels[window] = bits
    return labels


def build_example(
    patient: Patient,
    phen: PhenotypeDates,
    events: Sequence[ClinicalEvent],
    windows: Sequence[int] = DEFAULT_WINDOWS,
) -> CohortExample | ExclusionReason:
    """Run the full per-patient pipeline: gates, window, labels."""
    reason = apply_inclusion(patient, phen, events)
    if reason is not None:
        return reason
    inputs, index_date, had_any = build_observation_window(events, phen)
    return CohortExample(
        patient_id=patient.id,
        input_events=inputs,
        index_date=index_date,
        labels=assign_labels(phen, index_date, windows),
        had_any_complication=had_any,
    )


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Split n into integer parts proportional to ratios; remainders go to
    the largest fractional parts, ties to the earlier position."""
    exact = [n * r for r in ratios]
    parts = [math.floor(x) for x in exact]
    order = sorted(
        range(len(ratios)), key=lambda i: (-(exact[i] - parts[i]), i)
    )
    for i in order[: n - sum(parts)]:
        parts[i] += 1
    return parts


def stratified_split(
    examples: Sequence[CohortExample],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    stratify_window: int = 10,
    seed: int = 0,
) -> SplitAssignment:
    """Split example ids 80/10/10 grouped by exact label combination.

    Each stratum is shuffled with the seeded generator and split by largest
    remainder; strata smaller than 3 go entirely to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise InvalidRatios(f"ratios {ratios} must be non-negative and sum to 1")
    if len(examples) < 10:
        raise ValueError("need at least 10 examples to split")
    strata: dict[tuple[int, int, int], list[str]] = {}
    for ex in examples:
        strata.setdefault(ex.labels[stratify_window], []).append(ex.patient_id)
    rng = np.random.default_rng(seed)
    train: list[str] = []
    validation: list[str] = []
    test: list[str] = []
    for combo in sorted(strata):
        ids = strata[combo]
        ids = [ids[i] for i in rng.permutation(len(ids))]
        if len(ids) < 3:
            train.extend(ids)
            continue
        n_train, n_val, _ = _largest_remainder(len(ids), ratios)
        train.extend(ids[:n_train])
        validation.extend(ids[n_train : n_train + n_val])
        test.extend(ids[n_train + n_val :])
    return SplitAssignment(train=train, validation=validation, test=test, seed=seed)


@dataclass
class ExclusionTally:
    """Accepted/rejected accounting across a candidate pool."""

    accepted: int = 0
    rejected: dict[ExclusionReason, int] = field(
        default_factory=lambda: {r: 0 for r in ExclusionReason}
    )

    @property
    def total(self) -> int:
        return self.accepted + sum(self.rejected.values())

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": {r.value: n for r, n in self.rejected.items()},
        }


def build_cohort(
    patients: Sequence[Patient],
    events_by_patient: dict[str, list[ClinicalEvent]],
    codelists: dict[str, Codelist],
    windows: Sequence[int] = DEFAULT_WINDOWS,
) -> tuple[list[CohortExample], dict[str, PhenotypeDates], ExclusionTally]:
    """Run phenotype detection and example construction over a patient pool.

    Patients are processed in id order for determinism. Returns the accepted
    examples, the detected phenotype dates for every candidate, and the
    exclusion tally (accepted + rejections = candidates).
    """
    examples: list[CohortExample] = []
    phenotypes: dict[str, PhenotypeDates] = {}
    tally = ExclusionTally()
    for patient in sorted(patients, key=lambda p: p.id):
        events = events_by_patient.get(patient.id, [])
        phen = detect_phenotypes(events, codelists)
        phenotypes[patient.id] = phen
        result = build_example(patient, phen, events, windows)
        if isinstance(result, ExclusionReason):
            tally.rejected[result] += 1
        else:
            examples.append(result)
            tally.accepted += 1
    return examples, phenotypes, tally


def cohort_summary(
    examples: Sequence[CohortExample],
    phenotypes: dict[str, PhenotypeDates],
    patients: dict[str, Patient],
    tally: ExclusionTally,
) -> dict:
    """Cohort characteristics: complication-count histogram, per-complication
    counts, sex counts, age at first complication, follow-up length."""
    histogram = {str(k): 0 for k in range(4)}
    per_complication = {c: 0 for c in COMPLICATIONS}
    sex_counts = {s.value: 0 for s in Sex}
    ages: list[float] = []
    followup_years: list[float] = []
    for ex in examples:
        phen = phenotypes[ex.patient_id]
        comp_dates = phen.complication_dates()
        n_comp = sum(1 for d in comp_dates.values() if d is not None)
        histogram[str(n_comp)] += 1
        for c, d in comp_dates.items():
            if d is not None:
                per_complication[c] += 1
        patient = patients[ex.patient_id]
        sex_counts[patient.sex.value] += 1
        if ex.had_any_complication:
            ages.append(_age_at(patient.birth_date, ex.index_date))
        last_label_date = max(
            (d for d in comp_dates.values() if d is not None), default=ex.index_date
        )
        followup_years.append((last_label_date - ex.index_date).days / 365.25)
    age_arr = np.array(ages, dtype=float)
    fu_arr = np.array(followup_years, dtype=float)
    return {
        "n_patients": len(examples),
        "complication_count_histogram": histogram,
        "per_complication_counts": per_complication,
        "sex_counts": sex_counts,
        "age_at_first_complication": {
            "mean": round(float(age_arr.mean()), 4) if len(age_arr) else None,
            "sd": round(float(age_arr.std(ddof=1)), 4) if len(age_arr) > 1 else None,
            "n": int(len(age_arr)),
        },
        "followup_years_after_index": {
            "mean": round(float(fu_arr.mean()), 4) if len(fu_arr) else None,
            "median": round(float(np.median(fu_arr)), 4) if len(fu_arr) else None,
        },
        "exclusions": tally.to_dict(),
    }


def write_cohort_ndjson(examples: Iterable[CohortExample], handle: TextIO) -> None:
    for ex in examples:
        handle.write(json.dumps(ex.to_dict(), sort_keys=True))
        handle.write("\n")


def read_cohort_ndjson(handle: TextIO) -> list[CohortExample]:
    return [CohortExample.from_dict(json.loads(line)) for line in handle if line.strip()]
