"""Raw patient/event file parsing and per-patient cleaning.

Supports the events/patients CSV schemas and their NDJSON twins, applies the
cleaning rules (duplicates, impossible dates, missing fields, 1985-2020
range) and produces an auditable drop report whose counts always reconcile
with the input row count.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

from .ontology import CodeSystem, UnknownSystem

DATE_FLOOR = date(1985, 1, 1)
DATE_CEILING = date(2020, 12, 31)

EVENT_COLUMNS = ("patient_id", "date", "system", "code", "descriptor", "source_registry")
PATIENT_COLUMNS = ("patient_id", "birth_date", "sex", "registration_date", "deregistration_date")


class IngestError(Exception):
    """Base class for ingest failures."""


class UnreadableStream(IngestError):
    """The input could not be opened or decoded."""


class SchemaMismatch(IngestError):
    """A required column is absent from the input."""


class PatientMismatch(IngestError):
    """An event handed to clean_events belongs to a different patient."""


class Sex(enum.Enum):
    MALE = "MALE"
    FEMALE = "FEMALE"
    UNKNOWN = "UNKNOWN"

    @classmethod
    def parse(cls, text: str) -> "Sex":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            return cls.UNKNOWN


class Registry(enum.Enum):
    PRIMARY_CARE = "PRIMARY_CARE"
    HOSPITAL = "HOSPITAL"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, text: str) -> "Registry":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            return cls.OTHER


class DropReason(enum.Enum):
    """Reasons events are removed, in check-precedence order."""

    DUPLICATE = "DUPLICATE"
    BEFORE_BIRTH = "BEFORE_BIRTH"
    AFTER_DEREGISTRATION = "AFTER_DEREGISTRATION"
    MISSING_DATE = "MISSING_DATE"
    MISSING_CODE_OR_DESCRIPTOR = "MISSING_CODE_OR_DESCRIPTOR"
    OUT_OF_DATE_RANGE = "OUT_OF_DATE_RANGE"


@dataclass(frozen=True)
class Patient:
    id: str
    birth_date: date
    sex: Sex
    registration_date: date
    deregistration_date: Optional[date] = None

    def __post_init__(self) -> None:
        if self.registration_date < self.birth_date:
            raise ValueError(f"patient {self.id}: registered before birth")
        if (
            self.deregistration_date is not None
            and self.deregistration_date < self.registration_date
        ):
            raise ValueError(f"patient {self.id}: deregistered before registration")


@dataclass(frozen=True)
class ClinicalEvent:
    """One dated, coded record. date is None when the source field was empty
    (such events survive parsing and are dropped during cleaning)."""

    patient_id: str
    date: Optional[date]
    system: CodeSystem
    code: str
    descriptor: Optional[str]
    source_registry: Registry


@dataclass
class DropReport:
    """Per-reason drop counts for one clean_events call."""

    input_count: int
    kept_count: int
    counts: dict[DropReason, int] = field(
        default_factory=lambda: {reason: 0 for reason in DropReason}
    )

    def validate(self) -> None:
        if self.kept_count + sum(self.counts.values()) != self.input_count:
            raise AssertionError("drop report does not account for every input row")

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "kept_count": self.kept_count,
            "dropped": {reason.value: n for reason, n in self.counts.items()},
        }

    @classmethod
    def merged(cls, reports: Iterable["DropReport"]) -> "DropReport":
        total = cls(0, 0)
        for r in reports:
            total.input_count += r.input_count
            total.kept_count += r.kept_count
            for reason, n in r.counts.items():
                total.counts[reason] += n
        return total


def _parse_date(text: str) -> Optional[date]:
    """ISO-8601 date or None for an empty field; ValueError on garbage."""
    text = text.strip()
    if not text:
        return None
    return date.fromisoformat(text)


def _open_source(
    source: Union[str, Path, TextIO], fmt: Optional[str]
) -> tuple[TextIO, str, bool]:
    """Resolve (handle, format, should_close). Format comes from the explicit
    flag or the file extension (.ndjson/.jsonl -> ndjson, else csv)."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if fmt is None:
            fmt = "ndjson" if path.suffix.lower() in (".ndjson", ".jsonl") else "csv"
        try:
            handle = path.open("r", encoding="utf-8", newline="")
        except OSError as exc:
            raise UnreadableStream(str(exc)) from exc
        return handle, fmt, True
    return source, fmt or "csv", False


def _iter_records(handle: TextIO, fmt: str, columns: tuple[str, ...]):
    """Yield dict records; raises SchemaMismatch if a required column is
    absent (CSV header check, or per-line key check for NDJSON)."""
    if fmt == "csv":
        reader = csv.DictReader(handle)
        header = reader.fieldnames
        if header is None:
            return
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaMismatch(f"missing columns: {', '.join(missing)}")
        yield from reader
    elif fmt == "ndjson":
        for line in handle:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                yield None
                continue
            missing = [c for c in columns if c not in record]
            if missing:
                raise SchemaMismatch(f"missing fields: {', '.join(missing)}")
            yield record
    else:
        raise ValueError(f"unknown format {fmt!r}")


def parse_events(
    source: Union[str, Path, TextIO], fmt: Optional[str] = None
) -> tuple[list[ClinicalEvent], int]:
    """Parse an events file (CSV or NDJSON). Returns (events, malformed).

    A record is malformed when its date or system field is unparseable; empty
    date and descriptor fields are allowed and preserved as None.
    """
    handle, fmt, should_close = _open_source(source, fmt)
    events: list[ClinicalEvent] = []
    malformed = 0
    try:
        for record in _iter_records(handle, fmt, EVENT_COLUMNS):
            if record is None:
                malformed += 1
                continue
            try:
                when = _parse_date(str(record["date"] or ""))
                system = CodeSystem.parse(str(record["system"]))
            except (ValueError, UnknownSystem):
                malformed += 1
                continue
            descriptor = str(record["descriptor"] or "").strip() or None
            events.append(
                ClinicalEvent(
                    patient_id=str(record["patient_id"]).strip(),
                    date=when,
                    system=system,
                    code=str(record["code"] or "").strip(),
                    descriptor=descriptor,
                    source_registry=Registry.parse(str(record["source_registry"] or "")),
                )
            )
    except UnicodeDecodeError as exc:
        raise UnreadableStream(str(exc)) from exc
    finally:
        if should_close:
            handle.close()
    return events, malformed


def parse_patients(
    source: Union[str, Path, TextIO], fmt: Optional[str] = None
) -> tuple[list[Patient], int]:
    """Parse a patients file (CSV or NDJSON). Returns (patients, malformed)."""
    handle, fmt, should_close = _open_source(source, fmt)
    patients: list[Patient] = []
    malformed = 0
    try:
        for record in _iter_records(handle, fmt, PATIENT_COLUMNS):
            if record is None:
                malformed += 1
                continue
            try:
                birth = _parse_date(str(record["birth_date"] or ""))
                registration = _parse_date(str(record["registration_date"] or ""))
                deregistration = _parse_date(str(record["deregistration_date"] or ""))
                if birth is None or registration is None:
                    malformed += 1
                    continue
                patients.append(
                    Patient(
                        id=str(record["patient_id"]).strip(),
                        birth_date=birth,
                        sex=Sex.parse(str(record["sex"] or "")),
                        registration_date=registration,
                        deregistration_date=deregistration,
                    )
                )
            except ValueError:
                malformed += 1
    except UnicodeDecodeError as exc:
        raise UnreadableStream(str(exc)) from exc
    finally:
        if should_close:
            handle.close()
    return patients, malformed


def _event_key(event: ClinicalEvent) -> tuple:
    return (
        event.patient_id,
        event.date,
        event.system,
        event.code,
        event.descriptor,
        event.source_registry,
    )


def clean_events(
    patient: Patient,
    events: list[ClinicalEvent],
    date_floor: date = DATE_FLOOR,
    date_ceiling: date = DATE_CEILING,
) -> tuple[list[ClinicalEvent], DropReport]:
    """Apply the cleaning rules to one patient's events.

    Drop reasons are checked in DropReason order and each dropped row is
    counted once under the first matching reason; exact-duplicate rows keep
    their first instance. Raises PatientMismatch if any event belongs to a
    different patient.
    """
    report = DropReport(input_count=len(events), kept_count=0)
    kept: list[ClinicalEvent] = []
    seen: set[tuple] = set()
    for event in events:
        if event.patient_id != patient.id:
            raise PatientMismatch(
                f"event for {event.patient_id!r} passed with patient {patient.id!r}"
            )
        key = _event_key(event)
        reason = None
        if key in seen:
            reason = DropReason.DUPLICATE
        elif event.date is not None and event.date < patient.birth_date:
            reason = DropReason.BEFORE_BIRTH
        elif (
            event.date is not None
            and patient.deregistration_date is not None
            and event.date > patient.deregistration_date
        ):
            reason = DropReason.AFTER_DEREGISTRATION
        elif event.date is None:
            reason = DropReason.MISSING_DATE
        elif not event.code:
            reason = DropReason.MISSING_CODE_OR_DESCRIPTOR
        elif event.date < date_floor or event.date > date_ceiling:
            reason = DropReason.OUT_OF_DATE_RANGE
        seen.add(key)
        if reason is None:
            kept.append(event)
            report.kept_count += 1
        else:
            report.counts[reason] += 1
    report.validate()
    return kept, report


def sort_chronologically(events: list[ClinicalEvent]) -> list[ClinicalEvent]:
    """Ascending by date; same-date events keep their input order."""
    return sorted(events, key=lambda e: e.date)


def write_events_ndjson(events: Iterable[ClinicalEvent], handle: TextIO) -> None:
    """Serialize events one JSON object per line (the NDJSON schema)."""
    for e in events:
        handle.write(
            json.dumps(
                {
                    "patient_id": e.patient_id,
                    "date": e.date.isoformat() if e.date else "",
                    "system": e.system.label,
                    "code": e.code,
                    "descriptor": e.descriptor or "",
                    "source_registry": e.source_registry.value,
                },
                sort_keys=True,
            )
        )
        handle.write("\n")
