from datetime import date

import pytest

from ehrseq.ingest import ClinicalEvent, Patient, Registry, Sex
from ehrseq.ontology import CodeSystem, SNOMED_CT


def make_event(
    patient_id="p1",
    when="2010-06-01",
    system=SNOMED_CT,
    code="C1",
    descriptor="some descriptor",
    registry=Registry.PRIMARY_CARE,
):
    if isinstance(system, str):
        system = CodeSystem.parse(system)
    return ClinicalEvent(
        patient_id=patient_id,
        date=date.fromisoformat(when) if isinstance(when, str) else when,
        system=system,
        code=code,
        descriptor=descriptor,
        source_registry=registry,
    )


def make_patient(
    patient_id="p1",
    birth="1950-01-01",
    sex=Sex.FEMALE,
    registration="1990-01-01",
    deregistration=None,
):
    return Patient(
        id=patient_id,
        birth_date=date.fromisoformat(birth),
        sex=sex,
        registration_date=date.fromisoformat(registration),
        deregistration_date=(
            date.fromisoformat(deregistration) if deregistration else None
        ),
    )


@pytest.fixture
def event_factory():
    return make_event


@pytest.fixture
def patient_factory():
    return make_patient
