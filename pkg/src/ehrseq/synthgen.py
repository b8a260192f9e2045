"""Synthetic patient and event generation.

Draws per-patient complication profiles calibrated to published cohort
marginals, then emits a coded event stream: Zipf-distributed background
codes, per-complication signal codes whose emission rate is lifted for
patients who go on to develop the linked complication (with controllable
placement inside the observation window), and the phenotype events
themselves. Fully deterministic given the config seed; per-patient RNG
streams are derived as (seed, patient index).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .ingest import ClinicalEvent, Patient, Registry, Sex
from .ontology import BNF, ICD10, OPCS4, SNOMED_CT, Codelist, CodeSystem
from .cohort import COMPLICATIONS, PhenotypeDates
from .sequence import Mode, SerializedRecord, Tokenizer, serialize, token_length_stats

DATE_FLOOR_ORD = date(1985, 1, 1).toordinal()
DATE_CEILING_ORD = date(2020, 12, 31).toordinal()

MALE_FRACTION = 72012 / 133784  # published sex marginal

_PHENOTYPE_CODES = {
    "t2dm": [
        (SNOMED_CT, "44054006", "type 2 diabetes mellitus"),
        (ICD10, "E11.9", "type 2 diabetes mellitus without complications"),
    ],
    "retinopathy": [
        (ICD10, "H36.0", "diabetic retinopathy"),
        (SNOMED_CT, "4855003", "retinopathy due to diabetes mellitus"),
    ],
    "nephropathy": [
        (ICD10, "N08.3", "glomerular disorders in diabetes mellitus"),
        (SNOMED_CT, "127013003", "diabetic renal disease"),
    ],
    "neuropathy": [
        (ICD10, "G63.2", "diabetic polyneuropathy"),
        (SNOMED_CT, "230572002", "neuropathy due to diabetes mellitus"),
    ],
}

_TRIVIAL_MARKERS = {
    "nephropathy": ("MKNEP", "sentinel nephropathy flag"),
    "retinopathy": ("MKRET", "sentinel retinopathy flag"),
    "neuropathy": ("MKNEU", "sentinel neuropathy flag"),
}

_SHARED_STEMS = {
    "nephropathy": "kidney function marker",
    "retinopathy": "retinal screening marker",
    "neuropathy": "nerve conduction marker",
}
_SUFFIXES = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")

# background descriptor word bank; deliberately excludes the shared-signal
# stem words so SHARED_WORDS signal is not diluted by background text
_WORDS = (
    "routine visit review consultation assessment referral prescription repeat "
    "medication tablet capsule dose course blood sample pressure pulse weight "
    "height body mass index smoking alcohol advice diet exercise vaccination "
    "influenza examination chest pain cough fever headache dizziness fatigue "
    "rash swelling joint back knee hip shoulder injury wound dressing minor "
    "surgery procedure scan result normal abnormal raised reduced chronic acute "
    "mild moderate severe history family monitoring annual check follow up "
    "telephone letter administration certificate report test urine glucose "
    "cholesterol lipid thyroid liver cardiac respiratory gastric skin ear eye "
    "throat dental sleep anxiety depression mood counselling therapy physio"
).split()


class SynthError(Exception):
    """Base class for generator failures."""


class InvalidConfig(SynthError):
    """Generator configuration violates an invariant."""


class CalibrationFailed(SynthError):
    """Length calibration did not converge within the step budget."""


class Placement(enum.Enum):
    EARLY = "EARLY"
    LATE = "LATE"
    UNIFORM = "UNIFORM"


class DescriptorStyle(enum.Enum):
    SHARED_WORDS = "SHARED_WORDS"
    DISJOINT_WORDS = "DISJOINT_WORDS"


@dataclass(frozen=True)
class SignalCode:
    code: str
    lift: float
    placement: Placement = Placement.UNIFORM


# unstructured code strings so that, unlike the shared descriptor words,
# codes of one complication carry no common subword a tokenizer could merge
_SIGNAL_CODE_NAMES = {
    "nephropathy": ("X4821", "Q7733", "J0256", "M9190", "T3347", "B6512", "K8805", "W1639"),
    "retinopathy": ("R5292", "E0148", "H7726", "N3365", "D9821", "V2407", "G6590", "L1153"),
    "neuropathy": ("Z8340", "C1675", "P4928", "U7211", "F3864", "Y5097", "A2549", "I6832"),
}


def default_signal_spec(
    lift: float = 6.0, placement: Placement = Placement.UNIFORM, per_class: int = 4
) -> dict[str, tuple[SignalCode, ...]]:
    if per_class > len(_SIGNAL_CODE_NAMES["nephropathy"]):
        raise InvalidConfig(f"at most {len(_SIGNAL_CODE_NAMES['nephropathy'])} signal codes per class")
    return {
        comp: tuple(
            SignalCode(_SIGNAL_CODE_NAMES[comp][i], lift, placement)
            for i in range(per_class)
        )
        for comp in COMPLICATIONS
    }


def _normalized(probs: Sequence[float]) -> tuple[float, ...]:
    total = float(sum(probs))
    return tuple(float(p) / total for p in probs)


@dataclass
class GeneratorConfig:
    n_patients: int = 1000
    # P(0..3 complications), from the published complication-count histogram
    complication_count_probs: tuple[float, float, float, float] = (0.665, 0.248, 0.069, 0.018)
    # first-complication shares (retinopathy, nephropathy, neuropathy),
    # normalized because the published percentages sum to 100.01%
    first_complication_mix: tuple[float, float, float] = _normalized((0.6019, 0.3015, 0.0967))
    mean_events_per_year: float = 40.0
    rate_sigma: float = 1.2  # per-patient log-normal rate spread
    history_years_range: tuple[float, float] = (1.0, 30.0)
    vocab_spec: dict[str, int] = field(
        default_factory=lambda: {"SNOMED_CT": 220, "ICD10": 120, "BNF": 100, "OPCS4": 60}
    )
    signal_spec: dict[str, tuple[SignalCode, ...]] = field(default_factory=default_signal_spec)
    signal_base_count: float = 1.0  # expected per-code emissions when unlinked
    descriptor_style: DescriptorStyle = DescriptorStyle.SHARED_WORDS
    trivial_mode: bool = False
    age_mean: float = 63.06
    age_sd: float = 14.73
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise InvalidConfig("n_patients must be >= 1")
        for name, probs, size in (
            ("complication_count_probs", self.complication_count_probs, 4),
            ("first_complication_mix", self.first_complication_mix, 3),
        ):
            if len(probs) != size or any(p < 0 for p in probs):
                raise InvalidConfig(f"{name} must be {size} non-negative reals")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise InvalidConfig(f"{name} must sum to 1 (got {sum(probs)!r})")
        if self.mean_events_per_year <= 0:
            raise InvalidConfig("mean_events_per_year must be positive")
        lo, hi = self.history_years_range
        if not 0 < lo <= hi:
            raise InvalidConfig("history_years_range must satisfy 0 < lo <= hi")

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "complication_count_probs": list(self.complication_count_probs),
            "first_complication_mix": list(self.first_complication_mix),
            "mean_events_per_year": self.mean_events_per_year,
            "rate_sigma": self.rate_sigma,
            "history_years_range": list(self.history_years_range),
            "vocab_spec": dict(self.vocab_spec),
            "signal_spec": {
                comp: [
                    {"code": s.code, "lift": s.lift, "placement": s.placement.value}
                    for s in codes
                ]
                for comp, codes in self.signal_spec.items()
            },
            "signal_base_count": self.signal_base_count,
            "descriptor_style": self.descriptor_style.value,
            "trivial_mode": self.trivial_mode,
            "age_mean": self.age_mean,
            "age_sd": self.age_sd,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        kwargs = dict(data)
        if "complication_count_probs" in kwargs:
            kwargs["complication_count_probs"] = tuple(kwargs["complication_count_probs"])
        if "first_complication_mix" in kwargs:
            kwargs["first_complication_mix"] = tuple(kwargs["first_complication_mix"])
        if "history_years_range" in kwargs:
            kwargs["history_years_range"] = tuple(kwargs["history_years_range"])
        if "descriptor_style" in kwargs:
            kwargs["descriptor_style"] = DescriptorStyle(kwargs["descriptor_style"])
        if "signal_spec" in kwargs:
            kwargs["signal_spec"] = {
                comp: tuple(
                    SignalCode(s["code"], s["lift"], Placement(s["placement"]))
                    for s in codes
                )
                for comp, codes in kwargs["signal_spec"].items()
            }
        return cls(**kwargs)

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class _SynthVocab:
    """Code universe for one generation run."""

    background: list[tuple[CodeSystem, str, str]]  # (system, code, descriptor)
    background_cdf: np.ndarray
    signal: dict[str, list[tuple[CodeSystem, str, str]]]  # per complication
    entries: list[tuple[str, str, str]]  # (system label, code, descriptor) for the TSV


def _signal_descriptor(comp: str, code: str, i: int, style: DescriptorStyle) -> str:
    if style is DescriptorStyle.SHARED_WORDS:
        return f"{_SHARED_STEMS[comp]} {_SUFFIXES[i % len(_SUFFIXES)]}"
    return code.lower()


def _build_vocab(config: GeneratorConfig) -> _SynthVocab:
    rng = np.random.default_rng([config.seed, 5])
    systems = {"SNOMED_CT": SNOMED_CT, "ICD10": ICD10, "BNF": BNF, "OPCS4": OPCS4}
    prefixes = {"SNOMED_CT": "SCT", "ICD10": "ICD", "BNF": "BNF", "OPCS4": "OPC"}
    background: list[tuple[CodeSystem, str, str]] = []
    for name in sorted(config.vocab_spec):
        system = systems.get(name) or CodeSystem.parse(name)
        prefix = prefixes.get(name, name[:3].upper())
        for i in range(config.vocab_spec[name]):
            words = rng.choice(len(_WORDS), size=3, replace=False)
            descriptor = " ".join(_WORDS[w] for w in words)
            background.append((system, f"{prefix}{i:05d}", descriptor))
    ranks = np.arange(1, len(background) + 1, dtype=np.float64)
    weights = ranks**-1.1
    cdf = np.cumsum(weights / weights.sum())
    signal = {
        comp: [
            (SNOMED_CT, sc.code, _signal_descriptor(comp, sc.code, i, config.descriptor_style))
            for i, sc in enumerate(config.signal_spec.get(comp, ()))
        ]
        for comp in COMPLICATIONS
    }
    entries = [(s.label, c, d) for s, c, d in background]
    for comp in COMPLICATIONS:
        entries.extend((s.label, c, d) for s, c, d in signal[comp])
    for phenotype in _PHENOTYPE_CODES:
        entries.extend((s.label, c, d) for s, c, d in _PHENOTYPE_CODES[phenotype])
    for code, descriptor in _TRIVIAL_MARKERS.values():
        entries.append((SNOMED_CT.label, code, descriptor))
    return _SynthVocab(background, cdf, signal, entries)


_REGISTRY_BY_SYSTEM = {
    "SNOMED_CT": Registry.PRIMARY_CARE,
    "BNF": Registry.PRIMARY_CARE,
    "ICD10": Registry.HOSPITAL,
    "OPCS4": Registry.HOSPITAL,
}


def _registry_for(system: CodeSystem) -> Registry:
    return _REGISTRY_BY_SYSTEM.get(system.label, Registry.OTHER)


@dataclass
class SyntheticCohort:
    patients: list[Patient]
    events: list[ClinicalEvent]
    truth: dict[str, PhenotypeDates]
    first_complication: dict[str, Optional[str]]
    complication_counts: dict[str, int]
    vocab_entries: list[tuple[str, str, str]]
    codelist_rows: list[tuple[str, str, str]]
    config_hash: str
    seed: int

    def events_by_patient(self) -> dict[str, list[ClinicalEvent]]:
        grouped: dict[str, list[ClinicalEvent]] = {p.id: [] for p in self.patients}
        for e in self.events:
            grouped[e.patient_id].append(e)
        return grouped

    def codelists(self) -> dict[str, Codelist]:
        members: dict[str, set] = {}
        for phenotype, system_label, code in self.codelist_rows:
            members.setdefault(phenotype, set()).add((CodeSystem.parse(system_label), code))
        return {p: Codelist(p, frozenset(m)) for p, m in members.items()}


def _truncated_normal(rng: np.random.Generator, mean: float, sd: float, lo: float, hi: float) -> float:
    while True:
        value = rng.normal(mean, sd)
        if lo <= value <= hi:
            return float(value)


def _placement_fractions(rng: np.random.Generator, placement: Placement, n: int) -> np.ndarray:
    u = rng.random(n)
    if placement is Placement.LATE:
        return 0.9 + 0.0999 * u
    if placement is Placement.EARLY:
        return 0.0999 * u
    return u


def generate(config: GeneratorConfig) -> SyntheticCohort:
    """Generate the synthetic cohort described by the config.

    Per patient: draw demographics and a complication profile, lay out the
    observation window on the calendar, then emit background, signal,
    trivial-marker (when enabled) and phenotype events. Events stay inside
    [1985-01-01, 2020-12-31] and every observation window retains at least
    three distinct (system, code) pairs.
    """
    vocab = _build_vocab(config)
    comp_probs = np.asarray(config.complication_count_probs)
    mix = np.asarray(config.first_complication_mix)
    mix_order = ("retinopathy", "nephropathy", "neuropathy")
    patients: list[Patient] = []
    events: list[ClinicalEvent] = []
    truth: dict[str, PhenotypeDates] = {}
    first_complication: dict[str, Optional[str]] = {}
    complication_counts: dict[str, int] = {}
    lo_hist, hi_hist = config.history_years_range
    index_lo = date(1996, 1, 1).toordinal()
    index_hi = date(2019, 12, 31).toordinal()

    for idx in range(config.n_patients):
        rng = np.random.default_rng([config.seed, 1000 + idx])
        pid = f"p{idx:07d}"
        n_comp = int(rng.choice(4, p=comp_probs))
        comp_types: list[str] = []
        if n_comp > 0:
            first = mix_order[int(rng.choice(3, p=mix))]
            comp_types.append(first)
            others = [c for c in mix_order if c != first]
            comp_types.extend(
                others[i] for i in rng.permutation(2)[: n_comp - 1]
            )
        sex = Sex.MALE if rng.random() < MALE_FRACTION else Sex.FEMALE
        age_at_index = _truncated_normal(rng, config.age_mean, config.age_sd, 30.0, 95.0)

        index_ord = int(rng.integers(index_lo, index_hi + 1))
        span_years = float(rng.uniform(lo_hist, hi_hist))
        span_years = min(
            span_years, (index_ord - DATE_FLOOR_ORD) / 365.25 - 0.05, age_at_index - 20.0
        )
        span_days = max(int(span_years * 365.25), 90)
        first_ord = index_ord - span_days
        last_in_window = index_ord - 1

        birth = date.fromordinal(index_ord - int(age_at_index * 365.25))
        registration = date.fromordinal(first_ord)

        # (ordinal, system, code, descriptor) tuples gathered per patient
        rows: list[tuple[int, CodeSystem, str, str]] = []

        personal_rate = config.mean_events_per_year * float(
            rng.lognormal(0.0, config.rate_sigma)
        )
        n_bg = max(int(rng.poisson(personal_rate * span_days / 365.25)), 6)
        bg_frac = rng.random(n_bg)
        bg_codes = np.searchsorted(vocab.background_cdf, rng.random(n_bg))
        for frac, code_idx in zip(bg_frac, bg_codes):
            system, code, descriptor = vocab.background[int(code_idx)]
            day = min(first_ord + int(frac * span_days), last_in_window)
            rows.append((day, system, code, descriptor))

        for comp in COMPLICATIONS:
            linked = comp in comp_types
            for i, sc in enumerate(config.signal_spec.get(comp, ())):
                expected = config.signal_base_count * (sc.lift if linked else 1.0)
                count = int(rng.poisson(expected))
                if count == 0:
                    continue
                system, code, descriptor = vocab.signal[comp][i]
                for frac in _placement_fractions(rng, sc.placement, count):
                    day = min(first_ord + int(frac * span_days), last_in_window)
                    rows.append((day, system, code, descriptor))

        if config.trivial_mode:
            for comp in comp_types:
                code, descriptor = _TRIVIAL_MARKERS[comp]
                for frac in (0.95, 0.96, 0.97):
                    day = min(first_ord + int(frac * span_days), last_in_window)
                    rows.append((day, SNOMED_CT, code, descriptor))

        t2dm_ord = min(
            first_ord + int(float(rng.uniform(0.02, 0.4)) * span_days), last_in_window
        )
        t2dm_system, t2dm_code, t2dm_desc = _PHENOTYPE_CODES["t2dm"][
            int(rng.integers(0, len(_PHENOTYPE_CODES["t2dm"])))
        ]
        rows.append((t2dm_ord, t2dm_system, t2dm_code, t2dm_desc))

        comp_ords: dict[str, int] = {}
        cursor = index_ord
        for order, comp in enumerate(comp_types):
            if order > 0:
                gap_years = float(rng.exponential(3.0)) + 0.1
                cursor = min(cursor + int(gap_years * 365.25), DATE_CEILING_ORD)
            comp_ords[comp] = cursor
            choices = _PHENOTYPE_CODES[comp]
            system, code, descriptor = choices[int(rng.integers(0, len(choices)))]
            rows.append((comp_ords[comp], system, code, descriptor))

        # observation window must keep >= 3 distinct (system, code) pairs
        window_pairs = {(s, c) for day, s, c, _ in rows if day <= last_in_window}
        attempt = 0
        while len(window_pairs) < 3 and attempt < 50:
            bg_idx = int(rng.integers(0, len(vocab.background)))
            system, code, descriptor = vocab.background[bg_idx]
            if (system, code) not in window_pairs:
                day = min(first_ord + span_days // 2 + attempt, last_in_window)
                rows.append((day, system, code, descriptor))
                window_pairs.add((system, code))
            attempt += 1

        rows.sort(key=lambda r: r[0])
        max_ord = rows[-1][0]
        deregistration = None
        if rng.random() < 0.1:
            deregistration = date.fromordinal(
                max_ord + int(float(rng.uniform(0.5, 2.0)) * 365.25)
            )
        patients.append(
            Patient(
                id=pid,
                birth_date=birth,
                sex=sex,
                registration_date=registration,
                deregistration_date=deregistration,
            )
        )
        for day, system, code, descriptor in rows:
            events.append(
                ClinicalEvent(
                    patient_id=pid,
                    date=date.fromordinal(day),
                    system=system,
                    code=code,
                    descriptor=descriptor,
                    source_registry=_registry_for(system),
                )
            )
        phen_kwargs = {
            comp: date.fromordinal(comp_ords[comp]) for comp in comp_ords
        }
        truth[pid] = PhenotypeDates(t2dm=date.fromordinal(t2dm_ord), **phen_kwargs)
        first_complication[pid] = comp_types[0] if comp_types else None
        complication_counts[pid] = n_comp

    codelist_rows = [
        (phenotype, system.label, code)
        for phenotype, entries in _PHENOTYPE_CODES.items()
        for system, code, _ in entries
    ]
    return SyntheticCohort(
        patients=patients,
        events=events,
        truth=truth,
        first_complication=first_complication,
        complication_counts=complication_counts,
        vocab_entries=vocab.entries,
        codelist_rows=codelist_rows,
        config_hash=config.content_hash(),
        seed=config.seed,
    )


def observation_corpus(cohort: SyntheticCohort, mode: Mode = Mode.TEXT) -> list[SerializedRecord]:
    """Serialize each patient's observation window (events strictly before
    the first complication, or all events when there is none)."""
    corpus: list[SerializedRecord] = []
    grouped = cohort.events_by_patient()
    for patient in cohort.patients:
        events = grouped[patient.id]
        first = cohort.truth[patient.id].first_complication()
        if first is not None:
            events = [e for e in events if e.date < first[1]]
        corpus.append(serialize(events, mode))
    return corpus


@dataclass
class CalibrationReport:
    achieved_median: float
    achieved_truncation_fraction: float
    steps: int
    mean_events_per_year: float


def calibrate_lengths(
    config: GeneratorConfig,
    tok: Tokenizer,
    target_median_tokens: float = 2272.0,
    target_trunc_frac_at_512: float = 0.8537,
    pilot_n: int = 400,
    tolerance: float = 0.05,
    max_steps: int = 30,
) -> tuple[GeneratorConfig, CalibrationReport]:
    """Bisect mean_events_per_year until the pilot-corpus median token count
    is within `tolerance` of the target.

    The tokenizer is taken as fixed (train it on a pilot corpus from the same
    config first). Raises CalibrationFailed when the budget of evaluation
    steps is exhausted. The truncation-fraction target is reported, not
    optimized: it follows from the configured length spread.
    """
    steps = 0

    def measure(rate: float) -> tuple[float, float]:
        pilot = replace(config, n_patients=pilot_n, mean_events_per_year=rate)
        stats = token_length_stats(observation_corpus(generate(pilot)), tok, 512)
        return stats.median, stats.fraction_truncated

    def evaluate(rate: float) -> tuple[float, float]:
        nonlocal steps
        steps += 1
        if steps > max_steps:
            raise CalibrationFailed(
                f"median {target_median_tokens} not reached in {max_steps} steps"
            )
        return measure(rate)

    median, fraction = measure(config.mean_events_per_year)
    if abs(median - target_median_tokens) <= tolerance * target_median_tokens:
        return config, CalibrationReport(median, fraction, 0, config.mean_events_per_year)

    lo, hi = config.mean_events_per_year, config.mean_events_per_year
    med_lo = med_hi = median
    while med_lo > target_median_tokens:
        lo /= 2.0
        med_lo, _ = evaluate(lo)
    while med_hi < target_median_tokens:
        hi *= 2.0
        med_hi, _ = evaluate(hi)
    while True:
        mid = (lo + hi) / 2.0
        median, fraction = evaluate(mid)
        if abs(median - target_median_tokens) <= tolerance * target_median_tokens:
            return (
                replace(config, mean_events_per_year=mid),
                CalibrationReport(median, fraction, steps, mid),
            )
        if median < target_median_tokens:
            lo = mid
        else:
            hi = mid


def write_cohort_files(cohort: SyntheticCohort, out_dir: Union[str, Path]) -> dict[str, Path]:
    """Emit the CSV/TSV/NDJSON files consumed by the rest of the pipeline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "patients": out / "patients.csv",
        "events": out / "events.csv",
        "vocab": out / "vocab.tsv",
        "codelists": out / "codelists.tsv",
        "ground_truth": out / "ground_truth.ndjson",
    }
    with paths["patients"].open("w", encoding="utf-8") as fh:
        fh.write("patient_id,birth_date,sex,registration_date,deregistration_date\n")
        for p in cohort.patients:
            dereg = p.deregistration_date.isoformat() if p.deregistration_date else ""
            fh.write(
                f"{p.id},{p.birth_date.isoformat()},{p.sex.value},"
                f"{p.registration_date.isoformat()},{dereg}\n"
            )
    with paths["events"].open("w", encoding="utf-8") as fh:
        fh.write("patient_id,date,system,code,descriptor,source_registry\n")
        for e in cohort.events:
            fh.write(
                f"{e.patient_id},{e.date.isoformat()},{e.system.label},{e.code},"
                f"{e.descriptor},{e.source_registry.value}\n"
            )
    with paths["vocab"].open("w", encoding="utf-8") as fh:
        fh.write("system\tcode\tdescriptor\n")
        for system_label, code, descriptor in cohort.vocab_entries:
            fh.write(f"{system_label}\t{code}\t{descriptor}\n")
    with paths["codelists"].open("w", encoding="utf-8") as fh:
        fh.write("phenotype\tsystem\tcode\n")
        for phenotype, system_label, code in cohort.codelist_rows:
            fh.write(f"{phenotype}\t{system_label}\t{code}\n")
    with paths["ground_truth"].open("w", encoding="utf-8") as fh:
        for p in cohort.patients:
            phen = cohort.truth[p.id]
            fh.write(
                json.dumps(
                    {
                        "patient_id": p.id,
                        "t2dm": phen.t2dm.isoformat() if phen.t2dm else None,
                        "retinopathy": phen.retinopathy.isoformat() if phen.retinopathy else None,
                        "nephropathy": phen.nephropathy.isoformat() if phen.nephropathy else None,
                        "neuropathy": phen.neuropathy.isoformat() if phen.neuropathy else None,
                        "first_complication": cohort.first_complication[p.id],
                        "n_complications": cohort.complication_counts[p.id],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return paths
