import io
from dataclasses import replace
from datetime import date

import numpy as np
import pytest

from ehrseq import ingest
from ehrseq.cohort import COMPLICATIONS, detect_phenotypes
from ehrseq.ingest import sort_chronologically
from ehrseq.sequence import Mode, train_tokenizer
from ehrseq.synthgen import (
    CalibrationFailed,
    DescriptorStyle,
    GeneratorConfig,
    InvalidConfig,
    Placement,
    SignalCode,
    calibrate_lengths,
    default_signal_spec,
    generate,
    observation_corpus,
    write_cohort_files,
)

FAST = dict(mean_events_per_year=4.0, history_years_range=(1.0, 8.0))


class TestConfig:
    def test_defaults_valid(self):
        config = GeneratorConfig()
        assert abs(sum(config.complication_count_probs) - 1.0) < 1e-9
        assert abs(sum(config.first_complication_mix) - 1.0) < 1e-9

    def test_bad_probs_rejected(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(complication_count_probs=(0.5, 0.5, 0.5, 0.5))

    def test_bad_n_rejected(self):
        with pytest.raises(InvalidConfig):
            GeneratorConfig(n_patients=0)

    def test_dict_roundtrip(self):
        config = GeneratorConfig(
            n_patients=7,
            trivial_mode=True,
            descriptor_style=DescriptorStyle.DISJOINT_WORDS,
            signal_spec=default_signal_spec(lift=3.0, placement=Placement.LATE),
            seed=9,
        )
        assert GeneratorConfig.from_dict(config.to_dict()) == config
        assert GeneratorConfig.from_dict(config.to_dict()).content_hash() == config.content_hash()


class TestGenerate:
    def test_single_patient(self):
        cohort = generate(GeneratorConfig(n_patients=1, seed=5, **FAST))
        assert len(cohort.patients) == 1
        (patient,) = cohort.patients
        events = cohort.events
        assert events
        for event in events:
            assert event.date >= patient.registration_date
            assert event.date >= patient.birth_date
            assert date(1985, 1, 1) <= event.date <= date(2020, 12, 31)
            if patient.deregistration_date is not None:
                assert event.date <= patient.deregistration_date

    def test_deterministic(self):
        config = GeneratorConfig(n_patients=40, seed=11, **FAST)
        a = generate(config)
        b = generate(config)
        assert a.events == b.events
        assert a.patients == b.patients
        assert a.truth == b.truth

    def test_ground_truth_consistency(self):
        config = GeneratorConfig(n_patients=150, seed=2, trivial_mode=True, **FAST)
        cohort = generate(config)
        codelists = cohort.codelists()
        grouped = cohort.events_by_patient()
        for patient in cohort.patients:
            events = sort_chronologically(grouped[patient.id])
            assert detect_phenotypes(events, codelists) == cohort.truth[patient.id]

    def test_cleaning_is_a_noop_other_than_day_collisions(self):
        config = GeneratorConfig(n_patients=60, seed=3, **FAST)
        cohort = generate(config)
        grouped = cohort.events_by_patient()
        patients = {p.id: p for p in cohort.patients}
        for pid, events in grouped.items():
            kept, report = ingest.clean_events(patients[pid], events)
            dropped = sum(report.counts.values())
            assert dropped == report.counts[ingest.DropReason.DUPLICATE]

    def test_complication_histogram_coarse(self):
        config = GeneratorConfig(n_patients=5000, seed=7, **FAST)
        cohort = generate(config)
        counts = np.bincount(list(cohort.complication_counts.values()), minlength=4)
        shares = counts / counts.sum()
        for share, expected in zip(shares, config.complication_count_probs):
            assert abs(share - expected) < 0.02

    def test_first_complication_mix_coarse(self):
        config = GeneratorConfig(n_patients=5000, seed=8, **FAST)
        cohort = generate(config)
        firsts = [c for c in cohort.first_complication.values() if c]
        shares = {
            c: sum(f == c for f in firsts) / len(firsts)
            for c in ("retinopathy", "nephropathy", "neuropathy")
        }
        for c, expected in zip(
            ("retinopathy", "nephropathy", "neuropathy"), config.first_complication_mix
        ):
            assert abs(shares[c] - expected) < 0.03

    def test_age_at_first_complication_matches_marginal(self):
        config = GeneratorConfig(n_patients=4000, seed=9, **FAST)
        cohort = generate(config)
        ages = []
        for patient in cohort.patients:
            first = cohort.truth[patient.id].first_complication()
            if first is None:
                continue
            ages.append((first[1] - patient.birth_date).days / 365.25)
        ages = np.array(ages)
        assert 61.5 <= ages.mean() <= 64.5
        assert 12.5 <= ages.std(ddof=1) <= 15.5

    def test_late_placement_position(self):
        spec = default_signal_spec(lift=6.0, placement=Placement.LATE)
        config = GeneratorConfig(n_patients=1000, seed=4, signal_spec=spec, **FAST)
        cohort = generate(config)
        signal_codes = {sc.code for codes in spec.values() for sc in codes}
        grouped = cohort.events_by_patient()
        positions = []
        for patient in cohort.patients:
            events = grouped[patient.id]
            first = cohort.truth[patient.id].first_complication()
            end = first[1] if first else max(e.date for e in events)
            window = [e for e in events if e.date < end or (first is None and e.date <= end)]
            if not window:
                continue
            start = min(e.date for e in window)
            span = max((end - start).days, 1)
            for e in window:
                if e.code in signal_codes:
                    positions.append((e.date - start).days / span)
        assert positions
        assert float(np.mean(positions)) > 0.8

    def test_trivial_markers_track_complications(self):
        config = GeneratorConfig(n_patients=120, seed=6, trivial_mode=True, **FAST)
        cohort = generate(config)
        grouped = cohort.events_by_patient()
        for patient in cohort.patients:
            phen = cohort.truth[patient.id]
            codes = {e.code for e in grouped[patient.id]}
            for comp, marker in (
                ("nephropathy", "MKNEP"),
                ("retinopathy", "MKRET"),
                ("neuropathy", "MKNEU"),
            ):
                has = getattr(phen, comp) is not None
                assert (marker in codes) == has

    def test_observation_window_has_three_distinct_codes(self):
        config = GeneratorConfig(n_patients=200, seed=12, mean_events_per_year=0.5,
                                 history_years_range=(1.0, 3.0))
        cohort = generate(config)
        grouped = cohort.events_by_patient()
        for patient in cohort.patients:
            first = cohort.truth[patient.id].first_complication()
            events = grouped[patient.id]
            if first is not None:
                events = [e for e in events if e.date < first[1]]
            assert len({(e.system, e.code) for e in events}) >= 3

    def test_shared_words_descriptors(self):
        config = GeneratorConfig(n_patients=1, seed=1, **FAST)
        cohort = generate(config)
        kidney = [d for _, c, d in cohort.vocab_entries if d.startswith("kidney function marker")]
        assert len(kidney) == len(default_signal_spec()["nephropathy"])
        disjoint = replace(config, descriptor_style=DescriptorStyle.DISJOINT_WORDS)
        entries = generate(disjoint).vocab_entries
        assert not any(d.startswith("kidney function marker") for _, _, d in entries)


class TestFiles:
    def test_written_files_parse_cleanly(self, tmp_path):
        config = GeneratorConfig(n_patients=30, seed=13, **FAST)
        cohort = generate(config)
        paths = write_cohort_files(cohort, tmp_path)
        patients, bad_p = ingest.parse_patients(paths["patients"])
        events, bad_e = ingest.parse_events(paths["events"])
        assert bad_p == 0 and bad_e == 0
        assert len(patients) == 30
        assert len(events) == len(cohort.events)
        from ehrseq.ontology import load_codelist, load_vocab

        with paths["vocab"].open() as fh:
            vocab, skipped = load_vocab(fh)
        assert skipped == 0 and len(vocab) == len(cohort.vocab_entries)
        with paths["codelists"].open() as fh:
            codelists = load_codelist(fh)
        assert set(codelists) == {"t2dm", "retinopathy", "nephropathy", "neuropathy"}

    def test_ground_truth_ndjson(self, tmp_path):
        import json

        config = GeneratorConfig(n_patients=5, seed=14, **FAST)
        cohort = generate(config)
        paths = write_cohort_files(cohort, tmp_path)
        lines = paths["ground_truth"].read_text().strip().splitlines()
        assert len(lines) == 5
        record = json.loads(lines[0])
        assert set(record) >= {"patient_id", "t2dm", "first_complication", "n_complications"}


class TestCalibrate:
    def _tokenizer(self, config):
        pilot = replace(config, n_patients=120)
        corpus = observation_corpus(generate(pilot), Mode.TEXT)
        return train_tokenizer((r.body for r in corpus), 600)

    def test_fixed_point_returns_config_unchanged(self):
        config = GeneratorConfig(n_patients=120, seed=21, **FAST)
        tok = self._tokenizer(config)
        from ehrseq.sequence import token_length_stats

        stats = token_length_stats(
            observation_corpus(generate(replace(config, n_patients=120)), Mode.TEXT), tok, 512
        )
        adjusted, report = calibrate_lengths(
            config, tok, target_median_tokens=stats.median, pilot_n=120
        )
        assert adjusted == config
        assert report.steps == 0
        assert report.achieved_median == stats.median

    def test_converges_to_modest_target(self):
        config = GeneratorConfig(n_patients=120, seed=22, **FAST)
        tok = self._tokenizer(config)
        adjusted, report = calibrate_lengths(
            config, tok, target_median_tokens=300.0, pilot_n=120
        )
        assert abs(report.achieved_median - 300.0) <= 0.05 * 300.0
        assert adjusted.mean_events_per_year != config.mean_events_per_year

    def test_fails_within_budget(self):
        config = GeneratorConfig(n_patients=60, seed=23, **FAST)
        tok = self._tokenizer(config)
        with pytest.raises(CalibrationFailed):
            calibrate_lengths(
                config, tok, target_median_tokens=60.0, pilot_n=60, max_steps=2
            )
