import io

import pytest
from hypothesis import given, settings, strategies as st

from ehrseq.ontology import (
    BNF,
    ICD10,
    SNOMED_CT,
    CodeSystem,
    DuplicateConflict,
    EmptyDescriptor,
    EmptyFile,
    UnknownSystem,
    descriptor_for,
    load_codelist,
    load_vocab,
    normalize_descriptor,
)


def _vocab(text: str):
    return load_vocab(io.StringIO(text))


class TestCodeSystem:
    def test_known_variants(self):
        assert CodeSystem.parse("ICD10") == ICD10
        assert CodeSystem.parse("snomed_ct") == SNOMED_CT
        assert CodeSystem.parse("SNOMED-CT") == SNOMED_CT

    def test_other_keeps_name(self):
        system = CodeSystem.parse("READ2")
        assert system.variant == "OTHER"
        assert system.label == "READ2"

    def test_other_requires_name(self):
        with pytest.raises(ValueError):
            CodeSystem("OTHER")

    def test_blank_is_unknown(self):
        with pytest.raises(UnknownSystem):
            CodeSystem.parse("   ")


class TestLoadVocab:
    def test_single_entry(self):
        vocab, skipped = _vocab(
            "ICD10\tE11.9\ttype 2 diabetes mellitus without complications\n"
        )
        assert skipped == 0
        assert len(vocab) == 1
        assert (
            descriptor_for(vocab, ICD10, "E11.9")
            == "type 2 diabetes mellitus without complications"
        )

    def test_empty_stream(self):
        vocab, skipped = _vocab("")
        assert len(vocab) == 0 and skipped == 0

    def test_conflicting_descriptors(self):
        with pytest.raises(DuplicateConflict):
            _vocab(
                "SNOMED_CT\t44054006\tdiabetes type 2\n"
                "SNOMED_CT\t44054006\tdiabetes mellitus type 2\n"
            )

    def test_identical_restatement_tolerated(self):
        vocab, skipped = _vocab(
            "SNOMED_CT\t44054006\tdiabetes type 2\n"
            "SNOMED_CT\t44054006\tDiabetes   Type 2\n"  # same after normalization
        )
        assert len(vocab) == 1 and skipped == 0

    def test_empty_descriptor_raises(self):
        with pytest.raises(EmptyDescriptor):
            _vocab("ICD10\tE11.9\t \n")

    def test_malformed_lines_counted(self):
        vocab, skipped = _vocab(
            "ICD10\tE11.9\tsome descriptor\n"
            "just-two\tfields\n"
            "\tE10\tmissing system\n"
            "ICD10\t\tmissing code\n"
        )
        assert len(vocab) == 1
        assert skipped == 3

    def test_header_detected(self):
        vocab, skipped = _vocab(
            "system\tcode\tdescriptor\nBNF\t0601022B0\tmetformin 500mg tablets\n"
        )
        assert skipped == 0
        assert descriptor_for(vocab, BNF, "0601022B0") == "metformin 500mg tablets"

    def test_descriptor_normalized(self):
        vocab, _ = _vocab("ICD10\tH36.0\tDiabetic   RETINOPATHY \n")
        assert descriptor_for(vocab, ICD10, "H36.0") == "diabetic retinopathy"

    def test_idempotent_reload(self):
        text = (
            "ICD10\tE11.9\ttype 2 diabetes mellitus\n"
            "SNOMED_CT\t4855003\tretinopathy due to diabetes mellitus\n"
        )
        once, _ = _vocab(text)
        twice, _ = _vocab(text + text)
        assert once == twice

    def test_lookup_absent_returns_none(self):
        vocab, _ = _vocab("ICD10\tE11.9\tsomething\n")
        assert descriptor_for(vocab, ICD10, "Z99") is None


words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=8)
descriptors = st.lists(words, min_size=1, max_size=5).map(" ".join)
codes = st.text(alphabet="ABCDEFGHIJ0123456789.", min_size=1, max_size=10)
systems = st.sampled_from(["SNOMED_CT", "ICD10", "BNF", "OPCS4", "READ2"])


@settings(max_examples=50)
@given(
    st.dictionaries(st.tuples(systems, codes), descriptors, min_size=1, max_size=30)
)
def test_round_trip_property(entries):
    lines = "".join(
        f"{system}\t{code}\t{descriptor}\n"
        for (system, code), descriptor in entries.items()
    )
    vocab, skipped = _vocab(lines)
    assert skipped == 0
    for (system, code), descriptor in entries.items():
        got = descriptor_for(vocab, CodeSystem.parse(system), code)
        assert got == normalize_descriptor(descriptor)


def test_round_trip_over_1000_random_entries():
    import random

    rng = random.Random(42)
    entries = {}
    while len(entries) < 1000:
        system = rng.choice(["SNOMED_CT", "ICD10", "BNF", "OPCS4"])
        code = f"C{rng.randrange(10**6)}"
        entries[(system, code)] = " ".join(
            rng.choice(["acute", "chronic", "disorder", "of", "left", "right", "kidney"])
            for _ in range(rng.randint(1, 5))
        )
    lines = "".join(f"{s}\t{c}\t{d}\n" for (s, c), d in entries.items())
    vocab, _ = _vocab(lines)
    for (s, c), d in entries.items():
        assert descriptor_for(vocab, CodeSystem.parse(s), c) == normalize_descriptor(d)


class TestLoadCodelist:
    def test_two_members(self):
        lists = load_codelist(
            io.StringIO(
                "retinopathy\tICD10\tH36.0\nretinopathy\tSNOMED_CT\t4855003\n"
            )
        )
        assert set(lists) == {"retinopathy"}
        assert len(lists["retinopathy"]) == 2

    def test_duplicate_member_collapses(self):
        lists = load_codelist(
            io.StringIO("retinopathy\tICD10\tH36.0\nretinopathy\tICD10\tH36.0\n")
        )
        assert len(lists["retinopathy"]) == 1

    def test_four_phenotypes_ten_codes_shuffled(self):
        import random

        rng = random.Random(7)
        rows = [
            (phenotype, "ICD10", f"{phenotype[:3].upper()}{i}")
            for phenotype in ("t2dm", "retinopathy", "nephropathy", "neuropathy")
            for i in range(10)
        ]
        rng.shuffle(rows)
        lists = load_codelist(io.StringIO("".join(f"{p}\t{s}\t{c}\n" for p, s, c in rows)))
        assert len(lists) == 4
        assert all(len(cl) == 10 for cl in lists.values())

    def test_order_independent(self):
        rows = [
            "t2dm\tICD10\tE11.9\n",
            "t2dm\tSNOMED_CT\t44054006\n",
            "retinopathy\tICD10\tH36.0\n",
        ]
        forward = load_codelist(io.StringIO("".join(rows)))
        backward = load_codelist(io.StringIO("".join(reversed(rows))))
        assert forward == backward

    def test_unknown_system(self):
        with pytest.raises(UnknownSystem):
            load_codelist(io.StringIO("t2dm\t \tE11.9\n"))

    def test_empty_file(self):
        with pytest.raises(EmptyFile):
            load_codelist(io.StringIO("phenotype\tsystem\tcode\n"))
