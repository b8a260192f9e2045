import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehrseq.ontology import load_vocab
from ehrseq.sequence import (
    Mode,
    MissingDescriptor,
    SerializedRecord,
    TokenSequence,
    TruncationSide,
    Tokenizer,
    VocabTooSmall,
    encode,
    serialize,
    token_length_stats,
    train_tokenizer,
)

from conftest import make_event


class TestSerialize:
    def test_text_joins_descriptors_chronologically(self):
        events = [
            make_event(
                when="2010-01-01",
                descriptor="type 2 diabetes mellitus without complications",
            ),
            make_event(when="2011-01-01", descriptor="metformin 500mg tablets"),
        ]
        record = serialize(events, Mode.TEXT)
        assert record.body == (
            "type 2 diabetes mellitus without complications metformin 500mg tablets"
        )

    def test_empty_events(self):
        assert serialize([], Mode.TEXT).body == ""

    def test_code_mode_matches_column_join_oracle(self):
        events = [
            make_event(when="2010-01-01", code="E11.9", descriptor=None),
            make_event(when="2011-01-01", code="0601022B0", descriptor=None),
        ]
        record = serialize(events, Mode.CODE)
        assert record.body == " ".join(e.code for e in events)

    def test_text_falls_back_to_vocab(self):
        vocab, _ = load_vocab(io.StringIO("SNOMED_CT\tC1\tresolved from vocab\n"))
        events = [make_event(code="C1", descriptor=None)]
        assert serialize(events, Mode.TEXT, vocab).body == "resolved from vocab"

    def test_missing_descriptor_names_event(self):
        events = [make_event(code="C404", descriptor=None)]
        with pytest.raises(MissingDescriptor, match="C404"):
            serialize(events, Mode.TEXT)

    def test_descriptor_normalized(self):
        events = [make_event(descriptor="Mixed  CASE   text")]
        assert serialize(events, Mode.TEXT).body == "mixed case text"


class TestTrainTokenizer:
    def test_single_merge_learns_aa(self):
        # alphabet {a, ##a} + 3 specials = 5; one merge adds "aa" and "##aa"
        tok = train_tokenizer(["aaaa"], 7)
        assert "aa" in tok.tokens
        assert tok.merges == [("a", "a")]

    def test_zero_merge_budget_splits_to_characters(self):
        tok = train_tokenizer(["abc ab"], 3 + 3)  # alphabet: a, ##b, ##c
        assert tok.merges == []
        ids = tok.encode_body("abc")
        assert [tok.tokens[i] for i in ids] == ["a", "##b", "##c"]

    def test_retrain_is_deterministic(self):
        corpus = ["the cat sat on the mat", "the bat and the cat"]
        a = train_tokenizer(corpus, 40)
        b = train_tokenizer(corpus, 40)
        assert a.tokens == b.tokens and a.merges == b.merges

    def test_budget_too_small(self):
        with pytest.raises(VocabTooSmall):
            train_tokenizer(["abcdef"], 4)

    def test_specials_reserved(self):
        tok = train_tokenizer(["ab"], 10)
        assert tok.tokens[:3] == ["[CLS]", "[PAD]", "[UNK]"]
        assert (tok.cls_id, tok.pad_id, tok.unk_id) == (0, 1, 2)

    def test_never_exceeds_budget(self):
        corpus = ["repeat repeat repeats", "repeated repeating"]
        for budget in range(13, 60, 5):
            tok = train_tokenizer(corpus, budget)
            assert len(tok) <= budget

    def test_unknown_characters_map_to_unk(self):
        tok = train_tokenizer(["abc"], 12)
        ids = tok.encode_body("xyz")
        assert ids == [tok.unk_id] * 3


class TestEncode:
    def _tok(self):
        return train_tokenizer(["a b c d e f g h"], 20)

    def test_padding_case(self):
        tok = self._tok()
        record = SerializedRecord("p", Mode.TEXT, "a b c")
        seq = encode(tok, record, max_len=8, side=TruncationSide.LEFT)
        assert seq.ids[0] == tok.cls_id
        assert list(seq.mask) == [1, 1, 1, 1, 0, 0, 0, 0]
        assert all(seq.ids[i] == tok.pad_id for i in range(4, 8))
        assert seq.original_length == 4
        assert not seq.truncated

    def test_left_keeps_most_recent(self):
        corpus = ["a" * 600]
        tok = train_tokenizer(corpus, 5)  # chars only
        record = SerializedRecord("p", Mode.TEXT, "a" * 600)
        seq = encode(tok, record, max_len=512, side=TruncationSide.LEFT)
        assert seq.original_length == 601
        assert seq.ids[0] == tok.cls_id
        assert seq.mask.sum() == 512
        assert seq.truncated

    def test_reconstruction_oracle(self):
        # LEFT keeps the last k body tokens, RIGHT the first k; together they
        # reconstruct the original stream
        tok = train_tokenizer([" ".join("abcdefgh")], 30)
        body = " ".join(np.random.default_rng(0).choice(list("abcdefgh"), 600))
        record = SerializedRecord("p", Mode.TEXT, body)
        full = tok.encode_body(body)
        left = encode(tok, record, max_len=512, side=TruncationSide.LEFT)
        right = encode(tok, record, max_len=512, side=TruncationSide.RIGHT)
        k = 511
        assert list(right.ids[1:]) == full[:k]
        assert list(left.ids[1:]) == full[-k:]
        reconstructed = full[:k] + full[-k:][k - len(full):]
        assert reconstructed == full

    def test_sides_agree_when_short(self):
        tok = self._tok()
        record = SerializedRecord("p", Mode.TEXT, "a b c d")
        left = encode(tok, record, max_len=16, side=TruncationSide.LEFT)
        right = encode(tok, record, max_len=16, side=TruncationSide.RIGHT)
        assert np.array_equal(left.ids, right.ids)
        assert np.array_equal(left.mask, right.mask)

    def test_mask_is_prefix_of_ones(self):
        tok = self._tok()
        for body in ("", "a", "a b c d e f g h a b c"):
            seq = encode(tok, SerializedRecord("p", Mode.TEXT, body), max_len=6)
            mask = list(seq.mask)
            assert mask == sorted(mask, reverse=True)
            assert seq.ids[0] == tok.cls_id


words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=6)
bodies = st.lists(words, min_size=1, max_size=20).map(" ".join)


@settings(max_examples=40, deadline=None)
@given(st.lists(bodies, min_size=1, max_size=8), st.integers(0, 40))
def test_round_trip_decode(corpus, extra_budget):
    tok = train_tokenizer(corpus, 3 + 60 + extra_budget)
    body = corpus[0]
    seq = encode(tok, SerializedRecord("p", Mode.TEXT, body), max_len=2048)
    assert seq.original_length <= 2048
    assert tok.decode(seq.ids) == body


def test_tokenizer_save_load_roundtrip(tmp_path):
    tok = train_tokenizer(["the cat sat on the mat", "a bat"], 40)
    path = tmp_path / "tokenizer.txt"
    tok.save(path)
    loaded = Tokenizer.load(path)
    assert loaded.tokens == tok.tokens
    assert loaded.merges == tok.merges
    assert loaded.encode_body("the cat") == tok.encode_body("the cat")
    assert loaded.content_hash() == tok.content_hash()


class TestTokenLengthStats:
    def test_degenerate_distribution(self):
        tok = train_tokenizer(["a b c"], 10)
        corpus = [SerializedRecord("p", Mode.TEXT, "a b c")] * 5
        stats = token_length_stats(corpus, tok, max_len=8)
        assert stats.median == 4.0
        assert stats.fraction_truncated == 0.0
        long_corpus = [SerializedRecord("p", Mode.TEXT, "a b c " * 10)] * 5
        stats = token_length_stats(long_corpus, tok, max_len=8)
        assert stats.fraction_truncated == 1.0

    def test_recount_oracle(self):
        rng = np.random.default_rng(4)
        tok = train_tokenizer(["alpha beta gamma delta"], 40)
        corpus = [
            SerializedRecord(
                "p",
                Mode.TEXT,
                " ".join(rng.choice(["alpha", "beta", "gamma", "delta"], rng.integers(1, 30))),
            )
            for _ in range(1000)
        ]
        stats = token_length_stats(corpus, tok, max_len=16)
        lengths = np.array([1 + len(tok.encode_body(r.body)) for r in corpus])
        assert stats.median == float(np.median(lengths))
        assert stats.mean == pytest.approx(float(lengths.mean()))
        assert stats.p90 == float(np.percentile(lengths, 90))
        assert stats.fraction_truncated == float((lengths > 16).mean())

    def test_histogram_file(self, tmp_path):
        tok = train_tokenizer(["a b"], 10)
        corpus = [SerializedRecord("p", Mode.TEXT, "a b")] * 3
        path = tmp_path / "hist.csv"
        stats = token_length_stats(corpus, tok, max_len=8, histogram_path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count"
        assert sum(int(l.split(",")[2]) for l in lines[1:]) == 3
        assert stats.histogram_counts.sum() == 3
