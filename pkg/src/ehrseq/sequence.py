"""Serialization of patient windows and subword tokenization.

TEXT mode joins event descriptors chronologically into one sentence per
patient; CODE mode joins the raw codes. The tokenizer induces a subword
vocabulary by greedy pair merging over whitespace-pretokenized words, with a
"##" prefix marking word-internal continuation pieces. Encoding always keeps
the leading classifier token and truncates the requested side of the body.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .ingest import ClinicalEvent
from .ontology import VocabMap, normalize_descriptor

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
SPECIALS = (CLS_TOKEN, PAD_TOKEN, UNK_TOKEN)
CONTINUATION = "##"


class SequenceError(Exception):
    """Base class for serialization/tokenization failures."""


class MissingDescriptor(SequenceError):
    """TEXT-mode event whose descriptor cannot be resolved."""


class VocabTooSmall(SequenceError):
    """Vocabulary budget below alphabet + specials."""


class Mode(enum.Enum):
    TEXT = "TEXT"
    CODE = "CODE"


class TruncationSide(enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


@dataclass(frozen=True)
class SerializedRecord:
    patient_id: str
    mode: Mode
    body: str


def serialize(
    events: Sequence[ClinicalEvent],
    mode: Mode,
    vocab: Optional[VocabMap] = None,
) -> SerializedRecord:
    """Join per-event strings with single spaces, in the given event order.

    TEXT mode uses each event's descriptor, falling back to a vocabulary
    lookup; CODE mode uses the raw code strings. Raises MissingDescriptor
    (naming the event) when a TEXT-mode event cannot be resolved.
    """
    patient_id = events[0].patient_id if events else ""
    parts: list[str] = []
    for event in events:
        if mode is Mode.CODE:
            parts.append(event.code)
            continue
        descriptor = event.descriptor
        if not descriptor and vocab is not None:
            descriptor = vocab.get(event.system, event.code)
        if not descriptor:
            raise MissingDescriptor(
                f"no descriptor for event (patient={event.patient_id}, "
                f"date={event.date}, system={event.system}, code={event.code})"
            )
        parts.append(normalize_descriptor(descriptor))
    return SerializedRecord(patient_id=patient_id, mode=mode, body=" ".join(parts))


def _strip(symbol: str) -> str:
    return symbol[len(CONTINUATION):] if symbol.startswith(CONTINUATION) else symbol


def _word_symbols(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + ch for ch in word[1:]]


def _apply_merge(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    """Merge every non-overlapping left-to-right occurrence of the content
    pair; the merged symbol keeps the left side's continuation marker."""
    out: list[str] = []
    i = 0
    while i < len(symbols):
        if (
            i + 1 < len(symbols)
            and _strip(symbols[i]) == pair[0]
            and _strip(symbols[i + 1]) == pair[1]
        ):
            out.append(symbols[i] + _strip(symbols[i + 1]))
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


class Tokenizer:
    """Subword tokenizer: dense ids, specials at 0..2, ordered merge list.

    Merges are identified by character content; surface forms (word-initial
    vs "##"-continuation) share the merge table but hold distinct ids.
    """

    def __init__(self, tokens: list[str], merges: list[tuple[str, str]]):
        if list(tokens[:3]) != list(SPECIALS):
            raise ValueError("first three tokens must be the specials")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token strings")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.merges = list(merges)
        self._ranks = {pair: rank for rank, pair in enumerate(self.merges)}
        self._word_cache: dict[str, list[int]] = {}

    @property
    def cls_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.tokens)

    def _encode_word(self, word: str) -> list[int]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols = _word_symbols(word)
        while len(symbols) > 1:
            best_rank = None
            best_pair = None
            for a, b in zip(symbols, symbols[1:]):
                rank = self._ranks.get((_strip(a), _strip(b)))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pair = (_strip(a), _strip(b))
            if best_pair is None:
                break
            symbols = _apply_merge(symbols, best_pair)
        ids = [self.token_to_id.get(s, self.unk_id) for s in symbols]
        self._word_cache[word] = ids
        return ids

    def encode_body(self, body: str) -> list[int]:
        ids: list[int] = []
        for word in body.split():
            ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Rebuild text from non-special ids: continuation pieces attach to
        the current word, other pieces start a new space-separated word."""
        words: list[str] = []
        for i in ids:
            token = self.tokens[i]
            if token in SPECIALS:
                continue
            if token.startswith(CONTINUATION) and words:
                words[-1] += _strip(token)
            else:
                words.append(_strip(token))
        return " ".join(words)

    def content_hash(self) -> str:
        import hashlib

        payload = "\n".join(self.tokens) + "\0" + "\n".join(
            f"{a} {b}" for a, b in self.merges
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        """One token per line (line number = id, specials first), then a
        blank-line sentinel, then the merge list."""
        with Path(path).open("w", encoding="utf-8") as fh:
            for token in self.tokens:
                fh.write(token + "\n")
            fh.write("\n")
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Tokenizer":
        tokens: list[str] = []
        merges: list[tuple[str, str]] = []
        with Path(path).open("r", encoding="utf-8") as fh:
            in_merges = False
            for raw in fh:
                line = raw.rstrip("\n")
                if not in_merges:
                    if line == "":
                        in_merges = True
                        continue
                    tokens.append(line)
                elif line:
                    a, b = line.split(" ")
                    merges.append((a, b))
        return cls(tokens, merges)


def train_tokenizer(corpus: Iterable[str], target_vocab_size: int) -> Tokenizer:
    """Induce a subword vocabulary by greedy pair merging.

    The most frequent adjacent content pair is merged each round (ties to the
    lexicographically smaller pair); a merge registers the surface forms it
    actually produces and the loop stops before exceeding the budget. Raises
    VocabTooSmall if the budget cannot hold the alphabet plus specials.
    """
    word_counts: Counter[str] = Counter()
    for body in corpus:
        word_counts.update(body.split())
    tokens: list[str] = list(SPECIALS)
    token_set = set(tokens)
    word_symbols: dict[str, list[str]] = {}
    for word in word_counts:
        symbols = _word_symbols(word)
        word_symbols[word] = symbols
        for s in symbols:
            if s not in token_set:
                token_set.add(s)
                tokens.append(s)
    if target_vocab_size < len(tokens):
        raise VocabTooSmall(
            f"target {target_vocab_size} below alphabet+specials ({len(tokens)})"
        )
    merges: list[tuple[str, str]] = []
    while len(tokens) < target_vocab_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, symbols in word_symbols.items():
            n = word_counts[word]
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(_strip(a), _strip(b))] += n
        if not pair_counts:
            break
        best_pair = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        new_forms: list[str] = []
        merged: dict[str, list[str]] = {}
        for word, symbols in word_symbols.items():
            updated = _apply_merge(symbols, best_pair)
            if len(updated) != len(symbols):
                merged[word] = updated
                for s in updated:
                    if s not in token_set and s not in new_forms:
                        new_forms.append(s)
        if not merged:
            break
        if len(tokens) + len(new_forms) > target_vocab_size:
            break
        word_symbols.update(merged)
        for s in new_forms:
            token_set.add(s)
            tokens.append(s)
        merges.append(best_pair)
    return Tokenizer(tokens, merges)


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray
    original_length: int
    truncation_side: TruncationSide

    @property
    def truncated(self) -> bool:
        return self.original_length > len(self.ids)


def encode(
    tok: Tokenizer,
    record: SerializedRecord,
    max_len: int = 512,
    side: TruncationSide = TruncationSide.LEFT,
) -> TokenSequence:
    """Encode a record to a fixed-length id vector with attention mask.

    The classifier token always occupies position 0. Over-length bodies keep
    their first max_len-1 tokens under RIGHT truncation and their last
    max_len-1 under LEFT; original_length records the pre-truncation count
    (classifier token included).
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    body_ids = tok.encode_body(record.body)
    original_length = 1 + len(body_ids)
    budget = max_len - 1
    if len(body_ids) > budget:
        body_ids = body_ids[:budget] if side is TruncationSide.RIGHT else body_ids[-budget:]
    ids = np.full(max_len, tok.pad_id, dtype=np.int64)
    ids[0] = tok.cls_id
    ids[1 : 1 + len(body_ids)] = body_ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: 1 + len(body_ids)] = 1
    return TokenSequence(
        ids=ids, mask=mask, original_length=original_length, truncation_side=side
    )


@dataclass
class TokenLengthStats:
    median: float
    mean: float
    p90: float
    fraction_truncated: float
    n_records: int
    max_len: int
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    tokenizer: str = "ehrseq-bpe"

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "mean": self.mean,
            "p90": self.p90,
            "fraction_truncated": self.fraction_truncated,
            "n_records": self.n_records,
            "max_len": self.max_len,
            "tokenizer": self.tokenizer,
        }


def token_length_stats(
    corpus: Sequence[SerializedRecord],
    tok: Tokenizer,
    max_len: int = 512,
    histogram_path: Optional[Union[str, Path]] = None,
    n_bins: int = 50,
) -> TokenLengthStats:
    """Distribution of pre-truncation token counts (classifier token
    included) over a corpus; optionally writes a histogram CSV for plotting.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    lengths = np.array(
        [1 + len(tok.encode_body(r.body)) for r in corpus], dtype=np.int64
    )
    counts, edges = np.histogram(lengths, bins=n_bins)
    stats = TokenLengthStats(
        median=float(np.median(lengths)),
        mean=float(lengths.mean()),
        p90=float(np.percentile(lengths, 90)),
        fraction_truncated=float((lengths > max_len).mean()),
        n_records=int(len(lengths)),
        max_len=max_len,
        histogram_edges=edges,
        histogram_counts=counts,
    )
    if histogram_path is not None:
        with Path(histogram_path).open("w", encoding="utf-8") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{lo},{hi},{int(c)}\n")
    return stats
