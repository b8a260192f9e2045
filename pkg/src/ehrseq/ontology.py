"""Clinical vocabularies and phenotype codelists.

Maps (code system, code) pairs to canonical textual descriptors and groups
codes into named phenotype definitions. Both structures are immutable after
loading and safe to share across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

KNOWN_SYSTEMS = ("SNOMED_CT", "ICD10", "BNF", "OPCS4")

_WHITESPACE = re.compile(r"\s+")


class OntologyError(ValueError):
    """Base class for vocabulary/codelist loading failures."""


class DuplicateConflict(OntologyError):
    """Same (system, code) ingested with two different descriptors."""


class EmptyDescriptor(OntologyError):
    """Vocabulary line whose descriptor field is blank."""


class UnknownSystem(OntologyError):
    """Code-system field that cannot be parsed (blank/whitespace)."""


class EmptyFile(OntologyError):
    """Codelist input with no valid lines."""


@dataclass(frozen=True)
class CodeSystem:
    """A clinical code ontology; closed set of variants plus OTHER(name)."""

    variant: str
    other_name: str = ""

    def __post_init__(self) -> None:
        if self.variant == "OTHER":
            if not self.other_name:
                raise ValueError("OTHER code system requires a non-empty name")
        elif self.variant not in KNOWN_SYSTEMS:
            raise ValueError(f"unknown code system variant: {self.variant!r}")
        elif self.other_name:
            raise ValueError("other_name is only valid for the OTHER variant")

    @classmethod
    def parse(cls, text: str) -> "CodeSystem":
        """Parse a system field. Known names match case-insensitively with
        '-'/' ' treated as '_'; any other non-empty string becomes OTHER."""
        name = text.strip()
        if not name:
            raise UnknownSystem("blank code system field")
        canonical = name.upper().replace("-", "_").replace(" ", "_")
        if canonical in KNOWN_SYSTEMS:
            return cls(canonical)
        return cls("OTHER", name)

    @property
    def label(self) -> str:
        return self.other_name if self.variant == "OTHER" else self.variant

    def __str__(self) -> str:
        return self.label


SNOMED_CT = CodeSystem("SNOMED_CT")
ICD10 = CodeSystem("ICD10")
BNF = CodeSystem("BNF")
OPCS4 = CodeSystem("OPCS4")


def normalize_descriptor(text: str) -> str:
    """Lowercase and collapse any whitespace run (tabs, newlines) to one space."""
    return _WHITESPACE.sub(" ", text).strip().lower()


@dataclass(frozen=True)
class VocabEntry:
    system: CodeSystem
    code: str
    descriptor: str


@dataclass(frozen=True)
class Codelist:
    """A phenotype definition: a named, non-empty set of (system, code) pairs."""

    phenotype: str
    members: frozenset[tuple[CodeSystem, str]]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError(f"codelist {self.phenotype!r} has no members")

    def __contains__(self, item: tuple[CodeSystem, str]) -> bool:
        return item in self.members

    def __len__(self) -> int:
        return len(self.members)


class VocabMap:
    """Immutable lookup from (system, code) to its ingested descriptor."""

    def __init__(self, entries: dict[tuple[CodeSystem, str], str] | None = None):
        self._entries: dict[tuple[CodeSystem, str], str] = dict(entries or {})

    def get(self, system: CodeSystem, code: str) -> Optional[str]:
        return self._entries.get((system, code))

    def __contains__(self, key: tuple[CodeSystem, str]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[VocabEntry]:
        for (system, code), descriptor in self._entries.items():
            yield VocabEntry(system, code, descriptor)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VocabMap):
            return NotImplemented
        return self._entries == other._entries


def _data_lines(stream: Iterable[str], header_field: str) -> Iterator[list[str]]:
    """Yield split TSV fields, skipping blank lines and an optional header
    (detected by the literal first field)."""
    first = True
    for raw in stream:
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if first:
            first = False
            if fields[0].strip().lower() == header_field:
                continue
        yield fields


def load_vocab(stream: Iterable[str]) -> tuple[VocabMap, int]:
    """Load a `system<TAB>code<TAB>descriptor` vocabulary.

    Descriptors are lowercased with whitespace collapsed. Returns the map and
    the count of skipped malformed lines (wrong field count, blank system or
    code). Identical restatements of an entry are deduplicated.

    Raises DuplicateConflict if one (system, code) carries two different
    descriptors, and EmptyDescriptor for a line with a blank third field.
    """
    entries: dict[tuple[CodeSystem, str], str] = {}
    skipped = 0
    for fields in _data_lines(stream, "system"):
        if len(fields) != 3:
            skipped += 1
            continue
        system_raw, code_raw, descriptor_raw = fields
        code = code_raw.strip()
        try:
            system = CodeSystem.parse(system_raw)
        except UnknownSystem:
            skipped += 1
            continue
        if not code:
            skipped += 1
            continue
        if not descriptor_raw.strip():
            raise EmptyDescriptor(f"blank descriptor for ({system}, {code})")
        descriptor = normalize_descriptor(descriptor_raw)
        key = (system, code)
        existing = entries.get(key)
        if existing is not None and existing != descriptor:
            raise DuplicateConflict(
                f"({system}, {code}) maps to both {existing!r} and {descriptor!r}"
            )
        entries[key] = descriptor
    return VocabMap(entries), skipped


def load_codelist(stream: Iterable[str]) -> dict[str, Codelist]:
    """Load `phenotype<TAB>system<TAB>code` lines into one Codelist per
    distinct phenotype. Duplicate members collapse; malformed lines (wrong
    field count or blank phenotype/code) are skipped.

    Raises UnknownSystem on a blank system field and EmptyFile when no valid
    line is present.
    """
    members: dict[str, set[tuple[CodeSystem, str]]] = {}
    for fields in _data_lines(stream, "phenotype"):
        if len(fields) != 3:
            continue
        phenotype = fields[0].strip().lower()
        code = fields[2].strip()
        if not phenotype or not code:
            continue
        system = CodeSystem.parse(fields[1])
        members.setdefault(phenotype, set()).add((system, code))
    if not members:
        raise EmptyFile("no valid codelist lines")
    return {
        phenotype: Codelist(phenotype, frozenset(codes))
        for phenotype, codes in members.items()
    }


def descriptor_for(
    vocab: VocabMap, system: CodeSystem, code: str
) -> Optional[str]:
    """Return the ingested descriptor for (system, code), or None if absent."""
    return vocab.get(system, code)
