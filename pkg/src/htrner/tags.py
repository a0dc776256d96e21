"""Semantic tag encoding of annotated transcripts.

A record (a list of words, each carrying a semantic category and a person
role) is flattened into one symbol sequence that interleaves characters,
a word separator and tag symbols.  Four tag layouts are supported:

``open_close``
    ``<location> <husband> B a r a </husband> </location>``
``single_separate``
    ``<location/> <husband/> B a r a``
``change_of_person``
    ``<husband/> <location/> B a r a`` where the person tag is only written
    when the person differs from the one currently in force.
``combined``
    ``<location_husband/> B a r a``

Decoding is total: malformed sequences, as produced by a greedy CTC decoder,
are repaired instead of rejected unless ``strict=True``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class SemanticCategory(str, enum.Enum):
    NAME = "name"
    SURNAME = "surname"
    OCCUPATION = "occupation"
    LOCATION = "location"
    CIVIL_STATE = "civil_state"
    OTHER = "other"


class PersonRole(str, enum.Enum):
    WIFE = "wife"
    HUSBAND = "husband"
    WIFES_FATHER = "wifes_father"
    WIFES_MOTHER = "wifes_mother"
    HUSBANDS_FATHER = "husbands_father"
    HUSBANDS_MOTHER = "husbands_mother"
    OTHER_PERSON = "other_person"
    NONE = "none"


class TagScheme(str, enum.Enum):
    OPEN_CLOSE = "open_close"
    SINGLE_SEPARATE = "single_separate"
    CHANGE_OF_PERSON = "change_of_person"
    COMBINED = "combined"


ENCODABLE_CATEGORIES = tuple(c for c in SemanticCategory if c is not SemanticCategory.OTHER)
ENCODABLE_PERSONS = tuple(p for p in PersonRole if p is not PersonRole.NONE)

BLANK = "<blank>"
SPACE = "<space>"


class CodecError(ValueError):
    """Raised for unencodable input or, in strict mode, malformed sequences."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at symbol {position})")
        self.position = position


@dataclass(frozen=True)
class AnnotatedWord:
    transcript: str
    category: SemanticCategory = SemanticCategory.OTHER
    person: PersonRole = PersonRole.NONE

    def __post_init__(self):
        if not self.transcript:
            raise ValueError("empty transcript")
        if any(ch.isspace() for ch in self.transcript):
            raise ValueError(f"whitespace in transcript {self.transcript!r}")
        object.__setattr__(self, "category", SemanticCategory(self.category))
        object.__setattr__(self, "person", PersonRole(self.person))

    def to_json(self) -> dict:
        return {
            "transcript": self.transcript,
            "category": self.category.value,
            "person": self.person.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotatedWord":
        return cls(obj["transcript"], SemanticCategory(obj["category"]), PersonRole(obj["person"]))


@dataclass(frozen=True)
class AnnotatedRecord:
    words: tuple[AnnotatedWord, ...]
    record_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))

    def __len__(self) -> int:
        return len(self.words)

    def text(self) -> str:
        return " ".join(w.transcript for w in self.words)


# Tag surface forms -------------------------------------------------------


def open_tag(label: str) -> str:
    return f"<{label}>"


def close_tag(label: str) -> str:
    return f"</{label}>"


def single_tag(label: str) -> str:
    return f"<{label}/>"


def combined_tag(category: SemanticCategory, person: PersonRole) -> str:
    return f"<{category.value}_{person.value}/>"


@dataclass(frozen=True)
class TagMeaning:
    """What a tag symbol says about the word it is attached to."""

    kind: str  # "open", "close", "single"
    category: SemanticCategory | None = None
    person: PersonRole | None = None


def parse_tag(symbol: str) -> TagMeaning | None:
    """Interpret a tag surface form; ``None`` if ``symbol`` is not a tag."""
    if len(symbol) < 3 or not (symbol.startswith("<") and symbol.endswith(">")):
        return None
    if symbol in (BLANK, SPACE):
        return None
    if symbol.startswith("</"):
        kind, body = "close", symbol[2:-1]
    elif symbol.endswith("/>"):
        kind, body = "single", symbol[1:-2]
    else:
        kind, body = "open", symbol[1:-1]
    cats = {c.value: c for c in SemanticCategory}
    persons = {p.value: p for p in PersonRole}
    if body in cats:
        return TagMeaning(kind, category=cats[body])
    if body in persons:
        return TagMeaning(kind, person=persons[body])
    if kind == "single":
        for cname, cat in cats.items():
            prefix = cname + "_"
            if body.startswith(prefix) and body[len(prefix):] in persons:
                return TagMeaning(kind, category=cat, person=persons[body[len(prefix):]])
    return None


def scheme_tags(scheme: TagScheme, pairs: Iterable[tuple[SemanticCategory, PersonRole]] = ()) -> list[str]:
    """Tag symbols a scheme can emit.  ``pairs`` is only used by ``combined``."""
    scheme = TagScheme(scheme)
    if scheme is TagScheme.OPEN_CLOSE:
        labels = [c.value for c in ENCODABLE_CATEGORIES] + [p.value for p in ENCODABLE_PERSONS]
        return [t for lab in labels for t in (open_tag(lab), close_tag(lab))]
    if scheme in (TagScheme.SINGLE_SEPARATE, TagScheme.CHANGE_OF_PERSON):
        labels = [c.value for c in ENCODABLE_CATEGORIES] + [p.value for p in ENCODABLE_PERSONS]
        return [single_tag(lab) for lab in labels]
    return [combined_tag(c, p) for c, p in pairs if c is not SemanticCategory.OTHER]


def table_matches_scheme(table: "SymbolTable", scheme: TagScheme | str) -> bool:
    """Whether every tag of ``table`` has a surface form that ``scheme`` emits."""
    scheme = TagScheme(scheme)
    for t in table.tags:
        m = parse_tag(t)
        pair = m.category is not None and m.person is not None
        if scheme is TagScheme.OPEN_CLOSE:
            ok = m.kind in ("open", "close")
        elif scheme is TagScheme.COMBINED:
            ok = m.kind == "single" and pair
        else:
            ok = m.kind == "single" and not pair
        if not ok:
            return False
    return True


def all_combined_pairs() -> list[tuple[SemanticCategory, PersonRole]]:
    return [(c, p) for c in ENCODABLE_CATEGORIES for p in PersonRole]


# Symbol table ------------------------------------------------------------


@dataclass(frozen=True)
class SymbolTable:
    """Ordered CTC output alphabet: blank, characters, space, tags."""

    symbols: tuple[str, ...]
    blank_index: int = 0
    space_index: int = field(init=False)
    tag_indices: frozenset[int] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in table")
        if self.symbols[self.blank_index] != BLANK:
            raise ValueError("blank symbol missing at blank_index")
        if SPACE not in self.symbols:
            raise ValueError("space symbol missing")
        object.__setattr__(self, "space_index", self.symbols.index(SPACE))
        tags = frozenset(i for i, s in enumerate(self.symbols) if parse_tag(s) is not None)
        object.__setattr__(self, "tag_indices", tags)
        for i, s in enumerate(self.symbols):
            if i in tags or s in (BLANK, SPACE):
                continue
            if len(s) != 1 or s.isspace():
                raise ValueError(f"character symbols must be single non-space characters: {s!r}")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def index(self, symbol: str) -> int:
        return self._index[symbol]

    def get(self, symbol: str) -> int | None:
        return self._index.get(symbol)

    @property
    def characters(self) -> list[str]:
        return [s for i, s in enumerate(self.symbols) if i not in self.tag_indices and s not in (BLANK, SPACE)]

    @property
    def tags(self) -> list[str]:
        return [self.symbols[i] for i in sorted(self.tag_indices)]

    def to_surface(self, indices: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in indices]

    def from_surface(self, symbols: Iterable[str]) -> list[int]:
        try:
            return [self._index[s] for s in symbols]
        except KeyError as exc:
            raise CodecError(f"unknown symbol {exc.args[0]!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SymbolTable":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_symbol_table(
    records: Sequence[AnnotatedRecord],
    scheme: TagScheme | str,
    closed_world: bool = False,
) -> SymbolTable:
    """Alphabet for ``records`` under ``scheme``.

    Layout is blank, characters by code point, space, then tags sorted
    lexicographically; the result does not depend on record order.  For the
    combined scheme only (category, person) pairs seen in ``records`` get a
    tag unless ``closed_world`` is set, which enumerates every pair.
    """
    scheme = TagScheme(scheme)
    if not records:
        raise ValueError("cannot build a symbol table from no records")
    chars: set[str] = set()
    pairs: set[tuple[SemanticCategory, PersonRole]] = set()
    for rec in records:
        for w in rec.words:
            chars.update(w.transcript)
            if w.category is not SemanticCategory.OTHER:
                pairs.add((w.category, w.person))
    if closed_world:
        pairs.update(all_combined_pairs())
    tags = sorted(scheme_tags(scheme, pairs))
    return SymbolTable((BLANK, *sorted(chars), SPACE, *tags))


# Encoding ----------------------------------------------------------------


def normalize(record: AnnotatedRecord, scheme: TagScheme | str) -> AnnotatedRecord:
    """The record as it reads back after an encode/decode roundtrip."""
    scheme = TagScheme(scheme)
    words = []
    if scheme is TagScheme.COMBINED:
        for w in record.words:
            if w.category is SemanticCategory.OTHER:
                w = AnnotatedWord(w.transcript, w.category, PersonRole.NONE)
            words.append(w)
    elif scheme is TagScheme.CHANGE_OF_PERSON:
        state = PersonRole.NONE
        for w in record.words:
            if w.person is not PersonRole.NONE:
                state = w.person
            words.append(AnnotatedWord(w.transcript, w.category, state))
    else:
        words = list(record.words)
    return AnnotatedRecord(tuple(words), record.record_id)


def _lookup(table: SymbolTable, symbol: str) -> int:
    idx = table.get(symbol)
    if idx is None:
        raise CodecError(f"tag {symbol!r} missing from symbol table")
    return idx


def encode_symbols(record: AnnotatedRecord | Sequence[AnnotatedWord], scheme: TagScheme | str) -> list[str]:
    """Surface-form symbol sequence for ``record`` (no table lookups)."""
    scheme = TagScheme(scheme)
    words = record.words if isinstance(record, AnnotatedRecord) else tuple(record)
    out: list[str] = []
    state = PersonRole.NONE
    for i, w in enumerate(words):
        if i:
            out.append(SPACE)
        has_cat = w.category is not SemanticCategory.OTHER
        has_person = w.person is not PersonRole.NONE
        chars = list(w.transcript)
        if scheme is TagScheme.OPEN_CLOSE:
            pre = ([open_tag(w.category.value)] if has_cat else []) + ([open_tag(w.person.value)] if has_person else [])
            post = ([close_tag(w.person.value)] if has_person else []) + ([close_tag(w.category.value)] if has_cat else [])
            out += pre + chars + post
        elif scheme is TagScheme.SINGLE_SEPARATE:
            if has_cat:
                out.append(single_tag(w.category.value))
            if has_person:
                out.append(single_tag(w.person.value))
            out += chars
        elif scheme is TagScheme.CHANGE_OF_PERSON:
            if has_person and w.person is not state:
                out.append(single_tag(w.person.value))
                state = w.person
            if has_cat:
                out.append(single_tag(w.category.value))
            out += chars
        else:
            if has_cat:
                out.append(combined_tag(w.category, w.person))
            out += chars
    return out


def encode(record: AnnotatedRecord | Sequence[AnnotatedWord], scheme: TagScheme | str, table: SymbolTable) -> list[int]:
    """Symbol indices of ``record`` under ``scheme``."""
    out = []
    for sym in encode_symbols(record, scheme):
        idx = table.get(sym)
        if idx is None:
            if parse_tag(sym) is not None:
                raise CodecError(f"tag {sym!r} missing from symbol table")
            raise CodecError(f"unknown character {sym!r}")
        out.append(idx)
    return out


# Decoding ----------------------------------------------------------------

# Tag order allowed before the characters of a word, per scheme.
_PREFIX_GRAMMAR = {
    TagScheme.OPEN_CLOSE: ("open:category", "open:person"),
    TagScheme.SINGLE_SEPARATE: ("single:category", "single:person"),
    TagScheme.CHANGE_OF_PERSON: ("single:person", "single:category"),
    TagScheme.COMBINED: ("single:pair",),
}


def _slot(meaning: TagMeaning) -> str:
    if meaning.category is not None and meaning.person is not None:
        return f"{meaning.kind}:pair"
    return f"{meaning.kind}:{'category' if meaning.category is not None else 'person'}"


def decode(
    symbols: Sequence[int],
    scheme: TagScheme | str,
    table: SymbolTable,
    strict: bool = False,
    record_id: str = "",
) -> AnnotatedRecord:
    """Rebuild an annotated record from a symbol index sequence.

    In repair mode (default) this never fails: close tags are only checked
    for balance in strict mode, the last tag of a kind wins, open tags are
    implicitly closed at the next space, and labels given to an empty word
    carry over to the following word.  Untagged words come out as
    ``(other, none)``.  With ``strict=True`` the first grammar violation is
    raised as :class:`CodecError` carrying its position.
    """
    scheme = TagScheme(scheme)
    grammar = _PREFIX_GRAMMAR[scheme]
    words: list[AnnotatedWord] = []

    chars: list[str] = []
    category: SemanticCategory | None = None
    person: PersonRole | None = None
    person_state = PersonRole.NONE
    prefix_pos = 0  # next admissible prefix slot (strict mode)
    open_stack: list[str] = []
    closing = False  # saw a close tag after the characters

    def fail(msg: str, pos: int):
        if strict:
            raise CodecError(msg, pos)

    def finish(pos: int) -> None:
        nonlocal chars, category, person, prefix_pos, open_stack, closing
        if open_stack:
            fail(f"unclosed tag {open_stack[-1]!r}", pos)
        if not chars:
            fail("empty word", pos)
            open_stack = []
            closing = False
            prefix_pos = 0
            return  # keep pending labels for the next word
        cat = category or SemanticCategory.OTHER
        if scheme is TagScheme.CHANGE_OF_PERSON:
            per = person_state
        else:
            per = person or PersonRole.NONE
        words.append(AnnotatedWord("".join(chars), cat, per))
        chars, category, person = [], None, None
        prefix_pos, open_stack, closing = 0, [], False

    for pos, idx in enumerate(symbols):
        if idx < 0 or idx >= len(table):
            fail(f"symbol index {idx} out of range", pos)
            continue
        if idx == table.blank_index:
            fail("blank symbol in decoder input", pos)
            continue
        if idx == table.space_index:
            if pos == 0 or pos == len(symbols) - 1:
                fail("leading or trailing space", pos)
            finish(pos)
            continue
        sym = table.symbols[idx]
        meaning = parse_tag(sym) if idx in table.tag_indices else None
        if meaning is None:
            if closing:
                fail("character after closing tag", pos)
            chars.append(sym)
            continue

        slot = _slot(meaning)
        if meaning.kind == "close":
            label = sym[2:-1]
            if scheme is not TagScheme.OPEN_CLOSE:
                fail(f"close tag {sym!r} not used by scheme {scheme.value}", pos)
            elif not chars:
                fail(f"close tag {sym!r} before word characters", pos)
            elif not open_stack or open_stack[-1] != label:
                fail(f"unmatched close tag {sym!r}", pos)
            else:
                open_stack.pop()
            closing = True
            continue

        if strict:
            if chars:
                fail(f"tag {sym!r} inside a word", pos)
            if slot not in grammar[prefix_pos:]:
                fail(f"tag {sym!r} out of place for scheme {scheme.value}", pos)
            prefix_pos = grammar.index(slot) + 1
            if meaning.kind == "open":
                open_stack.append(sym[1:-1])
        if meaning.category is not None:
            category = meaning.category
        if meaning.person is not None:
            person = meaning.person
            if scheme is TagScheme.CHANGE_OF_PERSON:
                person_state = meaning.person

    if chars or category is not None or person is not None or open_stack:
        finish(len(symbols))
    return AnnotatedRecord(tuple(words), record_id)


def decode_surface(symbols: Sequence[str], scheme: TagScheme | str, table: SymbolTable, strict: bool = False) -> AnnotatedRecord:
    return decode(table.from_surface(symbols), scheme, table, strict=strict)
