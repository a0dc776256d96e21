import pytest
from hypothesis import given, settings

from conftest import random_record, records
from htrner.tags import (
    BLANK,
    SPACE,
    AnnotatedRecord,
    AnnotatedWord,
    CodecError,
    PersonRole as P,
    SemanticCategory as C,
    SymbolTable,
    TagScheme,
    all_combined_pairs,
    build_symbol_table,
    decode,
    decode_surface,
    encode,
    encode_symbols,
    normalize,
    parse_tag,
    table_matches_scheme,
)

W = AnnotatedWord
SCHEMES = list(TagScheme)


def rec(*words):
    return AnnotatedRecord(tuple(W(*w) for w in words), "r")


def test_enumerations_have_expected_sizes():
    assert len(C) == 6 and C("other") is C.OTHER
    assert len(P) == 8 and P("none") is P.NONE
    assert len(TagScheme) == 4


def test_word_validation():
    with pytest.raises(ValueError):
        W("")
    with pytest.raises(ValueError):
        W("a b")
    assert W("Bara").category is C.OTHER and W("Bara").person is P.NONE


def test_minimal_combined_table():
    t = build_symbol_table([rec(("ab", C.NAME, P.WIFE))], TagScheme.COMBINED)
    assert t.symbols == (BLANK, "a", "b", SPACE, "<name_wife/>")
    assert t.blank_index == 0 and t.space_index == 3 and t.tag_indices == {4}


def test_open_close_table_counts_all_encodable_labels():
    t = build_symbol_table([rec(("x",))], TagScheme.OPEN_CLOSE)
    assert len(t.tags) == 2 * 5 + 2 * 7
    assert "<other>" not in t and "<none>" not in t
    assert "<location>" in t and "</husband>" in t


def test_single_tag_tables():
    for scheme in (TagScheme.SINGLE_SEPARATE, TagScheme.CHANGE_OF_PERSON):
        t = build_symbol_table([rec(("x",))], scheme)
        assert len(t.tags) == 5 + 7
        assert "<other_person/>" in t and "<none/>" not in t


def test_closed_world_combined_enumerates_all_pairs():
    t = build_symbol_table([rec(("x",))], TagScheme.COMBINED, closed_world=True)
    assert len(all_combined_pairs()) == 40
    assert len(t.tags) == 40


def test_table_is_deterministic_and_order_independent(rng):
    rs = [random_record(rng) for _ in range(30)]
    for scheme in SCHEMES:
        a = build_symbol_table(rs, scheme)
        b = build_symbol_table(rs, scheme)
        c = build_symbol_table(rs[::-1], scheme)
        assert a == b == c


def test_table_layout_order(rng):
    rs = [random_record(rng) for _ in range(30)]
    t = build_symbol_table(rs, TagScheme.OPEN_CLOSE)
    chars = t.characters
    assert t.symbols[0] == BLANK
    assert chars == sorted(chars, key=ord)
    assert t.symbols[len(chars) + 1] == SPACE
    assert t.tags == sorted(t.tags)
    assert set(t.tag_indices).isdisjoint({t.blank_index, t.space_index})


def test_table_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        build_symbol_table([], TagScheme.COMBINED)
    with pytest.raises(ValueError):
        SymbolTable((BLANK, "a", "a", SPACE))
    with pytest.raises(ValueError):
        SymbolTable(("a", BLANK, SPACE))


def test_symbols_file_roundtrip(tmp_path):
    t = build_symbol_table([rec(("Bara", C.LOCATION, P.HUSBAND), ("àç",))], TagScheme.COMBINED)
    t.save(tmp_path / "symbols.txt")
    lines = (tmp_path / "symbols.txt").read_text(encoding="utf-8").splitlines()
    assert lines == list(t.symbols)
    assert SymbolTable.load(tmp_path / "symbols.txt") == t


def test_parse_tag_forms():
    assert parse_tag("<location>").kind == "open"
    assert parse_tag("</husband>").person is P.HUSBAND
    m = parse_tag("<civil_state_wifes_father/>")
    assert (m.category, m.person) == (C.CIVIL_STATE, P.WIFES_FATHER)
    assert parse_tag("<other_person/>").person is P.OTHER_PERSON
    assert parse_tag(BLANK) is None and parse_tag(SPACE) is None and parse_tag("<") is None


# Worked encoding examples -------------------------------------------------------

HABITAT = rec(("habitat",), ("en",), ("Bara", C.LOCATION, P.HUSBAND))


def test_open_close_example():
    got = encode_symbols(HABITAT, TagScheme.OPEN_CLOSE)
    expected = list("habitat") + [SPACE] + list("en") + [SPACE, "<location>", "<husband>"] + list("Bara") + [
        "</husband>", "</location>"]
    assert got == expected


def test_combined_example():
    assert encode_symbols(rec(("Bara", C.LOCATION, P.HUSBAND)), TagScheme.COMBINED) == ["<location_husband/>", *"Bara"]


def test_change_of_person_example():
    r = rec(("Elisabeth", C.NAME, P.WIFE), ("Juana", C.NAME, P.WIFE))
    expected = ["<wife/>", "<name/>", *"Elisabeth", SPACE, "<name/>", *"Juana"]
    assert encode_symbols(r, TagScheme.CHANGE_OF_PERSON) == expected


def test_single_separate_example():
    r = rec(("donsella", C.CIVIL_STATE, P.WIFE))
    assert encode_symbols(r, TagScheme.SINGLE_SEPARATE) == ["<civil_state/>", "<wife/>", *"donsella"]


def test_encode_maps_through_table():
    t = build_symbol_table([HABITAT], TagScheme.OPEN_CLOSE)
    idx = encode(HABITAT, TagScheme.OPEN_CLOSE, t)
    assert t.to_surface(idx) == encode_symbols(HABITAT, TagScheme.OPEN_CLOSE)
    assert t.blank_index not in idx


def test_encode_errors():
    t = build_symbol_table([rec(("ab", C.NAME, P.WIFE))], TagScheme.COMBINED)
    with pytest.raises(CodecError):
        encode(rec(("abz",)), TagScheme.COMBINED, t)
    with pytest.raises(CodecError):
        encode(rec(("ab", C.NAME, P.HUSBAND)), TagScheme.COMBINED, t)


# Decoding ----------------------------------------------------------------------


def _table(scheme, chars="BaroJnPl"):
    return build_symbol_table([rec((chars,))], scheme, closed_world=True)


def test_decode_single_combined_word():
    t = _table(TagScheme.COMBINED)
    got = decode_surface(["<name_wife/>", *"Baro"], TagScheme.COMBINED, t)
    assert got.words == (W("Baro", C.NAME, P.WIFE),)


def test_decode_change_of_person_persistence():
    t = _table(TagScheme.CHANGE_OF_PERSON)
    got = decode_surface(["<husband/>", *"Joan", SPACE, *"Pla"], TagScheme.CHANGE_OF_PERSON, t, strict=True)
    assert got.words == (W("Joan", C.OTHER, P.HUSBAND), W("Pla", C.OTHER, P.HUSBAND))


def test_untagged_words_are_other_none():
    t = _table(TagScheme.SINGLE_SEPARATE)
    assert decode_surface([*"Pla"], TagScheme.SINGLE_SEPARATE, t).words == (W("Pla"),)


def test_decode_empty_and_all_space_inputs():
    t = _table(TagScheme.COMBINED)
    assert decode([], TagScheme.COMBINED, t).words == ()
    assert decode([t.space_index] * 3, TagScheme.COMBINED, t).words == ()


def test_repair_rules():
    t = _table(TagScheme.OPEN_CLOSE)
    oc = TagScheme.OPEN_CLOSE
    # unmatched close tag ignored
    assert decode_surface(["</name>", *"Pla"], oc, t).words == (W("Pla"),)
    # unclosed open tag closes at the next space
    got = decode_surface(["<name>", *"Pla", SPACE, *"Joan"], oc, t).words
    assert got == (W("Pla", C.NAME), W("Joan"))
    # conflicting tags: last wins
    got = decode_surface(["<name>", "<location>", *"Pla", "</location>", "</name>"], oc, t).words
    assert got == (W("Pla", C.LOCATION),)
    # tags on an empty word carry to the next word (inter-tag space)
    ts = _table(TagScheme.SINGLE_SEPARATE)
    got = decode_surface(["<civil_state/>", SPACE, "<wife/>", *"Pla"], TagScheme.SINGLE_SEPARATE, ts).words
    assert got == (W("Pla", C.CIVIL_STATE, P.WIFE),)


def test_strict_mode_reports_position():
    t = _table(TagScheme.OPEN_CLOSE)
    with pytest.raises(CodecError) as exc:
        decode_surface([*"Pl", "</name>", "a"], TagScheme.OPEN_CLOSE, t, strict=True)
    assert exc.value.position == 2
    with pytest.raises(CodecError) as exc:
        decode_surface(["<name>", *"Pla"], TagScheme.OPEN_CLOSE, t, strict=True)
    assert exc.value.position == 4
    with pytest.raises(CodecError):
        decode([t.blank_index], TagScheme.OPEN_CLOSE, t, strict=True)
    with pytest.raises(CodecError):
        decode_surface(["<name>", SPACE, *"Pla"], TagScheme.OPEN_CLOSE, t, strict=True)


def test_decode_is_total_on_random_sequences(rng):
    for scheme in SCHEMES:
        t = _table(scheme)
        for _ in range(300):
            seq = rng.integers(1, len(t), size=int(rng.integers(0, 25))).tolist()
            out = decode(seq, scheme, t)
            assert all(w.transcript for w in out.words)


def test_table_matches_scheme():
    assert table_matches_scheme(_table(TagScheme.COMBINED), TagScheme.COMBINED)
    assert not table_matches_scheme(_table(TagScheme.COMBINED), TagScheme.OPEN_CLOSE)
    assert table_matches_scheme(_table(TagScheme.SINGLE_SEPARATE), TagScheme.CHANGE_OF_PERSON)
    assert not table_matches_scheme(_table(TagScheme.OPEN_CLOSE), TagScheme.SINGLE_SEPARATE)


# Properties ----------------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(records)
def test_roundtrip_property(r):
    for scheme in SCHEMES:
        t = build_symbol_table([r], scheme)
        idx = encode(r, scheme, t)
        assert t.blank_index not in idx
        assert decode(idx, scheme, t, strict=True, record_id=r.record_id) == normalize(r, scheme)


@settings(max_examples=200, deadline=None)
@given(records)
def test_tag_count_bounds(r):
    per_word = {TagScheme.COMBINED: 1, TagScheme.SINGLE_SEPARATE: 2, TagScheme.OPEN_CLOSE: 4}
    for scheme, bound in per_word.items():
        syms = encode_symbols(r, scheme)
        words = _split_words(syms)
        assert all(sum(s.startswith("<") for s in w) <= bound for w in words)
    syms = encode_symbols(r, TagScheme.CHANGE_OF_PERSON)
    cat_tags = [sum(parse_tag(s) is not None and parse_tag(s).category is not None for s in w) for w in _split_words(syms)]
    assert max(cat_tags) <= 1
    persons = [w.person for w in r.words]
    changes = sum(1 for a, b in zip(persons, persons[1:]) if a != b)
    person_tags = sum(1 for s in syms if parse_tag(s) is not None and parse_tag(s).person is not None)
    assert person_tags <= changes + 1


def _split_words(syms):
    words, cur = [], []
    for s in syms:
        if s == SPACE:
            words.append(cur)
            cur = []
        else:
            cur.append(s)
    return words + [cur]


def test_normalize_is_idempotent_and_identity_where_representable(rng):
    for _ in range(200):
        r = random_record(rng)
        for scheme in SCHEMES:
            n = normalize(r, scheme)
            assert normalize(n, scheme) == n
        assert normalize(r, TagScheme.OPEN_CLOSE) == r
        assert normalize(r, TagScheme.SINGLE_SEPARATE) == r


def test_no_spaces_at_edges_and_single_separators(rng):
    for _ in range(100):
        r = random_record(rng)
        for scheme in SCHEMES:
            syms = encode_symbols(r, scheme)
            assert syms[0] != SPACE and syms[-1] != SPACE
            assert syms.count(SPACE) == len(r.words) - 1
