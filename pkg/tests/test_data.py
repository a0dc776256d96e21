import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htrner.data import (
    ManifestError,
    PageManifest,
    WordBox,
    build_samples,
    concat_record,
    extract_line,
    ground_truth_records,
    line_bounds,
    load_image,
    load_manifest,
    normalize_height,
    parse_manifest,
    save_image,
    save_manifest,
)
from htrner.tags import AnnotatedRecord, SymbolTable, TagScheme, build_symbol_table, decode, encode, normalize


def box(x, y, w, h, text="ab", line="l0", record="r0", category="other", person="none"):
    return WordBox(x, y, w, h, text, category, person, line, record)


# Extraction --------------------------------------------------------------------


def test_single_word_methods_agree():
    page = np.random.default_rng(0).random((40, 60))
    words = [box(5, 7, 20, 11)]
    a = extract_line(page, words, "bbox_union")
    b = extract_line(page, words, "weighted_average")
    assert np.array_equal(a, page[7:18, 5:25]) and np.array_equal(a, b)


def test_weighted_average_fixture():
    words = [box(0, 5, 10, 10), box(12, 9, 30, 10)]
    assert line_bounds(words, "weighted_average")[2] == 8
    assert line_bounds(words, "bbox_union")[2] == 5
    # bottoms 15 and 19: (150 + 570) / 40 = 18 exactly
    assert line_bounds(words, "weighted_average")[3] == 18
    assert line_bounds(words, "bbox_union")[3] == 19
    assert line_bounds(words, "weighted_average")[:2] == (0, 42)


def test_weighted_average_rounds_outward():
    words = [box(0, 5, 10, 10), box(12, 6, 20, 11)]
    # tops: (50 + 120) / 30 = 5.67 -> 5; bottoms: (150 + 340) / 30 = 16.33 -> 17
    assert line_bounds(words, "weighted_average")[2:] == (5, 17)


def test_extract_line_errors():
    page = np.zeros((20, 30))
    with pytest.raises(ValueError):
        extract_line(page, [])
    with pytest.raises(ValueError):
        extract_line(page, [box(25, 0, 10, 5)])
    with pytest.raises(ValueError):
        extract_line(page, [box(0, 0, 5, 5, line="a"), box(6, 0, 5, 5, line="b")])
    with pytest.raises(ValueError):
        extract_line(page, [box(0, 0, 5, 5)], method="nope")


@st.composite
def lines(draw):
    n = draw(st.integers(1, 8))
    out = []
    for _ in range(n):
        out.append(box(draw(st.integers(0, 200)), draw(st.integers(0, 100)), draw(st.integers(1, 80)), draw(st.integers(1, 60))))
    return out


@settings(max_examples=1000, deadline=None)
@given(lines())
def test_weighted_bounds_within_union(words):
    _, _, ut, ub = line_bounds(words, "bbox_union")
    x0, x1, wt, wb = line_bounds(words, "weighted_average")
    assert ut <= wt <= wb <= ub
    assert (x0, x1) == line_bounds(words, "bbox_union")[:2]


# Concatenation and resizing ----------------------------------------------------


def test_concat_single_line_unchanged():
    ln = np.random.default_rng(1).random((8, 13))
    assert np.array_equal(concat_record([ln]), ln)


def test_concat_width_and_offsets():
    rng = np.random.default_rng(2)
    a, b = rng.random((64, 100)), rng.random((64, 120))
    out = concat_record([a, b], separator_px=8)
    assert out.shape == (64, 228)
    assert np.array_equal(out[:, :100], a) and np.array_equal(out[:, 108:], b)
    assert not out[:, 100:108].any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.integers(0, 10))
def test_concat_width_formula(widths, sep):
    lines_ = [np.full((4, w), i + 1.0) for i, w in enumerate(widths)]
    out = concat_record(lines_, sep)
    assert out.shape[1] == sum(widths) + sep * (len(widths) - 1)
    x = 0
    for ln in lines_:
        assert np.array_equal(out[:, x:x + ln.shape[1]], ln)
        x += ln.shape[1] + sep


def test_concat_errors():
    with pytest.raises(ValueError):
        concat_record([])
    with pytest.raises(ValueError):
        concat_record([np.zeros((4, 3)), np.zeros((5, 3))])


def test_normalize_height():
    rng = np.random.default_rng(3)
    img = rng.random((64, 37))
    assert np.array_equal(normalize_height(img, 64), img)
    assert normalize_height(rng.random((128, 200)), 64).shape == (64, 100)
    const = normalize_height(np.full((50, 30), 0.4), 64)
    assert np.allclose(const, 0.4, atol=1e-6)
    assert normalize_height(np.ones((200, 1)), 8).shape == (8, 1)
    with pytest.raises(ValueError):
        normalize_height(img, 0)


def test_png_roundtrip_inverts(tmp_path):
    img = np.zeros((3, 4))
    img[1, 2] = 1.0
    save_image(img, tmp_path / "x.png")
    from PIL import Image

    raw = np.asarray(Image.open(tmp_path / "x.png"))
    assert raw[0, 0] == 255 and raw[1, 2] == 0
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


# Manifests ---------------------------------------------------------------------


def _manifest_obj():
    return {"pages": [{"image": "p.png", "split": "test", "words": [
        {"x": 0, "y": 0, "w": 4, "h": 4, "transcript": "Bara", "category": "location", "person": "husband",
         "line_id": "l0", "record_id": "r0"}]}]}


def test_manifest_roundtrip(tmp_path):
    pages = parse_manifest(_manifest_obj())
    save_manifest(pages, tmp_path / "m.json")
    again = load_manifest(tmp_path / "m.json")
    assert again == pages
    assert again[0].words[0].word().transcript == "Bara"


@pytest.mark.parametrize("mutate,needle", [
    (lambda o: o.pop("pages"), "pages"),
    (lambda o: o["pages"][0]["words"][0].pop("line_id"), "line_id"),
    (lambda o: o["pages"][0].update(split="dev"), "split"),
    (lambda o: o["pages"][0]["words"][0].update(category="animal"), "animal"),
    (lambda o: o["pages"][0]["words"][0].update(w=0), "positive"),
])
def test_manifest_errors(mutate, needle):
    obj = _manifest_obj()
    mutate(obj)
    with pytest.raises(ManifestError, match=needle):
        parse_manifest(obj)


def test_manifest_bad_json(tmp_path):
    (tmp_path / "m.json").write_text("{\n  nope", encoding="utf-8")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(tmp_path / "m.json")


# Samples -----------------------------------------------------------------------


def _two_line_page():
    page = np.zeros((40, 80))
    page[5:15, 2:20] = 1
    page[22:33, 2:30] = 1
    words = [
        box(2, 5, 8, 10, "dia", category="other", person="none", line="l0", record="r0"),
        box(12, 5, 8, 10, "Bara", category="location", person="husband", line="l0", record="r0"),
        box(2, 22, 28, 11, "Joan", category="name", person="wife", line="l1", record="r0"),
    ]
    return PageManifest("p.png", "train", words), page


def test_build_samples_line_and_record():
    pm, page = _two_line_page()
    lines_ = build_samples([pm], [page], "line", height=16)
    assert [s.sample_id for s in lines_] == ["l0", "l1"]
    assert all(s.image.shape[0] == 16 and s.record_id == "r0" for s in lines_)
    recs = build_samples([pm], [page], "record", height=16, separator_px=4, pad_px=2)
    assert len(recs) == 1 and recs[0].line_ids == ("l0", "l1")
    widths = [s.image.shape[1] - 2 * 2 for s in lines_]
    assert recs[0].image.shape[1] == sum(widths) + 4 + 2 * 2
    assert [w.transcript for w in recs[0].record.words] == ["dia", "Bara", "Joan"]
    assert build_samples([pm], [page], "line", splits=("test",)) == []


def test_record_target_joins_lines_with_one_space():
    pm, page = _two_line_page()
    lines_ = build_samples([pm], [page], "line", height=16)
    rec = build_samples([pm], [page], "record", height=16)[0]
    for scheme in TagScheme:
        table = build_symbol_table([rec.record], scheme)
        rec.encode(scheme, table)
        parts = [encode(s.record, scheme, table) for s in lines_]
        assert rec.target == parts[0] + [table.space_index] + parts[1]
        assert decode(rec.target, scheme, table, strict=True, record_id="r0") == normalize(rec.record, scheme)


def test_ground_truth_records():
    pm, _ = _two_line_page()
    gt = ground_truth_records([pm])
    assert list(gt) == ["r0"] and len(gt["r0"].words) == 3
    assert ground_truth_records([pm], ("valid",)) == {}


def test_symbol_table_blank_first():
    pm, _ = _two_line_page()
    table = build_symbol_table(list(ground_truth_records([pm]).values()), "combined")
    assert isinstance(table, SymbolTable) and table.blank_index == 0


def test_records_group_lines():
    pm, _ = _two_line_page()
    assert pm.records() == {"r0": ["l0", "l1"]}
    assert list(pm.lines()) == ["l0", "l1"]
    assert AnnotatedRecord(tuple(w.word() for w in pm.words), "r0") == ground_truth_records([pm])["r0"]


def test_manifest_json_schema_field_names():
    pm, _ = _two_line_page()
    obj = json.loads(json.dumps(pm.to_json()))
    assert set(obj["words"][0]) == {"x", "y", "w", "h", "transcript", "category", "person", "line_id", "record_id"}
