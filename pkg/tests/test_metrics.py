import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_record, records
from htrner.metrics import (
    RecordScore,
    Track,
    cer,
    edit_distance,
    score_dataset,
    score_record,
    scores_csv,
    word_contribution,
)
from htrner.tags import AnnotatedRecord, AnnotatedWord, PersonRole, SemanticCategory

BARA = AnnotatedWord("Bara", "location", "husband")


def rec(*words, rid="r"):
    return AnnotatedRecord(tuple(AnnotatedWord(*w) if isinstance(w, tuple) else w for w in words), rid)


def test_cer_examples():
    assert cer("Bara", "Bara") == 0
    assert cer("Baro", "Bara") == 0.25
    assert cer("", "Bara") == 1.0
    assert cer("BaraBara", "Ba") == 3.0
    with pytest.raises(ValueError):
        cer("x", "")


def _dp(a, b):
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = range(len(a) + 1)
    d[0, :] = range(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1, -1]


@settings(max_examples=200, deadline=None)
@given(st.text("abc", max_size=8), st.text("abc", max_size=8))
def test_edit_distance_matches_table_and_is_symmetric(a, b):
    assert edit_distance(a, b) == _dp(a, b) == edit_distance(b, a)
    assert edit_distance(a, b) <= max(len(a), len(b))


def test_word_contribution_examples():
    assert word_contribution(BARA, [BARA], Track.BASIC) == 1
    assert word_contribution(BARA, [AnnotatedWord("Baro", "location", "husband")], Track.COMPLETE) == 0.75
    assert word_contribution(BARA, [AnnotatedWord("Bara", "name", "husband")], Track.BASIC) == 0
    assert word_contribution(BARA, [AnnotatedWord("Bara", "location", "wife")], Track.BASIC) == 1
    assert word_contribution(BARA, [AnnotatedWord("Bara", "location", "wife")], Track.COMPLETE) == 0
    assert word_contribution(BARA, [], Track.BASIC) == 0


def test_word_contribution_consumption_and_ties():
    preds = [AnnotatedWord("Bare", "location", "husband"), AnnotatedWord("Baro", "location", "husband")]
    used: set[int] = set()
    assert word_contribution(BARA, preds, "basic", used) == 0.75
    assert used == {0}
    assert word_contribution(BARA, preds, "basic", used) == 0.75
    assert used == {0, 1}
    assert word_contribution(BARA, preds, "basic", used) == 0
    used = set()
    assert word_contribution(BARA, preds, "basic", used, consume=False) == 0.75 and not used


def test_contribution_clamped_at_zero():
    long = AnnotatedWord("Zzzzzzzzzz", "location", "husband")
    assert word_contribution(BARA, [long], "basic") == 0.0


def test_score_record_examples():
    gt = rec(("dia", "other", "none"), BARA, ("Joan", "name", "wife"))
    assert score_record(gt, gt, "basic").score == 100
    assert score_record(gt, gt, "complete").scorable_words == 2
    blank = [AnnotatedWord(w.transcript, "other", "none") for w in gt.words]
    assert score_record(gt, blank, "basic").score == 0
    half = [AnnotatedWord("Baro", "location", "husband"), AnnotatedWord("Joan", "name", "wife")]
    assert score_record(gt, half, "complete").score == 87.5
    assert score_record(gt, half, "basic", all_words=True).score == pytest.approx(100 * 1.75 / 3)


def test_score_dataset_examples():
    gt = rec(BARA)
    mean, scores = score_dataset([(gt, [AnnotatedWord("Baro", "location", "husband")])], "basic")
    assert mean == 75.0 and scores[0].contributions == [0.75]
    assert score_dataset([(gt, gt), (rec(BARA, ("Ana", "name", "wife"), rid="s"),) * 2], "complete")[0] == 100.0
    with pytest.raises(ValueError):
        score_dataset([], "basic")
    with pytest.raises(ValueError):
        score_dataset([(rec(("dia", "other", "none")), [])], "basic")


def test_unscorable_records_are_excluded():
    other = rec(("dia", "other", "none"), rid="o")
    mean, scores = score_dataset([(rec(BARA), [BARA]), (other, [])], "basic")
    assert mean == 100.0 and not scores[1].scorable and math.isnan(scores[1].score)


def test_one_to_one_versus_many():
    gt = rec(("Ana", "name", "wife"), ("Ana", "name", "wife"))
    pred = [AnnotatedWord("Ana", "name", "wife")]
    assert score_record(gt, pred, "complete").score == 50
    assert score_record(gt, pred, "complete", matching="greedy").score == 50
    assert score_record(gt, pred, "complete", one_to_one=False).score == 100


def test_optimal_matching_beats_greedy_steal():
    gt = rec(("Ana", "name", "husband"), ("Anx", "name", "wife"))
    pred = [AnnotatedWord("Anx", "name", "wife"), AnnotatedWord("Qqq", "name", "husband")]
    greedy_basic = score_record(gt, pred, "basic", matching="greedy").score
    greedy_complete = score_record(gt, pred, "complete", matching="greedy").score
    assert greedy_complete > greedy_basic
    assert score_record(gt, pred, "basic").score == 50.0
    assert score_record(gt, pred, "complete").score == 50.0
    with pytest.raises(ValueError):
        score_record(gt, pred, "basic", matching="best")


def _perturb(record, rng):
    cats, pers = list(SemanticCategory), list(PersonRole)
    out = []
    for w in record.words:
        if rng.random() < 0.1:
            continue
        t = "".join(ch if rng.random() > 0.2 else "x" for ch in w.transcript)
        c = w.category if rng.random() > 0.3 else cats[rng.integers(len(cats))]
        p = w.person if rng.random() > 0.3 else pers[rng.integers(len(pers))]
        out.append(AnnotatedWord(t, c, p))
    rng.shuffle(out)
    return out


@settings(max_examples=100, deadline=None)
@given(st.lists(records, min_size=1, max_size=4), st.integers(0, 2**31))
def test_basic_at_least_complete(gts, seed):
    rng = np.random.default_rng(seed)
    pairs = [(g, _perturb(g, rng)) for g in gts]
    if not any(score_record(g, p, "basic").scorable for g, p in pairs):
        return
    b = score_dataset(pairs, "basic")[0]
    c = score_dataset(pairs, "complete")[0]
    assert b >= c - 1e-9


@settings(max_examples=100, deadline=None)
@given(records, st.sampled_from(list(Track)))
def test_perfect_prediction_scores_100(r, track):
    s = score_record(r, r, track)
    assert not s.scorable or s.score == 100.0


@settings(max_examples=100, deadline=None)
@given(records, st.integers(0, 2**31))
def test_scores_bounded_and_order_invariant_for_unique_matches(r, seed):
    rng = np.random.default_rng(seed)
    preds = list(r.words)
    s = score_record(r, preds, "complete")
    rng.shuffle(preds)
    if s.scorable:
        assert score_record(r, preds, "complete").score == s.score
    noisy = _perturb(r, rng)
    for c in score_record(r, noisy, "basic").contributions:
        assert 0.0 <= c <= 1.0


def test_monotone_in_one_word(rng):
    gt = random_record(rng, 8, "r")
    words = [w for w in gt.words if w.category is not SemanticCategory.OTHER]
    if not words:
        gt = rec(BARA)
        words = [BARA]
    target = words[0]
    worse = [AnnotatedWord(w.transcript + "zz", w.category, w.person) if w is target else w for w in gt.words]
    assert score_dataset([(gt, gt.words)], "complete")[0] >= score_dataset([(gt, worse)], "complete")[0]


def test_scores_csv():
    s = [RecordScore("a", Track.BASIC, [1.0, 0.5]), RecordScore("b", Track.BASIC, [])]
    assert scores_csv(s) == "record_id,track,scorable_words,score\na,basic,2,75.0000\nb,basic,0,\n"
