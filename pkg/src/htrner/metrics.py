"""Character error rate and the two-track entity-aware transcription score."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from htrner.tags import AnnotatedRecord, AnnotatedWord, SemanticCategory


class Track(str, enum.Enum):
    BASIC = "basic"
    COMPLETE = "complete"


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cer(hyp: Sequence, ref: Sequence) -> float:
    """Edit distance over reference length; may exceed 1."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


def labels_match(gt: AnnotatedWord, pred: AnnotatedWord, track: Track | str) -> bool:
    if gt.category != pred.category:
        return False
    return Track(track) is Track.BASIC or gt.person == pred.person


def word_contribution(
    gt: AnnotatedWord,
    predictions: Sequence[AnnotatedWord],
    track: Track | str,
    used: set[int] | None = None,
    consume: bool = True,
) -> float:
    """Credit in [0, 1] for one ground-truth word.

    Only unused predictions with matching labels compete.  An exact
    transcript wins outright; otherwise the lowest CER (earliest on ties)
    gives ``max(0, 1 - cer)``.  The winner is added to ``used`` unless
    ``consume`` is false.
    """
    used = set() if used is None else used
    candidates = [i for i, p in enumerate(predictions) if i not in used and labels_match(gt, p, track)]
    if not candidates:
        return 0.0
    for i in candidates:
        if predictions[i].transcript == gt.transcript:
            if consume:
                used.add(i)
            return 1.0
    best_i, best = candidates[0], cer(predictions[candidates[0]].transcript, gt.transcript)
    for i in candidates[1:]:
        c = cer(predictions[i].transcript, gt.transcript)
        if c < best:
            best_i, best = i, c
    if consume:
        used.add(best_i)
    return max(0.0, 1.0 - best)


@dataclass
class RecordScore:
    record_id: str
    track: Track
    contributions: list[float] = field(default_factory=list)

    @property
    def scorable_words(self) -> int:
        return len(self.contributions)

    @property
    def scorable(self) -> bool:
        return bool(self.contributions)

    @property
    def score(self) -> float:
        if not self.contributions:
            return float("nan")
        return 100.0 * sum(self.contributions) / len(self.contributions)


def scorable_words(record: AnnotatedRecord, all_words: bool = False) -> list[AnnotatedWord]:
    if all_words:
        return list(record.words)
    return [w for w in record.words if w.category is not SemanticCategory.OTHER]


MATCHING = ("optimal", "greedy")


def pair_credit(gt: AnnotatedWord, pred: AnnotatedWord, track: Track | str) -> float:
    """Credit a single prediction would earn for ``gt``."""
    if not labels_match(gt, pred, track):
        return 0.0
    return max(0.0, 1.0 - cer(pred.transcript, gt.transcript))


def optimal_contributions(gt_words: Sequence[AnnotatedWord], preds: Sequence[AnnotatedWord], track: Track | str) -> list[float]:
    """Per-word credit under the one-to-one assignment with the largest total."""
    out = [0.0] * len(gt_words)
    if not gt_words or not preds:
        return out
    credit = np.array([[pair_credit(g, p, track) for p in preds] for g in gt_words])
    rows, cols = linear_sum_assignment(credit, maximize=True)
    for r, c in zip(rows, cols):
        out[r] = float(credit[r, c])
    return out


def score_record(
    gt: AnnotatedRecord,
    pred: AnnotatedRecord | Sequence[AnnotatedWord],
    track: Track | str,
    all_words: bool = False,
    one_to_one: bool = True,
    matching: str = "optimal",
) -> RecordScore:
    """Score one record.

    With ``one_to_one`` each prediction is credited at most once, either
    through the assignment maximising total credit (``optimal``) or
    greedily in ground-truth order (``greedy``).  Only the optimal
    assignment guarantees that the complete track never beats the basic
    one.  ``one_to_one=False`` lets one prediction be credited for
    several ground-truth words.  ``all_words`` also counts words tagged
    ``other``.
    """
    track = Track(track)
    if matching not in MATCHING:
        raise ValueError(f"unknown matching {matching!r}")
    preds = list(pred.words if isinstance(pred, AnnotatedRecord) else pred)
    words = scorable_words(gt, all_words)
    if one_to_one and matching == "optimal":
        return RecordScore(gt.record_id, track, optimal_contributions(words, preds, track))
    used: set[int] = set()
    contributions = [word_contribution(w, preds, track, used, consume=one_to_one) for w in words]
    return RecordScore(gt.record_id, track, contributions)


def score_dataset(
    pairs: Iterable[tuple[AnnotatedRecord, AnnotatedRecord | Sequence[AnnotatedWord]]],
    track: Track | str,
    all_words: bool = False,
    one_to_one: bool = True,
    matching: str = "optimal",
) -> tuple[float, list[RecordScore]]:
    """Mean record score over records with at least one scorable word."""
    scores = [score_record(gt, pred, track, all_words, one_to_one, matching) for gt, pred in pairs]
    if not scores:
        raise ValueError("no records to score")
    kept = [s.score for s in scores if s.scorable]
    if not kept:
        raise ValueError("no record has a scorable word")
    return sum(kept) / len(kept), scores


def scores_csv(scores: Iterable[RecordScore]) -> str:
    """Per-record report; unscorable records have an empty score cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record_id", "track", "scorable_words", "score"])
    for s in scores:
        w.writerow([s.record_id, s.track.value, s.scorable_words, f"{s.score:.4f}" if s.scorable else ""])
    return buf.getvalue()
