import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htrner.ctc import (
    CTCInfeasibleError,
    augment,
    best_path_decode,
    collapse,
    ctc_brute_force,
    ctc_loss,
    forward_backward,
    min_frames,
)


def random_log_probs(rng, T, K):
    x = rng.normal(size=(T, K))
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def test_single_frame_single_path():
    lp = np.log([[0.3, 0.7]])
    assert ctc_loss(lp, [1]).loss == pytest.approx(-math.log(0.7), abs=1e-12)


def test_two_frames_uniform():
    # paths (a,a), (-,a), (a,-) each have probability 0.25
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc_loss(lp, [1]).loss == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_brute_force(lp, [1]) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_repeat_needs_separator():
    lp = np.log(np.full((2, 2), 0.5))
    assert min_frames([1, 1]) == 3
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(lp, [1, 1])
    with pytest.raises(CTCInfeasibleError):
        ctc_brute_force(lp, [1, 1])


def test_target_longer_than_input():
    lp = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(lp, [1, 2, 1])
    with pytest.raises(CTCInfeasibleError):
        ctc_brute_force(lp, [1, 2, 1])


def test_blank_in_target_rejected():
    with pytest.raises(ValueError):
        ctc_loss(np.zeros((3, 2)), [0])


def test_one_hot_path_has_zero_loss():
    K = 4
    path = [1, 0, 2, 2, 0, 2, 3]
    lp = np.full((len(path), K), -1e6)
    lp[np.arange(len(path)), path] = 0.0
    r = ctc_loss(lp, [1, 2, 2, 3])
    assert r.loss == pytest.approx(0.0, abs=1e-9)
    assert ctc_brute_force(lp, [1, 2, 2, 3]) == pytest.approx(0.0, abs=1e-9)


def test_empty_target_is_all_blank():
    lp = np.log(np.array([[0.6, 0.4], [0.9, 0.1]]))
    assert ctc_loss(lp, []).loss == pytest.approx(-math.log(0.54), abs=1e-12)


def test_brute_force_size_guard():
    with pytest.raises(ValueError):
        ctc_brute_force(np.zeros((20, 5)), [1])


def test_augment_layout():
    ext = augment([3, 1, 3])
    assert len(ext) == 7 and (ext[::2] == 0).all() and list(ext[1::2]) == [3, 1, 3]


def test_oracle_equivalence_random(rng):
    for _ in range(100):
        T, K = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        L = int(rng.integers(0, 4))
        target = rng.integers(1, K, size=L).tolist()
        lp = random_log_probs(rng, T, K)
        if T < min_frames(target):
            with pytest.raises(CTCInfeasibleError):
                ctc_loss(lp, target)
            continue
        assert abs(ctc_loss(lp, target).loss - ctc_brute_force(lp, target)) < 1e-9


def test_gradient_matches_finite_differences(rng):
    for _ in range(10):
        T, K = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        target = rng.integers(1, K, size=int(rng.integers(1, 4))).tolist()
        if T < min_frames(target):
            continue
        lp = rng.normal(size=(T, K))  # the loss is defined for any scores, not just normalised ones
        grad = ctc_loss(lp, target).grad
        h = 1e-6
        num = np.zeros_like(lp)
        for idx in np.ndindex(*lp.shape):
            a, b = lp.copy(), lp.copy()
            a[idx] += h
            b[idx] -= h
            num[idx] = (ctc_loss(a, target).loss - ctc_loss(b, target).loss) / (2 * h)
        rel = np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-8)
        assert rel.max() < 1e-5


def test_forward_backward_consistency(rng):
    for _ in range(20):
        T, K = int(rng.integers(4, 40)), int(rng.integers(2, 8))
        target = rng.integers(1, K, size=int(rng.integers(1, T // 2 + 1))).tolist()
        if T < min_frames(target):
            continue
        lp = random_log_probs(rng, T, K)
        alpha, beta = forward_backward(lp, target)
        log_p = -ctc_loss(lp, target).loss
        per_frame = np.logaddexp.reduce(alpha + beta, axis=1)
        assert np.allclose(per_frame, log_p, atol=1e-9, rtol=0)


def test_long_sequences_do_not_underflow(rng):
    T, K = 3000, 30
    lp = random_log_probs(rng, T, K)
    target = rng.integers(1, K, size=700).tolist()
    r = ctc_loss(lp, target)
    assert np.isfinite(r.loss) and r.loss > 0 and np.isfinite(r.grad).all()


def test_grad_rows_sum_to_zero_through_softmax(rng):
    lp = random_log_probs(rng, 12, 5)
    g = ctc_loss(lp, [1, 2, 3]).grad
    dlogits = g - np.exp(lp) * g.sum(axis=1, keepdims=True)
    assert np.allclose(dlogits.sum(axis=1), 0, atol=1e-12)


def test_best_path_examples():
    a, b = 1, 2
    K = 3

    def one_hot(path):
        lp = np.full((len(path), K), -5.0)
        lp[np.arange(len(path)), path] = 0.0
        return lp

    assert best_path_decode(one_hot([a, a, 0, a, b])) == [a, a, b]
    assert best_path_decode(one_hot([0, 0, 0])) == []
    assert best_path_decode(np.zeros((0, K))) == []
    # ties go to the lowest index
    assert best_path_decode(np.zeros((2, K))) == []


def test_best_path_recovers_encoded_fixture():
    from htrner.tags import AnnotatedRecord, AnnotatedWord, PersonRole, SemanticCategory, TagScheme, build_symbol_table, encode

    r = AnnotatedRecord((AnnotatedWord("Bara", SemanticCategory.LOCATION, PersonRole.HUSBAND), AnnotatedWord("ell")), "r")
    t = build_symbol_table([r], TagScheme.OPEN_CLOSE)
    seq = encode(r, TagScheme.OPEN_CLOSE, t)
    path = []
    for s in seq:
        path += [s, s, 0]
    lp = np.full((len(path), len(t)), -3.0)
    lp[np.arange(len(path)), path] = 0.0
    assert best_path_decode(lp) == seq


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=20))
def test_collapse_properties(path):
    out = collapse(path)
    assert 0 not in out
    assert len(out) <= len(path)
    assert collapse(out) == [x for i, x in enumerate(out) if i == 0 or out[i - 1] != x]
