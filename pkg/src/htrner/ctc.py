"""Connectionist temporal classification loss and greedy decoding.

``log_probs`` is always a ``(T, K)`` array of per-frame log-probabilities and
the blank has index 0 unless told otherwise.  The lattice recursions run in
the log domain so record-length inputs (thousands of frames) do not
underflow.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The target cannot be aligned to the available number of frames."""


@dataclass
class CTCResult:
    loss: float
    grad: np.ndarray  # d loss / d log_probs, shape (T, K)


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def augment(target: Sequence[int], blank: int = 0) -> np.ndarray:
    """Blank-interleaved label ``(blank, z1, blank, z2, ..., blank)``."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


@njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _forward_backward(log_probs, ext):
    T = log_probs.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)

    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _logaddexp(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != ext[s - 2]:
                a = _logaddexp(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + log_probs[t, ext[s]]

    # beta[t, s]: log-probability of emitting the rest after frame t given state s at t
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                b = _logaddexp(b, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != ext[s]:
                b = _logaddexp(b, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = b
    return alpha, beta


@njit(cache=True)
def _occupancy_grad(alpha, beta, ext, log_p, K):
    T, S = alpha.shape
    grad = np.zeros((T, K))
    for t in range(T):
        for s in range(S):
            v = alpha[t, s] + beta[t, s]
            if v != -np.inf:
                grad[t, ext[s]] -= math.exp(v - log_p)
    return grad


def forward_backward(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Log-domain lattice variables ``alpha`` and ``beta``, each ``(T, 2L+1)``.

    ``alpha[t, s] + beta[t, s]`` is the log-probability of all paths that
    occupy lattice state ``s`` at frame ``t``.
    """
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    return _forward_backward(lp, augment(target, blank))


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> CTCResult:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``."""
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError("log_probs must be (T, K)")
    target = [int(z) for z in target]
    if blank in target:
        raise ValueError("target must not contain the blank")
    T, K = lp.shape
    need = min_frames(target)
    if T < max(need, 1):
        raise CTCInfeasibleError(f"target needs {need} frames, got {T}")
    ext = augment(target, blank)
    alpha, beta = _forward_backward(lp, ext)
    S = len(ext)
    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_p):
        raise CTCInfeasibleError("target has zero probability under log_probs")
    grad = _occupancy_grad(alpha, beta, ext, log_p, K)
    return CTCResult(float(-log_p), grad)


def collapse(path: Sequence[int], blank: int = 0) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def ctc_brute_force(log_probs: np.ndarray, target: Sequence[int], blank: int = 0, max_paths: int = 10**7) -> float:
    """Reference loss by enumerating every frame-label path.

    Exponential in ``T``; meant as an oracle for tiny instances only.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, K = lp.shape
    if K**T > max_paths:
        raise ValueError(f"{K}^{T} paths exceed the enumeration limit {max_paths}")
    target = [int(z) for z in target]
    logs = []
    for path in itertools.product(range(K), repeat=T):
        if collapse(path, blank) == target:
            logs.append(sum(lp[t, k] for t, k in enumerate(path)))
    if not logs:
        raise CTCInfeasibleError("no path collapses to the target")
    m = max(logs)
    return -(m + math.log(sum(math.exp(v - m) for v in logs)))


def best_path_decode(log_probs: np.ndarray, blank: int = 0) -> list[int]:
    """Greedy decoding: per-frame argmax (lowest index on ties), collapse, drop blanks."""
    lp = np.asarray(log_probs)
    if lp.shape[0] == 0:
        return []
    return collapse(np.argmax(lp, axis=1).tolist(), blank)
