"""Key rank and guessing entropy.

Ranks are 1-indexed (rank 1 = first guess right) and pessimistic: candidates
scoring exactly as the true key are counted ahead of it.

Per-byte scores are min-max normalised to [0, 1] and turned into
log-probabilities with a softmax at temperature 1; a full-key candidate
scores the sum of its byte log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .attack import ScoreMatrix

N_BINS = 2048
EXHAUSTIVE_MAX_BYTES = 2


@dataclass(frozen=True)
class EvaluationResult:
    key_rank: int
    guessing_entropy: float
    per_byte_ranks: tuple
    method: str = "exhaustive"
    estimation_error_bits: float = 0.0

    def __post_init__(self):
        if self.key_rank < 1:
            raise ValueError("key_rank must be >= 1")
        if self.method not in ("exhaustive", "estimated"):
            raise ValueError(f"unknown rank method {self.method!r}")
        if self.method == "exhaustive" and self.estimation_error_bits != 0:
            raise ValueError("exhaustive results carry no estimation error")


def guessing_entropy(key_rank) -> float:
    if key_rank < 1:
        raise ValueError(f"key_rank must be >= 1, got {key_rank}")
    return math.log2(key_rank)


def averaged_ge(results: Iterable) -> float:
    """Mean guessing entropy of a batch of attacks (accepts results or floats)."""
    values = [r.guessing_entropy if isinstance(r, EvaluationResult) else float(r)
              for r in results]
    if not values:
        raise ValueError("averaged_ge of an empty batch")
    return math.fsum(values) / len(values)


def minmax(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale a vector to [0, 1]; constant vectors map to all-0.5 (second item True)."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 0.5), True
    return (v - lo) / (hi - lo), False


def log_probabilities(scores: ScoreMatrix, n_bytes: Optional[int] = None) -> np.ndarray:
    nb = scores.n_bytes if n_bytes is None else n_bytes
    out = np.empty((nb, 256))
    for b in range(nb):
        s, _ = minmax(scores.scores[b])
        out[b] = s - (s.max() + np.log(np.exp(s - s.max()).sum()))
    return out


def byte_ranks(scores: ScoreMatrix, true_key: bytes, n_bytes: Optional[int] = None) -> tuple:
    nb = scores.n_bytes if n_bytes is None else n_bytes
    ranks = []
    for b in range(nb):
        v = scores.scores[b]
        ranks.append(int((v >= v[true_key[b]]).sum()))
    return tuple(ranks)


def _check_key(scores: ScoreMatrix, true_key: bytes, n_bytes: int):
    if len(true_key) < n_bytes:
        raise ValueError("true_key shorter than the number of ranked bytes")
    if scores.n_bytes < n_bytes:
        raise ValueError(f"score matrix covers {scores.n_bytes} bytes, need {n_bytes}")


def exhaustive_key_rank(scores: ScoreMatrix, true_key: bytes, n_bytes: int = 1) -> EvaluationResult:
    if not 1 <= n_bytes <= EXHAUSTIVE_MAX_BYTES:
        raise ValueError(f"exhaustive ranking supports 1..{EXHAUSTIVE_MAX_BYTES} bytes")
    _check_key(scores, true_key, n_bytes)
    lp = log_probabilities(scores, n_bytes)
    total = lp[0]
    for b in range(1, n_bytes):
        total = (total[:, None] + lp[b][None, :]).ravel()
    idx = 0
    for b in range(n_bytes):
        idx = idx * 256 + true_key[b]
    rank = int((total >= total[idx]).sum())
    return EvaluationResult(rank, guessing_entropy(rank), byte_ranks(scores, true_key, n_bytes))


def _solve_tilt(logs: np.ndarray, target: float, bound: float = 60.0) -> float:
    """Tilt theta whose tilted per-bin distributions have summed mean ``target``.

    Safeguarded Newton: the summed mean is increasing in theta and its
    derivative is the summed tilted variance.
    """
    j = np.arange(logs.shape[1], dtype=np.float64)

    def moments(theta):
        w = logs + theta * j
        w = np.exp(w - w.max(axis=1, keepdims=True))
        z = w.sum(axis=1)
        m1 = (w * j).sum(axis=1) / z
        m2 = (w * j * j).sum(axis=1) / z
        return float(m1.sum()), float((m2 - m1 * m1).sum())

    a, b = -bound, bound
    if target <= moments(a)[0]:
        return a
    if target >= moments(b)[0]:
        return b
    theta = 0.0
    for _ in range(60):
        m, v = moments(theta)
        err = m - target
        if abs(err) < 0.05:
            break
        if err < 0:
            a = theta
        else:
            b = theta
        step = theta - err / v if v > 0 else None
        theta = step if step is not None and a < step < b else 0.5 * (a + b)
    return theta


def _tail_masses(hists: np.ndarray, thresholds, center: int) -> list:
    """``sum_{J >= t}`` of the convolution of the rows of ``hists``, per threshold.

    The convolution is done by FFT on exponentially tilted histograms
    ``h[j] * exp(theta * j)``, with theta chosen so the tilted total is centred
    on ``center``. Plain FFT convolution of counts reaching 2^128 would bury
    the tail around the true key in round-off; after tilting, every term that
    matters is within a few orders of magnitude of the peak. Thresholds far
    from the centre (relative to the tilt) get their own tilt.
    """
    n, n_bins = hists.shape
    length = n * (n_bins - 1) + 1
    grand_total = float(np.prod(hists.sum(axis=1)))
    with np.errstate(divide="ignore"):
        logs = np.log(hists)
    size = 1 << (length - 1).bit_length()
    j = np.arange(n_bins, dtype=np.float64)
    J = np.arange(length, dtype=np.float64)
    cache = {}

    def convolved(theta):
        if theta not in cache:
            w = logs + theta * j
            peaks = w.max(axis=1)
            spectrum = np.prod(np.fft.rfft(np.exp(w - peaks[:, None]), size, axis=1), axis=0)
            tilted = np.fft.irfft(spectrum, size)[:length]
            tilted = np.where(tilted > np.abs(tilted).max() * 1e-14, tilted, 0.0)
            cache[theta] = (tilted, peaks.sum() - theta * J)
        return cache[theta]

    theta0 = _solve_tilt(logs, float(min(max(center, 0), length - 1)))
    out = []
    for t in thresholds:
        t = int(t)
        if t <= 0:
            out.append(grand_total)
            continue
        if t >= length:
            out.append(0.0)
            continue
        theta = theta0 if abs(theta0) * abs(t - center) <= 4.0 else _solve_tilt(logs, float(t))
        tilted, log_w = convolved(theta)
        if theta >= 0:
            mass = _sum_untilted(tilted[t:], log_w[t:])
        else:
            mass = grand_total - _sum_untilted(tilted[:t], log_w[:t])
        out.append(min(max(mass, 0.0), grand_total))
    return out


def _sum_untilted(t: np.ndarray, log_w: np.ndarray) -> float:
    pos = t > 0
    if not pos.any():
        return 0.0
    terms = np.log(t[pos]) + log_w[pos]
    m = terms.max()
    return float(math.exp(m) * np.exp(terms - m).sum()) if m < 700 else math.inf


def estimate_key_rank(scores: ScoreMatrix, true_key: bytes, n_bytes: int = 16,
                      n_bins: int = N_BINS) -> EvaluationResult:
    """Histogram-convolution key rank estimate.

    Every byte's log-probabilities are binned with one common bin width
    (offset by the byte minimum). With ``I`` a candidate's summed bin index and
    ``T`` the true key's, candidates with ``I > T + n`` surely outrank the true
    key and those with ``I < T - n`` surely do not, which brackets the rank.
    The reported rank is the geometric midpoint of the bracket and
    ``estimation_error_bits`` its half-width in bits.
    """
    _check_key(scores, true_key, n_bytes)
    lp = log_probabilities(scores, n_bytes)
    span = lp.max(axis=1) - lp.min(axis=1)
    live = [b for b in range(n_bytes) if span[b] > 0]
    dead = n_bytes - len(live)
    ranks = byte_ranks(scores, true_key, n_bytes)
    if not live:
        rank = 256 ** dead
        return EvaluationResult(rank, guessing_entropy(rank), ranks, "estimated", 0.0)

    width = span[live].max() / n_bins
    hists, target = [], 0
    for b in live:
        idx = np.minimum(np.floor((lp[b] - lp[b].min()) / width), n_bins - 1).astype(np.int64)
        hists.append(np.bincount(idx, minlength=n_bins).astype(np.float64))
        target += int(idx[true_key[b]])
    n = len(live)
    hists = np.array(hists)
    above, maybe = _tail_masses(hists, (target + n + 1, target - n), target)
    factor = 256.0 ** dead
    lo = max(1.0, (1.0 + round(above)) * factor)
    hi = max(lo, round(maybe) * factor)
    g_lo, g_hi = math.log2(lo), math.log2(hi)
    mid = 0.5 * (g_lo + g_hi)
    rank = max(1, int(round(2.0 ** mid)))
    return EvaluationResult(rank, guessing_entropy(rank), ranks, "estimated",
                            0.5 * (g_hi - g_lo))


def rank_direct_convolution(scores: ScoreMatrix, true_key: bytes, n_bytes: int = 16,
                            n_bins: int = N_BINS) -> tuple[float, float]:
    """Rank bracket from the same histograms convolved directly (slow reference)."""
    lp = log_probabilities(scores, n_bytes)
    span = lp.max(axis=1) - lp.min(axis=1)
    live = [b for b in range(n_bytes) if span[b] > 0]
    width = span[live].max() / n_bins
    total = np.ones(1)
    target = 0
    for b in live:
        idx = np.minimum(np.floor((lp[b] - lp[b].min()) / width), n_bins - 1).astype(np.int64)
        total = np.convolve(total, np.bincount(idx, minlength=n_bins).astype(np.float64))
        target += int(idx[true_key[b]])
    n = len(live)
    factor = 256.0 ** (n_bytes - n)
    lo = (1.0 + total[target + n + 1:].sum()) * factor
    hi = total[max(target - n, 0):].sum() * factor
    return lo, hi


def evaluate(scores: ScoreMatrix, true_key: bytes, n_bytes: int = 16) -> EvaluationResult:
    """Exhaustive rank when the key space allows it, histogram estimate otherwise."""
    if n_bytes <= EXHAUSTIVE_MAX_BYTES:
        return exhaustive_key_rank(scores, true_key, n_bytes)
    return estimate_key_rank(scores, true_key, n_bytes)
