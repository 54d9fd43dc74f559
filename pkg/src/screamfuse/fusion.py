"""Combining frequency channels.

Data fusion z-scores each channel's POI columns, optionally flips channels
whose leakage profile is inverted with respect to the first one, and averages
them into a single pseudo-channel. Decision fusion min-max normalises every
channel's score vectors and aggregates them with avg, max or prod.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attack import LeakageProfile, ScoreMatrix, build_profile, profile_similarity
from .preprocess import PoiSet, zscore_columns
from .rank import minmax
from .trace_model import ChannelMeta, TraceSet

COMPATIBILITY_THRESHOLD = 0.2


class AggregationFn(enum.Enum):
    AVG = "avg"
    MAX = "max"
    PROD = "prod"

    @classmethod
    def parse(cls, value) -> "AggregationFn":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown aggregation {value!r}; expected avg, max or prod") from None


class FusionWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class FusedTraceSet:
    """Merged POI values, one column per entry of ``columns`` (original sample indices)."""

    values: np.ndarray
    plaintexts: np.ndarray
    keys: Optional[np.ndarray]
    columns: tuple
    pois: PoiSet
    provenance: tuple
    sign_corrections: tuple

    def as_trace_set(self) -> TraceSet:
        label = "+".join(self.provenance)
        return TraceSet(ChannelMeta(1.0, label), self.values, self.plaintexts, self.keys, 1,
                        len(self.columns))

    @property
    def column_pois(self) -> PoiSet:
        """POIs re-expressed as column positions of :meth:`as_trace_set`."""
        return self.pois.remapped()


def inversion_signs(profiles: Sequence[LeakageProfile]) -> tuple:
    """+1/-1 per channel: -1 when its mean per-byte similarity to channel 0 is negative."""
    ref = profiles[0]
    signs = [1]
    for p in profiles[1:]:
        sim = np.mean([profile_similarity(ref, p, b) for b in range(16)])
        signs.append(-1 if sim < 0 else 1)
    return tuple(signs)


def data_fusion(sets: Sequence[TraceSet], pois: PoiSet, sign_correct: bool = False,
                profiles: Optional[Sequence[LeakageProfile]] = None,
                signs: Optional[Sequence[int]] = None) -> FusedTraceSet:
    """Normalise-then-average fusion at the POIs.

    Sign corrections come from ``signs`` when given, else from ``profiles``
    (or profiles built from the sets themselves, which then need keys).
    """
    sets = list(sets)
    if len(sets) < 2:
        raise ValueError("data fusion needs at least 2 channels")
    ref = sets[0]
    for s in sets[1:]:
        if s.n_traces != ref.n_traces or not np.array_equal(s.plaintexts, ref.plaintexts):
            raise ValueError(f"plaintext mismatch between {ref.channel.label} and {s.channel.label}")
    if any(s.time_diversity != 1 for s in sets):
        raise ValueError("collapse time diversity before fusing")
    columns = pois.indices
    if signs is None:
        signs = (1,) * len(sets)
        if sign_correct:
            if profiles is None:
                profiles = [build_profile(s, pois) for s in sets]
            signs = inversion_signs(profiles)
    if len(signs) != len(sets):
        raise ValueError("one sign per channel required")
    acc = np.zeros((ref.n_traces, len(columns)))
    for s, sign in zip(sets, signs):
        acc += sign * zscore_columns(s.samples[:, list(columns)])
    merged = acc / len(sets)
    return FusedTraceSet(merged, ref.plaintexts, ref.keys, columns, pois,
                         tuple(s.channel.label for s in sets), tuple(int(v) for v in signs))


def decision_fusion(scores: Sequence[ScoreMatrix], agg=AggregationFn.AVG) -> ScoreMatrix:
    agg = AggregationFn.parse(agg)
    scores = list(scores)
    if len(scores) < 2:
        raise ValueError("decision fusion needs at least 2 score matrices")
    nb = scores[0].n_bytes
    if any(s.n_bytes != nb for s in scores):
        raise ValueError("score matrices cover different bytes")
    stack = np.empty((len(scores), nb, 256))
    degenerate = np.zeros(nb, dtype=bool)
    for i, s in enumerate(scores):
        for b in range(nb):
            stack[i, b], deg = minmax(s.scores[b])
            degenerate[b] |= deg
    # sorting over channels makes the reduction independent of input order
    stack = np.sort(stack, axis=0)
    if agg is AggregationFn.AVG:
        fused = stack.sum(axis=0) / len(scores)
    elif agg is AggregationFn.MAX:
        fused = stack[-1]
    else:
        fused = np.prod(stack, axis=0)
    flagged = np.zeros((nb, 256), dtype=bool)
    flagged[degenerate] = True
    for s in scores:
        flagged |= s.flagged
    provenance = tuple(c for s in scores for c in s.channels)
    return ScoreMatrix(fused, provenance, max(s.n_traces for s in scores), flagged)


@dataclass(frozen=True)
class CompatibilityReport:
    channel_a: str
    channel_b: str
    similarity: tuple
    flip: tuple
    incompatible: tuple

    @property
    def compatible(self) -> bool:
        return not any(self.incompatible)

    def rows(self):
        for b in range(len(self.similarity)):
            yield (self.channel_a, self.channel_b, b, self.similarity[b], self.flip[b])


def check_fusion_compatibility(a: LeakageProfile, b: LeakageProfile,
                               threshold: float = COMPATIBILITY_THRESHOLD) -> CompatibilityReport:
    sims = tuple(profile_similarity(a, b, byte) for byte in range(16))
    return CompatibilityReport(
        a.channel.label, b.channel.label, sims,
        tuple(s < 0 for s in sims),
        tuple(abs(s) < threshold for s in sims),
    )


def write_compatibility_csv(reports: Sequence[CompatibilityReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel_a", "channel_b", "byte", "similarity", "flip"])
        for r in reports:
            for a, b, byte, sim, flip in r.rows():
                w.writerow([a, b, byte, f"{sim:.6f}", int(flip)])


def warn_if_inverted(profiles: Sequence[LeakageProfile], sign_correct: bool) -> list:
    """Compatibility reports of every channel against the first; warns on inversions."""
    reports = [check_fusion_compatibility(profiles[0], p) for p in profiles[1:]]
    for r in reports:
        if not sign_correct and np.mean(r.similarity) < 0:
            warnings.warn(
                f"{r.channel_b} has an inverted profile relative to {r.channel_a}; "
                "data fusion without sign correction will cancel the leakage",
                FusionWarning, stacklevel=2)
        elif not r.compatible:
            warnings.warn(f"{r.channel_b} profile is dissimilar to {r.channel_a}",
                          FusionWarning, stacklevel=2)
    return reports


def fuse_profiling(prof_sets: Sequence[TraceSet], pois: PoiSet, sign_correct: bool = False):
    """Data-fuse keyed profiling sets and profile the fused pseudo-channel.

    Returns ``(profile, column_pois, signs)``; fuse attack sets with the same
    ``signs`` and attack them with ``profile`` and ``column_pois``.
    """
    signs = None
    if sign_correct:
        signs = inversion_signs([build_profile(s, pois) for s in prof_sets])
    fused = data_fusion(prof_sets, pois, sign_correct, signs=signs)
    cols = fused.column_pois
    return build_profile(fused.as_trace_set(), cols), cols, fused.sign_corrections
