"""Trace conditioning: time-diversity averaging, z-score, SNR-based POIs.

Standard deviations are population (1/N) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sim import SBOX
from .trace_model import TraceSet


class DegenerateInputError(ValueError):
    pass


def time_diversity_average(ts: TraceSet) -> TraceSet:
    """Collapse each run of ``time_diversity`` same-plaintext traces to its mean."""
    td = ts.time_diversity
    if td == 1:
        return ts
    if ts.n_traces % td:
        raise ValueError(
            f"{ts.n_traces} traces not divisible by time_diversity={td}"
        )
    n = ts.n_traces // td
    pts = ts.plaintexts.reshape(n, td, 16)
    if not (pts == pts[:, :1]).all():
        raise ValueError("plaintext mismatch inside a time-diversity group")
    means = ts.samples.reshape(n, td, ts.n_samples).astype(np.float64).mean(axis=1)
    keys = None if ts.keys is None else ts.keys[::td]
    return TraceSet(ts.channel, means, pts[:, 0], keys, 1, ts.n_samples)


def zscore(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise DegenerateInputError("zscore needs at least 2 values")
    mu = x.mean()
    sd = np.sqrt(np.mean((x - mu) ** 2))
    if sd == 0 or not np.isfinite(sd):
        raise DegenerateInputError("zscore of constant input")
    return (x - mu) / sd


def zscore_columns(x: np.ndarray) -> np.ndarray:
    """Column-wise :func:`zscore` of a 2-D matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise DegenerateInputError("zscore needs at least 2 rows")
    mu = x.mean(axis=0)
    sd = np.sqrt(np.mean((x - mu) ** 2, axis=0))
    if (sd == 0).any():
        bad = np.flatnonzero(sd == 0).tolist()
        raise DegenerateInputError(f"constant column(s) {bad}")
    return (x - mu) / sd


@dataclass(frozen=True)
class PoiSet:
    per_byte: tuple
    snr: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "per_byte",
                           tuple(tuple(int(i) for i in p) for p in self.per_byte))
        if len(self.per_byte) != 16:
            raise ValueError("PoiSet needs POIs for 16 bytes")
        if any(len(p) == 0 for p in self.per_byte):
            raise ValueError("every byte needs at least one POI")

    @property
    def indices(self) -> tuple:
        return tuple(sorted({i for p in self.per_byte for i in p}))

    @property
    def n_per_byte(self) -> int:
        return min(len(p) for p in self.per_byte)

    def __eq__(self, other):
        if not isinstance(other, PoiSet):
            return NotImplemented
        return self.per_byte == other.per_byte and np.array_equal(self.snr, other.snr)

    def remapped(self) -> "PoiSet":
        """Same POIs expressed as column positions inside ``indices``."""
        pos = {s: k for k, s in enumerate(self.indices)}
        per_byte = [[pos[i] for i in p] for p in self.per_byte]
        return PoiSet(per_byte, self.snr[:, list(self.indices)])


def snr_per_sample(samples: np.ndarray, classes: np.ndarray, n_classes: int = 256) -> np.ndarray:
    """Variance of class means over mean of class variances, per column.

    Empty classes are ignored. Columns with zero within-class variance get
    ``inf`` when the class means differ and 0 otherwise.
    """
    x = np.asarray(samples, dtype=np.float64)
    counts = np.bincount(classes, minlength=n_classes).astype(np.float64)
    present = counts > 0
    sums = np.zeros((n_classes, x.shape[1]))
    sq = np.zeros((n_classes, x.shape[1]))
    np.add.at(sums, classes, x)
    np.add.at(sq, classes, x * x)
    c = counts[present][:, None]
    means = sums[present] / c
    variances = np.maximum(sq[present] / c - means ** 2, 0.0)
    signal = means.var(axis=0)
    noise = variances.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(noise > 0, signal / np.where(noise > 0, noise, 1.0),
                       np.where(signal > 1e-12, np.inf, 0.0))
    return out


def byte_ivs(ts: TraceSet, byte: int) -> np.ndarray:
    if ts.keys is None:
        raise ValueError("profiling set must carry keys")
    return SBOX[ts.plaintexts[:, byte] ^ ts.keys[:, byte]]


def select_pois(profiling: TraceSet, n_per_byte: int = 1) -> PoiSet:
    if profiling.keys is None:
        raise ValueError("POI selection needs a keyed profiling set")
    if profiling.time_diversity != 1:
        raise ValueError("collapse time diversity before POI selection")
    if not 1 <= n_per_byte <= profiling.n_samples:
        raise ValueError(f"n_per_byte must be in [1, {profiling.n_samples}]")
    if profiling.n_traces < 2:
        raise ValueError("need at least 2 profiling traces")
    snr = np.empty((16, profiling.n_samples))
    per_byte = []
    for b in range(16):
        s = snr_per_sample(profiling.samples, byte_ivs(profiling, b))
        snr[b] = s
        # stable sort on -snr keeps the lower index first on ties
        order = np.argsort(-s, kind="stable")
        per_byte.append(order[:n_per_byte].tolist())
    return PoiSet(per_byte, snr)


def write_pois(pois: PoiSet, path) -> None:
    lines = [" ".join(str(v) for v in (b, *p)) for b, p in enumerate(pois.per_byte)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pois(path) -> PoiSet:
    per_byte: dict[int, list[int]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            fields = [int(v) for v in line.split()]
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
        if len(fields) < 2:
            raise ValueError(f"{path}:{n}: expected byte index and at least one POI")
        per_byte[fields[0]] = fields[1:]
    if sorted(per_byte) != list(range(16)):
        raise ValueError(f"{path}: POIs must cover bytes 0..15")
    n_samples = max(max(p) for p in per_byte.values()) + 1
    return PoiSet([per_byte[b] for b in range(16)], np.full((16, n_samples), np.nan))
