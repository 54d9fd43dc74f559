"""Profiled correlation attack.

Profiles are per-byte, per-POI class means indexed by the S-box output.
The attack correlates, for every key hypothesis, the profiled leakage of the
predicted IVs with the observed POI samples (Pearson). Several POIs are
combined by averaging their correlations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .preprocess import PoiSet, byte_ivs
from .sim import SBOX
from .trace_model import ChannelMeta, TraceSet

# (256 plaintext values, 256 hypotheses) -> IV
_IV_TABLE = SBOX[np.arange(256)[:, None] ^ np.arange(256)[None, :]]


class ProfileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LeakageProfile:
    """``means[b, j, v]``: mean at the j-th POI of byte b over traces with IV v.

    Classes never observed hold NaN and ``counts == 0``.
    """

    means: np.ndarray
    counts: np.ndarray
    channel: ChannelMeta
    pois: PoiSet

    @property
    def missing(self) -> np.ndarray:
        return self.counts == 0

    def byte_means(self, byte: int, poi: int = 0) -> np.ndarray:
        return self.means[byte, poi]

    def negated(self) -> "LeakageProfile":
        return LeakageProfile(-self.means, self.counts, self.channel, self.pois)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Per-byte 256-vectors of hypothesis scores (higher = more likely).

    ``flagged`` marks hypotheses whose score was patched (constant model vector
    or missing profile class); ``degenerate`` marks bytes whose vector is
    constant.
    """

    scores: np.ndarray
    channels: tuple = ()
    n_traces: int = 0
    flagged: Optional[np.ndarray] = None
    degenerate: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 256:
            raise ValueError("scores must be (n_bytes, 256)")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(s.shape, dtype=bool))
        deg = (s.max(axis=1) == s.min(axis=1))
        if self.degenerate is not None:
            deg = deg | np.asarray(self.degenerate, dtype=bool)
        object.__setattr__(self, "degenerate", deg)

    @property
    def n_bytes(self) -> int:
        return self.scores.shape[0]

    def ranking(self, byte: int) -> np.ndarray:
        """Hypotheses sorted from most to least likely (stable on ties)."""
        return np.argsort(-self.scores[byte], kind="stable")

    def best_key(self) -> bytes:
        return bytes(int(v) for v in self.scores.argmax(axis=1))


def build_profile(profiling: TraceSet, pois: PoiSet) -> LeakageProfile:
    if profiling.keys is None:
        raise ProfileError("profiling set must carry keys")
    if profiling.time_diversity != 1:
        raise ProfileError("collapse time diversity before profiling")
    n_poi = max(len(p) for p in pois.per_byte)
    means = np.full((16, n_poi, 256), np.nan)
    counts = np.zeros((16, 256), dtype=np.int64)
    for b in range(16):
        cols = list(pois.per_byte[b])
        if not cols:
            raise ProfileError(f"no POIs for byte {b}")
        if max(cols) >= profiling.n_samples:
            raise ProfileError(f"POI {max(cols)} out of range for byte {b}")
        iv = byte_ivs(profiling, b)
        cnt = np.bincount(iv, minlength=256)
        counts[b] = cnt
        x = profiling.samples[:, cols].astype(np.float64)
        present = cnt > 0
        for j in range(len(cols)):
            sums = np.bincount(iv, weights=x[:, j], minlength=256)
            means[b, j, present] = sums[present] / cnt[present]
    return LeakageProfile(means, counts, profiling.channel, pois)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        raise ProfileError("zero-variance profile")
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def profile_similarity(a: LeakageProfile, b: LeakageProfile, byte: int) -> float:
    """Pearson correlation of two profiles' class means at the byte's first POI."""
    ma, mb = a.byte_means(byte), b.byte_means(byte)
    shared = ~np.isnan(ma) & ~np.isnan(mb)
    if shared.sum() < 3:
        raise ProfileError(f"fewer than 3 shared IV classes for byte {byte}")
    return _pearson(ma[shared], mb[shared])


def _filled_means(profile: LeakageProfile, byte: int):
    """Class means with missing classes replaced by the mean of present ones."""
    m = profile.means[byte].copy()
    missing = profile.missing[byte]
    if missing.all():
        raise ProfileError(f"profile has no classes for byte {byte}")
    if missing.any():
        fill = np.nanmean(m, axis=1)
        m[:, missing] = fill[:, None]
    return m, missing


def _prefix_pearson(model: np.ndarray, obs: np.ndarray, ends: Sequence[int]):
    """Pearson correlation of every model column with ``obs`` on each prefix.

    ``model`` is (n, H), ``obs`` is (n,). Returns ``(r, constant)`` with shape
    (len(ends), H); ``constant`` marks model columns with no variation on that
    prefix.
    """
    ends = np.asarray(ends)
    idx = ends - 1
    # centring on the full-set mean keeps the running sums well conditioned
    m = model - model.mean(axis=0)
    o = obs - obs.mean()
    s_m = np.cumsum(m, axis=0)[idx]
    s_mm = np.cumsum(m * m, axis=0)[idx]
    s_mo = np.cumsum(m * o[:, None], axis=0)[idx]
    s_o = np.cumsum(o)[idx][:, None]
    s_oo = np.cumsum(o * o)[idx][:, None]
    n = ends[:, None].astype(np.float64)
    cov = n * s_mo - s_m * s_o
    var_m = n * s_mm - s_m * s_m
    var_o = n * s_oo - s_o * s_o
    run_max = np.maximum.accumulate(model, axis=0)[idx]
    run_min = np.minimum.accumulate(model, axis=0)[idx]
    constant = run_max == run_min
    obs_const = (np.maximum.accumulate(obs)[idx] == np.minimum.accumulate(obs)[idx])[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = cov / np.sqrt(np.maximum(var_m, 0.0) * np.maximum(var_o, 0.0))
    r = np.clip(np.nan_to_num(r, nan=0.0, posinf=0.0, neginf=0.0), -1.0, 1.0)
    r = np.where(obs_const, 0.0, r)
    return r, constant & ~obs_const


def attack_curve(attack: TraceSet, profile: LeakageProfile, pois: PoiSet,
                 trace_counts: Sequence[int]) -> list[ScoreMatrix]:
    """Correlation attack on each prefix ``attack[:n]`` for n in ``trace_counts``."""
    if attack.time_diversity != 1:
        raise ValueError("collapse time diversity before attacking")
    counts = [int(n) for n in trace_counts]
    if not counts or min(counts) < 2 or max(counts) > attack.n_traces:
        raise ValueError(f"trace counts must lie in [2, {attack.n_traces}]")
    out = np.zeros((len(counts), 16, 256))
    flagged = np.zeros((len(counts), 16, 256), dtype=bool)
    x = attack.samples.astype(np.float64)
    for b in range(16):
        cols = pois.per_byte[b]
        means, missing = _filled_means(profile, b)
        ivs = _IV_TABLE[attack.plaintexts[:, b]]  # (n, 256)
        touches_missing = np.maximum.accumulate(missing[ivs], axis=0)[np.asarray(counts) - 1]
        acc = np.zeros((len(counts), 256))
        for j, col in enumerate(cols):
            r, const = _prefix_pearson(means[min(j, means.shape[0] - 1)][ivs], x[:, col], counts)
            r = np.where(const, -1.0, r)
            flagged[:, b] |= const
            acc += r
        out[:, b] = acc / len(cols)
        flagged[:, b] |= touches_missing
    label = (attack.channel.label,)
    return [ScoreMatrix(out[i], label, counts[i], flagged[i]) for i in range(len(counts))]


def correlation_attack(attack: TraceSet, profile: LeakageProfile, pois: PoiSet,
                       n_traces: Optional[int] = None) -> ScoreMatrix:
    n = attack.n_traces if n_traces is None else int(n_traces)
    return attack_curve(attack, profile, pois, [n])[0]


def write_scores_csv(scores: ScoreMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["byte", "hypothesis", "score", "channels", "n_traces"])
        prov = ":".join(scores.channels)
        for b in range(scores.n_bytes):
            for k in range(256):
                w.writerow([b, k, repr(float(scores.scores[b, k])), prov, scores.n_traces])


def read_scores_csv(path) -> ScoreMatrix:
    rows = {}
    prov, n_traces = "", 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"byte", "hypothesis", "score"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, 2):
            try:
                rows[int(row["byte"]), int(row["hypothesis"])] = float(row["score"])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            prov = row.get("channels") or prov
            n_traces = int(row.get("n_traces") or n_traces)
    n_bytes = 1 + max(b for b, _ in rows) if rows else 0
    if len(rows) != 256 * n_bytes or n_bytes == 0:
        raise ValueError(f"{path}: expected 256 hypotheses for each of {n_bytes} bytes")
    s = np.array([[rows[b, k] for k in range(256)] for b in range(n_bytes)])
    return ScoreMatrix(s, tuple(prov.split(":")) if prov else (), n_traces)


def write_profile_csv(profile: LeakageProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["byte", "poi", "sample", "iv", "mean", "count"])
        for b in range(16):
            for j, sample in enumerate(profile.pois.per_byte[b]):
                for v in range(256):
                    m = profile.means[b, j, v]
                    w.writerow([b, j, sample, v, "" if np.isnan(m) else repr(float(m)),
                                int(profile.counts[b, v])])


def read_profile_csv(path, channel: ChannelMeta) -> LeakageProfile:
    per_byte: dict[int, dict[int, int]] = {b: {} for b in range(16)}
    entries = []
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), 2):
            try:
                b, j, s, v = (int(row[k]) for k in ("byte", "poi", "sample", "iv"))
                m = float(row["mean"]) if row["mean"] else np.nan
                c = int(row["count"])
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            per_byte[b][j] = s
            entries.append((b, j, v, m, c))
    if any(not p for p in per_byte.values()):
        raise ValueError(f"{path}: profile must cover bytes 0..15")
    n_poi = max(len(p) for p in per_byte.values())
    means = np.full((16, n_poi, 256), np.nan)
    counts = np.zeros((16, 256), dtype=np.int64)
    for b, j, v, m, c in entries:
        means[b, j, v] = m
        counts[b, v] = c
    pois = PoiSet([[per_byte[b][j] for j in sorted(per_byte[b])] for b in range(16)],
                  np.full((16, 1), np.nan))
    return LeakageProfile(means, counts, channel, pois)
