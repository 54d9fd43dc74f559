"""Trace containers and the ``SCRM`` binary trace-set format.

A :class:`TraceSet` keeps its traces as one ``(n_traces, n_samples)`` float32
matrix plus a ``(n_traces, 16)`` uint8 plaintext matrix; :class:`Trace` is the
per-row view. Statistics downstream always promote to float64.

File layout (little-endian)::

    "SCRM" | u16 version=1 | u16 flags (bit0: keys) | u64 n_traces
    | u32 n_samples | u32 time_diversity | f64 frequency_hz
    | u16 label_len | label (utf-8)
    | per trace: 16B plaintext | [16B key] | n_samples * f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

MAGIC = b"SCRM"
VERSION = 1
FLAG_KEYS = 0x0001
_HEADER = struct.Struct("<4sHHQIIdH")


class TraceFormatError(ValueError):
    """Base class for malformed trace files."""


class BadMagicError(TraceFormatError):
    pass


class VersionMismatchError(TraceFormatError):
    pass


class TruncatedPayloadError(TraceFormatError):
    pass


@dataclass(frozen=True)
class ChannelMeta:
    frequency_hz: float
    label: str

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise ValueError(f"frequency_hz must be > 0, got {self.frequency_hz}")


@dataclass(frozen=True)
class Trace:
    samples: np.ndarray
    plaintext: bytes
    key: Optional[bytes] = None

    def __post_init__(self):
        if len(self.plaintext) != 16:
            raise ValueError("plaintext must be exactly 16 bytes")
        if self.key is not None and len(self.key) != 16:
            raise ValueError("key must be exactly 16 bytes")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TraceSet:
    """Traces of one frequency channel.

    ``keys`` is either ``None`` (attack set) or a ``(n_traces, 16)`` array.
    Traces sharing a plaintext are stored in consecutive runs of
    ``time_diversity`` rows.
    """

    channel: ChannelMeta
    samples: np.ndarray
    plaintexts: np.ndarray
    keys: Optional[np.ndarray] = None
    time_diversity: int = 1
    n_samples: int = field(default=-1)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float32, order="C", copy=True)
        plaintexts = np.array(self.plaintexts, dtype=np.uint8, order="C", copy=True)
        if samples.ndim == 1 and samples.size == 0:
            samples = samples.reshape(0, max(self.n_samples, 0))
        if plaintexts.size == 0:
            plaintexts = plaintexts.reshape(0, 16)
        if samples.ndim != 2:
            raise ValueError("samples must be a 2-D (n_traces, n_samples) array")
        n_samples = samples.shape[1] if self.n_samples < 0 else self.n_samples
        if n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if samples.shape[1] != n_samples:
            raise ValueError(
                f"all traces must have n_samples={n_samples}, got {samples.shape[1]}"
            )
        if plaintexts.ndim != 2 or plaintexts.shape[1] != 16:
            raise ValueError("plaintexts must be (n_traces, 16)")
        if plaintexts.shape[0] != samples.shape[0]:
            raise ValueError("one plaintext per trace required")
        keys = None
        if self.keys is not None:
            keys = np.array(self.keys, dtype=np.uint8, order="C", copy=True)
            if keys.size == 0:
                keys = keys.reshape(0, 16)
            if keys.ndim == 1:
                keys = np.tile(keys, (samples.shape[0], 1))
            if keys.shape != plaintexts.shape:
                raise ValueError("keys must be (n_traces, 16)")
            keys = _readonly(keys)
        if int(self.time_diversity) < 1:
            raise ValueError("time_diversity must be >= 1")
        object.__setattr__(self, "samples", _readonly(samples))
        object.__setattr__(self, "plaintexts", _readonly(plaintexts))
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "time_diversity", int(self.time_diversity))
        object.__setattr__(self, "n_samples", int(n_samples))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def has_keys(self) -> bool:
        return self.keys is not None

    @property
    def traces(self) -> Iterator[Trace]:
        for i in range(self.n_traces):
            key = None if self.keys is None else self.keys[i].tobytes()
            yield Trace(self.samples[i], self.plaintexts[i].tobytes(), key)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceSet):
            return NotImplemented
        if (self.keys is None) != (other.keys is None):
            return False
        return (
            self.channel == other.channel
            and self.time_diversity == other.time_diversity
            and self.n_samples == other.n_samples
            and self.samples.shape == other.samples.shape
            # bitwise comparison so NaN payloads and -0.0 count
            and self.samples.tobytes() == other.samples.tobytes()
            and np.array_equal(self.plaintexts, other.plaintexts)
            and (self.keys is None or np.array_equal(self.keys, other.keys))
        )

    def subset(self, rows) -> "TraceSet":
        rows = np.asarray(rows)
        return TraceSet(
            channel=self.channel,
            samples=self.samples[rows],
            plaintexts=self.plaintexts[rows],
            keys=None if self.keys is None else self.keys[rows],
            time_diversity=self.time_diversity,
            n_samples=self.n_samples,
        )

    def scaled(self, gain: float) -> "TraceSet":
        """Copy with every sample multiplied by ``gain`` (noise included)."""
        return TraceSet(
            channel=self.channel,
            samples=self.samples * np.float32(gain),
            plaintexts=self.plaintexts,
            keys=self.keys,
            time_diversity=self.time_diversity,
            n_samples=self.n_samples,
        )

    def without_keys(self) -> "TraceSet":
        return TraceSet(self.channel, self.samples, self.plaintexts, None,
                        self.time_diversity, self.n_samples)


def trace_set_from_traces(channel: ChannelMeta, traces: Sequence[Trace],
                          n_samples: int, time_diversity: int = 1) -> TraceSet:
    traces = list(traces)
    with_key = [t.key is not None for t in traces]
    if any(with_key) and not all(with_key):
        raise ValueError("keys must be present on every trace or on none")
    samples = np.array([np.asarray(t.samples, dtype=np.float32) for t in traces],
                       dtype=np.float32).reshape(len(traces), -1)
    if traces and samples.shape[1] != n_samples:
        raise ValueError(f"all traces must have n_samples={n_samples}")
    pts = np.frombuffer(b"".join(t.plaintext for t in traces), dtype=np.uint8)
    keys = None
    if traces and all(with_key):
        keys = np.frombuffer(b"".join(t.key for t in traces), dtype=np.uint8).reshape(-1, 16)
    return TraceSet(channel, samples.reshape(len(traces), n_samples),
                    pts.reshape(-1, 16), keys, time_diversity, n_samples)


def write_trace_set(ts: TraceSet, path) -> None:
    label = ts.channel.label.encode("utf-8")
    if len(label) > 0xFFFF:
        raise ValueError("label too long")
    flags = FLAG_KEYS if ts.has_keys else 0
    header = _HEADER.pack(MAGIC, VERSION, flags, ts.n_traces, ts.n_samples,
                          ts.time_diversity, float(ts.channel.frequency_hz), len(label))
    parts = [ts.plaintexts]
    if ts.has_keys:
        parts.append(ts.keys)
    parts.append(ts.samples.astype("<f4").view(np.uint8).reshape(ts.n_traces, 4 * ts.n_samples))
    body = np.concatenate(parts, axis=1) if ts.n_traces else np.zeros((0, 0), np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(label)
        fh.write(np.ascontiguousarray(body).tobytes())


def read_trace_set(path) -> TraceSet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    _, version, flags, n_traces, n_samples, td, freq, label_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    off = _HEADER.size
    if len(data) < off + label_len:
        raise TruncatedPayloadError(f"{path}: truncated label")
    label = data[off:off + label_len].decode("utf-8")
    off += label_len
    has_keys = bool(flags & FLAG_KEYS)
    row = 16 + (16 if has_keys else 0) + 4 * n_samples
    expected = off + row * n_traces
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(data) - off} bytes, header declares {row * n_traces}"
        )
    if len(data) > expected:
        raise TraceFormatError(f"{path}: {len(data) - expected} trailing bytes")
    body = np.frombuffer(data, dtype=np.uint8, count=row * n_traces, offset=off)
    body = body.reshape(n_traces, row)
    pts = body[:, :16]
    keys = body[:, 16:32] if has_keys else None
    samples = body[:, row - 4 * n_samples:].copy().view("<f4").reshape(n_traces, n_samples)
    return TraceSet(ChannelMeta(freq, label), samples, pts, keys, td, n_samples)
