"""Seeded multi-frequency leakage simulator.

Each channel sees the same encryptions (plaintexts are shared) with its own
gain, per-IV profile distortion and independent Gaussian noise. Randomness
comes from Philox streams spawned off one ``SeedSequence``:

* spawn key ``(0,)`` -> plaintexts
* spawn key ``(1, c)`` -> noise of channel ``c``; row ``i`` / column ``j`` of
  the drawn block is trace ``i`` / sample ``j``

so adding or reordering other channels never changes a channel's noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .trace_model import ChannelMeta, TraceSet

# fmt: off
SBOX = np.array([
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
], dtype=np.uint8)
# fmt: on

HW = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)

DEFAULT_N_SAMPLES = 64
DEFAULT_LEAK_INDICES = tuple(4 * b for b in range(16))


def intermediate_value(plaintext_byte, key_byte):
    """First-round S-box output ``SBOX[p ^ k]``; works on scalars and arrays."""
    v = SBOX[np.bitwise_xor(plaintext_byte, key_byte)]
    return int(v) if np.ndim(v) == 0 else v


def hamming_weight(v):
    w = HW[np.asarray(v, dtype=np.uint8)]
    return int(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class ChannelModel:
    meta: ChannelMeta
    gain: float = 1.0
    noise_std: float = 1.0
    distortion_seed: int = 0
    distortion_strength: float = 0.0

    def __post_init__(self):
        if not self.noise_std >= 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.distortion_strength <= 1.0:
            raise ValueError(
                f"distortion_strength must be in [0, 1], got {self.distortion_strength}"
            )


def _perturbation(seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    return rng.uniform(0.0, 8.0, size=256)


def channel_profile(model: ChannelModel) -> np.ndarray:
    """Expected noiseless leakage of each IV value on this channel."""
    base = HW.astype(np.float64)
    s = model.distortion_strength
    if s:
        base = (1.0 - s) * base + s * _perturbation(model.distortion_seed)
    return model.gain * base


@dataclass(frozen=True)
class SimConfig:
    channels: Sequence[ChannelModel]
    n_plaintexts: int
    key: bytes
    time_diversity: int = 1
    n_samples: int = DEFAULT_N_SAMPLES
    leak_sample_indices: Sequence[int] = DEFAULT_LEAK_INDICES
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "leak_sample_indices",
                           tuple(int(i) for i in self.leak_sample_indices))
        object.__setattr__(self, "key", bytes(self.key))
        if not self.channels:
            raise ValueError("at least one channel is required")
        if self.n_plaintexts < 1:
            raise ValueError("n_plaintexts must be positive")
        if self.time_diversity < 1:
            raise ValueError("time_diversity must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if len(self.key) != 16:
            raise ValueError("key must be 16 bytes")
        idx = self.leak_sample_indices
        if not idx:
            raise ValueError("leak_sample_indices must be non-empty")
        if len(set(idx)) != len(idx):
            raise ValueError("leak_sample_indices must be distinct")
        if any(i < 0 or i >= self.n_samples for i in idx):
            raise ValueError("leak_sample_indices out of range")
        labels = [c.meta.label for c in self.channels]
        if len(set(labels)) != len(labels):
            raise ValueError("channel labels must be unique")

    def leak_index(self, byte: int) -> int:
        return self.leak_sample_indices[byte % len(self.leak_sample_indices)]


def draw_plaintexts(n: int, master_seed: int) -> np.ndarray:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(0,))
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.integers(0, 256, size=(n, 16), dtype=np.uint8)


def _noise_rng(master_seed: int, channel_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(1, int(channel_index)))
    return np.random.Generator(np.random.Philox(ss))


def simulate_channel(config: SimConfig, channel_index: int,
                     plaintexts: Optional[np.ndarray] = None) -> TraceSet:
    model = config.channels[channel_index]
    if plaintexts is None:
        plaintexts = draw_plaintexts(config.n_plaintexts, config.master_seed)
    td = config.time_diversity
    key = np.frombuffer(config.key, dtype=np.uint8)
    raw_pts = np.repeat(plaintexts, td, axis=0)
    n_raw = raw_pts.shape[0]

    profile = channel_profile(model)
    ivs = SBOX[plaintexts ^ key]
    leak = profile[ivs]  # (n_plaintexts, 16)

    samples = np.zeros((n_raw, config.n_samples), dtype=np.float64)
    if model.noise_std > 0:
        samples += model.noise_std * _noise_rng(config.master_seed, channel_index).standard_normal(
            (n_raw, config.n_samples))
    leak_raw = np.repeat(leak, td, axis=0)
    for b in range(16):
        samples[:, config.leak_index(b)] += leak_raw[:, b]
    return TraceSet(
        channel=model.meta,
        samples=samples,
        plaintexts=raw_pts,
        keys=np.tile(key, (n_raw, 1)),
        time_diversity=td,
        n_samples=config.n_samples,
    )


def simulate(config: SimConfig) -> list[TraceSet]:
    """One trace set per channel, raw (before time-diversity averaging)."""
    pts = draw_plaintexts(config.n_plaintexts, config.master_seed)
    return [simulate_channel(config, c, pts) for c in range(len(config.channels))]
