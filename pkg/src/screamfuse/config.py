"""TOML run configuration.

Example::

    master_seed = 7
    output_dir = "out"

    [simulation]
    n_plaintexts = 2000        # encryptions per channel (profiling + attack)
    time_diversity = 10
    n_samples = 64
    leak_sample_indices = [0, 4, 8]      # optional, default 4*b for b in 0..15
    key = "000102030405060708090a0b0c0d0e0f"

    [[simulation.channels]]
    label = "f2464"
    frequency_hz = 2.464e9
    gain = 1.0
    noise_std = 19.0
    distortion_seed = 0
    distortion_strength = 0.0

    [preprocessing]
    n_per_byte = 1
    share_pois = false

    [attack]
    n_profiling = 1000
    n_attack = 1000

    [fusion]
    method = "decision"        # or "data"
    aggregation = "avg"        # avg | max | prod
    sign_correct = false
    combinations = [["f2464", "f2465"]]   # default: all channels together

    [evaluation]
    repeats = 20
    trace_grid = [20, 40, 80, 160]
    thresholds = [39, 35, 32]
    limit_order = 4
    profiling_traces = 25600   # sweep/greedy profiling set size
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evaluation import DEFAULT_THRESHOLDS, Combination, SweepSpec
from .fusion import AggregationFn
from .sim import DEFAULT_LEAK_INDICES, DEFAULT_N_SAMPLES, ChannelModel, SimConfig
from .trace_model import ChannelMeta

DEFAULT_KEY = bytes(range(16))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig
    n_per_byte: int = 1
    share_pois: bool = False
    n_profiling: int = 0
    n_attack: int = 0
    method: str = "decision"
    aggregation: AggregationFn = AggregationFn.AVG
    sign_correct: bool = False
    combinations: tuple = ()
    repeats: int = 20
    trace_grid: tuple = ()
    thresholds: tuple = DEFAULT_THRESHOLDS
    limit_order: int = 4
    profiling_traces: int = 25600
    output_dir: Optional[str] = None
    master_seed: int = 0

    def sweep_spec(self, threads: int = 1) -> SweepSpec:
        grid = self.trace_grid or (self.n_attack,)
        return SweepSpec(
            sim=self.sim, trace_grid=grid, repeats=self.repeats,
            n_profiling=self.profiling_traces, n_per_byte=self.n_per_byte,
            share_pois=self.share_pois, combinations=self.combinations,
            thresholds=self.thresholds, master_seed=self.master_seed, threads=threads,
        )


class _Section:
    """Typed accessor that reports the dotted path of a bad field."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a table")
        self.data, self.path = data, path

    def where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default: Any = ..., check=None, msg: str = ""):
        if key not in self.data:
            if default is ...:
                raise ConfigError(f"{self.where(key)}: required field missing")
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ConfigError(f"{self.where(key)}: expected {kind.__name__}, got {value!r}")
        if check is not None and not check(value):
            raise ConfigError(f"{self.where(key)}: {msg} (got {value!r})")
        return value

    def int_list(self, key: str, default: Any = ...):
        values = self.get(key, list, default)
        if values is default:
            return default
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
            raise ConfigError(f"{self.where(key)}: expected a list of integers")
        return tuple(values)

    def section(self, key: str) -> "_Section":
        return _Section(self.data.get(key, {}), self.where(key))


def _parse_key(text: str, where: str) -> bytes:
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"{where}: key must be 32 hex digits") from None
    if len(key) != 16:
        raise ConfigError(f"{where}: key must be 16 bytes, got {len(key)}")
    return key


def parse_config(data: dict, seed_override: Optional[int] = None) -> RunConfig:
    root = _Section(data, "")
    seed = root.get("master_seed", int, 0, lambda v: v >= 0, "must be >= 0")
    if seed_override is not None:
        seed = seed_override
    sim = root.section("simulation")
    chans = sim.get("channels", list)
    if not chans:
        raise ConfigError("simulation.channels: at least one channel required")
    models = []
    for i, raw in enumerate(chans):
        c = _Section(raw, f"simulation.channels[{i}]")
        label = c.get("label", str, f"ch{i}")
        meta = ChannelMeta(
            c.get("frequency_hz", float, 2.45e9 + 1e6 * i, lambda v: v > 0, "must be > 0"), label)
        models.append(ChannelModel(
            meta,
            gain=c.get("gain", float, 1.0),
            noise_std=c.get("noise_std", float, 1.0, lambda v: v >= 0, "must be >= 0"),
            distortion_seed=c.get("distortion_seed", int, i),
            distortion_strength=c.get("distortion_strength", float, 0.0,
                                      lambda v: 0 <= v <= 1, "must be in [0, 1]"),
        ))
    labels = [m.meta.label for m in models]
    if len(set(labels)) != len(labels):
        raise ConfigError("simulation.channels: labels must be unique")
    n_samples = sim.get("n_samples", int, DEFAULT_N_SAMPLES, lambda v: v > 0, "must be positive")
    leak = sim.int_list("leak_sample_indices", DEFAULT_LEAK_INDICES)
    if not leak or len(set(leak)) != len(leak) or not all(0 <= v < n_samples for v in leak):
        raise ConfigError("simulation.leak_sample_indices: must be distinct indices < n_samples")
    n_pt = sim.get("n_plaintexts", int, 1000, lambda v: v > 0, "must be positive")
    key = _parse_key(sim.get("key", str, DEFAULT_KEY.hex()), sim.where("key"))
    simcfg = SimConfig(
        channels=models, n_plaintexts=n_pt, key=key,
        time_diversity=sim.get("time_diversity", int, 1, lambda v: v > 0, "must be positive"),
        n_samples=n_samples, leak_sample_indices=leak, master_seed=seed,
    )

    pre = root.section("preprocessing")
    att = root.section("attack")
    n_prof = att.get("n_profiling", int, n_pt // 2, lambda v: v > 0, "must be positive")
    n_att = att.get("n_attack", int, n_pt - n_prof, lambda v: v > 0, "must be positive")
    if n_prof + n_att > n_pt:
        raise ConfigError(
            f"attack: n_profiling + n_attack = {n_prof + n_att} exceeds "
            f"simulation.n_plaintexts = {n_pt}")

    fus = root.section("fusion")
    method = fus.get("method", str, "decision", lambda v: v in ("data", "decision"),
                     "must be 'data' or 'decision'")
    try:
        agg = AggregationFn.parse(fus.get("aggregation", str, "avg"))
    except ValueError as exc:
        raise ConfigError(f"fusion.aggregation: {exc}") from None
    sign = fus.get("sign_correct", bool, False)
    combos_raw = fus.get("combinations", list, [labels] if len(labels) > 1 else [])
    combos = []
    for i, comb in enumerate(combos_raw):
        if not isinstance(comb, list) or not all(isinstance(l, str) for l in comb):
            raise ConfigError(f"fusion.combinations[{i}]: expected a list of channel labels")
        unknown = set(comb) - set(labels)
        if unknown:
            raise ConfigError(f"fusion.combinations[{i}]: unknown channels {sorted(unknown)}")
        if len(comb) < 2:
            raise ConfigError(f"fusion.combinations[{i}]: needs at least 2 channels")
        combos.append(Combination(tuple(comb), method, agg, sign))

    ev = root.section("evaluation")
    grid = ev.int_list("trace_grid", ())
    if grid and (grid[0] < 2 or any(b <= a for a, b in zip(grid, grid[1:]))):
        raise ConfigError("evaluation.trace_grid: must be increasing and start at >= 2")
    thresholds = ev.get("thresholds", list, list(DEFAULT_THRESHOLDS))
    if not all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in thresholds):
        raise ConfigError("evaluation.thresholds: expected numbers")
    if any(b >= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("evaluation.thresholds: must be strictly decreasing")

    return RunConfig(
        sim=simcfg,
        n_per_byte=pre.get("n_per_byte", int, 1, lambda v: 0 < v <= n_samples,
                           "must be in [1, n_samples]"),
        share_pois=pre.get("share_pois", bool, False),
        n_profiling=n_prof, n_attack=n_att,
        method=method, aggregation=agg, sign_correct=sign, combinations=tuple(combos),
        repeats=ev.get("repeats", int, 20, lambda v: v > 0, "must be positive"),
        trace_grid=grid,
        thresholds=tuple(float(t) for t in thresholds),
        limit_order=ev.get("limit_order", int, 4, lambda v: v >= 1, "must be >= 1"),
        profiling_traces=ev.get("profiling_traces", int, 25600, lambda v: v >= 2, "must be >= 2"),
        output_dir=root.get("output_dir", str, None),
        master_seed=seed,
    )


def load_config(path, seed_override: Optional[int] = None) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return parse_config(data, seed_override)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
