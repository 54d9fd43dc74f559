"""Monte-Carlo evaluation: GE-vs-traces sweeps, min-traces, greedy diversity search."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .attack import ScoreMatrix, attack_curve, build_profile
from .fusion import AggregationFn, data_fusion, decision_fusion, fuse_profiling
from .preprocess import select_pois, time_diversity_average
from .rank import averaged_ge, estimate_key_rank
from .sim import SimConfig, simulate

NOT_REACHED = None
DEFAULT_THRESHOLDS = (39.0, 35.0, 32.0)


def min_traces_for_ge(grid: Sequence[int], curve: Sequence[float], threshold: float):
    """First grid point whose GE is strictly below ``threshold``; None if never."""
    if len(grid) != len(curve):
        raise ValueError("grid and curve lengths differ")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("trace grid must be increasing")
    for n, ge in zip(grid, curve):
        if ge < threshold:
            return int(n)
    return NOT_REACHED


def derive_seed(master_seed: int, *path: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    a, b = ss.generate_state(2, dtype=np.uint32)
    return (int(a) << 32) | int(b)


# -- greedy frequency-diversity search ---------------------------------------

@dataclass(frozen=True)
class GreedyStep:
    order: int
    ge: float
    selection: tuple
    added: Optional[str]


@dataclass(frozen=True)
class GreedyResult:
    steps: tuple
    individual: Mapping[str, float]

    @property
    def trajectory(self) -> list:
        return [s.ge for s in self.steps]

    @property
    def selection(self) -> tuple:
        return self.steps[-1].selection


def combination_ge(channel_scores: Mapping[str, Sequence[ScoreMatrix]], labels: Sequence[str],
                   true_key: bytes, agg=AggregationFn.AVG,
                   rank: Callable = estimate_key_rank) -> float:
    """Averaged GE of decision-fusing ``labels`` attack by attack."""
    runs = [channel_scores[l] for l in labels]
    n_runs = len(runs[0])
    if any(len(r) != n_runs for r in runs):
        raise ValueError("channels have different numbers of attacks")
    ges = []
    for i in range(n_runs):
        mats = [r[i] for r in runs]
        fused = mats[0] if len(mats) == 1 else decision_fusion(mats, agg)
        ges.append(rank(fused, true_key).guessing_entropy)
    return averaged_ge(ges)


def greedy_diversity_search(channel_scores: Mapping[str, Sequence[ScoreMatrix]],
                            limit_order: int, true_key: bytes, agg=AggregationFn.AVG,
                            rank: Callable = estimate_key_rank) -> GreedyResult:
    """Grow the fused selection one frequency per order, keeping the best candidate.

    Starts from the individually best frequency. At each order the whole
    current selection is fused with every frequency not yet selected; the
    unchanged selection is also a candidate, so the GE never increases.
    ``channel_scores`` maps a label to its per-attack score matrices.
    """
    if limit_order < 1:
        raise ValueError("limit_order must be >= 1")
    labels = list(channel_scores)
    if len(labels) < 2:
        raise ValueError("greedy search needs at least 2 frequencies")
    individual = {l: combination_ge(channel_scores, [l], true_key, agg, rank) for l in labels}
    # stable: equal GEs keep input order
    ordered = sorted(labels, key=lambda l: individual[l])
    selection = [ordered[0]]
    current = individual[ordered[0]]
    steps = [GreedyStep(0, current, tuple(selection), ordered[0])]
    for order in range(1, limit_order + 1):
        best_label, best_ge = None, current
        for cand in ordered:
            if cand in selection:
                continue
            ge = combination_ge(channel_scores, selection + [cand], true_key, agg, rank)
            if ge < best_ge:
                best_label, best_ge = cand, ge
        if best_label is not None:
            selection.append(best_label)
            current = best_ge
        steps.append(GreedyStep(order, current, tuple(selection), best_label))
    return GreedyResult(tuple(steps), individual)


def write_greedy_csv(result: GreedyResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order", "ge", "frequencies", "added"])
        for s in result.steps:
            w.writerow([s.order, f"{s.ge:.6f}", ":".join(s.selection), s.added or ""])


# -- sweeps ---------------------------------------------------------------------

@dataclass(frozen=True)
class Combination:
    labels: tuple
    method: str = "decision"
    agg: AggregationFn = AggregationFn.AVG
    sign_correct: bool = False

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "agg", AggregationFn.parse(self.agg))
        if self.method not in ("data", "decision"):
            raise ValueError(f"unknown fusion method {self.method!r}")
        if len(self.labels) < 2:
            raise ValueError("a combination needs at least 2 frequencies")

    @property
    def name(self) -> str:
        return ":".join(self.labels)

    @property
    def method_name(self) -> str:
        if self.method == "data":
            return "data-signed" if self.sign_correct else "data"
        return f"decision-{self.agg.value}"


@dataclass(frozen=True)
class SweepSpec:
    """``sim`` describes the channels and the attack-set generator.

    Its ``n_plaintexts`` is ignored: every repeat draws ``max(trace_grid)``
    fresh attack encryptions; profiling uses ``n_profiling`` encryptions drawn
    once.
    """

    sim: SimConfig
    trace_grid: tuple
    repeats: int = 20
    n_profiling: int = 25600
    n_per_byte: int = 1
    share_pois: bool = False
    combinations: tuple = ()
    thresholds: tuple = DEFAULT_THRESHOLDS
    master_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "trace_grid", tuple(int(n) for n in self.trace_grid))
        object.__setattr__(self, "combinations", tuple(self.combinations))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        g = self.trace_grid
        if not g or g[0] < 2 or any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("trace grid must be increasing and start at >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.n_profiling < 2:
            raise ValueError("n_profiling must be >= 2")
        labels = {c.meta.label for c in self.sim.channels}
        for comb in self.combinations:
            unknown = set(comb.labels) - labels
            if unknown:
                raise ValueError(f"combination refers to unknown channels {sorted(unknown)}")


@dataclass
class SweepResult:
    trace_grid: tuple
    thresholds: tuple
    # (repeat, label, method, n_traces, ge)
    rows: list = field(default_factory=list)

    def curves(self) -> dict:
        """Averaged GE per grid point for every (label, method)."""
        acc: dict = {}
        for rep, label, method, n, ge in self.rows:
            acc.setdefault((label, method), {}).setdefault(n, []).append(ge)
        return {k: np.array([averaged_ge(v[n]) for n in self.trace_grid]) for k, v in acc.items()}

    def per_repeat(self, label: str, method: str, n_traces: int) -> list:
        return [r[4] for r in self.rows if r[1] == label and r[2] == method and r[3] == n_traces]

    def min_traces(self) -> dict:
        return {k: {t: min_traces_for_ge(self.trace_grid, c, t) for t in self.thresholds}
                for k, c in self.curves().items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["repeat", "frequency_labels", "n_traces", "ge", "method"])
            for rep, label, method, n, ge in self.rows:
                w.writerow([rep, label, n, f"{ge:.6f}", method])

    def write_summary_csv(self, path) -> None:
        curves = self.curves()
        mins = self.min_traces()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency_labels", "method", "final_ge"]
                       + [f"min_traces_ge_lt_{t:g}" for t in self.thresholds])
            for (label, method), curve in curves.items():
                row = [label, method, f"{curve[-1]:.6f}"]
                for t in self.thresholds:
                    m = mins[label, method][t]
                    row.append("not_reached" if m is None else m)
                w.writerow(row)


@dataclass(frozen=True)
class _Prepared:
    profiles: list
    pois: list
    data_profiles: dict
    key: bytes


def _preprocessed(sets):
    return [time_diversity_average(s) for s in sets]


def prepare_profiles(spec: SweepSpec) -> _Prepared:
    prof_cfg = replace(spec.sim, n_plaintexts=spec.n_profiling,
                       master_seed=derive_seed(spec.master_seed, 2))
    prof_sets = _preprocessed(simulate(prof_cfg))
    pois = [select_pois(s, spec.n_per_byte) for s in prof_sets]
    if spec.share_pois:
        pois = [pois[0]] * len(pois)
    profiles = [build_profile(s, p) for s, p in zip(prof_sets, pois)]
    index = {c.meta.label: i for i, c in enumerate(spec.sim.channels)}
    data_profiles = {}
    for comb in spec.combinations:
        if comb.method == "data":
            members = [index[l] for l in comb.labels]
            # the reference channel's POIs are used for every member
            ref_pois = pois[members[0]]
            profile, cols, signs = fuse_profiling([prof_sets[i] for i in members], ref_pois,
                                                  comb.sign_correct)
            data_profiles[comb] = (profile, cols, ref_pois, signs)
    return _Prepared(profiles, pois, data_profiles, spec.sim.key)


def run_repeat(spec: SweepSpec, prep: _Prepared, repeat: int) -> list:
    grid = spec.trace_grid
    n_att = grid[-1]
    cfg = replace(spec.sim, n_plaintexts=n_att, master_seed=derive_seed(spec.master_seed, 3, repeat))
    sets = _preprocessed(simulate(cfg))
    order = np.random.Generator(np.random.Philox(derive_seed(spec.master_seed, 4, repeat))).permutation(n_att)
    sets = [s.subset(order) for s in sets]
    labels = [c.meta.label for c in spec.sim.channels]
    curves = {}
    rows = []
    for label, s, prof, pois in zip(labels, sets, prep.profiles, prep.pois):
        curves[label] = attack_curve(s, prof, pois, grid)
        for n, sm in zip(grid, curves[label]):
            rows.append((repeat, label, "single", n, estimate_key_rank(sm, prep.key).guessing_entropy))
    index = {l: i for i, l in enumerate(labels)}
    for comb in spec.combinations:
        if comb.method == "decision":
            fused = [decision_fusion([curves[l][g] for l in comb.labels], comb.agg)
                     for g in range(len(grid))]
        else:
            profile, cols, ref_pois, signs = prep.data_profiles[comb]
            merged = data_fusion([sets[index[l]] for l in comb.labels], ref_pois,
                                 comb.sign_correct, signs=signs).as_trace_set()
            fused = attack_curve(merged, profile, cols, grid)
        for n, sm in zip(grid, fused):
            rows.append((repeat, comb.name, comb.method_name, n,
                         estimate_key_rank(sm, prep.key).guessing_entropy))
    return rows


def sweep(spec: SweepSpec) -> SweepResult:
    prep = prepare_profiles(spec)
    repeats = range(spec.repeats)
    if spec.threads > 1:
        with ThreadPoolExecutor(spec.threads) as pool:
            chunks = list(pool.map(lambda r: run_repeat(spec, prep, r), repeats))
    else:
        chunks = [run_repeat(spec, prep, r) for r in repeats]
    result = SweepResult(spec.trace_grid, spec.thresholds)
    for rows in chunks:
        result.rows.extend(rows)
    return result


def simulated_channel_scores(spec: SweepSpec, n_traces: Optional[int] = None) -> dict:
    """Per-channel score matrices for ``spec.repeats`` fresh attacks of ``n_traces``."""
    prep = prepare_profiles(spec)
    n = spec.trace_grid[-1] if n_traces is None else n_traces
    labels = [c.meta.label for c in spec.sim.channels]
    out = {l: [] for l in labels}
    for r in range(spec.repeats):
        cfg = replace(spec.sim, n_plaintexts=n, master_seed=derive_seed(spec.master_seed, 3, r))
        for label, s, prof, pois in zip(labels, _preprocessed(simulate(cfg)), prep.profiles, prep.pois):
            out[label].append(attack_curve(s, prof, pois, [n])[0])
    return out
