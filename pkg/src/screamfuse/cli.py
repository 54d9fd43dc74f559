"""``screamfuse`` command-line front end.

Exit status: 0 success, 1 validation error, 2 I/O error, 3 degenerate data.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attack import (ProfileError, ScoreMatrix, build_profile, correlation_attack,
                     read_profile_csv, read_scores_csv, write_profile_csv, write_scores_csv)
from .config import ConfigError, RunConfig, load_config
from .evaluation import (Combination, greedy_diversity_search, simulated_channel_scores, sweep,
                         write_greedy_csv)
from .fusion import (AggregationFn, FusionWarning, data_fusion, decision_fusion, fuse_profiling,
                     warn_if_inverted, write_compatibility_csv)
from .preprocess import (DegenerateInputError, read_pois, select_pois, time_diversity_average,
                         write_pois)
from .rank import evaluate
from .sim import simulate
from .trace_model import TraceFormatError, TraceSet, read_trace_set, write_trace_set

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DEGENERATE = 0, 1, 2, 3
SEED_ENV = "SCREAMFUSE_SEED"

EVAL_FIELDS = ["frequency_labels", "method", "n_traces", "key_rank", "ge", "rank_method",
               "estimation_error_bits", "per_byte_ranks"]


class UsageError(ValueError):
    pass


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        value = int(env, 0)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    if value < 0:
        raise UsageError(f"{SEED_ENV} must be non-negative")
    return value


def _config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required for this command")
    return load_config(args.config, _seed(args))


def _out_dir(args, cfg: Optional[RunConfig] = None) -> Path:
    out = args.out or (cfg.output_dir if cfg else None)
    if not out:
        raise UsageError("--out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _thresholds(args, cfg: Optional[RunConfig]):
    if args.thresholds:
        try:
            values = tuple(float(v) for v in args.thresholds.split(","))
        except ValueError:
            raise UsageError(f"--thresholds: not a number list: {args.thresholds!r}") from None
        if any(b >= a for a, b in zip(values, values[1:])):
            raise UsageError("--thresholds must be strictly decreasing")
        return values
    return cfg.thresholds if cfg else None


def _key(args, ts: Optional[TraceSet] = None) -> bytes:
    if getattr(args, "key", None):
        try:
            key = bytes.fromhex(args.key)
        except ValueError:
            raise UsageError("--key must be hex") from None
        if len(key) != 16:
            raise UsageError("--key must be 16 bytes")
        return key
    if ts is not None and ts.keys is not None and ts.n_traces:
        return ts.keys[0].tobytes()
    raise UsageError("true key unknown: pass --key or use a keyed trace file")


def _collapsed(path) -> TraceSet:
    return time_diversity_average(read_trace_set(path))


def _write_evaluation(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_FIELDS)
        for labels, method, n, res in rows:
            w.writerow([labels, method, n, res.key_rank, f"{res.guessing_entropy:.6f}",
                        res.method, f"{res.estimation_error_bits:.6f}",
                        " ".join(str(r) for r in res.per_byte_ranks)])


# -- commands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    files = []
    for ts in simulate(cfg.sim):
        name = f"{ts.channel.label}.scrm"
        write_trace_set(ts, out / name)
        files.append(name)
    manifest = {
        "files": files,
        "master_seed": cfg.master_seed,
        "key": cfg.sim.key.hex(),
        "n_plaintexts": cfg.sim.n_plaintexts,
        "time_diversity": cfg.sim.time_diversity,
        "channels": [
            {"label": c.meta.label, "frequency_hz": c.meta.frequency_hz, "gain": c.gain,
             "noise_std": c.noise_std, "distortion_seed": c.distortion_seed,
             "distortion_strength": c.distortion_strength, "noise_substream": [1, i]}
            for i, c in enumerate(cfg.sim.channels)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, _seed(args)) if args.config else None
    out = _out_dir(args, cfg)
    n_prof = args.n_profiling or (cfg.n_profiling if cfg else None)
    n_att = args.n_attack or (cfg.n_attack if cfg else None)
    n_per_byte = args.n_per_byte or (cfg.n_per_byte if cfg else 1)
    share = args.share_pois or (cfg.share_pois if cfg else False)
    if not n_prof:
        raise UsageError("--n-profiling (or a config with an attack section) is required")
    shared = None
    for path in args.traces:
        ts = _collapsed(path)
        n_a = n_att or ts.n_traces - n_prof
        if n_prof + n_a > ts.n_traces or n_a < 1:
            raise UsageError(f"{path}: {ts.n_traces} traces cannot be split into "
                             f"{n_prof} profiling + {n_a} attack")
        prof = ts.subset(np.arange(n_prof))
        att = ts.subset(np.arange(n_prof, n_prof + n_a))
        pois = select_pois(prof, n_per_byte)
        if share:
            shared = shared or pois
            pois = shared
        stem = Path(path).stem
        write_trace_set(prof, out / f"{stem}.profiling.scrm")
        write_trace_set(att, out / f"{stem}.attack.scrm")
        write_pois(pois, out / f"{stem}.pois.txt")
    return EXIT_OK


def _profile_from_args(args, attack: TraceSet):
    if args.profile and args.profiling:
        raise UsageError("give either --profile or --profiling, not both")
    if args.profile:
        profile = read_profile_csv(args.profile, attack.channel)
        pois = read_pois(args.pois) if args.pois else profile.pois
        return profile, pois
    if not args.profiling:
        raise UsageError("attack needs --profile or --profiling")
    prof = _collapsed(args.profiling)
    if prof.n_samples != attack.n_samples:
        raise UsageError("profiling and attack sets have different n_samples")
    pois = read_pois(args.pois) if args.pois else select_pois(prof, args.n_per_byte or 1)
    return build_profile(prof, pois), pois


def cmd_profile(args) -> int:
    prof = _collapsed(args.traces)
    pois = read_pois(args.pois) if args.pois else select_pois(prof, args.n_per_byte or 1)
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "profile.csv"
    write_profile_csv(build_profile(prof, pois), out)
    return EXIT_OK


def cmd_attack(args) -> int:
    attack = _collapsed(args.traces)
    key = _key(args, attack)
    profile, pois = _profile_from_args(args, attack)
    if max(pois.indices) >= attack.n_samples:
        raise UsageError("POIs out of range for the attack set")
    out = _out_dir(args)
    scores = correlation_attack(attack, profile, pois)
    write_scores_csv(scores, out / "scores.csv")
    res = evaluate(scores, key)
    _write_evaluation(out / "evaluation.csv",
                      [(attack.channel.label, "single", attack.n_traces, res)])
    return EXIT_OK


def cmd_fuse(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    if len(inputs) < 2:
        raise UsageError("fuse needs at least 2 inputs")
    kinds = {"scores" if p.suffix == ".csv" else "traces" for p in inputs}
    if len(kinds) > 1:
        raise UsageError("cannot mix score CSVs and trace files")
    method = args.method or "decision"
    agg = AggregationFn.parse(args.agg or "avg")
    out = _out_dir(args)
    if kinds == {"scores"}:
        if method != "decision":
            raise UsageError("score CSVs can only be combined with --method decision")
        mats = [read_scores_csv(p) for p in inputs]
        key = _key(args)
        fused = decision_fusion(mats, agg)
        write_scores_csv(fused, out / "fused_scores.csv")
        _write_evaluation(out / "fused_evaluation.csv",
                          [(":".join(fused.channels), f"decision-{agg.value}", fused.n_traces,
                            evaluate(fused, key))])
        return EXIT_OK

    profiling = args.profiling or []
    if len(profiling) != len(inputs):
        raise UsageError("trace inputs need one --profiling file per input, in the same order")
    att_sets = [_collapsed(p) for p in inputs]
    prof_sets = [_collapsed(p) for p in profiling]
    key = _key(args, att_sets[0])
    n_per_byte = args.n_per_byte or 1
    if method == "decision":
        mats = []
        for att, prof in zip(att_sets, prof_sets):
            pois = select_pois(prof, n_per_byte)
            mats.append(correlation_attack(att, build_profile(prof, pois), pois))
        fused = decision_fusion(mats, agg)
        label = f"decision-{agg.value}"
    else:
        pois = read_pois(args.pois) if args.pois else select_pois(prof_sets[0], n_per_byte)
        profiles = [build_profile(p, pois) for p in prof_sets]
        reports = warn_if_inverted(profiles, args.sign_correct)
        write_compatibility_csv(reports, out / "compatibility.csv")
        profile, cols, signs = fuse_profiling(prof_sets, pois, args.sign_correct)
        merged = data_fusion(att_sets, pois, args.sign_correct, signs=signs).as_trace_set()
        fused = correlation_attack(merged, profile, cols)
        fused = ScoreMatrix(fused.scores, tuple(s.channel.label for s in att_sets),
                            fused.n_traces, fused.flagged)
        label = "data-signed" if args.sign_correct else "data"
    write_scores_csv(fused, out / "fused_scores.csv")
    _write_evaluation(out / "fused_evaluation.csv",
                      [(":".join(fused.channels), label, fused.n_traces, evaluate(fused, key))])
    return EXIT_OK


def cmd_rank(args) -> int:
    scores = read_scores_csv(args.scores)
    key = _key(args)
    out = _out_dir(args)
    _write_evaluation(out / "evaluation.csv",
                      [(":".join(scores.channels), "single", scores.n_traces,
                        evaluate(scores, key, scores.n_bytes))])
    return EXIT_OK


def _apply_cli_fusion(args, cfg: RunConfig) -> RunConfig:
    method = args.method or cfg.method
    agg = AggregationFn.parse(args.agg) if args.agg else cfg.aggregation
    sign = args.sign_correct or cfg.sign_correct
    combos = tuple(Combination(c.labels, method, agg, sign) for c in cfg.combinations)
    thresholds = _thresholds(args, cfg)
    return replace(cfg, method=method, aggregation=agg, sign_correct=sign,
                   combinations=combos, thresholds=thresholds)


def cmd_sweep(args) -> int:
    cfg = _apply_cli_fusion(args, _config(args))
    out = _out_dir(args, cfg)
    result = sweep(cfg.sweep_spec(threads=args.threads))
    result.write_csv(out / "sweep.csv")
    result.write_summary_csv(out / "sweep_summary.csv")
    return EXIT_OK


def cmd_greedy(args) -> int:
    cfg = _apply_cli_fusion(args, _config(args))
    out = _out_dir(args, cfg)
    spec = cfg.sweep_spec(threads=args.threads)
    n = cfg.trace_grid[-1] if cfg.trace_grid else cfg.n_attack
    scores = simulated_channel_scores(spec, n)
    result = greedy_diversity_search(scores, cfg.limit_order, cfg.sim.key, cfg.aggregation)
    write_greedy_csv(result, out / "greedy.csv")
    with open(out / "individual.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_label", "ge"])
        for label, ge in sorted(result.individual.items(), key=lambda kv: (kv[1], kv[0])):
            w.writerow([label, f"{ge:.6f}"])
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="U64",
                        help=f"master seed (overrides ${SEED_ENV} and the config)")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads for sweeps")
    common.add_argument("--method", choices=("data", "decision"))
    common.add_argument("--agg", choices=("avg", "max", "prod"))
    common.add_argument("--sign-correct", action="store_true",
                        help="flip channels whose profile is inverted before data fusion")
    common.add_argument("--thresholds", metavar="LIST", help="comma-separated GE thresholds")

    parser = argparse.ArgumentParser(
        prog="screamfuse",
        description="Multi-frequency screaming-channel attack toolkit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate trace sets per channel")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", parents=[common],
                       help="average time diversity, split profiling/attack, select POIs")
    p.add_argument("traces", nargs="+")
    p.add_argument("--n-profiling", type=int)
    p.add_argument("--n-attack", type=int)
    p.add_argument("--n-per-byte", type=int)
    p.add_argument("--share-pois", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("profile", parents=[common], help="build a leakage profile CSV")
    p.add_argument("--traces", required=True)
    p.add_argument("--pois")
    p.add_argument("--n-per-byte", type=int)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("attack", parents=[common], help="profiled correlation attack")
    p.add_argument("--traces", required=True, help="attack trace file")
    p.add_argument("--profiling", help="profiling trace file")
    p.add_argument("--profile", help="profile CSV from the profile command")
    p.add_argument("--pois")
    p.add_argument("--n-per-byte", type=int)
    p.add_argument("--key", help="true key (hex) when the attack file has none")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("fuse", parents=[common], help="data or decision fusion")
    p.add_argument("inputs", nargs="+", help="score CSVs or attack trace files")
    p.add_argument("--profiling", nargs="+", help="profiling trace files matching the inputs")
    p.add_argument("--pois")
    p.add_argument("--n-per-byte", type=int)
    p.add_argument("--key")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("sweep", parents=[common], help="Monte-Carlo GE-vs-traces sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("greedy", parents=[common], help="greedy frequency-diversity search")
    p.set_defaults(func=cmd_greedy)

    p = sub.add_parser("rank", parents=[common], help="key rank of a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", FusionWarning)
            warnings.showwarning = _show_warning
            return args.func(args)
    except (DegenerateInputError, ProfileError) as exc:
        print(f"screamfuse: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, TraceFormatError) as exc:
        print(f"screamfuse: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"screamfuse: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"screamfuse: warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
