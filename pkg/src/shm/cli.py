"""Command-line entry point: ``shm {verify,diag,train,eval,bench,export}``.

Config files are flat ``key = value`` text::

    # comment lines and blank lines are ignored
    variant = shm            # trailing comments too
    H = 16
    lr = 3e-3
    phase_lengths = 5, 20, 5 # comma lists become tuples

Values parse as int, then float, then true/false, then comma list, else
string. ``--set key=value`` overrides a file entry with the same grammar.
Unknown keys are rejected. The only environment variable read is
``SHM_OUT_DIR``, the default output directory.

Every command writes ``manifest.txt`` (key = value) into its output
directory. Exit codes: 0 ok, 1 verification failure, 2 usage error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from . import verify as ver
from .calibration import Variant
from .errors import ConfigError, NumericError
from .memory import expected_scan_depth, run_sequence, scan_array, sequential_array, ScanStats
from .trainer import (
    MemoryPolicy, OraclePolicy, RandomPolicy, TrainConfig, TrainingDiverged, checkpoint_load,
    checkpoint_save, env_from_config, evaluate, train_policy_gradient, train_supervised,
)
from .utils import config_hash, read_csv, stream, write_csv

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --- config grammar ------------------------------------------------------------------

def parse_value(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = parse_value(value)
    return out


def load_config(path: str | None, overrides: list[str]) -> TrainConfig:
    d = parse_config_text(Path(path).read_text(), path) if path else {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        d[key.strip()] = parse_value(value)
    return TrainConfig.from_dict(d)


def write_manifest(out: Path, command: str, **fields) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = {
        "command": command,
        "code_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **fields,
    }
    path = out / "manifest.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return path


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("SHM_OUT_DIR", "runs")) / command


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


# --- commands --------------------------------------------------------------------

def cmd_verify(args) -> int:
    names = list(ver.SUITES) if args.all else (args.suite or [])
    if not names:
        raise UsageError("choose --suite NAME (repeatable) or --all")
    unknown = [n for n in names if n not in ver.SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; known: {sorted(ver.SUITES)}")
    inject = None
    if args.inject_fault:
        suite, _, case = args.inject_fault.partition(":")
        if suite != "scan" or not case.isdigit():
            raise UsageError("--inject-fault supports scan:<config index>")
        inject = int(case)
    results = []
    for name in names:
        kw = {}
        if name == "scan":
            kw = {"workers": args.threads, "inject": inject, "seed": args.seed}
        elif name in ("grad", "depth"):
            kw = {"seed": args.seed}
        elif name in ("prop4", "prop5"):
            kw = {"samples": args.samples, "seed": args.seed}
        r = ver.run_suite(name, **kw)
        results.append(r)
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {name:6s} {len(r.cases):4d} cases  {r.seconds:7.2f}s")
        for case in r.failing:
            print(f"         failing: {case}")
    summary = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    out = _out_dir(args, "verify")
    write_manifest(out, "verify", suites=",".join(names), seed=args.seed, threads=args.threads)
    (out / "verify.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({"passed": summary["passed"],
                      "failing": {r.suite: r.failing for r in results if not r.passed}}))
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


def cmd_diag(args) -> int:
    out = _out_dir(args, "diag")
    stats = []
    for v in diag.CURVE_VARIANTS:
        params = diag.curve_params(v, seed=args.seed)
        stats.append(diag.cumulative_product_curve(v, params, episodes=args.episodes, T=args.T, seed=args.seed))
    diag.write_cumprod_csv(out / "cumprod_curve.csv", stats)
    j = min(100, args.T) - 1
    by = {s.variant: s.per_episode[:, j] for s in stats}
    chain = [(Variant.FIXED_C, "<", Variant.NEURAL_THETA),
             (Variant.NEURAL_THETA, "<=", Variant.FIXED_THETA),
             (Variant.FIXED_THETA, "<", Variant.SHM_RANDOM_THETA)]
    conf = diag.bootstrap_ordering(by, chain, seed=args.seed)
    (out / "ordering.json").write_text(json.dumps({"step": j + 1, "confidence": conf}, indent=1))
    for link, c in conf.items():
        print(f"{link:40s} bootstrap confidence {c:.3f}")
    if args.samples > 0:
        diag.write_prop4_csv(out / "prop4.csv", diag.prop4_expected_product(samples=args.samples, seed=args.seed))
        diag.write_prop5_csv(out / "prop5.csv", [
            diag.prop5_correlation_ratio(samples=args.samples, seed=args.seed),
            diag.prop5_correlation_ratio(samples=args.samples, seed=args.seed, fixed_theta=True),
            diag.prop5_correlation_ratio(samples=args.samples, seed=args.seed, dependence=0.0),
        ])
    params = diag.curve_params(Variant.SHM_RANDOM_THETA, seed=args.seed)
    rng = stream(args.seed, "heatmap")
    tr = run_sequence(params, diag.synthetic_contexts(rng, args.T, params.D), rng=rng)
    steps = [t for t in _ints(args.heatmap_steps) if 1 <= t <= args.T]
    diag.export_heatmaps(tr, steps, out / "heatmaps")
    write_manifest(out, "diag", seed=args.seed, episodes=args.episodes, T=args.T,
                   config_hash=config_hash({"episodes": args.episodes, "T": args.T, "seed": args.seed}))
    print(f"wrote {out / 'cumprod_curve.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    seeds = _ints(args.seeds) if args.seeds else [cfg.seed]
    out = _out_dir(args, "train")
    loop = train_supervised if args.loop == "supervised" else train_policy_gradient
    for seed in seeds:
        run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
        sub = out / f"seed_{seed}"
        try:
            rep = loop(run_cfg, log=None if args.quiet else print)
        except TrainingDiverged as exc:
            sub.mkdir(parents=True, exist_ok=True)
            checkpoint_save(sub / "last_good.ckpt", exc.params, exc.heads)
            if exc.report is not None:
                exc.report.to_csv(sub / "report.csv")
            print(f"numeric abort at step {exc.step}: {exc}; last good checkpoint in {sub}", file=sys.stderr)
            return EXIT_NUMERIC
        rep.to_csv(sub / "report.csv")
        checkpoint_save(sub / "checkpoint.ckpt", rep.params, rep.heads)
        (sub / "config.txt").write_text("".join(
            f"{k} = {', '.join(map(str, v)) if isinstance(v, (list, tuple)) else v}\n"
            for k, v in run_cfg.to_dict().items()))
        write_manifest(sub, "train", loop=args.loop, seed=seed, config_hash=run_cfg.hash)
        metric = "accuracy" if args.loop == "supervised" else (
            "success_rate" if run_cfg.task == "delayed_recall" else "mean_return")
        print(f"seed {seed}: final {metric} {rep.last(metric):.4f}  clip events {rep.clip_events}")
    write_manifest(out, "train", loop=args.loop, seeds=",".join(map(str, seeds)), config_hash=cfg.hash)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    env = env_from_config(cfg, scaled=False)
    if args.policy == "agent":
        if not args.checkpoint:
            raise UsageError("--policy agent needs --checkpoint")
        params, heads = checkpoint_load(args.checkpoint, expect={"H": cfg.H, "L": cfg.L, "variant": cfg.variant})
        policy = MemoryPolicy(params, heads, greedy=not args.sampled)
    elif args.policy == "random":
        policy = RandomPolicy(env.n_actions)
    else:
        policy = OraclePolicy()
    rep = evaluate(policy, env, args.episodes, seed=args.seed)
    result = {"policy": args.policy, "episodes": rep.episodes, "success_rate": rep.success_rate,
              "success_se": rep.success_se, "mean_return": rep.mean_return, "std_return": rep.std_return}
    out = _out_dir(args, "eval")
    write_manifest(out, "eval", seed=args.seed, config_hash=cfg.hash, policy=args.policy)
    (out / "eval.json").write_text(json.dumps(result, indent=1))
    print(json.dumps(result))
    return EXIT_OK


def cmd_bench(args) -> int:
    if sys.flags.optimize == 0:
        print("note: timings taken without python -O; numbers are indicative", file=sys.stderr)
    out = _out_dir(args, "bench")
    rows = []
    rng = stream(args.seed, "bench")
    for H in _ints(args.H):
        for T in _ints(args.T):
            cs = 1.0 + np.tanh(0.3 * rng.standard_normal((T, H, H)))
            us = rng.standard_normal((T, H, H))
            m0 = np.zeros((H, H))
            times = {}
            stats = ScanStats()
            for mode in args.modes.split(","):
                best = np.inf
                for _ in range(args.repeats):
                    t0 = time.perf_counter()
                    if mode == "sequential":
                        sequential_array(m0, cs, us)
                    elif mode == "scan":
                        scan_array(m0, cs, us, workers=args.threads, stats=stats)
                    else:
                        raise UsageError(f"unknown bench mode {mode!r}")
                    best = min(best, time.perf_counter() - t0)
                times[mode] = best
            speed = times.get("sequential", np.nan) / times.get("scan", np.nan)
            for mode, sec in times.items():
                depth = stats.depth if mode == "scan" else T
                rows.append((T, H, mode, sec, speed, depth, expected_scan_depth(T)))
                print(f"T={T:5d} H={H:4d} {mode:10s} {sec * 1e3:9.2f} ms  depth {depth}")
    write_csv(out / "bench.csv", ["T", "H", "mode", "seconds", "speedup", "depth", "expected_scan_depth"], rows)
    write_manifest(out, "bench", seed=args.seed, threads=args.threads)
    return EXIT_OK


def _learning_curves(run: Path):
    """Mean and std over seed directories for every (metric, step)."""
    reports = sorted(run.glob("seed_*/report.csv"))
    per = {}
    for path in reports:
        for r in read_csv(path):
            per.setdefault((r["metric"], int(r["step"])), []).append(float(r["value"]))
    rows = []
    for (metric, step), vals in sorted(per.items()):
        a = np.array(vals)
        rows.append((step, metric, float(a.mean()), float(a.std()), len(a)))
    return reports, rows


def cmd_export(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory {run} does not exist")
    if not any(run.iterdir()):
        raise UsageError(f"{run}: empty manifest (directory has no run artifacts)")
    out = _out_dir(args, "export")
    out.mkdir(parents=True, exist_ok=True)
    made = []
    reports, rows = _learning_curves(run)
    if reports:
        write_csv(out / "learning_curve.csv", ["step", "metric", "mean", "std", "n_seeds"], rows)
        made.append("learning_curve.csv")
    if (run / "cumprod_curve.csv").exists():
        (out / "cumprod_curve.csv").write_bytes((run / "cumprod_curve.csv").read_bytes())
        made.append("cumprod_curve.csv")
    heat = sorted((run / "heatmaps").glob("heatmap_*.csv")) if (run / "heatmaps").is_dir() else []
    if heat:
        (out / "heatmaps").mkdir(parents=True, exist_ok=True)
        for p in heat:
            (out / "heatmaps" / p.name).write_bytes(p.read_bytes())
        made.append(f"heatmaps/ ({len(heat)} files)")
    if not made:
        raise UsageError(f"{run}: nothing to export; looked for seed_*/report.csv, "
                         "cumprod_curve.csv and heatmaps/heatmap_*.csv")
    write_manifest(out, "export", source=str(run), outputs=";".join(made))
    for m in made:
        print(f"exported {m}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shm", description="Hadamard memory: verification, diagnostics, training.")
    p.add_argument("--version", action="version", version=f"shm {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default $SHM_OUT_DIR/<command> or runs/<command>)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; 1 is bit-deterministic")
    common.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="run self-check suites")
    v.add_argument("--suite", action="append", help=f"one of {sorted(ver.SUITES)}; repeatable")
    v.add_argument("--all", action="store_true")
    v.add_argument("--samples", type=int, default=100_000, help="Monte-Carlo sample count")
    v.add_argument("--inject-fault", help="perturb one scan output, e.g. scan:7")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("diag", parents=[common], help="cumulative-product curves and heatmaps")
    d.add_argument("--episodes", type=int, default=100)
    d.add_argument("--T", type=int, default=100)
    d.add_argument("--heatmap-steps", default="1,10,50,100")
    d.add_argument("--samples", type=int, default=100_000, help="Monte-Carlo samples for prop4/prop5 CSVs (0 skips)")
    d.set_defaults(func=cmd_diag)

    for name, fn, hlp in (("train", cmd_train, "train a model"), ("eval", cmd_eval, "evaluate a policy")):
        t = sub.add_parser(name, parents=[common], help=hlp)
        t.add_argument("--config", help="flat key = value config file")
        t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        t.set_defaults(func=fn)
        if name == "train":
            t.add_argument("--loop", choices=("supervised", "rl"), default="supervised")
            t.add_argument("--seeds", help="comma list; overrides the config seed")
            t.add_argument("--quiet", action="store_true")
        else:
            t.add_argument("--checkpoint")
            t.add_argument("--policy", choices=("agent", "random", "oracle"), default="agent")
            t.add_argument("--episodes", type=int, default=200)
            t.add_argument("--sampled", action="store_true", help="sample actions instead of argmax")

    b = sub.add_parser("bench", parents=[common], help="sequential vs. scan wall-clock")
    b.add_argument("--T", default="64,128,256,512,1024")
    b.add_argument("--H", default="24,72,128,156")
    b.add_argument("--modes", default="sequential,scan")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("export", parents=[common], help="collate run artifacts into figure-ready CSVs")
    e.add_argument("--run", required=True, help="directory written by train or diag")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # argparse exits with 2 on unknown flags
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"shm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"shm {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
