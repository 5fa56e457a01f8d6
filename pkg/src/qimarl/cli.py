"""``qimarl`` command line: train, ablate, sweep, compare, scale.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 resource cap.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import ConfigError, QimarlError, ResourceCapError
from . import config as cfgmod
from .config import ExperimentConfig
from .marl import config_hash, save_checkpoint
from .metrics import final_window, write_csv, write_summary

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CAP = 0, 1, 2, 3

STAT_KEYS = ("reward", "coverage", "exploration_ratio", "entropy_nats", "cum_regret")


def run_stats(metrics) -> dict[str, float]:
    """Final-window medians (regret: final cumulative value)."""
    fw = final_window(metrics, min(50, len(metrics)))
    return {"reward": fw["mean_reward_median"], "coverage": fw["coverage_median"],
            "exploration_ratio": fw["exploration_ratio_median"],
            "entropy_nats": fw["entropy_nats_median"], "cum_regret": metrics[-1].cum_regret}


def run_one(cfg: ExperimentConfig, seed: int, run_dir) -> dict[str, float]:
    """Train one seed and write metrics.csv, summary.json, resolved_config.ini, checkpoint.npz."""
    from .train import train

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed_cfg = replace(cfg, run=replace(cfg.run, seeds=(seed,)))
    text = cfgmod.dumps(seed_cfg)
    (run_dir / "resolved_config.ini").write_text(text)
    result = train(seed_cfg, seed)
    write_csv(run_dir / "metrics.csv", result.metrics)
    summary = result.summary()
    write_summary(run_dir / "summary.json", summary)
    save_checkpoint(run_dir / "checkpoint.npz", result.model.arrays(), config_hash(text))
    return run_stats(result.metrics)


def _dispatch(tasks: Sequence[tuple], jobs: int) -> list[dict]:
    if jobs <= 1 or len(tasks) <= 1:
        return [run_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, *zip(*tasks)))


def _write_rows(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _run_set(cfg: ExperimentConfig, out: Path, jobs: int) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(cfgmod.dumps(cfg))
    tasks = [(cfg, s, out / f"seed_{s}") for s in cfg.run.seeds]
    return _dispatch(tasks, jobs)


def cmd_train(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    stats = _run_set(cfg, out, jobs)
    _write_rows(out / "aggregate.csv", ("seed", *STAT_KEYS),
                [(s, *(st[k] for k in STAT_KEYS)) for s, st in zip(cfg.run.seeds, stats)])


ABLATION_OVERRIDES = {
    "no_qaoa": {"marl.eta": 0.0, "marl.lambda_shape": 0.0, "marl.lambda_kl": 0.0,
                "marl.lambda_mix": 0.0, "marl.gamma_q": 0.0},
    "no_gp": {"gp.use_gp": False},
    "no_entropy": {"marl.entropy_coef": 0.0},
    "no_shared_memory": {"marl.shared_memory": False},
}


def _paired_rows(names: Sequence[str], stats: dict[str, list[dict]], seeds) -> list[tuple]:
    ref = names[0]
    rows = []
    for key in STAT_KEYS:
        for other in names[1:]:
            for k, s in enumerate(seeds):
                a, b = stats[other][k][key], stats[ref][k][key]
                rows.append((key, s, other, ref, a, b, a - b))
    return rows


PAIRED_HEADER = ("metric", "seed", "variant", "reference", "value", "reference_value", "delta")


def _run_named(cfg: ExperimentConfig, named: dict[str, ExperimentConfig], out: Path, jobs: int):
    tasks, index = [], []
    for name, c in named.items():
        (out / name).mkdir(parents=True, exist_ok=True)
        (out / name / "resolved_config.ini").write_text(cfgmod.dumps(c))
        for s in cfg.run.seeds:
            tasks.append((c, s, out / name / f"seed_{s}"))
            index.append(name)
    results = _dispatch(tasks, jobs)
    stats: dict[str, list[dict]] = {name: [] for name in named}
    for name, st in zip(index, results):
        stats[name].append(st)
    return stats


def cmd_ablate(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    named = {"full": cfg}
    for name in cfg.experiment.ablations:
        named[name] = cfgmod.with_overrides(cfg, ABLATION_OVERRIDES[name])
    stats = _run_named(cfg, named, out, jobs)
    _write_rows(out / "ablation.csv", PAIRED_HEADER, _paired_rows(list(named), stats, cfg.run.seeds))


def cmd_compare(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    named = {v: cfgmod.with_overrides(cfg, {"marl.variant": v}) for v in cfg.experiment.variants}
    stats = _run_named(cfg, named, out, jobs)
    _write_rows(out / "paired_deltas.csv", PAIRED_HEADER,
                _paired_rows(list(named), stats, cfg.run.seeds))
    _write_rows(out / "compare.csv", ("variant", "seed", *STAT_KEYS),
                [(v, s, *(st[k] for k in STAT_KEYS))
                 for v in named for s, st in zip(cfg.run.seeds, stats[v])])


def sweep_points(cfg: ExperimentConfig) -> list[dict]:
    if not cfg.sweep:
        raise ConfigError("sweep needs a [sweep] section (a preset or 'section.key = v1, v2, ...')")
    keys = [k for k, _ in cfg.sweep]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in cfg.sweep))]


def _point_name(point: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in point.items())


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    points = sweep_points(cfg)
    named = {_point_name(p): replace(cfgmod.with_overrides(cfg, p), sweep=()) for p in points}
    stats = _run_named(cfg, named, out, jobs)
    keys = [k for k, _ in cfg.sweep]
    rows = []
    for p in points:
        for s, st in zip(cfg.run.seeds, stats[_point_name(p)]):
            rows.append((*(p[k] for k in keys), s, *(st[k] for k in STAT_KEYS)))
    _write_rows(out / "sweep.csv", (*keys, "seed", *STAT_KEYS), rows)


def measure_scale(cfg: ExperimentConfig, agents: int, seed: int) -> tuple[float, int]:
    """(seconds per episode, peak traced bytes) for one short run."""
    from .train import train

    c = cfgmod.with_overrides(cfg, {"run.agents": agents,
                                    "run.episodes": cfg.experiment.scale_episodes})
    tracemalloc.start()
    try:
        t0 = time.perf_counter()
        train(c, seed)
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return elapsed / c.run.episodes, int(peak)


def cmd_scale(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(cfgmod.dumps(cfg))
    seed = cfg.run.seeds[0]
    rows = []
    for n in cfg.experiment.scale_agents:
        sec, peak = measure_scale(cfg, n, seed)
        rows.append((n, sec, peak))
    _write_rows(out / "scale.csv", ("agents", "seconds_per_episode", "peak_memory_bytes"), rows)


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "sweep": cmd_sweep,
            "compare": cmd_compare, "scale": cmd_scale}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qimarl", description="Quantum-inspired multi-agent RL experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--out", help="output directory (default: run.out)")
    p.add_argument("--jobs", type=int, help="worker processes (default: run.jobs)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seeds=(args.seed,)))
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        jobs = args.jobs or cfg.run.jobs
        out = Path(args.out or cfg.run.out)
        COMMANDS[args.command](cfg, out, jobs)
    except ResourceCapError as exc:
        print(f"qimarl: resource cap: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ConfigError as exc:
        print(f"qimarl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QimarlError, ArithmeticError, RuntimeError, OSError, ValueError) as exc:
        print(f"qimarl: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
