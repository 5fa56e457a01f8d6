"""Episode-level evaluation metrics, convergence detection and writers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class EpisodeMetrics:
    episode: int
    mean_reward: float
    cum_reward: float
    coverage: float
    dead_zone: float
    exploration_ratio: float
    entropy_nats: float
    cum_regret: float
    mean_gp_var: float
    interference: float
    msg_bytes: int


CSV_COLUMNS = tuple(f.name for f in fields(EpisodeMetrics))


def exploration_ratio(visited: Iterable, total_cells: int) -> float:
    if total_cells <= 0:
        raise ValueError("total_cells must be > 0")
    return len(set(map(tuple, visited))) / total_cells


def cumulative_regret(rewards: Sequence[float], optimum: Sequence[float]) -> float:
    r = np.asarray(rewards, dtype=float)
    o = np.asarray(optimum, dtype=float)
    if r.shape != o.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {o.shape}")
    return float(np.maximum(o - r, 0.0).sum())


def policy_entropy(distributions) -> float:
    """Mean per-step entropy in nats."""
    p = np.atleast_2d(np.asarray(distributions, dtype=float))
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("each distribution must be non-negative and sum to 1 within 1e-8")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return float(h.mean())


@dataclass(frozen=True)
class ConvergenceReport:
    episode: Optional[int]
    long_run_mean: float
    window: int = 50
    tol: float = 0.02


def moving_average(series, window: int) -> np.ndarray:
    """Entry k is the mean of series[k : k + window] (the average ending at episode k + window)."""
    x = np.asarray(series, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def convergence_episode(series, window: int = 50, tol: float = 0.02) -> ConvergenceReport:
    """First episode whose trailing moving average stays inside the tolerance band.

    Episodes are counted from 1, so the earliest possible answer is ``window``.
    The band is tol * |mean of the final window|.  Settling is only credited
    if it lasts at least one further window; otherwise the answer is None.
    """
    x = np.asarray(series, dtype=float)
    if len(x) < window:
        raise ValueError(f"series of length {len(x)} shorter than window {window}")
    ma = moving_average(x, window)
    long_run = float(x[-window:].mean())
    inside = np.abs(ma - long_run) <= tol * abs(long_run)
    outside = np.flatnonzero(~inside)
    first = 0 if len(outside) == 0 else int(outside[-1]) + 1
    episode = first + window
    if episode > len(x) - window:
        return ConvergenceReport(None, long_run, window, tol)
    return ConvergenceReport(episode, long_run, window, tol)


def inter_agent_correlation(per_agent_series) -> float:
    """Mean pairwise Pearson correlation of agents' per-episode reward series."""
    m = np.asarray(per_agent_series, dtype=float)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        return float("nan")
    c = np.corrcoef(m)
    iu = np.triu_indices(len(m), 1)
    vals = c[iu]
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if len(vals) else float("nan")


def write_csv(path, rows: Sequence[EpisodeMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


def read_csv(path) -> list[EpisodeMetrics]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(EpisodeMetrics(
                int(rec["episode"]), *(float(rec[c]) for c in CSV_COLUMNS[1:-1]),
                int(rec["msg_bytes"])))
    return out


def final_window(rows: Sequence[EpisodeMetrics], window: int = 50) -> dict[str, float]:
    tail = rows[-window:]
    out = {}
    for name in CSV_COLUMNS[1:]:
        vals = np.array([getattr(r, name) for r in tail], dtype=float)
        out[f"{name}_median"] = float(np.median(vals))
        out[f"{name}_mean"] = float(vals.mean())
    return out


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
