"""Discrete-grid signal field, UAV agents, local observations and rewards.

Grids are indexed ``[x, y]``.  Time runs over ``0..horizon``; a step taken at
time ``t`` lands the agents at time ``t + 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from . import ConfigError

WINDOW = 7
HALF_WINDOW = WINDOW // 2
POWER_DBM = (10.0, 20.0, 30.0)
BEAMWIDTH_DEG = (30.0, 60.0, 90.0)


class Move(IntEnum):
    NORTH = 0
    SOUTH = 1
    EAST = 2
    WEST = 3
    STAY = 4


class PowerDelta(IntEnum):
    INCREASE = 0
    DECREASE = 1
    HOLD = 2


MOVE_DELTAS = {Move.NORTH: (0, 1), Move.SOUTH: (0, -1), Move.EAST: (1, 0),
               Move.WEST: (-1, 0), Move.STAY: (0, 0)}
N_MOVES = len(Move)
N_POWER_DELTAS = len(PowerDelta)
N_ACTIONS = N_MOVES * N_POWER_DELTAS


def encode_action(move: int, power_delta: int) -> int:
    return int(move) * N_POWER_DELTAS + int(power_delta)


def decode_action(a: int) -> tuple[Move, PowerDelta]:
    if not 0 <= a < N_ACTIONS:
        raise ValueError(f"action index {a} outside [0, {N_ACTIONS})")
    return Move(a // N_POWER_DELTAS), PowerDelta(a % N_POWER_DELTAS)


@dataclass(frozen=True)
class FieldConfig:
    width: int = 16
    height: int = 16
    horizon: int = 20
    base_amplitude: float = 2.0
    num_sources: int = 3
    source_width: float = 2.5
    source_drift_rate: float = 0.1
    noise_std: float = 0.05
    coverage_threshold: float = 0.5
    d_min: float = 10.0
    service_radius: float = 4.0  # <= 0 means unlimited
    eta_power: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ConfigError(f"grid must be at least 4x4, got {self.width}x{self.height}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not self.coverage_threshold > 0:
            raise ConfigError("coverage_threshold must be > 0")
        if self.num_sources < 0:
            raise ConfigError("num_sources must be >= 0")
        if not self.source_width > 0:
            raise ConfigError("source_width must be > 0")
        if self.source_drift_rate < 0:
            raise ConfigError("source_drift_rate must be >= 0")

    @property
    def n_cells(self) -> int:
        return self.width * self.height


class SignalField:
    """Ground truth: drifting isotropic Gaussian bumps plus white noise.

    Per-timestep grids are generated on first access and cached; noise for
    step ``t`` comes from its own seeded stream, so values never depend on
    query order.
    """

    def __init__(self, config: FieldConfig, sources: np.ndarray, amplitudes: np.ndarray):
        self.config = config
        self.sources = sources  # (horizon + 1, num_sources, 2)
        self.amplitudes = amplitudes
        xs = np.arange(config.width, dtype=float)
        ys = np.arange(config.height, dtype=float)
        self._gx, self._gy = np.meshgrid(xs, ys, indexing="ij")
        self._cache: dict[int, np.ndarray] = {}

    def grid(self, t: int) -> np.ndarray:
        t = int(t)
        if not 0 <= t <= self.config.horizon:
            raise ValueError(f"t={t} outside [0, {self.config.horizon}]")
        g = self._cache.get(t)
        if g is None:
            cfg = self.config
            g = np.zeros((cfg.width, cfg.height))
            w2 = 2.0 * cfg.source_width**2
            for (sx, sy), amp in zip(self.sources[t], self.amplitudes):
                g += amp * np.exp(-((self._gx - sx) ** 2 + (self._gy - sy) ** 2) / w2)
            if cfg.noise_std > 0:
                rng = np.random.default_rng([cfg.seed, t, 7])
                g += rng.normal(0.0, cfg.noise_std, g.shape)
            self._cache[t] = g
        return g

    def value(self, x: int, y: int, t: int) -> float:
        return float(self.grid(t)[x, y])

    def dump_csv(self, path) -> None:
        cfg = self.config
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "value"])
            for t in range(cfg.horizon + 1):
                g = self.grid(t)
                for x in range(cfg.width):
                    for y in range(cfg.height):
                        w.writerow([t, x, y, repr(float(g[x, y]))])


def generate_field(config: FieldConfig, source_positions: Optional[Sequence] = None) -> SignalField:
    """Build the ground-truth field.

    Source centres start at ``source_positions`` (or uniformly at random) and
    take one step of length ``source_drift_rate`` in a random direction per
    timestep, clamped to the grid.
    """
    rng = np.random.default_rng([config.seed, 0])
    if source_positions is not None:
        start = np.asarray(source_positions, dtype=float).reshape(-1, 2)
    else:
        start = np.column_stack([rng.uniform(0, config.width - 1, config.num_sources),
                                 rng.uniform(0, config.height - 1, config.num_sources)])
    k = len(start)
    sources = np.zeros((config.horizon + 1, k, 2))
    sources[0] = start
    hi = np.array([config.width - 1, config.height - 1], dtype=float)
    for t in range(1, config.horizon + 1):
        theta = rng.uniform(0, 2 * np.pi, k)
        step = config.source_drift_rate * np.column_stack([np.cos(theta), np.sin(theta)])
        sources[t] = np.clip(sources[t - 1] + step, 0.0, hi)
    amplitudes = np.full(k, config.base_amplitude)
    return SignalField(config, sources, amplitudes)


@dataclass(frozen=True)
class UavState:
    position: tuple[int, int]
    power_level: int = 1  # index into POWER_DBM
    beamwidth: int = 1  # index into BEAMWIDTH_DEG; carried but inert

    def __post_init__(self):
        if self.power_level not in (0, 1, 2):
            raise ValueError(f"power_level must be 0, 1 or 2, got {self.power_level}")
        if self.beamwidth not in (0, 1, 2):
            raise ValueError(f"beamwidth must be 0, 1 or 2, got {self.beamwidth}")

    @property
    def power_dbm(self) -> float:
        return POWER_DBM[self.power_level]

    @property
    def power_gain(self) -> float:
        return self.power_dbm / 30.0


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    """Posterior mean/std evaluated on every cell, indexed [x, y]."""

    mean: np.ndarray
    std: np.ndarray


def posterior_grid(model, width: int, height: int, t: float = 0.0) -> PosteriorGrid:
    gx, gy = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(t))])
    mean, var = model.predict(pts)
    return PosteriorGrid(mean.reshape(width, height), np.sqrt(var).reshape(width, height))


@dataclass(frozen=True, eq=False)
class Observation:
    local_grid: np.ndarray  # (7, 7, 3): mean, std, other-agent count
    mask: np.ndarray  # (7, 7) bool, True where the cell is outside the world
    own_position: tuple[int, int]
    own_power: int
    world_size: tuple[int, int] = (16, 16)

    def flat(self) -> np.ndarray:
        w, h = self.world_size
        return np.concatenate([
            self.local_grid.ravel(),
            self.mask.ravel().astype(float),
            [self.own_position[0] / max(w - 1, 1), self.own_position[1] / max(h - 1, 1),
             self.own_power / 2.0],
        ])


OBS_DIM = WINDOW * WINDOW * 3 + WINDOW * WINDOW + 3


def observe(field_: SignalField, gp, agents: Sequence[UavState], agent_index: int,
            t: int) -> Observation:
    """Local 7x7 window around one agent.

    ``gp`` is either a fitted model (anything with ``predict``) or a
    precomputed :class:`PosteriorGrid`.  The true field is never read, only
    its dimensions.
    """
    cfg = field_.config
    if not 0 <= agent_index < len(agents):
        raise IndexError(f"agent_index {agent_index} out of range for {len(agents)} agents")
    post = gp if isinstance(gp, PosteriorGrid) else posterior_grid(gp, cfg.width, cfg.height, t)
    x0, y0 = agents[agent_index].position
    offs = np.arange(-HALF_WINDOW, HALF_WINDOW + 1)
    wx = x0 + offs[:, None] + 0 * offs[None, :]
    wy = y0 + 0 * offs[:, None] + offs[None, :]
    inside = (wx >= 0) & (wx < cfg.width) & (wy >= 0) & (wy < cfg.height)
    local = np.zeros((WINDOW, WINDOW, 3))
    cx, cy = wx[inside], wy[inside]
    local[inside, 0] = post.mean[cx, cy]
    local[inside, 1] = post.std[cx, cy]
    for j, other in enumerate(agents):
        if j == agent_index:
            continue
        ox, oy = other.position[0] - x0 + HALF_WINDOW, other.position[1] - y0 + HALF_WINDOW
        if 0 <= ox < WINDOW and 0 <= oy < WINDOW:
            local[ox, oy, 2] += 1.0
    return Observation(local, ~inside, (x0, y0), agents[agent_index].power_level,
                       (cfg.width, cfg.height))


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 0.3
    eta_power: float = 0.1


@dataclass
class StepOutcome:
    agents: list
    rewards: np.ndarray  # per agent
    global_reward: float
    coverage: float
    interference: float
    power: float
    done: bool
    observations: list = field(default_factory=list)


def apply_action(agent: UavState, action: int, width: int, height: int) -> UavState:
    move, delta = decode_action(action)
    dx, dy = MOVE_DELTAS[move]
    x, y = agent.position
    nx, ny = x + dx, y + dy
    if not (0 <= nx < width and 0 <= ny < height):
        nx, ny = x, y
    power = agent.power_level
    if delta == PowerDelta.INCREASE:
        power = min(power + 1, 2)
    elif delta == PowerDelta.DECREASE:
        power = max(power - 1, 0)
    return replace(agent, position=(nx, ny), power_level=power)


def received_signal(grid: np.ndarray, agents: Sequence[UavState], service_radius: float) -> np.ndarray:
    """Per-cell max over serving agents of field value times power gain.

    Cells farther than ``service_radius`` from every agent receive -inf.
    """
    w, h = grid.shape
    gx, gy = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    out = np.full(grid.shape, -np.inf)
    for a in agents:
        val = grid * a.power_gain
        if service_radius > 0:
            d2 = (gx - a.position[0]) ** 2 + (gy - a.position[1]) ** 2
            val = np.where(d2 <= service_radius**2, val, -np.inf)
        out = np.maximum(out, val)
    return out


def global_reward_terms(field_: SignalField, agents: Sequence[UavState],
                        t: int) -> tuple[float, float, float]:
    """(coverage, interference, power) fractions, each in [0, 1]."""
    cfg = field_.config
    recv = received_signal(field_.grid(t), agents, cfg.service_radius)
    coverage = float((recv >= cfg.coverage_threshold).mean())
    n = len(agents)
    pairs = n * (n - 1) // 2
    close = 0
    for i in range(n):
        for j in range(i + 1, n):
            if math.dist(agents[i].position, agents[j].position) < cfg.d_min:
                close += 1
    interference = close / pairs if pairs else 0.0
    power = float(np.mean([a.power_gain for a in agents])) if n else 0.0
    return coverage, interference, power


def agent_reward(phi: float, sigma: float, weights: RewardWeights) -> float:
    return weights.alpha * phi - weights.beta * sigma


def step(field_: SignalField, agents: Sequence[UavState], actions: Sequence[int], t: int,
         posterior, weights: RewardWeights = RewardWeights()) -> StepOutcome:
    """Advance one timestep.

    Per-agent reward is alpha * Phi - beta * sigma at the post-move cell,
    with sigma taken from ``posterior`` (the model before this step's
    measurements; one PosteriorGrid shared by all, or one per agent).  The
    global reward is reported alongside.
    """
    cfg = field_.config
    if len(actions) != len(agents):
        raise ValueError(f"got {len(actions)} actions for {len(agents)} agents")
    if not 0 <= t < cfg.horizon:
        raise ValueError(f"t={t} outside [0, {cfg.horizon})")
    new_agents = [apply_action(a, int(act), cfg.width, cfg.height) for a, act in zip(agents, actions)]
    t1 = t + 1
    grid = field_.grid(t1)
    posts = [posterior] * len(agents) if isinstance(posterior, PosteriorGrid) else list(posterior)
    rewards = np.array([agent_reward(grid[a.position], post.std[a.position], weights)
                        for a, post in zip(new_agents, posts)])
    coverage, interference, power = global_reward_terms(field_, new_agents, t1)
    g = weights.alpha * coverage - weights.beta * interference - weights.eta_power * power
    return StepOutcome(new_agents, rewards, g, coverage, interference, power, t1 == cfg.horizon)
