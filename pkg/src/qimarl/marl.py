"""CTDE actor-critic with QAOA-derived priors.

Three ways the QAOA marginals reach the learner:

* an additive ``eta * log(p_Q + eps)`` bias on the actor logits,
* a reward bonus for following the top QAOA candidate (plus an annealed
  bonus for agreeing with the best sampled bitstring),
* a KL penalty pulling the policy toward the pushed-forward QAOA prior.

With every coefficient at zero the update reduces to plain clipped PPO.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ConfigError, TrainingError, __version__
from .field_env import MOVE_DELTAS, N_ACTIONS, decode_action
from .nn import Mlp, Sgd, log_softmax, softmax


@dataclass(frozen=True)
class QaoaIntegrationConfig:
    eta: float = 0.3
    lambda_shape: float = 0.02
    lambda_kl: float = 0.0
    lambda_mix: float = 0.0
    mix_mode: str = "convex"  # "convex" | "additive"
    gamma_q: float = 0.0
    anneal_steps: int = 0  # <= 0: no annealing
    epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("eta", "lambda_shape", "lambda_kl", "gamma_q"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ConfigError("lambda_mix must lie in [0, 1]")
        if self.mix_mode not in ("convex", "additive"):
            raise ConfigError(f"unknown mix_mode {self.mix_mode!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")

    @property
    def active(self) -> bool:
        return any(v > 0 for v in (self.eta, self.lambda_shape, self.lambda_kl,
                                    self.lambda_mix, self.gamma_q))


@dataclass(frozen=True)
class TrainConfig:
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    clip: float = 0.2
    entropy_coef: float = 0.01
    epochs: int = 10
    minibatch: int = 5
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise ConfigError("learning rates must be > 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("discount gamma must lie in (0, 1]")
        if not 0 < self.clip < 1:
            raise ConfigError("clip must lie in (0, 1)")
        if self.entropy_coef < 0:
            raise ConfigError("entropy_coef must be >= 0")
        if self.epochs < 1 or self.minibatch < 1:
            raise ConfigError("epochs and minibatch must be >= 1")


# ---------------------------------------------------------------- action maps

def action_candidate_map(position, cells: np.ndarray, width: int, height: int) -> np.ndarray:
    """Candidate index for each of the 15 actions (-1 when there are no candidates).

    An action maps to the candidate nearest its post-move cell; moves into a
    wall resolve to Stay; ties go to the lowest candidate index.
    """
    out = np.full(N_ACTIONS, -1, dtype=np.intp)
    if len(cells) == 0:
        return out
    cells = np.asarray(cells, dtype=float)
    x, y = position
    for a in range(N_ACTIONS):
        move, _ = decode_action(a)
        dx, dy = MOVE_DELTAS[move]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < width and 0 <= ny < height):
            nx, ny = x, y
        d2 = (cells[:, 0] - nx) ** 2 + (cells[:, 1] - ny) ** 2
        out[a] = int(np.argmin(d2))
    return out


def _pushforward(amap: np.ndarray, p_q: np.ndarray, fill: float) -> np.ndarray:
    p_q = np.asarray(p_q, dtype=float)
    vals = np.full(len(amap), fill)
    ok = amap >= 0
    vals[ok] = p_q[amap[ok]]
    return vals


def bias_logits(logits, amap, p_q, eta: float, epsilon: float = 1e-6) -> np.ndarray:
    """g + eta * log(p_Q(M(a)) + eps); unmapped actions get eta * log(eps)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    return np.asarray(logits, dtype=float) + logit_bias(amap, p_q, eta, epsilon)


def logit_bias(amap, p_q, eta: float, epsilon: float = 1e-6) -> np.ndarray:
    return eta * np.log(_pushforward(np.asarray(amap), p_q, 0.0) + epsilon)


def qaoa_action_prior(amap, p_q, epsilon: float = 1e-6) -> np.ndarray:
    """Categorical over actions: p_Q pushed through M, eps-floored, renormalized."""
    v = _pushforward(np.asarray(amap), p_q, 0.0) + epsilon
    return v / v.sum()


def annealed_gamma_q(gamma_q: float, step: int, anneal_steps: int) -> float:
    if anneal_steps <= 0:
        return gamma_q
    return gamma_q * max(0.0, 1.0 - step / anneal_steps)


def shape_reward(r: float, action: int, amap, p_q, z_star, lambda_shape: float,
                 gamma_q: float, anneal_factor: float = 1.0) -> float:
    """r + lambda * 1{M(a) = top candidate} * p_Q(M(a)) + gamma_Q(t) * 1{z*_M(a) = 1}.

    ``anneal_factor`` multiplies gamma_q (see :func:`annealed_gamma_q`).
    """
    if lambda_shape < 0 or gamma_q < 0:
        raise ValueError("shaping coefficients must be >= 0")
    j = int(np.asarray(amap)[action])
    if j < 0:
        return float(r)
    p_q = np.asarray(p_q, dtype=float)
    bonus = 0.0
    if lambda_shape > 0 and j == int(np.argmax(p_q)):
        bonus += lambda_shape * p_q[j]
    if gamma_q > 0 and anneal_factor > 0 and z_star is not None and z_star[j] == 1:
        bonus += gamma_q * anneal_factor
    return float(r) + bonus


def potential_shaping(r: float, phi_s: float, phi_next: float, gamma: float) -> float:
    """State-only potential difference bonus, r + gamma * Phi(s') - Phi(s)."""
    return r + gamma * phi_next - phi_s


def mix_q(q_rl, q_qaoa, lambda_mix: float, mode: str = "convex") -> np.ndarray:
    """(1 - lambda) Q_RL + lambda Q_QAOA, or Q_RL + lambda P_QAOA in additive mode."""
    q_rl = np.asarray(q_rl, dtype=float)
    q_qaoa = np.asarray(q_qaoa, dtype=float)
    if q_rl.shape != q_qaoa.shape:
        raise ValueError(f"length mismatch: {q_rl.shape} vs {q_qaoa.shape}")
    if mode == "additive":
        return q_rl + lambda_mix * q_qaoa
    if mode != "convex":
        raise ValueError(f"unknown mix mode {mode!r}")
    if lambda_mix == 0.0:
        return q_rl.copy()
    if lambda_mix == 1.0:
        return q_qaoa.copy()
    return (1.0 - lambda_mix) * q_rl + lambda_mix * q_qaoa


def variance_modulated_policy(q_hybrid, sigma_sq: float, lambda_var: float) -> np.ndarray:
    """softmax(Q + lambda * sigma^2).

    sigma^2 is a per-state scalar, so this is always exactly softmax(Q); it
    exists so the augmented form can be evaluated and compared.
    """
    if lambda_var < 0:
        raise ValueError("lambda_var must be >= 0")
    return softmax(np.asarray(q_hybrid, dtype=float) + lambda_var * sigma_sq)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


# ---------------------------------------------------------------- networks

def joint_state(positions: Sequence, powers: Sequence[int], t: int, width: int, height: int,
                horizon: int) -> np.ndarray:
    """Centralized critic input: every agent's position and power, plus episode time."""
    feats = []
    for (x, y), pw in zip(positions, powers):
        feats += [x / max(width - 1, 1), y / max(height - 1, 1), pw / 2.0]
    feats.append(t / max(horizon, 1))
    return np.array(feats)


class ActorCritic:
    """One actor per agent and a shared centralized critic."""

    def __init__(self, n_agents: int, obs_dim: int, state_dim: int, hidden=(64, 64),
                 rng: Optional[np.random.Generator] = None, n_actions: int = N_ACTIONS):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.actors = [Mlp((obs_dim, *hidden, n_actions), rng) for _ in range(n_agents)]
        for actor in self.actors:
            # small output layer keeps the initial policy near uniform
            actor.params[-2] *= 0.01
        self.critic = Mlp((state_dim, *hidden, 1), rng)

    @property
    def n_params(self) -> int:
        return sum(a.n_params for a in self.actors) + self.critic.n_params

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, actor in enumerate(self.actors):
            for k, p in enumerate(actor.params):
                out[f"actor{i}_{k}"] = p
        for k, p in enumerate(self.critic.params):
            out[f"critic_{k}"] = p
        return out


def forward_actor(actor: Mlp, observation) -> np.ndarray:
    x = np.asarray(observation, dtype=float)
    single = x.ndim == 1
    out = actor(x[None, :] if single else x)
    if not np.all(np.isfinite(out)):
        raise TrainingError("actor produced non-finite logits")
    return out[0] if single else out


CHECKPOINT_VERSION = 1


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, arrays: dict[str, np.ndarray], cfg_hash: str, tag: str = "marl") -> None:
    np.savez(path, __version__=np.array(CHECKPOINT_VERSION),
             __package__=np.array(__version__), __config_hash__=np.array(cfg_hash),
             __module__=np.array(tag), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, str]:
    with np.load(path) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
        arrays = {k: data[k] for k in data.files if not k.startswith("__")}
        return arrays, str(data["__config_hash__"]), str(data["__module__"])


# ---------------------------------------------------------------- PPO

@dataclass
class Transition:
    obs: np.ndarray
    action: int
    logp: float
    reward: float
    shaped: float
    intrinsic: float
    state: np.ndarray
    done: bool
    bias: Optional[np.ndarray] = None  # additive logit bias in force
    prior: Optional[np.ndarray] = None  # pi_Q over actions
    q_qaoa: Optional[np.ndarray] = None  # p_Q pushed onto actions, for Q-mixing
    next_obs: Optional[np.ndarray] = None


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    returns: np.ndarray
    states: np.ndarray
    bias: Optional[np.ndarray] = None
    prior: Optional[np.ndarray] = None
    q_qaoa: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(self.obs[idx], self.actions[idx], self.old_logp[idx], self.returns[idx],
                     self.states[idx], pick(self.bias), pick(self.prior), pick(self.q_qaoa))


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


def make_batch(transitions: Sequence[Transition], gamma: float, use_intrinsic: bool = True) -> Batch:
    """Stack one agent's episode(s); returns are discounted shaped + intrinsic rewards."""
    if not transitions:
        raise TrainingError("empty batch")
    rewards = [tr.shaped + (tr.intrinsic if use_intrinsic else 0.0) for tr in transitions]
    returns = np.zeros(len(transitions))
    start = 0
    for k, tr in enumerate(transitions):
        if tr.done or k == len(transitions) - 1:
            returns[start:k + 1] = discounted_returns(rewards[start:k + 1], gamma)
            start = k + 1
    stack = lambda name: (None if getattr(transitions[0], name) is None  # noqa: E731
                          else np.stack([getattr(tr, name) for tr in transitions]))
    return Batch(np.stack([tr.obs for tr in transitions]),
                 np.array([tr.action for tr in transitions], dtype=np.intp),
                 np.array([tr.logp for tr in transitions]), returns,
                 np.stack([tr.state for tr in transitions]),
                 stack("bias"), stack("prior"), stack("q_qaoa"))


def combine_logits(raw: np.ndarray, bias: Optional[np.ndarray], q_qaoa: Optional[np.ndarray],
                   qcfg: Optional[QaoaIntegrationConfig]):
    """Final logits from the actor output; returns (logits, d logits / d raw)."""
    if qcfg is None:
        return raw, 1.0
    logits, scale = raw, 1.0
    if qcfg.lambda_mix > 0 and q_qaoa is not None:
        if qcfg.mix_mode == "convex":
            logits = mix_q(raw, q_qaoa, qcfg.lambda_mix)
            scale = 1.0 - qcfg.lambda_mix
        else:
            logits = raw + qcfg.lambda_mix * q_qaoa
    if qcfg.eta > 0 and bias is not None:
        logits = logits + bias
    return logits, scale


def policy_logits(raw: np.ndarray, batch: Batch, qcfg: Optional[QaoaIntegrationConfig]):
    return combine_logits(raw, batch.bias, batch.q_qaoa, qcfg)


@dataclass
class LossReport:
    total: float
    surrogate: float
    value: float
    kl: float
    entropy: float


def ppo_loss_and_grads(actor: Mlp, critic: Mlp, batch: Batch, cfg: TrainConfig,
                       qcfg: Optional[QaoaIntegrationConfig], advantages: Optional[np.ndarray] = None,
                       need_grads: bool = True):
    """Total loss -surrogate + value MSE + lambda_Q KL(pi_Q || pi) - c_ent H(pi).

    Advantages default to returns minus the critic's current values.  Returns
    (report, actor grads, critic grads); grads are None if not requested.
    """
    b = len(batch)
    raw, a_cache = actor.forward(batch.obs)
    values, c_cache = critic.forward(batch.states)
    values = values[:, 0]
    if advantages is None:
        advantages = batch.returns - values
    logits, scale = policy_logits(raw, batch, qcfg)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(b)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr = np.minimum(ratio * advantages, clipped * advantages)
    ent = -(probs * logp_all).sum(axis=1)
    value_loss = float(np.mean((values - batch.returns) ** 2))
    kl = 0.0
    use_kl = qcfg is not None and qcfg.lambda_kl > 0 and batch.prior is not None
    if use_kl:
        prior = batch.prior
        kl_each = (prior * (np.log(prior) - logp_all)).sum(axis=1)
        kl = float(kl_each.mean())
    total = -float(surr.mean()) + value_loss - cfg.entropy_coef * float(ent.mean())
    if use_kl:
        total += qcfg.lambda_kl * kl
    report = LossReport(total, float(surr.mean()), value_loss, kl, float(ent.mean()))
    if not math.isfinite(total):
        raise TrainingError(f"non-finite loss: {report}")
    if not need_grads:
        return report, None, None

    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    unclipped = ratio * advantages <= clipped * advantages
    d_logp = np.where(unclipped, ratio * advantages, 0.0)
    g = -d_logp[:, None] * (onehot - probs)
    if cfg.entropy_coef > 0:
        g = g + cfg.entropy_coef * probs * (logp_all + ent[:, None])
    if use_kl:
        g = g + qcfg.lambda_kl * (probs - batch.prior)
    g = g / b
    if scale != 1.0:
        g = g * scale
    actor_grads, _ = actor.backward(a_cache, g)
    dv = (2.0 / b) * (values - batch.returns)
    critic_grads, _ = critic.backward(c_cache, dv[:, None])
    return report, actor_grads, critic_grads


@dataclass
class UpdateReport:
    loss_before: LossReport
    loss_after: LossReport
    n_steps: int = 0
    history: list = field(default_factory=list)


def ppo_update(actor: Mlp, critic: Mlp, batch: Batch, cfg: TrainConfig,
               qcfg: Optional[QaoaIntegrationConfig] = None,
               rng: Optional[np.random.Generator] = None,
               update_critic: bool = True) -> UpdateReport:
    """Clipped-surrogate epochs over shuffled minibatches with plain gradient descent.

    Advantages are fixed from the critic before the first step.  Passing
    ``qcfg=None`` is the classical PPO path.
    """
    if len(batch) == 0:
        raise TrainingError("empty batch")
    rng = rng if rng is not None else np.random.default_rng(0)
    values = critic(batch.states)[:, 0]
    adv = batch.returns - values
    before, _, _ = ppo_loss_and_grads(actor, critic, batch, cfg, qcfg, adv, need_grads=False)
    a_opt, c_opt = Sgd(actor.params, cfg.actor_lr), Sgd(critic.params, cfg.critic_lr)
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            _, ga, gc = ppo_loss_and_grads(actor, critic, batch.subset(idx), cfg, qcfg, adv[idx])
            a_opt.step(ga)
            if update_critic:
                c_opt.step(gc)
            steps += 1
    after, _, _ = ppo_loss_and_grads(actor, critic, batch, cfg, qcfg, adv, need_grads=False)
    return UpdateReport(before, after, steps)
