"""The full training loop: observe, model, map, solve, bias, act, store, update.

Per step every agent reads its local window of the posterior, builds a
small QUBO over the cells around it, samples QAOA marginals, and acts from
its biased policy.  Measurements at the new positions go into the sample
memory and the GP is refit on schedule.  At the end of each episode each
actor gets a clipped-surrogate update and the shared critic is fit to the
agents' returns.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig, dumps
from .curiosity import Icm, Rnd
from .field_env import (N_ACTIONS, OBS_DIM, FieldConfig, PosteriorGrid, RewardWeights, UavState,
                        generate_field, observe, posterior_grid, step)
from .gp import SampleMemory
from .marl import (ActorCritic, QaoaIntegrationConfig, Transition, action_candidate_map,
                   annealed_gamma_q, combine_logits, config_hash, forward_actor, joint_state,
                   logit_bias, make_batch, ppo_update, qaoa_action_prior, shape_reward)
from .metrics import EpisodeMetrics, inter_agent_correlation
from .nn import log_softmax
from .qaoa import (QaoaParams, build_candidates, build_qubo, ising_energies, mapping_only_result,
                   normalize_weights, optimize_angles, qaoa_statevector, sample_and_marginals,
                   to_ising)

BYTES_PER_SAMPLE = 32  # (x, y, t, value) as four float64


class _GridModel:
    """predict() over a precomputed posterior grid."""

    def __init__(self, post: PosteriorGrid):
        self.post = post

    def predict(self, pts):
        pts = np.asarray(pts)
        x, y = pts[:, 0].astype(int), pts[:, 1].astype(int)
        return self.post.mean[x, y], self.post.std[x, y] ** 2


@dataclass
class TrainResult:
    config: ExperimentConfig
    seed: int
    model: ActorCritic
    metrics: list[EpisodeMetrics]
    global_rewards: list[float] = field(default_factory=list)
    agent_returns: list[list[float]] = field(default_factory=list)
    wall_seconds: float = 0.0

    def summary(self) -> dict:
        from .metrics import convergence_episode, final_window

        rewards = [m.mean_reward for m in self.metrics]
        window = min(50, len(rewards))
        conv = convergence_episode(rewards, window=window)
        return {
            "config_hash": config_hash(dumps(self.config)),
            "seed": self.seed,
            "variant": self.config.marl.variant,
            "episodes": len(self.metrics),
            "convergence": {"episode": conv.episode, "long_run_mean": conv.long_run_mean,
                            "window": conv.window, "tol": conv.tol},
            "final_window": final_window(self.metrics, window),
            "mean_global_reward": float(np.mean(self.global_rewards)) if self.global_rewards else None,
            "inter_agent_correlation": inter_agent_correlation(np.array(self.agent_returns).T),
            "wall_seconds": self.wall_seconds,
        }


def field_seed(env_seed: int, run_seed: int) -> int:
    return int(np.random.SeedSequence([env_seed, run_seed]).generate_state(1)[0])


def _region(pos, radius: int, width: int, height: int) -> np.ndarray:
    x0, y0 = pos
    cells = [(x, y) for y in range(y0 - radius, y0 + radius + 1)
             for x in range(x0 - radius, x0 + radius + 1) if 0 <= x < width and 0 <= y < height]
    return np.array(cells, dtype=int)


class _QaoaPlanner:
    """Per-agent QUBO construction and QAOA solve with one shared angle set.

    Angles are optimized fully on first use and afterwards refreshed from a
    warm start every ``refresh_every`` solves.
    """

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        self.angles: Optional[QaoaParams] = None
        self.solves = 0

    def solve(self, post: PosteriorGrid, pos, width: int, height: int):
        q = self.cfg.qaoa
        region = _region(pos, q.region_radius, width, height)
        n = min(q.n, len(region))
        try:
            cand = build_candidates(_GridModel(post), region, n, self.cfg.kappa_map)
        except Exception:
            cand = build_candidates(_GridModel(post), region, len(region), self.cfg.kappa_map)
        w = normalize_weights(cand.utilities, q.normalization, q.gamma_w, q.tau,
                              (0.1, 1.0) if q.affine else None)
        if q.mode == "mapping":
            res = mapping_only_result(w, q.tau)
        else:
            op = to_ising(build_qubo(cand, w, q.d_min, q.j_pen))
            energies = ising_energies(op)
            if self.angles is None:
                self.angles, _ = optimize_angles(op, q.p, q.max_iters, q.restarts,
                                                 int(self.rng.integers(2**31)))
            elif self.solves % q.refresh_every == 0:
                self.angles, _ = optimize_angles(op, q.p, q.refresh_iters, 1,
                                                 int(self.rng.integers(2**31)), init=self.angles)
            state = qaoa_statevector(op, self.angles, energies)
            res = sample_and_marginals(state, q.shots, self.rng, op)
        self.solves += 1
        return cand.cells, res.marginals, res.best


def _shares(cfg: ExperimentConfig, n_agents: int) -> list[int]:
    """Memory index used by each agent."""
    return [0] * n_agents if cfg.marl.shared_memory else list(range(n_agents))


def train(cfg: ExperimentConfig, seed: int,
          on_episode: Optional[Callable[[EpisodeMetrics], None]] = None) -> TrainResult:
    """Run ``cfg.run.episodes`` episodes with ``cfg.run.agents`` agents; deterministic per seed."""
    t_start = time.perf_counter()
    env_cfg: FieldConfig = replace(cfg.env, seed=field_seed(cfg.env.seed, seed))
    field_ = generate_field(env_cfg)
    W, H, T = env_cfg.width, env_cfg.height, env_cfg.horizon
    N, E = cfg.run.agents, cfg.run.episodes
    marl = cfg.marl
    tcfg = marl.train_config
    qcfg: QaoaIntegrationConfig = marl.qaoa_config
    use_qaoa = qcfg.active
    weights = RewardWeights(marl.alpha, marl.beta, env_cfg.eta_power)
    kernel = cfg.gp.kernel

    streams = np.random.SeedSequence([seed, 1]).spawn(7)
    start_rng, act_rng, qaoa_rng, init_rng, batch_rng, cur_rng, _ = (
        np.random.default_rng(s) for s in streams)

    state_dim = 3 * N + 1
    model = ActorCritic(N, OBS_DIM, state_dim, tcfg.hidden, init_rng)
    curiosity = None
    if marl.curiosity:
        latent = "auto" if marl.curiosity_latent == "auto" else int(marl.curiosity_latent)
        if marl.curiosity == "icm":
            curiosity = Icm(OBS_DIM, latent, marl.icm_eta, marl.icm_lr, marl.curiosity_grad_clip,
                            cur_rng, backbone_params=model.n_params)
        else:
            curiosity = Rnd(OBS_DIM, latent, marl.rnd_beta, marl.rnd_lr, marl.rnd_batch, cur_rng,
                            backbone_params=model.n_params)
    cur_buffer: deque = deque(maxlen=marl.rnd_batch)
    planner = _QaoaPlanner(cfg, qaoa_rng) if use_qaoa else None

    share = _shares(cfg, N)
    memories = [SampleMemory(cfg.gp.memory_cap) for _ in range(max(share) + 1)]
    shared = marl.shared_memory

    def refit(t):
        return [posterior_grid(m.fit(kernel, cfg.gp.use_gp), W, H, t) for m in memories]

    result = TrainResult(cfg, seed, model, [])
    cum_regret = 0.0
    global_step = 0
    for ep in range(E):
        xs = start_rng.integers(0, W, N)
        ys = start_rng.integers(0, H, N)
        agents = [UavState((int(x), int(y)), 1) for x, y in zip(xs, ys)]
        msg_bytes = 0
        for i, a in enumerate(agents):
            memories[share[i]].add(*a.position, 0.0, field_.value(*a.position, 0))
            if shared:
                msg_bytes += BYTES_PER_SAMPLE
        posts = refit(0)
        obs = [observe(field_, posts[share[i]], agents, i, 0).flat() for i in range(N)]
        visited = {a.position for a in agents}
        trajectories: list[list[Transition]] = [[] for _ in range(N)]
        ep_reward = np.zeros(N)
        ep_regret = 0.0
        entropies, coverages, interferences, gp_vars, global_r = [], [], [], [], []

        for t in range(T):
            state = joint_state([a.position for a in agents], [a.power_level for a in agents],
                                t, W, H, T)
            actions, logps, extras = [], [], []
            for i in range(N):
                raw = forward_actor(model.actors[i], obs[i])
                bias = prior = q_push = None
                amap = p_q = z_star = None
                if use_qaoa:
                    cells, p_q, z_star = planner.solve(posts[share[i]], agents[i].position, W, H)
                    amap = action_candidate_map(agents[i].position, cells, W, H)
                    if qcfg.eta > 0:
                        bias = logit_bias(amap, p_q, qcfg.eta, qcfg.epsilon)
                    if qcfg.lambda_kl > 0:
                        prior = qaoa_action_prior(amap, p_q, qcfg.epsilon)
                    if qcfg.lambda_mix > 0:
                        q_push = np.where(amap >= 0, np.asarray(p_q)[np.maximum(amap, 0)], 0.0)
                logits, _ = combine_logits(raw, bias, q_push, qcfg if use_qaoa else None)
                logp_all = log_softmax(logits)
                probs = np.exp(logp_all)
                probs /= probs.sum()
                a = int(act_rng.choice(N_ACTIONS, p=probs))
                entropies.append(float(-(probs * logp_all).sum()))
                actions.append(a)
                logps.append(float(logp_all[a]))
                extras.append((bias, prior, q_push, amap, p_q, z_star))

            pre_posts = [posts[share[i]] for i in range(N)]
            gp_vars.append(float(np.mean([np.mean(p.std**2) for p in posts])))
            out = step(field_, agents, actions, t, pre_posts, weights)
            grid1 = field_.grid(t + 1)
            for i in range(N):
                best = float(np.max(weights.alpha * grid1 - weights.beta * pre_posts[i].std))
                ep_regret += max(0.0, best - float(out.rewards[i]))
            agents = out.agents
            coverages.append(out.coverage)
            interferences.append(out.interference)
            global_r.append(out.global_reward)
            for i, a in enumerate(agents):
                visited.add(a.position)
                memories[share[i]].add(*a.position, float(t + 1), field_.value(*a.position, t + 1))
                if shared:
                    msg_bytes += BYTES_PER_SAMPLE
            if (t + 1) % cfg.gp.refit_every == 0:
                posts = refit(t + 1)
            next_obs = [observe(field_, posts[share[i]], agents, i, t + 1).flat() for i in range(N)]

            intrinsic = np.zeros(N)
            if curiosity is not None:
                s_arr, s_next = np.stack(obs), np.stack(next_obs)
                if isinstance(curiosity, Icm):
                    intrinsic = curiosity.intrinsic(s_arr, np.array(actions), s_next)[0]
                    cur_buffer.extend(zip(obs, actions, next_obs))
                    bs, ba, bn = zip(*cur_buffer)
                    curiosity.update(np.stack(bs), np.array(ba), np.stack(bn))
                else:
                    intrinsic = curiosity.intrinsic(s_next)
                    cur_buffer.extend(next_obs)
                    curiosity.update(np.stack(cur_buffer))

            anneal = annealed_gamma_q(1.0, global_step, qcfg.anneal_steps)
            for i in range(N):
                r = float(out.rewards[i])
                bias, prior, q_push, amap, p_q, z_star = extras[i]
                shaped = r
                if use_qaoa and (qcfg.lambda_shape > 0 or qcfg.gamma_q > 0):
                    shaped = shape_reward(r, actions[i], amap, p_q, z_star, qcfg.lambda_shape,
                                          qcfg.gamma_q, anneal)
                ep_reward[i] += r
                trajectories[i].append(Transition(
                    obs[i], actions[i], logps[i], r, shaped, float(intrinsic[i]), state, out.done,
                    bias, prior, q_push, next_obs[i]))
            obs = next_obs
            global_step += 1

        for i in range(N):
            batch = make_batch(trajectories[i], tcfg.gamma)
            ppo_update(model.actors[i], model.critic, batch, tcfg,
                       qcfg if use_qaoa else None, batch_rng)

        cum_regret += ep_regret
        cov = float(np.mean(coverages))
        row = EpisodeMetrics(
            episode=ep + 1,
            mean_reward=float(ep_reward.sum() / (N * T)),
            cum_reward=float(ep_reward.sum()),
            coverage=cov,
            dead_zone=1.0 - cov,
            exploration_ratio=len(visited) / (W * H),
            entropy_nats=float(np.mean(entropies)),
            cum_regret=cum_regret,
            mean_gp_var=float(np.mean(gp_vars)),
            interference=float(np.mean(interferences)),
            msg_bytes=msg_bytes,
        )
        result.metrics.append(row)
        result.global_rewards.append(float(np.mean(global_r)))
        result.agent_returns.append(ep_reward.tolist())
        if on_episode is not None:
            on_episode(row)
    result.wall_seconds = time.perf_counter() - t_start
    return result
