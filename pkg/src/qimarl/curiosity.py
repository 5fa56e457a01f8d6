"""Intrinsic-reward baselines: ICM (forward/inverse dynamics) and RND.

Both modules read the same flattened local observation the actors see.
Their latent width is capped so the trainable parameter count stays below
2% of the learner backbone; ``latent="auto"`` picks the widest layer that
fits, up to 128.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import ConfigError
from .field_env import N_ACTIONS
from .nn import Adam, Mlp, clip_by_global_norm, log_softmax

BUDGET_FRACTION = 0.02
MAX_LATENT = 128


def icm_param_count(obs_dim: int, latent: int, n_actions: int = N_ACTIONS) -> int:
    L = latent
    encoder = obs_dim * L + L + L * L + L
    inverse = 2 * L * L + L + L * n_actions + n_actions
    forward = (L + n_actions) * 2 * L + 2 * L + 2 * L * L + L
    return encoder + inverse + forward


def rnd_param_count(obs_dim: int, latent: int) -> int:
    """Trainable (predictor) parameters only; the target is frozen."""
    return obs_dim * latent + latent + latent * latent + latent


def auto_latent(kind: str, obs_dim: int, backbone_params: int, n_actions: int = N_ACTIONS) -> int:
    count = (lambda L: icm_param_count(obs_dim, L, n_actions)) if kind == "icm" else (
        lambda L: rnd_param_count(obs_dim, L))
    budget = BUDGET_FRACTION * backbone_params
    best = 0
    for L in range(1, MAX_LATENT + 1):
        if count(L) < budget:
            best = L
    if best == 0:
        raise ConfigError(f"backbone of {backbone_params} parameters leaves no room for a "
                          f"{kind} module under the {BUDGET_FRACTION:.0%} budget")
    return best


def _check_budget(kind: str, n: int, backbone_params: Optional[int]) -> None:
    if backbone_params is not None and not n < BUDGET_FRACTION * backbone_params:
        raise ConfigError(f"{kind} has {n} trainable parameters, not below "
                          f"{BUDGET_FRACTION:.0%} of the {backbone_params}-parameter backbone")


def _resolve_latent(kind, latent, obs_dim, backbone_params, n_actions=N_ACTIONS) -> int:
    if latent == "auto":
        if backbone_params is None:
            raise ConfigError("latent='auto' needs backbone_params")
        return auto_latent(kind, obs_dim, backbone_params, n_actions)
    return int(latent)


class Icm:
    """Encoder phi (obs -> L -> L), inverse head (2L -> L -> actions), forward head (L + actions -> 2L -> L).

    Training minimizes the inverse cross-entropy plus the forward mean squared
    error, with gradients flowing through every path including the encoder.
    """

    def __init__(self, obs_dim: int, latent: Union[int, str] = "auto", eta: float = 0.05,
                 lr: float = 1e-4, grad_clip: Optional[float] = 0.5,
                 rng: Optional[np.random.Generator] = None,
                 backbone_params: Optional[int] = None, n_actions: int = N_ACTIONS):
        if eta < 0:
            raise ConfigError("icm eta must be >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        L = _resolve_latent("icm", latent, obs_dim, backbone_params, n_actions)
        self.obs_dim, self.latent, self.n_actions = obs_dim, L, n_actions
        self.eta, self.grad_clip = eta, grad_clip
        self.encoder = Mlp((obs_dim, L, L), rng)
        self.inverse = Mlp((2 * L, L, n_actions), rng)
        self.forward_head = Mlp((L + n_actions, 2 * L, L), rng)
        _check_budget("ICM", self.n_params, backbone_params)
        self.opt = Adam(self.params, lr)

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder.params + self.inverse.params + self.forward_head.params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def _check(self, s, a, s_next):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        s_next = np.atleast_2d(np.asarray(s_next, dtype=float))
        a = np.atleast_1d(np.asarray(a, dtype=np.intp))
        if s.shape != s_next.shape or s.shape[1] != self.obs_dim or len(a) != len(s):
            raise ValueError(f"shape mismatch: s {s.shape}, a {a.shape}, s' {s_next.shape}")
        if np.any((a < 0) | (a >= self.n_actions)):
            raise ValueError("action index out of range")
        return s, a, s_next

    def _forward(self, s, a, s_next):
        b = len(a)
        phi, c_phi = self.encoder.forward(s)
        phi_n, c_phin = self.encoder.forward(s_next)
        onehot = np.zeros((b, self.n_actions))
        onehot[np.arange(b), a] = 1.0
        inv_logits, c_inv = self.inverse.forward(np.hstack([phi, phi_n]))
        pred, c_fwd = self.forward_head.forward(np.hstack([phi, onehot]))
        return phi, phi_n, inv_logits, pred, (c_phi, c_phin, c_inv, c_fwd)

    def intrinsic(self, s, a, s_next):
        """(eta * ||phi_hat(s') - phi(s')||^2 per sample, inverse loss, forward loss)."""
        s, a, s_next = self._check(s, a, s_next)
        _, phi_n, inv_logits, pred, _ = self._forward(s, a, s_next)
        err = pred - phi_n
        r = self.eta * (err * err).sum(axis=1)
        inv_loss = float(-log_softmax(inv_logits)[np.arange(len(a)), a].mean())
        fwd_loss = float((err * err).mean())
        return r, inv_loss, fwd_loss

    def loss_and_grads(self, s, a, s_next):
        s, a, s_next = self._check(s, a, s_next)
        b = len(a)
        L = self.latent
        phi, phi_n, inv_logits, pred, (c_phi, c_phin, c_inv, c_fwd) = self._forward(s, a, s_next)
        logp = log_softmax(inv_logits)
        inv_loss = -logp[np.arange(b), a].mean()
        err = pred - phi_n
        fwd_loss = (err * err).mean()
        d_logits = np.exp(logp)
        d_logits[np.arange(b), a] -= 1.0
        d_logits /= b
        g_inv, dx_inv = self.inverse.backward(c_inv, d_logits)
        d_pred = 2.0 * err / err.size
        g_fwd, dx_fwd = self.forward_head.backward(c_fwd, d_pred)
        d_phi = dx_inv[:, :L] + dx_fwd[:, :L]
        d_phin = dx_inv[:, L:] - d_pred
        g_e1, _ = self.encoder.backward(c_phi, d_phi)
        g_e2, _ = self.encoder.backward(c_phin, d_phin)
        g_enc = [x + y for x, y in zip(g_e1, g_e2)]
        return float(inv_loss + fwd_loss), float(inv_loss), float(fwd_loss), g_enc + g_inv + g_fwd

    def update(self, s, a, s_next) -> tuple[float, float]:
        _, inv_loss, fwd_loss, grads = self.loss_and_grads(s, a, s_next)
        self.opt.step(clip_by_global_norm(grads, self.grad_clip))
        return inv_loss, fwd_loss


class RunningMeanVar:
    """Streaming mean/variance (parallel-merge form)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.var = 1.0

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float).ravel()
        if len(x) == 0:
            return
        n_b, m_b, v_b = len(x), float(x.mean()), float(x.var())
        if self.count == 0:
            self.count, self.mean, self.var = n_b, m_b, v_b
            return
        n = self.count + n_b
        delta = m_b - self.mean
        m2 = self.var * self.count + v_b * n_b + delta * delta * self.count * n_b / n
        self.mean += delta * n_b / n
        self.var = m2 / n
        self.count = n


class Rnd:
    """Frozen random target and trainable predictor, both obs -> L -> L."""

    def __init__(self, obs_dim: int, latent: Union[int, str] = "auto", beta: float = 0.1,
                 lr: float = 5e-5, batch: int = 64, rng: Optional[np.random.Generator] = None,
                 backbone_params: Optional[int] = None, predictor_from_target: bool = False):
        if beta < 0:
            raise ConfigError("rnd beta must be >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        L = _resolve_latent("rnd", latent, obs_dim, backbone_params)
        self.obs_dim, self.latent, self.beta, self.batch = obs_dim, L, beta, batch
        self.target = Mlp((obs_dim, L, L), rng)
        for p in self.target.params:
            p.setflags(write=False)
        self.predictor = self.target.copy() if predictor_from_target else Mlp((obs_dim, L, L), rng)
        for p in self.predictor.params:
            p.setflags(write=True)
        _check_budget("RND", self.n_params, backbone_params)
        self.opt = Adam(self.predictor.params, lr)
        self.stats = RunningMeanVar()

    @property
    def n_params(self) -> int:
        return self.predictor.n_params

    def _check(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if s.shape[1] != self.obs_dim:
            raise ValueError(f"expected observations of width {self.obs_dim}, got {s.shape}")
        return s

    def raw(self, s) -> np.ndarray:
        s = self._check(s)
        err = self.predictor(s) - self.target(s)
        return self.beta * (err * err).sum(axis=1)

    def intrinsic(self, s) -> np.ndarray:
        """Raw error divided by the running std of raw errors (stats updated first)."""
        r = self.raw(s)
        self.stats.update(r)
        return r / np.sqrt(self.stats.var + 1e-8)

    def loss_and_grads(self, s):
        s = self._check(s)
        pred, cache = self.predictor.forward(s)
        err = pred - self.target(s)
        loss = float((err * err).mean())
        grads, _ = self.predictor.backward(cache, 2.0 * err / err.size)
        return loss, grads

    def update(self, s) -> float:
        loss, grads = self.loss_and_grads(s)
        self.opt.step(grads)
        return loss
