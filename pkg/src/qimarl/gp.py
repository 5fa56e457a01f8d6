"""Exact Gaussian-process regression over (x, y, t) sample points.

Kernels are products of a spatial part (RBF or half-integer Matern) and an
optional temporal part (squared exponential or periodic).  The prior mean is
zero and hyperparameters are fixed by configuration; there is no marginal
likelihood fitting.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import ConfigError, QimarlError

_MATERN_NUS = (0.5, 1.5, 2.5)


class GpNumericalError(QimarlError, ArithmeticError):
    """Kernel matrix is not positive definite."""

    def __init__(self, message: str, pair: Optional[tuple[int, int]] = None):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class KernelSpec:
    spatial: str = "rbf"  # "rbf" | "matern"
    length_scale: float = 2.5
    variance: float = 1.0
    nu: float = 1.5
    temporal: str = "none"  # "none" | "se" | "periodic"
    temporal_length_scale: float = 10.0
    period: float = 24.0
    noise_variance: float = 1e-3

    def __post_init__(self):
        if self.spatial not in ("rbf", "matern"):
            raise ConfigError(f"unknown spatial kernel {self.spatial!r}")
        if self.temporal not in ("none", "se", "periodic"):
            raise ConfigError(f"unknown temporal kernel {self.temporal!r}")
        if not self.length_scale > 0 or not self.variance > 0:
            raise ConfigError("length_scale and variance must be > 0")
        if not self.nu > 0:
            raise ConfigError("nu must be > 0")
        if self.spatial == "matern" and not any(
            math.isclose(self.nu, v) for v in _MATERN_NUS
        ):
            raise ConfigError(f"matern nu must be one of {_MATERN_NUS}, got {self.nu}")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be >= 0")
        if self.temporal != "none" and not self.temporal_length_scale > 0:
            raise ConfigError("temporal_length_scale must be > 0")
        if self.temporal == "periodic" and not self.period > 0:
            raise ConfigError("period must be > 0")


def _as_points(points) -> np.ndarray:
    """Coerce to an (m, 3) float array of (x, y, t); 2-column input gets t = 0."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[1] == 2:
        pts = np.hstack([pts, np.zeros((pts.shape[0], 1))])
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (m, 2) or (m, 3), got {pts.shape}")
    return pts


def _spatial(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    ell, var = spec.length_scale, spec.variance
    if spec.spatial == "rbf":
        return var * np.exp(-0.5 * (r / ell) ** 2)
    if math.isclose(spec.nu, 0.5):
        return var * np.exp(-r / ell)
    if math.isclose(spec.nu, 1.5):
        a = math.sqrt(3.0) * r / ell
        return var * (1.0 + a) * np.exp(-a)
    a = math.sqrt(5.0) * r / ell
    return var * (1.0 + a + a * a / 3.0) * np.exp(-a)


def _temporal(spec: KernelSpec, dt: np.ndarray) -> np.ndarray:
    if spec.temporal == "none":
        return np.ones_like(dt)
    lt = spec.temporal_length_scale
    if spec.temporal == "se":
        return np.exp(-0.5 * (dt / lt) ** 2)
    s = np.sin(np.pi * np.abs(dt) / spec.period)
    return np.exp(-2.0 * s * s / (lt * lt))


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    a, b = _as_points(a), _as_points(b)
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    r = np.sqrt(dx * dx + dy * dy)
    k = _spatial(spec, r)
    if spec.temporal != "none":
        k = k * _temporal(spec, a[:, None, 2] - b[None, :, 2])
    return k


def kernel_eval(spec: KernelSpec, s, s_prime) -> float:
    """Covariance between two (x, y, t) points."""
    return float(kernel_matrix(spec, [s], [s_prime])[0, 0])


@dataclass(frozen=True, eq=False)
class GpModel:
    kernel: KernelSpec
    train_inputs: np.ndarray
    train_targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train_targets)

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, points)


def _offending_pair(spec: KernelSpec, x: np.ndarray) -> tuple[int, int]:
    k = kernel_matrix(spec, x, x)
    d = np.sqrt(np.diag(k))
    corr = k / np.outer(d, d)
    np.fill_diagonal(corr, -np.inf)
    i, j = np.unravel_index(np.argmax(corr), corr.shape)
    return (int(min(i, j)), int(max(i, j)))


def fit(kernel: KernelSpec, inputs, targets) -> GpModel:
    """Factor K + noise*I and solve for the weight vector.

    Raises GpNumericalError naming the most collinear input pair if the
    factorization fails (duplicate inputs with zero noise, typically).
    """
    y = np.asarray(targets, dtype=float).reshape(-1)
    if len(y) == 0:
        empty = np.zeros((0, 3))
        return GpModel(kernel, empty, y, np.zeros((0, 0)), np.zeros(0))
    x = _as_points(inputs)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} targets")
    k = kernel_matrix(kernel, x, x)
    k[np.diag_indices_from(k)] += kernel.noise_variance
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        chol = None
    if chol is None or not np.all(np.isfinite(chol)):
        pair = _offending_pair(kernel, x)
        raise GpNumericalError(
            f"kernel matrix not positive definite; inputs {pair[0]} and {pair[1]} "
            f"({x[pair[0]].tolist()} vs {x[pair[1]].tolist()}) are (near) duplicates",
            pair,
        )
    z = solve_triangular(chol, y, lower=True)
    alpha = solve_triangular(chol.T, z, lower=False)
    return GpModel(kernel, x, y, chol, alpha)


def predict(model: GpModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent variance (clamped at 0) at query points."""
    q = _as_points(points)
    prior_var = np.full(len(q), model.kernel.variance)
    if model.kernel.temporal != "none":
        prior_var = prior_var * _temporal(model.kernel, np.zeros(len(q)))
    if model.n_train == 0:
        return np.zeros(len(q)), prior_var
    ks = kernel_matrix(model.kernel, model.train_inputs, q)
    mean = ks.T @ model.alpha
    v = solve_triangular(model.chol, ks, lower=True)
    var = prior_var - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def ucb(model, points, kappa: float) -> np.ndarray:
    """mu + kappa * sigma at each query point."""
    if not kappa >= 0 or not math.isfinite(kappa):
        raise ValueError("kappa must be finite and >= 0")
    mean, var = model.predict(points)
    return mean + kappa * np.sqrt(var)


def softmax_selection_probs(model, points, kappa: float, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("tau must be > 0")
    scores = ucb(model, points, kappa) / tau
    scores -= scores.max()
    p = np.exp(scores)
    return p / p.sum()


def softmax_selection_gradient(model, points, kappa: float, tau: float) -> np.ndarray:
    """d log P(x) / d kappa for softmax-over-UCB selection.

    Equals (sigma(x) - E_P[sigma]) / tau, so it has zero mean under P.
    """
    p = softmax_selection_probs(model, points, kappa, tau)
    sigma = np.sqrt(model.predict(points)[1])
    return (sigma - p @ sigma) / tau


class NearestSampleModel:
    """GP stand-in for the "GP removed" ablation.

    The mean at a point is the most recent sample at the nearest sampled
    location; the variance is 0 at sampled locations and the prior variance
    elsewhere.  Time is ignored.
    """

    def __init__(self, kernel: KernelSpec, inputs, targets):
        self.kernel = kernel
        y = np.asarray(targets, dtype=float).reshape(-1)
        if len(y) == 0:
            self._xy = np.zeros((0, 2))
            self._val = y
        else:
            x = _as_points(inputs)[:, :2]
            latest: dict[tuple[float, float], float] = {}
            for p, v in zip(map(tuple, x), y):
                latest[p] = v
            self._xy = np.array(list(latest.keys()), dtype=float)
            self._val = np.array(list(latest.values()), dtype=float)

    @property
    def n_train(self) -> int:
        return len(self._val)

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        q = _as_points(points)[:, :2]
        if self.n_train == 0:
            return np.zeros(len(q)), np.full(len(q), self.kernel.variance)
        d2 = ((q[:, None, :] - self._xy[None, :, :]) ** 2).sum(-1)
        # ties go to the most recently inserted location
        idx = len(self._xy) - 1 - np.argmin(d2[:, ::-1], axis=1)
        mean = self._val[idx]
        var = np.where(d2[np.arange(len(q)), idx] == 0, 0.0, self.kernel.variance)
        return mean, var


@dataclass
class SampleMemory:
    """FIFO pool of (x, y, t, value) measurements shared by agents."""

    capacity: int = 200
    _items: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("memory capacity must be >= 1")
        self._items = deque(maxlen=self.capacity)

    def add(self, x: float, y: float, t: float, value: float) -> None:
        self._items.append((float(x), float(y), float(t), float(value)))

    def __len__(self) -> int:
        return len(self._items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._items:
            return np.zeros((0, 3)), np.zeros(0)
        a = np.array(self._items, dtype=float)
        return a[:, :3], a[:, 3]

    def fit(self, kernel: KernelSpec, use_gp: bool = True):
        x, y = self.arrays()
        if use_gp:
            return fit(kernel, x, y)
        return NearestSampleModel(kernel, x, y)
