"""GP-utility -> QUBO -> Ising mapping and exact statevector QAOA.

Bit convention: basis index ``b`` encodes ``z_j = (b >> j) & 1``.  The
canonical cost is ``H_C(z) = -sum_j w_j z_j + sum_{i<j} J_ij z_i z_j + c``
with ``w_j >= 0`` produced by :func:`normalize_weights`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import ConfigError, ResourceCapError

MAX_QUBITS = 20


@dataclass(frozen=True, eq=False)
class CandidateSet:
    cells: np.ndarray  # (n, 2) int
    utilities: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return len(self.cells)


@dataclass(frozen=True, eq=False)
class QuboProblem:
    weights: np.ndarray  # w_j, enters as -w_j z_j
    couplings: np.ndarray  # symmetric J, zero diagonal
    offset: float = 0.0

    @property
    def n(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class IsingOperator:
    """sum_j alpha_j Z_j + sum_{j<k} beta_jk Z_j Z_k + constant."""

    alpha: np.ndarray
    beta: np.ndarray  # strictly upper triangular
    constant: float

    @property
    def n(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True)
class QaoaParams:
    gammas: tuple[float, ...]
    betas: tuple[float, ...]

    def __post_init__(self):
        if len(self.gammas) < 1 or len(self.gammas) != len(self.betas):
            raise ValueError("need p >= 1 gammas and the same number of betas")
        if not all(math.isfinite(a) for a in self.gammas + self.betas):
            raise ValueError("QAOA angles must be finite")

    @property
    def depth(self) -> int:
        return len(self.gammas)

    @classmethod
    def from_vector(cls, v) -> "QaoaParams":
        v = np.asarray(v, dtype=float)
        p = len(v) // 2
        return cls(tuple(v[:p].tolist()), tuple(v[p:].tolist()))

    def to_vector(self) -> np.ndarray:
        return np.array(self.gammas + self.betas, dtype=float)


@dataclass(frozen=True, eq=False)
class QaoaResult:
    params: Optional[QaoaParams]
    expectation: float
    samples: np.ndarray  # (S, n) 0/1
    marginals: np.ndarray  # (n,)
    best: np.ndarray  # z*, (n,) 0/1


def build_candidates(model, region, n: int, kappa: float, t: float = 0.0) -> CandidateSet:
    """Pick n cells of a uniform coarse sub-grid of ``region`` and score them by UCB.

    When n equals the region size every cell is used in the given order;
    otherwise n must be a perfect square and a sqrt(n) x sqrt(n) lattice is
    laid over the region's bounding box.
    """
    region = np.asarray(region, dtype=int).reshape(-1, 2)
    if n < 1 or len(region) < n:
        raise ConfigError(f"region has {len(region)} cells, cannot pick n={n} candidates")
    if n == len(region):
        cells = region.copy()
    else:
        k = math.isqrt(n)
        if k * k != n:
            raise ConfigError(f"coarse sub-grid needs a square candidate count, got n={n}")
        xs = np.unique(region[:, 0])
        ys = np.unique(region[:, 1])
        if len(xs) < k or len(ys) < k:
            raise ConfigError(f"region too small for a {k}x{k} candidate grid")
        gx = xs[np.round(np.linspace(0, len(xs) - 1, k)).astype(int)]
        gy = ys[np.round(np.linspace(0, len(ys) - 1, k)).astype(int)]
        cells = np.array([(x, y) for y in gy for x in gx], dtype=int)
        members = {tuple(c) for c in region.tolist()}
        if not all(tuple(c) in members for c in cells.tolist()):
            raise ConfigError("region is not rectangular enough for a uniform sub-grid")
    pts = np.column_stack([cells, np.full(len(cells), float(t))])
    mean, var = model.predict(pts)
    return CandidateSet(cells, mean + kappa * np.sqrt(var))


def normalize_weights(
    utilities,
    mode: str = "softmax",
    gamma_w: float = 1.0,
    tau: float = 0.1,
    affine_range: Optional[tuple[float, float]] = None,
) -> np.ndarray:
    """Monotone map from utilities to non-negative Hamiltonian weights.

    minmax: gamma_w * (R - min) / (max - min); all-equal input gives gamma_w
    everywhere.  softmax: gamma_w * softmax(R / tau), summing to gamma_w.
    ``affine_range`` optionally rescales the result onto [lo, hi].
    """
    r = np.asarray(utilities, dtype=float)
    if not tau > 0:
        raise ValueError("tau must be > 0")
    if mode == "minmax":
        span = r.max() - r.min()
        if span == 0:
            w = np.full(r.shape, gamma_w)
        else:
            w = gamma_w * (r - r.min()) / span
    elif mode == "softmax":
        e = np.exp((r - r.max()) / tau)
        w = gamma_w * e / e.sum()
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if affine_range is not None:
        lo, hi = affine_range
        span = w.max() - w.min()
        w = np.full(w.shape, hi) if span == 0 else lo + (hi - lo) * (w - w.min()) / span
    return w


def build_qubo(candidates: CandidateSet, weights, d_min: float, j_pen: float) -> QuboProblem:
    w = np.asarray(weights, dtype=float)
    if len(w) != candidates.n:
        raise ValueError(f"{len(w)} weights for {candidates.n} candidates")
    c = candidates.cells.astype(float)
    dist = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    j = np.where(dist < d_min, float(j_pen), 0.0)
    np.fill_diagonal(j, 0.0)
    return QuboProblem(w, j, 0.0)


def bit_table(n: int) -> np.ndarray:
    """(2**n, n) array of z_j for every basis index."""
    idx = np.arange(2**n, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(np.int8)


def qubo_energy(q: QuboProblem, z) -> float:
    z = np.asarray(z, dtype=float)
    return float(-q.weights @ z + 0.5 * z @ q.couplings @ z + q.offset)


def qubo_energies(q: QuboProblem) -> np.ndarray:
    z = bit_table(q.n).astype(float)
    return -z @ q.weights + 0.5 * np.einsum("bi,ij,bj->b", z, q.couplings, z) + q.offset


def to_ising(q: QuboProblem) -> IsingOperator:
    """Substitute z = (1 - Z) / 2 into the QUBO."""
    n = q.n
    alpha = q.weights / 2.0
    const = q.offset - q.weights.sum() / 2.0
    beta = np.zeros((n, n))
    for i in range(n):
        for k in range(i + 1, n):
            jik = q.couplings[i, k]
            if jik == 0.0:
                continue
            quarter = jik / 4.0
            const += quarter
            alpha[i] -= quarter
            alpha[k] -= quarter
            beta[i, k] = quarter
    return IsingOperator(alpha, beta, float(const))


def ising_energy(op: IsingOperator, z) -> float:
    spins = 1.0 - 2.0 * np.asarray(z, dtype=float)
    return float(op.alpha @ spins + spins @ op.beta @ spins + op.constant)


def ising_energies(op: IsingOperator) -> np.ndarray:
    """Diagonal of the operator in the computational basis."""
    if op.n > MAX_QUBITS:
        raise ResourceCapError(f"{op.n} qubits exceeds the statevector cap of {MAX_QUBITS}")
    spins = 1.0 - 2.0 * bit_table(op.n)
    e = spins @ op.alpha + op.constant
    for i, k in zip(*np.nonzero(op.beta)):
        e += op.beta[i, k] * spins[:, i] * spins[:, k]
    return e


def _check_size(n: int) -> None:
    if n > MAX_QUBITS:
        raise ResourceCapError(
            f"QAOA statevector needs 2^{n} amplitudes; cap is n <= {MAX_QUBITS} "
            "(use qaoa.mode = mapping for larger candidate sets)"
        )


_KRON_MAX_QUBITS = 12


def _apply_mixer_pairwise(psi: np.ndarray, n: int, beta: float) -> np.ndarray:
    """exp(-i beta X_j) on each qubit as a 2x2 rotation of paired amplitudes."""
    c, s = math.cos(beta), -1j * math.sin(beta)
    for j in range(n):
        v = psi.reshape(-1, 2, 2**j)
        a0 = v[:, 0, :].copy()
        a1 = v[:, 1, :]
        v[:, 0, :] = c * a0 + s * a1
        v[:, 1, :] = s * a0 + c * a1
    return psi


@lru_cache(maxsize=None)
def _hamming_table(k: int) -> np.ndarray:
    idx = np.arange(2**k)
    x = idx[:, None] ^ idx[None, :]
    return np.array([[bin(v).count("1") for v in row] for row in x], dtype=np.intp)


def _rx_power(k: int, beta: float) -> np.ndarray:
    """Rx(2 beta) tensored k times; entry (r, c) is cos^(k-d) (-i sin)^d, d = popcount(r^c)."""
    d = np.arange(k + 1)
    vals = math.cos(beta) ** (k - d) * (-1j * math.sin(beta)) ** d
    return vals[_hamming_table(k)]


def _apply_mixer(psi: np.ndarray, n: int, beta: float) -> np.ndarray:
    if n > _KRON_MAX_QUBITS:
        return _apply_mixer_pairwise(psi, n, beta)
    # same product of single-qubit rotations, grouped as U_hi (x) U_lo
    lo = n // 2
    hi = n - lo
    mat = psi.reshape(2**hi, 2**lo)
    mat = _rx_power(hi, beta) @ mat @ _rx_power(lo, beta).T
    psi[:] = mat.reshape(-1)
    return psi


def qaoa_statevector(
    op: IsingOperator, params: QaoaParams, energies: Optional[np.ndarray] = None
) -> np.ndarray:
    """Evolve |+>^n through p layers of cost phase and X mixing."""
    n = op.n
    _check_size(n)
    if energies is None:
        energies = ising_energies(op)
    psi = np.full(2**n, 2.0 ** (-n / 2), dtype=complex)
    for gamma, beta in zip(params.gammas, params.betas):
        psi *= np.exp(-1j * gamma * energies)
        _apply_mixer(psi, n, beta)
    return psi


def expectation(state: np.ndarray, energies: np.ndarray) -> float:
    probs = state.real**2 + state.imag**2
    return float(probs @ energies)


def optimize_angles(
    op: IsingOperator,
    p: int = 2,
    max_iters: int = 200,
    restarts: int = 8,
    seed: int = 0,
    init: Optional[QaoaParams] = None,
) -> tuple[QaoaParams, float]:
    """Nelder-Mead over (gammas, betas) from several seeded starting points.

    ``init``, when given, replaces the first random start (warm start).
    """
    if p < 1:
        raise ValueError("depth p must be >= 1")
    _check_size(op.n)
    energies = ising_energies(op)
    rng = np.random.default_rng(seed)
    starts = [np.concatenate([rng.uniform(0, np.pi, p), rng.uniform(0, np.pi, p)])
              for _ in range(max(restarts, 1))]
    if init is not None:
        if init.depth != p:
            raise ValueError(f"warm start has depth {init.depth}, expected {p}")
        starts[0] = init.to_vector()
    if np.ptp(energies) == 0:
        return QaoaParams.from_vector(starts[0]), float(energies[0])

    def cost(v):
        return expectation(qaoa_statevector(op, QaoaParams.from_vector(v), energies), energies)

    best_v, best_f = None, np.inf
    for x0 in starts:
        res = minimize(cost, x0, method="Nelder-Mead",
                       options={"maxiter": max_iters, "xatol": 1e-6, "fatol": 1e-9})
        if res.fun < best_f:
            best_v, best_f = res.x, float(res.fun)
    return QaoaParams.from_vector(best_v), best_f


def sample_and_marginals(
    state: np.ndarray, shots: int, seed, op: Optional[IsingOperator] = None
) -> QaoaResult:
    """Born-rule samples, per-candidate selection frequencies and best sample.

    ``seed`` may be an int or a numpy Generator.  Without ``op`` the best
    sample is the most frequent one.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    n = int(round(math.log2(len(state))))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    probs = state.real**2 + state.imag**2
    probs = probs / probs.sum()
    idx = rng.choice(len(probs), size=shots, p=probs)
    bits = ((idx[:, None] >> np.arange(n)) & 1).astype(np.int8)
    marginals = bits.mean(axis=0)
    if op is not None:
        energies = ising_energies(op)
        best_idx = idx[np.argmin(energies[idx])]
        exp_val = expectation(state, energies)
    else:
        vals, counts = np.unique(idx, return_counts=True)
        best_idx = vals[np.argmax(counts)]
        exp_val = float("nan")
    best = ((best_idx >> np.arange(n)) & 1).astype(np.int8)
    return QaoaResult(None, exp_val, bits, marginals, best)


def exact_marginals(state: np.ndarray) -> np.ndarray:
    n = int(round(math.log2(len(state))))
    probs = np.abs(state) ** 2
    return probs @ bit_table(n)


def mapping_only_result(weights, tau: float) -> QaoaResult:
    """Fallback for candidate sets too large to simulate: softmax of the weights."""
    w = np.asarray(weights, dtype=float)
    e = np.exp((w - w.max()) / tau)
    p = e / e.sum()
    best = np.zeros(len(w), dtype=np.int8)
    best[int(np.argmax(w))] = 1
    return QaoaResult(None, float("nan"), np.zeros((0, len(w)), dtype=np.int8), p, best)
