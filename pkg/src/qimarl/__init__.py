"""Quantum-inspired multi-agent RL laboratory for UAV signal-coverage simulation.

The pipeline: a Gaussian-process model of a drifting 2-D signal field feeds
UCB utilities into a QUBO/Ising cost Hamiltonian, an exact statevector QAOA
simulation turns that Hamiltonian into candidate marginals, and those
marginals bias a CTDE actor-critic learner.
"""

__version__ = "0.1.0"


class QimarlError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(QimarlError, ValueError):
    """Invalid or contradictory configuration."""


class ResourceCapError(QimarlError):
    """A request exceeds a hard resource cap (e.g. statevector qubit count)."""


class TrainingError(QimarlError, RuntimeError):
    """Training produced an unusable state (empty batch, non-finite loss)."""
