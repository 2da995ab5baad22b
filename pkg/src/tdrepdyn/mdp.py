"""Markov reward processes: construction, validation, and derived quantities.

This module provides:
- Seeded generators for doubly-stochastic, permutation-mixed, and symmetric
  transition matrices (all strictly positive after mixing, hence irreducible).
- Random multi-column reward sampling with per-entry variance sigma^2 / h,
  so that R R^T concentrates around sigma^2 I as h grows.
- Stationary distributions (power iteration), discounted value functions,
  the key matrix diag(d) (I - gamma P), and a reversibility check.
- JSON round-trip for generated processes.

All randomness is threaded through a counter-based Philox generator so that
identical seeds give bit-identical output across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10

SINKHORN_MAX_ITER = 10_000
POWER_ITER_MAX = 100_000


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap before reaching tolerance."""

    def __init__(self, what: str, iterations: int, residual: float):
        super().__init__(
            f"{what} did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed``.

    Philox is stateless-counter based, so streams are reproducible bit-for-bit
    across platforms and can be spawned hierarchically via SeedSequence.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class MarkovRewardProcess:
    """Finite Markov reward process (P, R, gamma, d).

    P is |X| x |X| row-stochastic, R is |X| x h, d is the stationary
    distribution of P. Instances are validated on construction and their
    arrays are frozen, so they are safe to share across threads.
    """

    P: np.ndarray
    R: np.ndarray
    gamma: float
    d: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 1:
            R = R[:, None]
        d = np.asarray(self.d, dtype=float).ravel()
        n = P.shape[0]
        if P.shape != (n, n):
            raise ValueError(f"P must be square, got shape {P.shape}")
        if R.shape[0] != n:
            raise ValueError(f"R must have {n} rows, got shape {R.shape}")
        if d.shape != (n,):
            raise ValueError(f"d must have length {n}, got shape {d.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0):
            raise ValueError("P has negative entries")
        row_err = np.abs(P.sum(axis=1) - 1.0).max()
        if row_err > ROW_SUM_TOL:
            raise ValueError(f"P rows must sum to 1 (max deviation {row_err:.3e})")
        if np.any(d < 0):
            raise ValueError("d has negative entries")
        if abs(d.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"d must sum to 1, got {d.sum()!r}")
        stat_err = np.abs(d @ P - d).max()
        if stat_err > STATIONARY_TOL:
            raise ValueError(
                f"d is not stationary for P (max |d^T P - d^T| = {stat_err:.3e})"
            )
        for name, arr in (("P", P), ("R", R), ("d", d)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def h(self) -> int:
        return self.R.shape[1]

    def with_rewards(self, R: np.ndarray) -> "MarkovRewardProcess":
        """Same chain, different reward matrix."""
        return MarkovRewardProcess(P=self.P, R=R, gamma=self.gamma, d=self.d)


@dataclass(frozen=True)
class RewardSpec:
    """How to sample an |X| x h random reward matrix.

    Entries are i.i.d. zero-mean with per-entry variance sigma^2 / h, which
    makes R R^T concentrate around sigma^2 I at rate O(1/sqrt(h)).
    """

    h: int
    sigma: float = 1.0
    distribution: str = "normal"

    _SAMPLERS = ("normal", "uniform", "rademacher")

    def __post_init__(self):
        if self.h < 1:
            raise ValueError(f"h must be >= 1, got {self.h}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.distribution not in self._SAMPLERS:
            raise ValueError(
                f"unknown distribution {self.distribution!r}; "
                f"choose one of {self._SAMPLERS}"
            )


def sample_doubly_stochastic(
    n: int,
    seed: int | np.random.SeedSequence,
    tol: float = 1e-12,
    max_iter: int = SINKHORN_MAX_ITER,
) -> np.ndarray:
    """Random doubly-stochastic matrix via Sinkhorn normalization.

    Starts from a strictly positive uniform-random matrix and alternates
    column and row normalization until every column sum is within ``tol``
    of 1 (rows are exact after the final row pass). Strict positivity of
    the start guarantees convergence and an irreducible result.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not tol > 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    if n == 1:
        return np.ones((1, 1))
    rng = make_rng(seed)
    M = rng.uniform(0.1, 1.0, size=(n, n))
    residual = np.inf
    for _ in range(max_iter):
        M /= M.sum(axis=0, keepdims=True)
        M /= M.sum(axis=1, keepdims=True)
        residual = np.abs(M.sum(axis=0) - 1.0).max()
        if residual <= tol:
            return M
    raise ConvergenceError("Sinkhorn normalization", max_iter, residual)


def sample_permutation(n: int, seed: int | np.random.SeedSequence) -> np.ndarray:
    """Random n x n permutation matrix; row i has its 1 in a permuted column."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    return np.eye(n)[rng.permutation(n)]


def sample_random_rewards(
    n: int, spec: RewardSpec, seed: int | np.random.SeedSequence
) -> np.ndarray:
    """Sample an n x h reward matrix per ``spec`` (entry variance sigma^2 / h)."""
    rng = make_rng(seed)
    scale = spec.sigma / np.sqrt(spec.h)
    if spec.distribution == "normal":
        return scale * rng.standard_normal((n, spec.h))
    if spec.distribution == "uniform":
        half_width = scale * np.sqrt(3.0)  # variance of U(-a, a) is a^2 / 3
        return rng.uniform(-half_width, half_width, size=(n, spec.h))
    # rademacher
    return scale * rng.choice([-1.0, 1.0], size=(n, spec.h))


def make_random_mdp(
    n: int = 30,
    h: int = 1,
    gamma: float = 0.9,
    alpha: float = 0.95,
    seed: int | np.random.SeedSequence = 0,
    reward_spec: RewardSpec | None = None,
) -> MarkovRewardProcess:
    """Random MDP with P = alpha * P_perm + (1 - alpha) * P_ds.

    Both components are doubly stochastic, so P is doubly stochastic and the
    stationary distribution is exactly uniform. A large alpha (default 0.95)
    makes the chain very likely to violate reversibility. Rewards default to
    i.i.d. standard normal entries; pass ``reward_spec`` for the variance
    sigma^2 / h convention instead.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    ds_seed, perm_seed, reward_seed = seed.spawn(3)
    P_ds = sample_doubly_stochastic(n, ds_seed)
    P_perm = sample_permutation(n, perm_seed)
    P = alpha * P_perm + (1.0 - alpha) * P_ds
    if reward_spec is None:
        R = make_rng(reward_seed).standard_normal((n, h))
    else:
        R = sample_random_rewards(n, reward_spec, reward_seed)
    d = np.full(n, 1.0 / n)
    return MarkovRewardProcess(P=P, R=R, gamma=gamma, d=d)


def make_symmetric_mdp(
    n: int = 30,
    h: int = 1,
    gamma: float = 0.9,
    seed: int | np.random.SeedSequence = 0,
    reward_spec: RewardSpec | None = None,
) -> MarkovRewardProcess:
    """Random MDP with symmetric P = (P_ds + P_ds^T) / 2, hence reversible."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    ds_seed, _, reward_seed = seed.spawn(3)
    P_ds = sample_doubly_stochastic(n, ds_seed)
    P = (P_ds + P_ds.T) / 2.0
    if reward_spec is None:
        R = make_rng(reward_seed).standard_normal((n, h))
    else:
        R = sample_random_rewards(n, reward_spec, reward_seed)
    d = np.full(n, 1.0 / n)
    return MarkovRewardProcess(P=P, R=R, gamma=gamma, d=d)


def stationary_distribution(
    P: np.ndarray, tol: float = 1e-12, max_iter: int = POWER_ITER_MAX
) -> np.ndarray:
    """Stationary distribution of a row-stochastic P by power iteration.

    Converges for irreducible aperiodic chains (all generated matrices are
    strictly positive, hence both). For reducible chains the result is a
    valid fixed point but need not be the unique stationary distribution;
    periodic chains raise ConvergenceError instead.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    d = np.full(n, 1.0 / n)
    residual = np.inf
    for _ in range(max_iter):
        d_next = d @ P
        d_next /= d_next.sum()
        residual = np.abs(d_next - d).max()
        d = d_next
        if residual <= tol:
            return d
    raise ConvergenceError("stationary power iteration", max_iter, residual)


def value_function(mrp: MarkovRewardProcess) -> np.ndarray:
    """Discounted value V solving (I - gamma P) V = R, one column per reward."""
    n = mrp.n
    system = np.eye(n) - mrp.gamma * mrp.P
    V = np.linalg.solve(system, mrp.R)
    residual = np.abs(system @ V - mrp.R).max()
    if residual > 1e-10:
        raise np.linalg.LinAlgError(
            f"value-function solve residual {residual:.3e} exceeds 1e-10"
        )
    return V


def key_matrix(mrp: MarkovRewardProcess) -> np.ndarray:
    """The matrix diag(d) (I - gamma P); positive definite for gamma < 1."""
    return mrp.d[:, None] * (np.eye(mrp.n) - mrp.gamma * mrp.P)


def reversibility_residual(mrp: MarkovRewardProcess) -> float:
    """Max-abs-entry of diag(d) P - P^T diag(d); zero iff the chain is reversible."""
    DP = mrp.d[:, None] * mrp.P
    return float(np.abs(DP - DP.T).max())


def is_reversible(mrp: MarkovRewardProcess, tol: float = 1e-10) -> bool:
    """Whether detailed balance d_i P_ij = d_j P_ji holds within ``tol``."""
    return reversibility_residual(mrp) <= tol


def mdp_to_json(
    mrp: MarkovRewardProcess,
    seed: int | None = None,
    generator: str | None = None,
) -> dict:
    """JSON document for an MDP (matrices row-major), plus metadata fields."""
    return {
        "n": mrp.n,
        "h": mrp.h,
        "gamma": mrp.gamma,
        "P": mrp.P.ravel().tolist(),
        "R": mrp.R.ravel().tolist(),
        "d": mrp.d.tolist(),
        "seed": seed,
        "generator": generator,
    }


def mdp_from_json(doc: dict) -> MarkovRewardProcess:
    """Rebuild (and re-validate) an MDP from its JSON document."""
    missing = {"n", "h", "gamma", "P", "R", "d"} - set(doc)
    if missing:
        raise ValueError(f"MDP document is missing fields: {sorted(missing)}")
    n, h = int(doc["n"]), int(doc["h"])
    return MarkovRewardProcess(
        P=np.asarray(doc["P"], dtype=float).reshape(n, n),
        R=np.asarray(doc["R"], dtype=float).reshape(n, h),
        gamma=float(doc["gamma"]),
        d=np.asarray(doc["d"], dtype=float),
    )


def save_mdp(mrp: MarkovRewardProcess, path: str | Path, **meta) -> None:
    Path(path).write_text(json.dumps(mdp_to_json(mrp, **meta)))


def load_mdp(path: str | Path) -> MarkovRewardProcess:
    return mdp_from_json(json.loads(Path(path).read_text()))
