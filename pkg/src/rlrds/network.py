"""Hidden-population generation and neighbor-selection mechanics.

Populations carry iid Gaussian covariates and a latent-distance graph: two
members are linked independently with probability
``logistic(rho0 - rho1 * ||x_i - x_j||)``, so larger ``rho1`` penalizes
distance more and yields a sparser graph. Recruiters holding the second
coupon type preferentially select neighbors far from themselves in covariate
space; all other coupon types select uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError

# Coupon types for the three-allocation design.
A1, A2, A3 = 0, 1, 2
TYPE_ALLOCATIONS = (A1, A2, A3)

UNIFORM = "uniform"
DISTANCE_SQUARED_ON_A2 = "distance_squared_on_a2"

_PAIR_BLOCK = 512


@dataclass(frozen=True)
class NetworkParams:
    """Full generative specification of a hidden population and study dynamics.

    ``beta_y`` are logistic reward coefficients on z = (1, x, 1{A=a2}x,
    1{A=a3}x); ``zeta``/``t_min``/``t_max`` govern truncated-exponential
    arrival offsets.
    """

    rho0: float
    rho1: float
    mu: np.ndarray
    sigma: np.ndarray
    beta_y: np.ndarray
    zeta: float = 1.0
    t_min: float = 0.0
    t_max: float = 3.0
    neighbor_rule: str = DISTANCE_SQUARED_ON_A2
    seed_count: int = 25

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 1:
            sigma = np.diag(sigma)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "beta_y", np.asarray(self.beta_y, dtype=float))
        p = self.mu.shape[0]
        if sigma.shape != (p, p):
            raise ConfigError(f"sigma must be {p}x{p}, got {sigma.shape}")
        if not np.allclose(sigma, sigma.T, atol=1e-10):
            raise ConfigError("sigma must be symmetric")
        if np.linalg.eigvalsh(sigma)[0] < -1e-10:
            raise ConfigError("sigma must be positive semidefinite")
        if self.rho1 < 0:
            raise ConfigError("rho1 must be nonnegative")
        if not self.t_min < self.t_max:
            raise ConfigError("need t_min < t_max")
        if self.t_min < 0 or self.zeta <= 0:
            raise ConfigError("need t_min >= 0 and zeta > 0")
        if self.neighbor_rule not in (UNIFORM, DISTANCE_SQUARED_ON_A2):
            raise ConfigError(f"unknown neighbor_rule {self.neighbor_rule!r}")
        if self.seed_count < 1:
            raise ConfigError("seed_count must be >= 1")

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    def replace(self, **changes) -> "NetworkParams":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "rho0": self.rho0,
            "rho1": self.rho1,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "beta_y": self.beta_y.tolist(),
            "zeta": self.zeta,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "neighbor_rule": self.neighbor_rule,
            "seed_count": self.seed_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        return cls(**d)


@dataclass
class Population:
    """N agents with covariates and sparse adjacency (neighbor index lists)."""

    covariates: np.ndarray
    neighbors: list = field(repr=False)

    @property
    def size(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def mean_degree(self) -> float:
        return float(np.mean([len(nb) for nb in self.neighbors]))

    def save(self, path) -> None:
        """Serialize to JSON: covariate rows plus an undirected edge list."""
        edges = [
            [i, int(j)] for i in range(self.size) for j in self.neighbors[i] if j > i
        ]
        with open(path, "w") as fh:
            json.dump(
                {"covariates": self.covariates.tolist(), "edges": edges}, fh
            )

    @classmethod
    def load(cls, path) -> "Population":
        with open(path) as fh:
            d = json.load(fh)
        cov = np.asarray(d["covariates"], dtype=float)
        neighbors = [[] for _ in range(cov.shape[0])]
        for i, j in d["edges"]:
            neighbors[i].append(j)
            neighbors[j].append(i)
        return cls(cov, [np.array(sorted(nb), dtype=np.int64) for nb in neighbors])


def edge_prob(x_i, x_j, rho0: float, rho1: float) -> float:
    """Link probability logistic(rho0 - rho1 * ||x_i - x_j||_2)."""
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    if not (np.all(np.isfinite(x_i)) and np.all(np.isfinite(x_j))
            and np.isfinite(rho0) and np.isfinite(rho1)):
        raise ConfigError("edge_prob requires finite inputs")
    if rho1 < 0:
        raise ConfigError("rho1 must be nonnegative")
    d = float(np.linalg.norm(x_i - x_j))
    return _sigmoid(rho0 - rho1 * d)


def _sigmoid(t):
    out = np.empty_like(t) if isinstance(t, np.ndarray) else None
    if out is None:
        return 1.0 / (1.0 + np.exp(-t)) if t >= 0 else np.exp(t) / (1.0 + np.exp(t))
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def sample_population(params: NetworkParams, N: int, rng: np.random.Generator) -> Population:
    """Draw covariates iid Normal(mu, sigma) and link each pair independently.

    Pair draws run in row blocks so the N=5000 case never materializes the
    full N x N matrix. Deterministic given the generator state.
    """
    if N < 1:
        raise ConfigError("N must be >= 1")
    try:
        chol = np.linalg.cholesky(params.sigma + 1e-12 * np.eye(params.p))
    except np.linalg.LinAlgError as exc:
        raise ConfigError("sigma must be positive semidefinite") from exc
    X = params.mu + rng.standard_normal((N, params.p)) @ chol.T

    edge_i, edge_j = [], []
    for lo in range(0, N, _PAIR_BLOCK):
        hi = min(lo + _PAIR_BLOCK, N)
        # probabilities for pairs (i, j) with lo <= i < hi, j > i
        d = cdist(X[lo:hi], X[lo:])
        probs = _sigmoid(params.rho0 - params.rho1 * d)
        draws = rng.random(probs.shape) < probs
        rows, cols = np.nonzero(np.triu(draws, k=1))
        edge_i.append(rows + lo)
        edge_j.append(cols + lo)
    ii = np.concatenate(edge_i + edge_j)
    jj = np.concatenate(edge_j + edge_i)
    order = np.lexsort((jj, ii))
    ii, jj = ii[order], jj[order]
    splits = np.searchsorted(ii, np.arange(1, N))
    return Population(X, [nb.astype(np.int64) for nb in np.split(jj, splits)])


def neighbor_selection_probs(x_recruiter, candidates, allocation,
                             rule: str = DISTANCE_SQUARED_ON_A2) -> np.ndarray:
    """Selection distribution over candidate recruits.

    Under coupon type a2 with the distance rule, p_j is proportional to the
    squared covariate distance from the recruiter (recruit people unlike
    yourself); otherwise uniform. All-zero distances fall back to uniform.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    m = candidates.shape[0]
    if m == 0:
        raise ConfigError("empty candidate set")
    if rule == DISTANCE_SQUARED_ON_A2 and allocation == A2:
        w = np.sum((candidates - np.asarray(x_recruiter, dtype=float)) ** 2, axis=1)
        total = w.sum()
        if total > 0:
            return w / total
    return np.full(m, 1.0 / m)
