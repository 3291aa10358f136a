"""Branching-process working model for recruitment chains.

Each recruiter datum consists of a family size M (capped by the coupon count
L), per-recruit arrival offsets U (truncated exponential), recruit covariates
(Gaussian autoregression on the recruiter's covariates), and recruit rewards
(logistic). The log-likelihood is additively separable across those four
blocks, so the Hessian is block diagonal and each block can be maximized on
its own.

Two model families are supported:

* ``type_model``: one covariate regression (phi_a, G_a, Sigma_a) per discrete
  coupon type, a single arrival rate zeta, rewards on z = (1, x, 1{a2}x,
  1{a3}x).
* ``value_model``: scalar allocation a in [0, 1] (or a coupon count mapped
  into it), arrival rate zeta0 + zeta1*a, shared covariate regression with
  precision Omega0 + (1-a)*Omega1, rewards on z = (1, a, x, a*x) or (1, x).

Covariances are diagonal (stored through their diagonal square-root), which
is the regime all estimation experiments operate in.

Unconstrained optimization coordinates: tau = log(lambda), log(zeta) for the
single-rate family, raw (zeta0, zeta1) and raw precision diagonals otherwise,
and log variances s_k = log(sigma_k^2) for the covariate noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError, NumericalError, SingularFitError
from .network import A1, A2, A3, TYPE_ALLOCATIONS, _sigmoid

TYPE_MODEL = "type_model"
VALUE_MODEL = "value_model"

_TAU_BOUND = 25.0
_LOGZ_BOUND = 20.0


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class BranchingParams:
    """Working-model parameter beta = (beta_y, beta_t, beta_x, beta_m)."""

    model_family: str
    beta_y: np.ndarray
    lam: float
    t_min: float
    t_max: float
    # type_model covariate blocks, keyed by coupon type
    zeta: float = 1.0
    phi: dict = None
    G: dict = None
    sigma_diag: dict = None
    # value_model fields
    zeta0: float = 1.0
    zeta1: float = 0.0
    phi0: np.ndarray = None
    phi1: float = 0.0
    omega0: np.ndarray = None
    omega1: np.ndarray = None
    action_in_reward: bool = True

    def __post_init__(self):
        object.__setattr__(self, "beta_y", np.asarray(self.beta_y, dtype=float))
        if self.model_family not in (TYPE_MODEL, VALUE_MODEL):
            raise ConfigError(f"unknown model family {self.model_family!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.t_min < self.t_max:
            raise ConfigError("need t_min < t_max")
        if self.model_family == TYPE_MODEL:
            if self.zeta <= 0:
                raise ConfigError("zeta must be positive")
            for name in ("phi", "G", "sigma_diag"):
                if getattr(self, name) is None:
                    raise ConfigError(f"type_model requires {name}")
            phi = {a: np.asarray(v, dtype=float) for a, v in self.phi.items()}
            G = {a: np.asarray(v, dtype=float) for a, v in self.G.items()}
            sd = {a: np.asarray(v, dtype=float) for a, v in self.sigma_diag.items()}
            for a, v in sd.items():
                if np.any(v <= 0):
                    raise ConfigError(f"sigma_diag must be positive (allocation {a})")
            object.__setattr__(self, "phi", phi)
            object.__setattr__(self, "G", G)
            object.__setattr__(self, "sigma_diag", sd)
        else:
            object.__setattr__(self, "phi0", np.asarray(self.phi0, dtype=float))
            object.__setattr__(self, "omega0", np.asarray(self.omega0, dtype=float))
            object.__setattr__(self, "omega1", np.asarray(self.omega1, dtype=float))
            for a in (0.0, 1.0):
                if np.any(self.omega0 + (1.0 - a) * self.omega1 <= 0):
                    raise ConfigError("Omega0 + (1-a)Omega1 must stay positive on [0,1]")

    # -- structure ---------------------------------------------------------

    @property
    def p(self) -> int:
        if self.model_family == TYPE_MODEL:
            return next(iter(self.phi.values())).shape[0]
        return self.phi0.shape[0]

    @property
    def allocations(self):
        return tuple(sorted(self.phi.keys()))

    def replace(self, **changes) -> "BranchingParams":
        return replace(self, **changes)

    # -- flat unconstrained coordinates ------------------------------------

    def to_vector(self) -> np.ndarray:
        out = [self.beta_y]
        if self.model_family == TYPE_MODEL:
            out.append([np.log(self.zeta), np.log(max(self.lam, 1e-300))])
            for a in self.allocations:
                gdag = np.column_stack([self.phi[a], self.G[a]])
                out.append(gdag.ravel())
                out.append(np.log(self.sigma_diag[a]))
        else:
            out.append([self.zeta0, self.zeta1, np.log(max(self.lam, 1e-300))])
            out.append(self.phi0)
            out.append([self.phi1])
            out.append(self.omega0)
            out.append(self.omega1)
        return np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in out])

    def from_vector(self, vec: np.ndarray) -> "BranchingParams":
        vec = np.asarray(vec, dtype=float)
        q = self.beta_y.shape[0]
        p = self.p
        beta_y = vec[:q]
        k = q
        if self.model_family == TYPE_MODEL:
            zeta = float(np.exp(vec[k]))
            lam = float(np.exp(vec[k + 1]))
            k += 2
            phi, G, sd = {}, {}, {}
            for a in self.allocations:
                gdag = vec[k:k + p * (p + 1)].reshape(p, p + 1)
                k += p * (p + 1)
                phi[a] = gdag[:, 0].copy()
                G[a] = gdag[:, 1:].copy()
                sd[a] = np.exp(vec[k:k + p])
                k += p
            return self.replace(beta_y=beta_y, zeta=zeta, lam=lam,
                                phi=phi, G=G, sigma_diag=sd)
        zeta0, zeta1 = float(vec[k]), float(vec[k + 1])
        lam = float(np.exp(vec[k + 2]))
        k += 3
        phi0 = vec[k:k + p]
        k += p
        phi1 = float(vec[k])
        k += 1
        omega0 = vec[k:k + p]
        omega1 = vec[k + p:k + 2 * p]
        return self.replace(beta_y=beta_y, zeta0=zeta0, zeta1=zeta1, lam=lam,
                            phi0=phi0, phi1=phi1, omega0=omega0.copy(),
                            omega1=omega1.copy())

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {"model_family": self.model_family, "beta_y": self.beta_y.tolist(),
             "lam": self.lam, "t_min": self.t_min, "t_max": self.t_max,
             "action_in_reward": self.action_in_reward}
        if self.model_family == TYPE_MODEL:
            d["zeta"] = self.zeta
            d["phi"] = {str(a): v.tolist() for a, v in self.phi.items()}
            d["G"] = {str(a): v.tolist() for a, v in self.G.items()}
            d["sigma_diag"] = {str(a): v.tolist() for a, v in self.sigma_diag.items()}
        else:
            d.update(zeta0=self.zeta0, zeta1=self.zeta1,
                     phi0=self.phi0.tolist(), phi1=self.phi1,
                     omega0=self.omega0.tolist(), omega1=self.omega1.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BranchingParams":
        d = dict(d)
        for key in ("phi", "G", "sigma_diag"):
            if d.get(key) is not None:
                d[key] = {int(a): np.asarray(v, dtype=float)
                          for a, v in d[key].items()}
        return cls(**d)


def type_model_params(*, beta_y, zeta, lam, phi, G, sigma_diag, t_min, t_max):
    return BranchingParams(model_family=TYPE_MODEL, beta_y=beta_y, lam=lam,
                           zeta=zeta, phi=phi, G=G, sigma_diag=sigma_diag,
                           t_min=t_min, t_max=t_max)


def value_model_params(*, beta_y, zeta0, zeta1, lam, phi0, phi1, omega0,
                       omega1, t_min, t_max, action_in_reward=True):
    return BranchingParams(model_family=VALUE_MODEL, beta_y=beta_y, lam=lam,
                           zeta0=zeta0, zeta1=zeta1, phi0=phi0, phi1=phi1,
                           omega0=omega0, omega1=omega1, t_min=t_min,
                           t_max=t_max, action_in_reward=action_in_reward)


# ---------------------------------------------------------------------------
# data containers


@dataclass
class RecruiterDatum:
    """One recruiter's complete family: D_i = (A_i, x_i, L_i, recruits)."""

    allocation: float
    x: np.ndarray
    coupons: int
    child_x: np.ndarray
    child_y: np.ndarray
    child_u: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.child_x = np.asarray(self.child_x, dtype=float).reshape(-1, self.x.shape[0])
        self.child_y = np.asarray(self.child_y, dtype=float).ravel()
        self.child_u = np.asarray(self.child_u, dtype=float).ravel()
        if self.m > self.coupons:
            raise ConfigError("family size exceeds coupon count")

    @property
    def m(self) -> int:
        return self.child_x.shape[0]


@dataclass
class WeightedSample:
    """Recruiter data with stabilizing weights (all ones for the plain MLE)."""

    data: list
    weights: np.ndarray = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.data))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape[0] != len(self.data):
            raise ConfigError("one weight per recruiter datum required")
        if np.any(self.weights < 0):
            raise ConfigError("weights must be nonnegative")

    def __len__(self):
        return len(self.data)

    def reweighted(self, multipliers) -> "WeightedSample":
        return WeightedSample(self.data, self.weights * np.asarray(multipliers))


# ---------------------------------------------------------------------------
# densities


def family_logpmf(m, lam: float, L: int):
    """log pmf of the coupon-capped family size: (lam^m/m!) / sum_l lam^l/l!."""
    m_arr = np.asarray(m)
    if np.any(m_arr < 0) or np.any(m_arr > L):
        raise ConfigError("family size must lie in {0..L}")
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    if lam == 0:
        return np.where(m_arr == 0, 0.0, -np.inf) if m_arr.ndim else (0.0 if m == 0 else -np.inf)
    ell = np.arange(L + 1)
    log_terms = ell * np.log(lam) - gammaln(ell + 1)
    log_norm = logsumexp(log_terms)
    out = m_arr * np.log(lam) - gammaln(m_arr + 1.0) - log_norm
    return float(out) if np.ndim(m) == 0 else out


def family_moments(lam: float, L: int):
    """(mean, variance) of the coupon-capped family size."""
    ell = np.arange(L + 1)
    if lam == 0:
        return 0.0, 0.0
    log_terms = ell * np.log(lam) - gammaln(ell + 1)
    pmf = np.exp(log_terms - logsumexp(log_terms))
    mean = float(ell @ pmf)
    var = float((ell - mean) ** 2 @ pmf)
    return mean, var


def family_sample(rng, lam: float, L: int, size=None):
    ell = np.arange(L + 1)
    if lam == 0:
        return np.zeros(size, dtype=np.int64) if size is not None else 0
    log_terms = ell * np.log(lam) - gammaln(ell + 1)
    pmf = np.exp(log_terms - logsumexp(log_terms))
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    u = rng.random(size)
    out = np.searchsorted(cdf, u, side="right")
    return out if size is not None else int(out)


def _log_trunc_norm(zeta, t_min, t_max):
    # log(exp(-zeta t_min) - exp(-zeta t_max)), stable for large zeta*t
    a, b = zeta * t_min, zeta * t_max
    return -a + np.log1p(-np.exp(-(b - a)))


def truncexp_logpdf(u, zeta: float, t_min: float, t_max: float):
    """Log-density of Exp(zeta) truncated to [t_min, t_max]."""
    if zeta <= 0:
        raise ConfigError("zeta must be positive")
    u = np.asarray(u, dtype=float)
    out = np.log(zeta) - zeta * u - _log_trunc_norm(zeta, t_min, t_max)
    out = np.where((u < t_min) | (u > t_max), -np.inf, out)
    return float(out) if out.ndim == 0 else out


def truncexp_sample(rng, zeta: float, t_min: float, t_max: float, size=None):
    """Inverse-CDF sampler for the truncated exponential."""
    if zeta <= 0:
        raise ConfigError("zeta must be positive")
    v = rng.random(size)
    ea, eb = np.exp(-zeta * t_min), np.exp(-zeta * t_max)
    return -np.log(ea - v * (ea - eb)) / zeta


def truncexp_mean(zeta: float, t_min: float, t_max: float) -> float:
    from scipy.integrate import quad

    val, _ = quad(lambda u: u * np.exp(truncexp_logpdf(u, zeta, t_min, t_max)),
                  t_min, t_max)
    return val


def covariate_logpdf(x_child, x_parent, allocation, params: BranchingParams):
    """Gaussian log-density of a recruit's covariates given the recruiter's."""
    x_child = np.asarray(x_child, dtype=float)
    x_parent = np.asarray(x_parent, dtype=float)
    if params.model_family == TYPE_MODEL:
        mean = params.phi[allocation] + params.G[allocation] @ x_parent
        var = params.sigma_diag[allocation]
    else:
        mean = params.phi0 + params.phi1 * x_parent
        prec = params.omega0 + (1.0 - allocation) * params.omega1
        if np.any(prec <= 0):
            raise ConfigError("covariate precision must be positive")
        var = 1.0 / prec
    r = x_child - mean
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + r * r / var))


def reward_logpmf(y, z, beta_y):
    """Bernoulli log-likelihood under a logistic link, stable for large |z'b|."""
    t = float(np.dot(np.asarray(z, dtype=float), np.asarray(beta_y, dtype=float)))
    return -np.logaddexp(0.0, -t) if y else -np.logaddexp(0.0, t)


def reward_features(x, allocation, params: BranchingParams) -> np.ndarray:
    """Design vector z for one recruit recruited by coupon `allocation`."""
    x = np.asarray(x, dtype=float)
    if params.model_family == TYPE_MODEL:
        return np.concatenate(
            [[1.0], x, x * (allocation == A2), x * (allocation == A3)])
    if params.action_in_reward:
        return np.concatenate([[1.0], [allocation], x, allocation * x])
    return np.concatenate([[1.0], x])


def _reward_design(datum: RecruiterDatum, params: BranchingParams) -> np.ndarray:
    m, x = datum.m, datum.child_x
    ones = np.ones((m, 1))
    if params.model_family == TYPE_MODEL:
        a = datum.allocation
        return np.hstack([ones, x, x * (a == A2), x * (a == A3)])
    if params.action_in_reward:
        a = float(datum.allocation)
        return np.hstack([ones, np.full((m, 1), a), x, a * x])
    return np.hstack([ones, x])


# ---------------------------------------------------------------------------
# log-likelihood and derivatives


def _arrival_rate(params: BranchingParams, allocation) -> float:
    if params.model_family == TYPE_MODEL:
        return params.zeta
    rate = params.zeta0 + params.zeta1 * float(allocation)
    if rate <= 0:
        raise ConfigError("arrival rate zeta0 + zeta1*a must be positive")
    return rate


def _arrival_nd(zeta, t_min, t_max):
    """Helper terms N, N', D for truncated-exponential derivatives."""
    ea, eb = np.exp(-zeta * t_min), np.exp(-zeta * t_max)
    D = ea - eb
    N = t_min * ea - t_max * eb
    Np = -t_min ** 2 * ea + t_max ** 2 * eb
    return N, Np, D


class _Stacked:
    """Sample flattened into arrays for vectorized likelihood evaluation."""

    def __init__(self, sample: WeightedSample):
        if len(sample) == 0:
            raise ConfigError("empty sample")
        data = sample.data
        self.n = len(data)
        self.p = data[0].x.shape[0]
        self.w = sample.weights
        self.m = np.array([d.m for d in data], dtype=float)
        self.L = np.array([d.coupons for d in data], dtype=np.int64)
        self.alloc = np.array([float(d.allocation) for d in data])
        # child-level stacks (parent attributes repeated per child)
        rep = np.repeat(np.arange(self.n), self.m.astype(int))
        self.c_parent = rep
        self.c_w = self.w[rep]
        self.c_alloc = self.alloc[rep]
        self.c_px = np.vstack([d.x[None, :].repeat(d.m, axis=0) for d in data]) \
            if rep.size else np.empty((0, self.p))
        self.c_x = np.vstack([d.child_x for d in data]) if rep.size \
            else np.empty((0, self.p))
        self.c_y = np.concatenate([d.child_y for d in data]) if rep.size \
            else np.empty(0)
        self.c_u = np.concatenate([d.child_u for d in data]) if rep.size \
            else np.empty(0)
        self.nc = rep.size
        self.uniq_L = np.unique(self.L)
        self._by_alloc = None

    def reward_design(self, params: BranchingParams) -> np.ndarray:
        ones = np.ones((self.nc, 1))
        if params.model_family == TYPE_MODEL:
            return np.hstack([ones, self.c_x,
                              self.c_x * (self.c_alloc == A2)[:, None],
                              self.c_x * (self.c_alloc == A3)[:, None]])
        if params.action_in_reward:
            a = self.c_alloc[:, None]
            return np.hstack([ones, a, self.c_x, a * self.c_x])
        return np.hstack([ones, self.c_x])

    def by_alloc(self, allocations):
        if self._by_alloc is None:
            self._by_alloc = {a: np.nonzero(self.c_alloc == a)[0]
                              for a in allocations}
        return self._by_alloc


def _family_terms(st: _Stacked, lam: float):
    """Per-recruiter family log pmf plus (mean, variance) lookups."""
    logp = np.empty(st.n)
    Em = np.empty(st.n)
    Vm = np.empty(st.n)
    for L in st.uniq_L:
        sel = st.L == L
        if lam == 0:
            logp[sel] = np.where(st.m[sel] == 0, 0.0, -np.inf)
            Em[sel], Vm[sel] = 0.0, 0.0
            continue
        ell = np.arange(L + 1)
        log_terms = ell * np.log(lam) - gammaln(ell + 1.0)
        log_norm = logsumexp(log_terms)
        logp[sel] = st.m[sel] * np.log(lam) - gammaln(st.m[sel] + 1.0) - log_norm
        pmf = np.exp(log_terms - log_norm)
        mean = float(ell @ pmf)
        Em[sel] = mean
        Vm[sel] = float((ell - mean) ** 2 @ pmf)
    return logp, Em, Vm


def _child_rates(st: _Stacked, params: BranchingParams):
    if params.model_family == TYPE_MODEL:
        return np.full(st.nc, params.zeta)
    rate = params.zeta0 + params.zeta1 * st.c_alloc
    if np.any(rate <= 0):
        raise ConfigError("arrival rate zeta0 + zeta1*a must be positive")
    return rate


def _cov_residuals(st: _Stacked, params: BranchingParams):
    """Per-child residuals and inverse variances of the covariate block."""
    if params.model_family == TYPE_MODEL:
        R = np.empty((st.nc, st.p))
        E = np.empty((st.nc, st.p))
        for a, sel in st.by_alloc(params.allocations).items():
            if sel.size:
                R[sel] = st.c_x[sel] - params.phi[a] - st.c_px[sel] @ params.G[a].T
                E[sel] = 1.0 / params.sigma_diag[a]
        return R, E
    R = st.c_x - params.phi0 - params.phi1 * st.c_px
    prec = params.omega0[None, :] + (1.0 - st.c_alloc)[:, None] * params.omega1[None, :]
    if np.any(prec <= 0):
        raise ConfigError("covariate precision must be positive")
    return R, prec


def _loglik_stacked(params: BranchingParams, st: _Stacked) -> float:
    logp, _, _ = _family_terms(st, params.lam)
    total = float(st.w @ logp)
    if st.nc:
        rate = _child_rates(st, params)
        arr = np.log(rate) - rate * st.c_u - _log_trunc_norm(rate, params.t_min,
                                                             params.t_max)
        t = st.reward_design(params) @ params.beta_y
        rew = st.c_y * t - np.logaddexp(0.0, t)
        R, E = _cov_residuals(st, params)
        cov = 0.5 * np.sum(np.log(E) - np.log(2.0 * np.pi) - E * R * R, axis=1)
        total += float(st.c_w @ (arr + rew + cov))
    return total


def loglik(params: BranchingParams, sample: WeightedSample) -> float:
    """Weighted complete-generation log-likelihood sum_i W_i l_i(beta)."""
    return _loglik_stacked(params, _Stacked(sample))


def _layout(params: BranchingParams):
    """Index ranges of each block in the flat coordinate vector."""
    q, p = params.beta_y.shape[0], params.p
    idx = {"beta_y": np.arange(q)}
    k = q
    if params.model_family == TYPE_MODEL:
        idx["log_zeta"] = np.array([k])
        idx["tau"] = np.array([k + 1])
        k += 2
        for a in params.allocations:
            idx[("gdag", a)] = np.arange(k, k + p * (p + 1))
            k += p * (p + 1)
            idx[("s", a)] = np.arange(k, k + p)
            k += p
    else:
        idx["zetas"] = np.arange(k, k + 2)
        idx["tau"] = np.array([k + 2])
        k += 3
        idx["phi0"] = np.arange(k, k + p)
        k += p
        idx["phi1"] = np.array([k])
        k += 1
        idx["omega0"] = np.arange(k, k + p)
        idx["omega1"] = np.arange(k + p, k + 2 * p)
        k += 2 * p
    return idx, k


def score(params: BranchingParams, sample: WeightedSample) -> np.ndarray:
    return _derivatives_stacked(params, _Stacked(sample), False)[0]


def hessian(params: BranchingParams, sample: WeightedSample) -> np.ndarray:
    return _derivatives_stacked(params, _Stacked(sample), True)[1]


def _derivatives_stacked(params: BranchingParams, st: _Stacked,
                         want_hessian: bool = True):
    """Analytic score and Hessian in the flat unconstrained coordinates."""
    idx, dim = _layout(params)
    g = np.zeros(dim)
    H = np.zeros((dim, dim)) if want_hessian else None
    p = params.p
    is_type = params.model_family == TYPE_MODEL

    # family block, in tau = log lambda
    _, Em, Vm = _family_terms(st, params.lam)
    ti = idx["tau"][0]
    g[ti] = float(st.w @ (st.m - Em))
    if want_hessian:
        H[ti, ti] = -float(st.w @ Vm)
    if st.nc == 0:
        return g, H

    # reward block
    Z = st.reward_design(params)
    t = Z @ params.beta_y
    mu = _sigmoid(t)
    by = idx["beta_y"]
    g[by] = Z.T @ (st.c_w * (st.c_y - mu))
    if want_hessian:
        H[np.ix_(by, by)] = -(Z.T * (st.c_w * mu * (1.0 - mu))) @ Z

    # arrival block
    rate = _child_rates(st, params)
    N, Np, D = _arrival_nd(rate, params.t_min, params.t_max)
    s1 = 1.0 / rate - st.c_u + N / D
    h1 = -1.0 / rate ** 2 + (Np * D + N * N) / (D * D)
    if is_type:
        zi = idx["log_zeta"][0]
        z = params.zeta
        sz = float(st.c_w @ s1)
        g[zi] = z * sz
        if want_hessian:
            H[zi, zi] = z * z * float(st.c_w @ h1) + z * sz
    else:
        zi = idx["zetas"]
        a = st.c_alloc
        g[zi] = [float(st.c_w @ s1), float(st.c_w @ (s1 * a))]
        if want_hessian:
            wh = st.c_w * h1
            H[np.ix_(zi, zi)] = [[float(wh.sum()), float(wh @ a)],
                                 [float(wh @ a), float(wh @ (a * a))]]

    # covariate block
    R, E = _cov_residuals(st, params)
    if is_type:
        U = np.hstack([np.ones((st.nc, 1)), st.c_px])
        for a, sel in st.by_alloc(params.allocations).items():
            if not sel.size:
                continue
            gi, si = idx[("gdag", a)], idx[("s", a)]
            e = 1.0 / params.sigma_diag[a]
            w = st.c_w[sel]
            Ra, Ua = R[sel], U[sel]
            WR = w[:, None] * Ra
            M = WR.T @ Ua                       # p x (p+1), sum of w r u^T
            g[gi] = (e[:, None] * M).ravel()
            wr2 = (WR * Ra).sum(axis=0)
            g[si] = -0.5 * w.sum() + 0.5 * e * wr2
            if want_hessian:
                Aw = Ua.T @ (w[:, None] * Ua)
                H[np.ix_(gi, gi)] = -np.kron(np.diag(e), Aw)
                H[np.ix_(si, si)] = np.diag(-0.5 * e * wr2)
                for j in range(p):
                    cross = -e[j] * M[j]
                    H[gi[j * (p + 1):(j + 1) * (p + 1)], si[j]] = cross
                    H[si[j], gi[j * (p + 1):(j + 1) * (p + 1)]] = cross
    else:
        c = (1.0 - st.c_alloc)
        prec = E
        w = st.c_w
        p0, p1 = idx["phi0"], idx["phi1"][0]
        w0, w1 = idx["omega0"], idx["omega1"]
        WPR = w[:, None] * prec * R
        g[p0] = WPR.sum(axis=0)
        g[p1] = float((WPR * st.c_px).sum())
        dl0 = 0.5 * w[:, None] / prec - 0.5 * w[:, None] * R * R
        g[w0] = dl0.sum(axis=0)
        g[w1] = (c[:, None] * dl0).sum(axis=0)
        if want_hessian:
            WP = w[:, None] * prec
            H[np.ix_(p0, p0)] = -np.diag(WP.sum(axis=0))
            hp01 = -(WP * st.c_px).sum(axis=0)
            H[p0, p1] = hp01
            H[p1, p0] = hp01
            H[p1, p1] = -float((WP * st.c_px * st.c_px).sum())
            hww = -0.5 * w[:, None] / (prec * prec)
            H[w0, w0] = hww.sum(axis=0)
            d01 = (c[:, None] * hww).sum(axis=0)
            H[np.ix_(w0, w1)] = np.diag(d01)
            H[np.ix_(w1, w0)] = np.diag(d01)
            H[w1, w1] = ((c * c)[:, None] * hww).sum(axis=0)
            WRs = (w[:, None] * R)
            rs = WRs.sum(axis=0)
            H[p0, w0] = rs
            H[w0, p0] = rs
            crs = (c[:, None] * WRs).sum(axis=0)
            H[p0, w1] = crs
            H[w1, p0] = crs
            rx = (WRs * st.c_px).sum(axis=0)
            H[p1, w0] = rx
            H[w0, p1] = rx
            crx = (c[:, None] * WRs * st.c_px).sum(axis=0)
            H[p1, w1] = crx
            H[w1, p1] = crx
    return g, H


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    iterations: dict = field(default_factory=dict)
    grad_norm: float = np.nan
    ridge: float = 0.0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iterations": dict(self.iterations), "grad_norm": self.grad_norm,
                "ridge": self.ridge, "flags": list(self.flags)}


def _newton_block(params, st: _Stacked, keys, tol, max_iter, ridge=0.0):
    """Damped Newton ascent on one separable likelihood block.

    A positive `ridge` subtracts (ridge/2)*||block||^2 from the objective,
    which keeps logistic blocks finite under small-sample separation.
    """
    idx, _ = _layout(params)
    sel = np.concatenate([np.atleast_1d(idx[k]) for k in keys])
    cur = params
    ll_cur = _loglik_stacked(cur, st) \
        - 0.5 * ridge * float(cur.to_vector()[sel] @ cur.to_vector()[sel])
    iters = 0
    for iters in range(1, max_iter + 1):
        g, H = _derivatives_stacked(cur, st, True)
        gb = g[sel] - ridge * cur.to_vector()[sel]
        if np.max(np.abs(gb)) <= tol:
            iters -= 1
            break
        Hb = H[np.ix_(sel, sel)] - ridge * np.eye(sel.size)
        damp = 0.0
        while True:
            try:
                step = np.linalg.solve(-(Hb - damp * np.eye(sel.size)), gb)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and float(gb @ step) > 0:
                break
            damp = 1e-6 if damp == 0.0 else damp * 10.0
            if damp > 1e12:
                raise SingularFitError(f"Newton failed on block {keys}")
        vec = cur.to_vector()
        scale = 1.0
        for _ in range(60):
            trial_vec = vec.copy()
            trial_vec[sel] += scale * step
            np.clip(trial_vec[sel], -_TAU_BOUND, None, out=trial_vec[sel])
            try:
                trial = cur.from_vector(trial_vec)
                ll_new = _loglik_stacked(trial, st) \
                    - 0.5 * ridge * float(trial_vec[sel] @ trial_vec[sel])
            except (ConfigError, FloatingPointError):
                ll_new = -np.inf
            if np.isfinite(ll_new) and ll_new >= ll_cur - 1e-12:
                break
            scale *= 0.5
        else:
            break  # no ascent possible; accept current point
        if np.isfinite(ll_new) and ll_new >= ll_cur - 1e-12:
            cur, ll_cur = trial, ll_new
    return cur, iters


def _closed_form_covariates(params, sample, ridge, report):
    """Exact per-allocation weighted least-squares covariate fit (type model)."""
    p = params.p
    phi = {a: params.phi[a].copy() for a in params.allocations}
    G = {a: params.G[a].copy() for a in params.allocations}
    sd = {a: params.sigma_diag[a].copy() for a in params.allocations}
    for a in params.allocations:
        rows_u, rows_x, rows_w = [], [], []
        for datum, w in zip(sample.data, sample.weights):
            if datum.allocation == a and datum.m and w > 0:
                u = np.concatenate([[1.0], datum.x])
                rows_u.append(np.tile(u, (datum.m, 1)))
                rows_x.append(datum.child_x)
                rows_w.append(np.full(datum.m, w))
        if not rows_u:
            report.flags.append(f"allocation {a}: no recruits, covariate block left at init")
            continue
        U = np.vstack(rows_u)
        Xc = np.vstack(rows_x)
        wv = np.concatenate(rows_w)
        A = U.T @ (wv[:, None] * U) + ridge * np.eye(p + 1)
        if ridge == 0.0 and (U.shape[0] <= p + 1 or np.linalg.cond(A) > 1e12):
            raise SingularFitError(
                f"degenerate covariate design for allocation {a}; use ridge > 0")
        C = (wv[:, None] * Xc).T @ U
        gdag = np.linalg.solve(A, C.T).T
        R = Xc - U @ gdag.T
        wtot = wv.sum()
        rss = (wv[:, None] * R * R).sum(axis=0)
        sigma2 = (rss + ridge * (gdag * gdag).sum(axis=1)) / wtot
        if np.any(sigma2 < 1e-10):
            report.flags.append(f"allocation {a}: variance floored")
            sigma2 = np.maximum(sigma2, 1e-10)
        phi[a] = gdag[:, 0]
        G[a] = gdag[:, 1:]
        sd[a] = sigma2
    return params.replace(phi=phi, G=G, sigma_diag=sd)


def method_of_moments_init(sample: WeightedSample, template: BranchingParams):
    """Moment-matched starting values: lambda from the mean family size,
    zeta from the mean arrival offset, zeros for beta_y, least squares
    (with a ridge guard) for the covariate blocks."""
    from scipy.optimize import brentq

    w = sample.weights
    wtot = max(w.sum(), 1e-12)
    mbar = float(sum(wi * d.m for d, wi in zip(sample.data, w)) / wtot)
    lam0 = min(max(mbar, 0.05), 50.0)

    us = np.concatenate([d.child_u for d in sample.data]) if any(
        d.m for d in sample.data) else np.array([])
    t_min, t_max = template.t_min, template.t_max
    zeta0 = 1.0
    if us.size:
        ubar = float(np.mean(us))
        lo, hi = -8.0, 8.0
        f = lambda lz: truncexp_mean(np.exp(lz), t_min, t_max) - ubar
        try:
            if f(lo) * f(hi) < 0:
                zeta0 = float(np.exp(brentq(f, lo, hi, xtol=1e-6)))
            else:
                zeta0 = float(np.exp(hi)) if f(hi) > 0 else float(np.exp(lo))
        except ValueError:
            zeta0 = 1.0
        zeta0 = min(max(zeta0, 1e-3), 1e3)

    params = template.replace(beta_y=np.zeros_like(template.beta_y), lam=lam0)
    if template.model_family == TYPE_MODEL:
        params = params.replace(zeta=zeta0)
        rep = FitReport()
        try:
            params = _closed_form_covariates(params, sample, 0.0, rep)
        except SingularFitError:
            params = _closed_form_covariates(params, sample, 1e-4, rep)
    else:
        params = params.replace(zeta0=zeta0, zeta1=0.0)
        xs, cs = [], []
        for d in sample.data:
            if d.m:
                xs.append(np.tile(d.x, (d.m, 1)))
                cs.append(d.child_x)
        if xs:
            X = np.vstack(xs)
            Cx = np.vstack(cs)
            xc = X - X.mean(axis=0)
            cc = Cx - Cx.mean(axis=0)
            denom = float((xc * xc).sum())
            phi1 = float((xc * cc).sum() / denom) if denom > 1e-12 else 0.0
            phi0 = Cx.mean(axis=0) - phi1 * X.mean(axis=0)
            resid = Cx - phi0 - phi1 * X
            var = np.maximum(resid.var(axis=0), 1e-6)
            params = params.replace(phi0=phi0, phi1=phi1,
                                    omega0=1.0 / var,
                                    omega1=np.zeros(template.p))
    return params


def fit_wmle(sample: WeightedSample, template: BranchingParams, *,
             ridge: float = 0.0, init: BranchingParams = None,
             tol: float = 1e-8, max_iter: int = 200):
    """Maximize the (ridge-penalized) weighted log-likelihood block by block.

    Returns (params, FitReport). The covariate blocks of the type model are
    solved in closed form; every other block runs damped Newton with
    backtracking until the block gradient's max-norm drops below `tol`.
    """
    if len(sample) == 0:
        raise ConfigError("empty sample")
    report = FitReport(ridge=ridge)
    st = _Stacked(sample)
    cur = init if init is not None else method_of_moments_init(sample, template)

    any_children = st.nc > 0
    if any_children:
        cur, it = _newton_block(cur, st, ["beta_y"], tol, max_iter, ridge=ridge)
        report.iterations["beta_y"] = it
        arr_keys = ["log_zeta"] if cur.model_family == TYPE_MODEL else ["zetas"]
        cur, it = _newton_block(cur, st, arr_keys, tol, max_iter)
        report.iterations["arrival"] = it
    else:
        report.flags.append("no recruits observed: reward/arrival/covariate blocks at init")

    cur, it = _newton_block(cur, st, ["tau"], tol, max_iter)
    report.iterations["family"] = it

    if any_children:
        if cur.model_family == TYPE_MODEL:
            cur = _closed_form_covariates(cur, sample, ridge, report)
            report.iterations["covariates"] = 1
        else:
            cur, it = _newton_block(
                cur, st, ["phi0", "phi1", "omega0", "omega1"], tol, max_iter)
            report.iterations["covariates"] = it

    if ridge == 0.0:
        g, _ = _derivatives_stacked(cur, st, False)
        report.grad_norm = float(np.max(np.abs(g)))
    return cur, report


def stabilizing_weights(probs, n_actions) -> np.ndarray:
    """W_i = sqrt(uniform propensity / realized propensity)."""
    probs = np.asarray(probs, dtype=float)
    n_actions = np.asarray(n_actions, dtype=float)
    if np.any(probs <= 0):
        raise NumericalError("selection probabilities must be strictly positive")
    return np.sqrt((1.0 / n_actions) / probs)


def generalized_bootstrap(sample: WeightedSample, B: int, rng,
                          template: BranchingParams, *, ridge: float = 0.0,
                          init: BranchingParams = None, tol: float = 1e-8):
    """B weighted-likelihood refits under iid Exponential(1) multipliers."""
    if B < 1:
        raise ConfigError("B must be >= 1")
    draws = []
    for _ in range(B):
        mult = rng.exponential(1.0, size=len(sample))
        rew = sample.reweighted(mult)
        try:
            est, _ = fit_wmle(rew, template, ridge=ridge, init=init, tol=tol)
        except NumericalError:
            est, _ = fit_wmle(rew, template, ridge=max(ridge, 1e-4),
                              init=init, tol=tol)
        draws.append(est)
    return draws


# ---------------------------------------------------------------------------
# natural-parameter view of a covariate block


def moment_to_natural(phi, G, sigma_diag):
    """Map (phi, G, Sigma) to the concave coordinates (Gamma, Omega)."""
    sigma_inv = 1.0 / np.asarray(sigma_diag, dtype=float)
    gdag = np.column_stack([phi, G])
    gamma = sigma_inv[:, None] * gdag
    omega = -0.5 * np.diag(sigma_inv)
    return gamma, omega


def natural_to_moment(gamma, omega):
    sigma_inv = -2.0 * np.diag(omega)
    sigma_diag = 1.0 / sigma_inv
    gdag = sigma_diag[:, None] * gamma
    return gdag[:, 0], gdag[:, 1:], sigma_diag


# ---------------------------------------------------------------------------
# diagnostics and forward simulation


def working_model_diagnostics(params: BranchingParams, coupon_counts) -> dict:
    """Runtime sanity checks on the fitted working model.

    Reports the mean offspring count per coupon level and warns when the
    recruitment process is not supercritical (mean offspring <= 1), in which
    case recruitment chains die out.
    """
    means = {int(L): family_moments(params.lam, int(L))[0]
             for L in set(int(c) for c in np.atleast_1d(coupon_counts))}
    supercritical = all(v > 1.0 for v in means.values())
    if not supercritical:
        warnings.warn("working model is not supercritical: mean offspring <= 1",
                      RuntimeWarning, stacklevel=2)
    rates_ok = (params.zeta > 0) if params.model_family == TYPE_MODEL else (
        params.zeta0 > 0 and params.zeta0 + params.zeta1 > 0)
    return {"mean_offspring": means, "supercritical": supercritical,
            "arrival_rates_positive": bool(rates_ok),
            "lambda": params.lam}


def simulate_rollout(params: BranchingParams, start, policy_fn, horizon,
                     budget_remaining, rng, coupons: int = 5):
    """Forward-simulate recruitment under the working model (no network).

    `start` is a list of frontier tuples (x, allocation-or-None, coupons, t).
    Returns dict arrays over the synthetic participants generated, capped at
    `horizon` new arrivals (and never more than `budget_remaining` matter for
    value estimation downstream).
    """
    cap = int(min(horizon if horizon is not None else np.inf,
                  max(budget_remaining, 0) * 4 + 64))
    out_t, out_y, out_x, out_a, out_r = [], [], [], [], []
    if cap <= 0 or not start:
        return _rollout_arrays(out_t, out_y, out_x, out_a, out_r, params.p)

    fr_x = np.array([np.asarray(s[0], dtype=float) for s in start])
    fr_a = np.array([np.nan if s[1] is None else float(s[1]) for s in start])
    fr_L = np.array([int(s[2]) for s in start])
    fr_t = np.array([float(s[3]) for s in start])
    fr_root = np.arange(len(start))
    total = 0
    for _ in range(64):  # epoch safety cap; budget cap triggers first
        if fr_x.shape[0] == 0 or total >= cap:
            break
        need = np.isnan(fr_a)
        if np.any(need):
            fr_a[need] = np.asarray(policy_fn(fr_x[need]), dtype=float)
        m = np.array([family_sample(rng, params.lam, int(L)) for L in fr_L])
        keep = m > 0
        if not np.any(keep):
            break
        rep = np.repeat(np.nonzero(keep)[0], m[keep])
        px, pa, pt = fr_x[rep], fr_a[rep], fr_t[rep]
        proot = fr_root[rep]
        n = rep.size
        if params.model_family == TYPE_MODEL:
            mean = np.empty((n, params.p))
            sdv = np.empty((n, params.p))
            for a in params.allocations:
                sel = pa == a
                if np.any(sel):
                    mean[sel] = params.phi[a] + px[sel] @ params.G[a].T
                    sdv[sel] = np.sqrt(params.sigma_diag[a])
            rate = np.full(n, params.zeta)
        else:
            mean = params.phi0 + params.phi1 * px
            prec = params.omega0[None, :] + (1.0 - pa)[:, None] * params.omega1[None, :]
            sdv = 1.0 / np.sqrt(prec)
            rate = params.zeta0 + params.zeta1 * pa
        cx = mean + sdv * rng.standard_normal((n, params.p))
        v = rng.random(n)
        ea, eb = np.exp(-rate * params.t_min), np.exp(-rate * params.t_max)
        u = -np.log(ea - v * (ea - eb)) / rate
        ct = pt + u
        if params.model_family == TYPE_MODEL:
            Z = np.hstack([np.ones((n, 1)), cx,
                           cx * (pa == A2)[:, None], cx * (pa == A3)[:, None]])
        elif params.action_in_reward:
            Z = np.hstack([np.ones((n, 1)), pa[:, None], cx, pa[:, None] * cx])
        else:
            Z = np.hstack([np.ones((n, 1)), cx])
        py = _sigmoid(Z @ params.beta_y)
        cy = (rng.random(n) < py).astype(float)
        out_t.append(ct)
        out_y.append(cy)
        out_x.append(cx)
        out_a.append(pa)  # coupon type each child was recruited with
        out_r.append(proot)
        total += n
        fr_x, fr_t = cx, ct
        fr_a = np.full(n, np.nan)
        fr_L = np.full(n, coupons)
        fr_root = proot
    return _rollout_arrays(out_t, out_y, out_x, out_a, out_r, params.p)


def _rollout_arrays(ts, ys, xs, pas, roots, p):
    if not ts:
        return {"t": np.empty(0), "y": np.empty(0), "x": np.empty((0, p)),
                "recruited_by": np.empty(0), "root": np.empty(0, dtype=np.int64)}
    return {"t": np.concatenate(ts), "y": np.concatenate(ys),
            "x": np.vstack(xs), "recruited_by": np.concatenate(pas),
            "root": np.concatenate(roots)}


def simulate_branching_data(params: BranchingParams, n_recruiters: int, rng,
                            coupons: int = 5, alloc_sampler=None,
                            seed_x_sampler=None, n_seeds: int = 20):
    """Generate recruiter data directly from the working model.

    Recruiters are processed in epochs; each contributes one RecruiterDatum.
    If the chain dies out before `n_recruiters` data are collected, a fresh
    batch of seeds is started. Allocations default to uniform draws over the
    three coupon types.
    """
    if alloc_sampler is None:
        alloc_sampler = lambda rng_, x: int(rng_.integers(0, 3))
    if seed_x_sampler is None:
        seed_x_sampler = lambda rng_: rng_.normal(size=params.p)
    data = []
    frontier = []
    while len(data) < n_recruiters:
        if not frontier:
            frontier = [seed_x_sampler(rng) for _ in range(n_seeds)]
        nxt = []
        for x in frontier:
            if len(data) >= n_recruiters:
                break
            a = alloc_sampler(rng, x)
            m = family_sample(rng, params.lam, coupons)
            if params.model_family == TYPE_MODEL:
                mean = params.phi[a] + params.G[a] @ x
                sdv = np.sqrt(params.sigma_diag[a])
                rate = params.zeta
            else:
                mean = params.phi0 + params.phi1 * x
                prec = params.omega0 + (1.0 - float(a)) * params.omega1
                sdv = 1.0 / np.sqrt(prec)
                rate = params.zeta0 + params.zeta1 * float(a)
            cx = mean + sdv * rng.standard_normal((m, params.p))
            cu = truncexp_sample(rng, rate, params.t_min, params.t_max, size=m)
            cy = np.empty(m)
            for j in range(m):
                z = reward_features(cx[j], a, params)
                cy[j] = float(rng.random() < _sigmoid(float(z @ params.beta_y)))
            data.append(RecruiterDatum(a, np.asarray(x, dtype=float), coupons,
                                       cx, cy, cu))
            nxt.extend(list(cx))
        frontier = nxt
    return WeightedSample(data[:n_recruiters])
