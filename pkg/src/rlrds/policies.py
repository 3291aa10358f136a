"""Coupon-allocation strategies.

A policy maps a participant's covariates through a logistic score
s = 1/(1 + exp(-(alpha0 + x'alpha1))) and then through the action-space map
g (type thresholds, a value grid on [0,1], or a coupon-count grid). Policy
search maximizes a Monte-Carlo rollout value under the fitted working model;
RL-RDS wraps that in Thompson sampling over bootstrap draws, with selection
probabilities clipped away from 0 and 1 so the stabilizing weights used at
estimation time stay bounded.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import branching as br
from .errors import ConfigError, NumericalError
from .network import A1, A2, A3, TYPE_ALLOCATIONS, _sigmoid

TYPE_CHOICE = "type_choice"
VALUE_GRID = "value_grid"
COUNT_GRID = "count_grid"


def clip_bounds(epsilon: float, n_actions: int):
    """Two-sided bounds every clipped Thompson selection probability obeys."""
    lo = epsilon / ((1.0 - epsilon) * n_actions)
    hi = (1.0 - epsilon) / (1.0 + (n_actions - 2) * epsilon)
    return lo, hi


@dataclass(frozen=True)
class PolicyParams:
    alpha0: float
    alpha1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha1", np.asarray(self.alpha1, dtype=float))
        if not (np.isfinite(self.alpha0) and np.all(np.isfinite(self.alpha1))):
            raise ConfigError("policy parameters must be finite")


@dataclass(frozen=True)
class ActionSpaceSpec:
    """Action-space map and coupon schedule."""

    variant: str = TYPE_CHOICE
    t_lo: float = 0.33
    t_hi: float = 0.66
    value_grid: tuple = tuple(np.round(np.arange(1, 11) / 10.0, 10))
    count_grid: tuple = tuple(range(1, 8))
    warmup_coupons: int = 2
    main_coupons: int = 5

    def __post_init__(self):
        if self.variant not in (TYPE_CHOICE, VALUE_GRID, COUNT_GRID):
            raise ConfigError(f"unknown action-space variant {self.variant!r}")
        if not 0.0 < self.t_lo < self.t_hi < 1.0:
            raise ConfigError("need 0 < t_lo < t_hi < 1")

    def actions(self) -> tuple:
        if self.variant == TYPE_CHOICE:
            return TYPE_ALLOCATIONS
        if self.variant == VALUE_GRID:
            return self.value_grid
        return self.count_grid

    def coupons(self, allocation, warmup: bool) -> int:
        if self.variant == COUNT_GRID:
            return int(allocation)
        return self.warmup_coupons if warmup else self.main_coupons


def score_to_action(spec: ActionSpaceSpec, x, alpha: PolicyParams):
    """Map covariates to an allocation; vectorized over rows of x."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    s = _sigmoid(alpha.alpha0 + X @ alpha.alpha1)
    if spec.variant == TYPE_CHOICE:
        out = np.where(s > spec.t_hi, A1, np.where(s >= spec.t_lo, A2, A3))
    elif spec.variant == VALUE_GRID:
        out = np.floor(10.0 * s + 0.5) / 10.0
        out = np.clip(out, min(spec.value_grid), max(spec.value_grid))
    else:
        out = np.clip(np.floor(7.0 * s + 0.5), min(spec.count_grid),
                      max(spec.count_grid))
    if single:
        v = out.item()
        return int(v) if spec.variant != VALUE_GRID else float(v)
    return out


def default_alpha_grid(p: int, lo: float = -4.0, hi: float = 4.0,
                       n: int = 3) -> list:
    """Axis-aligned lattice of candidate policy parameters, 3^(p+1) default."""
    levels = np.linspace(lo, hi, n)
    return [PolicyParams(c[0], np.array(c[1:]))
            for c in itertools.product(levels, repeat=p + 1)]


def _policy_values(start, alphas, betas, B: int, budget: int, seed: int,
                   spec: ActionSpaceSpec, horizon=None) -> np.ndarray:
    """Rollout value of each (candidate policy, working model) pair.

    Batched with common random numbers: every candidate consumes an
    identically seeded random stream, so tree shapes coincide across
    candidates and value differences reflect the policies, not the noise.
    `betas` is parallel to `alphas`, which lets Thompson refits evaluate a
    whole grid under every bootstrap draw in a single pass. All candidates
    share one concatenated frontier; only the random draws run per candidate
    to keep the streams aligned.
    """
    ncand = len(alphas)
    vals = np.zeros(ncand)
    if budget <= 0 or not start or ncand == 0:
        return vals
    per_roll = int(min(horizon if horizon is not None else budget, budget))
    cap = per_roll * B
    p = betas[0].p
    n0 = len(start)
    is_type = betas[0].model_family == br.TYPE_MODEL
    count_actions = spec.variant == COUNT_GRID
    A0 = np.array([a.alpha0 for a in alphas])
    A1mat = np.array([a.alpha1 for a in alphas])
    # candidates sharing a model object share its per-row math below
    bgrp = np.empty(ncand, dtype=int)
    seen = {}
    for c in range(ncand):
        bgrp[c] = seen.setdefault(id(betas[c]), c)

    cdf_cache = {}

    def family_cdf(g, L):
        if (g, L) not in cdf_cache:
            lam = betas[g].lam
            ell = np.arange(L + 1)
            if lam == 0:
                pmf = np.zeros(L + 1)
                pmf[0] = 1.0
            else:
                from scipy.special import gammaln as _gl, logsumexp as _lse
                lt = ell * np.log(lam) - _gl(ell + 1.0)
                pmf = np.exp(lt - _lse(lt))
            cdf = np.cumsum(pmf)
            cdf[-1] = 1.0
            cdf_cache[(g, L)] = cdf
        return cdf_cache[(g, L)]

    base_x = np.array([np.asarray(s[0], dtype=float) for s in start])
    base_a = np.array([np.nan if s[1] is None else float(s[1]) for s in start])
    base_L = np.array([int(s[2]) for s in start])
    base_t = np.array([float(s[3]) for s in start])

    gens = [np.random.default_rng(seed) for _ in range(ncand)]
    # frontier rows stay grouped by candidate in ascending order, so each
    # candidate's slice consumes its stream in a fixed deterministic order
    fr_c = np.repeat(np.arange(ncand), B * n0)
    fr_x = np.tile(base_x, (ncand * B, 1))
    fr_a = np.tile(base_a, ncand * B)
    fr_L = np.tile(base_L, ncand * B)
    fr_t = np.tile(base_t, ncand * B)
    fr_roll = np.tile(np.repeat(np.arange(B), n0), ncand)
    totals = np.zeros(ncand, dtype=int)
    acc_t, acc_y, acc_key = [], [], []
    alive = np.ones(ncand, dtype=bool)

    for _ in range(64):
        keep = alive[fr_c]
        if not np.any(keep):
            break
        fr_c, fr_x, fr_a = fr_c[keep], fr_x[keep], fr_a[keep]
        fr_L, fr_t, fr_roll = fr_L[keep], fr_t[keep], fr_roll[keep]
        n = fr_c.size
        if n == 0:
            break
        need = np.isnan(fr_a)
        if np.any(need):
            s = _sigmoid(A0[fr_c[need]]
                         + np.einsum("ij,ij->i", fr_x[need], A1mat[fr_c[need]]))
            if spec.variant == TYPE_CHOICE:
                acts = np.where(s > spec.t_hi, A1,
                                np.where(s >= spec.t_lo, A2, A3)).astype(float)
            elif spec.variant == VALUE_GRID:
                acts = np.clip(np.floor(10.0 * s + 0.5) / 10.0,
                               min(spec.value_grid), max(spec.value_grid))
            else:
                acts = np.clip(np.floor(7.0 * s + 0.5), min(spec.count_grid),
                               max(spec.count_grid))
            fr_a[need] = acts
            if count_actions:
                fr_L[need] = acts.astype(int)
        bounds = np.searchsorted(fr_c, np.arange(ncand + 1))
        m = np.empty(n, dtype=int)
        zs, uts, uys = [], [], []
        for c in range(ncand):
            lo, hi = bounds[c], bounds[c + 1]
            if lo == hi:
                alive[c] = False
                continue
            u_fam = gens[c].random(hi - lo)
            Ls = fr_L[lo:hi]
            for L in np.unique(Ls):
                sel = Ls == L
                m[lo:hi][sel] = np.searchsorted(family_cdf(bgrp[c], int(L)),
                                                u_fam[sel], side="right")
            nch = int(m[lo:hi].sum())
            if nch == 0:
                alive[c] = False
                continue
            zs.append(gens[c].standard_normal((nch, p)))
            uts.append(gens[c].random(nch))
            uys.append(gens[c].random(nch))
            totals[c] += nch
            if totals[c] >= cap:
                alive[c] = False
        rep = np.repeat(np.arange(n), m)
        if rep.size == 0:
            break
        z = np.vstack(zs)
        u_t = np.concatenate(uts)
        u_y = np.concatenate(uys)
        cids = fr_c[rep]
        px, pa, pt, proll = fr_x[rep], fr_a[rep], fr_t[rep], fr_roll[rep]
        n_all = rep.size

        rows_g = bgrp[cids]
        cx = np.empty((n_all, p))
        ct = np.empty(n_all)
        cy = np.empty(n_all)
        for g in np.unique(rows_g):
            beta = betas[g]
            gs = rows_g == g
            pxg, pag = px[gs], pa[gs]
            ng = pxg.shape[0]
            if is_type:
                mean = np.empty((ng, p))
                sdv = np.empty((ng, p))
                for a in beta.allocations:
                    sel = pag == a
                    if np.any(sel):
                        mean[sel] = beta.phi[a] + pxg[sel] @ beta.G[a].T
                        sdv[sel] = np.sqrt(beta.sigma_diag[a])
                rate = np.full(ng, beta.zeta)
            else:
                mean = beta.phi0 + beta.phi1 * pxg
                prec = beta.omega0[None, :] \
                    + (1.0 - pag)[:, None] * beta.omega1[None, :]
                sdv = 1.0 / np.sqrt(prec)
                rate = beta.zeta0 + beta.zeta1 * pag
            xg = mean + sdv * z[gs]
            ea, eb = np.exp(-rate * beta.t_min), np.exp(-rate * beta.t_max)
            ct[gs] = pt[gs] - np.log(ea - u_t[gs] * (ea - eb)) / rate
            if is_type:
                Z = np.hstack([np.ones((ng, 1)), xg,
                               xg * (pag == 1)[:, None],
                               xg * (pag == 2)[:, None]])
            elif beta.action_in_reward:
                Z = np.hstack([np.ones((ng, 1)), pag[:, None], xg,
                               pag[:, None] * xg])
            else:
                Z = np.hstack([np.ones((ng, 1)), xg])
            cx[gs] = xg
            cy[gs] = (u_y[gs] < _sigmoid(Z @ beta.beta_y)).astype(float)

        acc_t.append(ct)
        acc_y.append(cy)
        acc_key.append(cids * B + proll)
        fr_c, fr_x, fr_t, fr_roll = cids, cx, ct, proll
        fr_a = np.full(n_all, np.nan)
        fr_L = np.full(n_all, spec.main_coupons)

    if not acc_t:
        return vals
    t = np.concatenate(acc_t)
    y = np.concatenate(acc_y)
    key = np.concatenate(acc_key)
    sizes = np.bincount(key, minlength=ncand * B)
    sums = np.bincount(key, weights=y, minlength=ncand * B)
    over = np.nonzero(sizes > budget)[0]
    for kk in over:
        sel = key == kk
        order = np.argsort(t[sel], kind="stable")
        sums[kk] = float(y[sel][order[:budget]].sum())
    vals[:] = sums.reshape(ncand, B).sum(axis=1) / B
    return vals


def estimate_value(start, alpha: PolicyParams, beta, B: int, budget_remaining,
                   rng, spec: ActionSpaceSpec, horizon=None) -> float:
    """Mean budget-masked cumulative rollout reward over B trajectories."""
    if B < 1:
        raise ConfigError("B must be >= 1")
    budget = int(np.floor(max(budget_remaining, 0)))
    if budget <= 0 or not start:
        return 0.0
    seed = int(rng.integers(0, 2 ** 63 - 1))
    return float(_policy_values(start, [alpha], [beta], B, budget, seed, spec,
                                horizon=horizon)[0])


def policy_search(start, beta, B: int, grid, budget_remaining, rng,
                  spec: ActionSpaceSpec, horizon=None) -> PolicyParams:
    """Grid argmax of the rollout value with common random numbers.

    Duplicate candidates are evaluated once, so ties (and duplicates of the
    best candidate) resolve to the lowest grid index.
    """
    if not grid:
        raise ConfigError("empty policy grid")
    budget = int(np.floor(max(budget_remaining, 0)))
    seed = int(rng.integers(0, 2 ** 63 - 1))
    keys = [(g.alpha0, tuple(g.alpha1)) for g in grid]
    uniq = {}
    for i, key in enumerate(keys):
        uniq.setdefault(key, i)
    uniq_idx = sorted(uniq.values())
    vals_u = _policy_values(start, [grid[i] for i in uniq_idx],
                            [beta] * len(uniq_idx), B, budget, seed, spec,
                            horizon=horizon)
    val_of = {keys[i]: v for i, v in zip(uniq_idx, vals_u)}
    vals = np.array([val_of[key] for key in keys])
    return grid[int(np.argmax(vals))]


def thompson_policy_search(start, betas, B: int, grid, budget_remaining, rng,
                           spec: ActionSpaceSpec, horizon=None):
    """Per-bootstrap-draw grid argmax, all draws evaluated in one batch."""
    if not grid:
        raise ConfigError("empty policy grid")
    budget = int(np.floor(max(budget_remaining, 0)))
    if budget <= 0:
        return [grid[0] for _ in betas]
    seed = int(rng.integers(0, 2 ** 63 - 1))
    keys = [(g.alpha0, tuple(g.alpha1)) for g in grid]
    uniq = {}
    for i, key in enumerate(keys):
        uniq.setdefault(key, i)
    uniq_idx = sorted(uniq.values())
    alphas, models = [], []
    for beta in betas:
        alphas.extend(grid[i] for i in uniq_idx)
        models.extend([beta] * len(uniq_idx))
    vals = _policy_values(start, alphas, models, B, budget, seed, spec,
                          horizon=horizon).reshape(len(betas), len(uniq_idx))
    out = []
    for row in vals:
        val_of = {keys[i]: v for i, v in zip(uniq_idx, row)}
        out.append(grid[int(np.argmax([val_of[key] for key in keys]))])
    return out


def pool_covariate_drift(params, sample, ridge: float = 0.0):
    """Refit the covariate blocks with the uniform-selection coupon types merged.

    Online refits estimate the per-allocation covariate drift from data the
    policy itself collected, so allocation assignment is confounded with the
    recruiter's covariates (and, through homophily, with the recruits').
    Rollouts then chase spurious "this coupon type attracts better recruits"
    signals. The first and third coupon types select recruits identically
    (uniformly among neighbors), so their drift is genuinely shared; fitting
    them as one block removes the confounded difference while keeping the
    second type's real recruit-unlike-yourself drift. Type-model only; other
    families are returned unchanged.
    """
    if params.model_family != br.TYPE_MODEL or len(sample) == 0:
        return params
    merged = br.WeightedSample(
        [br.RecruiterDatum(A2 if d.allocation == A2 else A1, d.x, d.coupons,
                           d.child_x, d.child_y, d.child_u)
         for d in sample.data], sample.weights)
    pooled = br._closed_form_covariates(params, merged, ridge, br.FitReport())
    return params.replace(
        phi={a: pooled.phi[A2 if a == A2 else A1].copy()
             for a in params.allocations},
        G={a: pooled.G[A2 if a == A2 else A1].copy()
           for a in params.allocations},
        sigma_diag={a: pooled.sigma_diag[A2 if a == A2 else A1].copy()
                    for a in params.allocations})


@dataclass
class ThompsonDecision:
    action: float
    prob: float
    probs: np.ndarray
    xi: np.ndarray


def thompson_select(x, bootstrap_alphas, spec: ActionSpaceSpec, epsilon: float,
                    rng) -> ThompsonDecision:
    """Sample an action with probability proportional to the clipped
    frequency with which bootstrap-draw policies deem it optimal at x."""
    if not 0.0 < epsilon < 1.0:
        raise ConfigError("epsilon must lie in (0, 1)")
    if not bootstrap_alphas:
        raise ConfigError("need at least one bootstrap draw")
    actions = spec.actions()
    xi = np.zeros(len(actions))
    lookup = {a: i for i, a in enumerate(actions)}
    for alpha in bootstrap_alphas:
        xi[lookup[score_to_action(spec, x, alpha)]] += 1.0
    xi /= len(bootstrap_alphas)
    clipped = np.minimum(1.0 - epsilon, np.maximum(epsilon, xi))
    probs = clipped / clipped.sum()
    k = int(rng.choice(len(actions), p=probs))
    return ThompsonDecision(actions[k], float(probs[k]), probs, xi)


# ---------------------------------------------------------------------------
# benchmark policies


class BasePolicy:
    """Interface used by the simulator: assign(state, x, rng) and cost()."""

    def __init__(self, spec: ActionSpaceSpec = None):
        self.spec = spec if spec is not None else ActionSpaceSpec()

    @property
    def n_actions(self) -> int:
        return len(self.spec.actions())

    def cost(self, allocation) -> float:
        return 1.0

    def _random(self, state, rng, warmup: bool):
        actions = self.spec.actions()
        a = actions[int(rng.integers(0, len(actions)))]
        return a, self.spec.coupons(a, warmup), 1.0 / len(actions), len(actions)

    def assign(self, state, x, rng):
        raise NotImplementedError


class FixedPolicy(BasePolicy):
    """Always offers one fixed allocation (random fallback if infeasible)."""

    def __init__(self, allocation, spec=None):
        super().__init__(spec)
        self.allocation = allocation

    def assign(self, state, x, rng):
        actions = self.spec.actions()
        if self.allocation not in actions:
            return self._random(state, rng, warmup=False)
        return (self.allocation, self.spec.coupons(self.allocation, False),
                1.0, len(actions))


class RandomPolicy(BasePolicy):
    """Uniform draw over the feasible allocation set."""

    def assign(self, state, x, rng):
        return self._random(state, rng, warmup=False)


class TrainAndImplementPolicy(BasePolicy):
    """Random pilot on half the budget, one working-model fit and policy
    search, then the found policy frozen for the rest of the study."""

    def __init__(self, template, spec=None, grid=None, B: int = 32,
                 pilot_fraction: float = 0.5, rollout_horizon: int = 24,
                 min_fit_data: int = 12, ridge: float = 1.0):
        super().__init__(spec)
        self.template = template
        self.B = B
        self.pilot_fraction = pilot_fraction
        self.rollout_horizon = rollout_horizon
        self.min_fit_data = min_fit_data
        self.ridge = ridge
        self.grid = grid
        self.alpha = None

    def assign(self, state, x, rng):
        from .rds import online_sample

        if state.spent < self.pilot_fraction * state.budget:
            return self._random(state, rng, warmup=True)
        if self.alpha is None:
            sample = online_sample(state)
            if len(sample) < self.min_fit_data:
                return self._random(state, rng, warmup=True)
            beta, _ = br.fit_wmle(sample, self.template, ridge=self.ridge)
            beta = pool_covariate_drift(beta, sample, self.ridge)
            grid = self.grid or default_alpha_grid(len(x))
            start = [(x, None, self.spec.main_coupons, 0.0)]
            self.alpha = policy_search(start, beta, self.B, grid,
                                       state.budget - state.spent, rng,
                                       self.spec, horizon=self.rollout_horizon)
        a = score_to_action(self.spec, x, self.alpha)
        return a, self.spec.coupons(a, False), 1.0, self.n_actions


class RLRDSPolicy(BasePolicy):
    """Random warm-up, then per-arrival Thompson sampling with clipping.

    The working model is refit (with a generalized bootstrap) every
    `refit_every` arrivals; between refits each bootstrap draw's optimal
    policy parameters are reused and only re-applied to the new
    participant's covariates.
    """

    def __init__(self, template, spec=None, warmup_n: int = 50,
                 epsilon: float = 0.03, B: int = 32, bootstrap_B: int = 8,
                 grid=None, refit_every: int = 15, rollout_horizon: int = 24,
                 min_fit_data: int = 12, ridge: float = 1.0,
                 fit_tol: float = 1e-3):
        super().__init__(spec)
        if not 0.0 < epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")
        if warmup_n < 1:
            raise ConfigError("warmup_n must be >= 1")
        self.template = template
        self.warmup_n = warmup_n
        self.epsilon = epsilon
        self.B = B
        self.bootstrap_B = bootstrap_B
        self.grid = grid
        self.refit_every = refit_every
        self.rollout_horizon = rollout_horizon
        self.min_fit_data = min_fit_data
        self.ridge = ridge
        self.fit_tol = fit_tol
        self.alphas = None
        self.last_fit_at = -1
        self._point = None
        self.thompson_log = []  # (participant index, chosen prob, prob vector)

    def _refit(self, state, x, rng):
        from .rds import online_sample

        sample = online_sample(state)
        if len(sample) < self.min_fit_data:
            return False
        if state.budget - state.spent < 1.0:
            return False  # nothing left to allocate toward; keep stale draws
        try:
            point, _ = br.fit_wmle(sample, self.template, ridge=self.ridge,
                                   init=self._point, tol=self.fit_tol)
            self._point = point
            # warm-starting each bootstrap refit at the point estimate cuts
            # the Newton iteration count to one or two per block
            draws = br.generalized_bootstrap(sample, self.bootstrap_B, rng,
                                             self.template, ridge=self.ridge,
                                             init=point, tol=self.fit_tol)
            draws = [pool_covariate_drift(d, sample, self.ridge)
                     for d in draws]
        except NumericalError:
            return False
        grid = self.grid or default_alpha_grid(len(x))
        start = [(x, None, self.spec.main_coupons, 0.0)]
        budget_left = state.budget - state.spent
        self.alphas = thompson_policy_search(start, draws, self.B, grid,
                                             budget_left, rng, self.spec,
                                             horizon=self.rollout_horizon)
        self.last_fit_at = state.size
        return True

    def assign(self, state, x, rng):
        n = state.size
        if n < self.warmup_n:
            return self._random(state, rng, warmup=True)
        if self.alphas is None or n - self.last_fit_at >= self.refit_every:
            if not self._refit(state, x, rng) and self.alphas is None:
                return self._random(state, rng, warmup=True)
        dec = thompson_select(x, self.alphas, self.spec, self.epsilon, rng)
        self.thompson_log.append((n, dec.prob, dec.probs))
        a = dec.action
        return a, self.spec.coupons(a, False), dec.prob, self.n_actions


def make_policy(kind: str, template=None, spec=None, **kwargs) -> BasePolicy:
    """Factory for the benchmark policy roster."""
    if kind.startswith("fixed"):
        name_to_alloc = {"fixed_a1": A1, "fixed_a2": A2, "fixed_a3": A3}
        if kind in name_to_alloc:
            return FixedPolicy(name_to_alloc[kind], spec)
        if "allocation" in kwargs:
            return FixedPolicy(kwargs["allocation"], spec)
        raise ConfigError(f"fixed policy needs an allocation: {kind!r}")
    if kind == "random":
        return RandomPolicy(spec)
    if kind == "train_and_implement":
        if template is None:
            raise ConfigError("train_and_implement requires a model template")
        return TrainAndImplementPolicy(template, spec, **kwargs)
    if kind == "rl_rds":
        if template is None:
            raise ConfigError("rl_rds requires a model template")
        return RLRDSPolicy(template, spec, **kwargs)
    raise ConfigError(f"unknown policy kind {kind!r}")
