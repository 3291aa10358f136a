"""Event-driven RDS recruitment simulation over a hidden population.

Participants arrive in continuous time. Processing an arrival records the
participant (cost, reward), asks the allocation policy for their coupon
bundle, selects recruits among un-recruited neighbors, and enqueues the
recruits' arrival times. The study stops the first time total cost exceeds
the budget, or when no pending arrivals remain.

Arrival-time ties are broken by (time, recruiter id, candidate id). A node
holding coupons from several recruiters is recruited by whichever coupon
arrives first; later events for that node are discarded and consume no
budget.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np

from .branching import (RecruiterDatum, WeightedSample, stabilizing_weights,
                        truncexp_sample)
from .errors import ConfigError
from .network import (A2, A3, NetworkParams, Population, _sigmoid,
                      neighbor_selection_probs)

SEED = -1  # recruiter id of seed participants


@dataclass
class ParticipantRecord:
    """One row of the arrival-ordered study data D^kappa."""

    id: int
    recruiter: int
    arrival_time: float
    covariates: np.ndarray
    reward: int
    allocation: float
    cost: float
    coupons: int
    selection_prob: float  # policy's probability of the assigned allocation
    n_actions: int         # size of the feasible allocation set at assignment


@dataclass
class StudyState:
    """The growing study: records, pending coupon events, budget."""

    budget: float
    records: list = field(default_factory=list)
    pending: list = field(default_factory=list)  # heap of (t, recruiter, candidate)
    recruited: set = field(default_factory=set)
    spent: float = 0.0
    allocation_of: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.records)


@dataclass
class EpochPartition:
    """Recruitment generations E_0..E_J and the last complete epoch."""

    epochs: list          # list of lists of participant ids
    last_complete: int    # J_kappa; -1 when no epoch's coupons all expired
    n_J: int              # first arrival index (1-based) after E_J coupons expired; -1 if none


def reward_features(x, allocation) -> np.ndarray:
    """Reward design z = (1, x, 1{A=a2}x, 1{A=a3}x) for the three-type design."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([[1.0], x, x * (allocation == A2), x * (allocation == A3)])


def seed_sample(pop: Population, n0: int, budget: float,
                rng: np.random.Generator) -> StudyState:
    """Draw n0 distinct seeds uniformly; they enter as time-0 arrivals."""
    if not 1 <= n0 <= pop.size:
        raise ConfigError(f"need 1 <= n0 <= N, got n0={n0}, N={pop.size}")
    ids = rng.choice(pop.size, size=n0, replace=False)
    state = StudyState(budget=budget)
    for i in sorted(int(v) for v in ids):
        heapq.heappush(state.pending, (0.0, SEED, i))
    return state


def process_arrival(state: StudyState, pop: Population, params: NetworkParams,
                    policy, rng: np.random.Generator):
    """Process the earliest pending arrival; returns the new record or None.

    Duplicate coupon events (node already recruited) are discarded. The new
    participant's reward depends on the coupon type that recruited them
    (their recruiter's allocation; seeds use their own assigned allocation).
    """
    while state.pending:
        t, recruiter, node = heapq.heappop(state.pending)
        if node not in state.recruited:
            break
    else:
        return None
    x = pop.covariates[node]
    state.recruited.add(node)

    allocation, coupons, prob, n_actions = policy.assign(state, x, rng)
    recruiting_type = state.allocation_of.get(recruiter, allocation)
    z = reward_features(x, recruiting_type)
    y = int(rng.random() < _sigmoid(float(z @ params.beta_y)))
    cost = policy.cost(allocation)
    rec = ParticipantRecord(node, recruiter, t, x, y, allocation, cost,
                            coupons, prob, n_actions)
    state.records.append(rec)
    state.spent += cost
    state.allocation_of[node] = allocation

    candidates = [int(j) for j in pop.neighbors[node] if j not in state.recruited]
    if candidates:
        if len(candidates) <= coupons:
            chosen = candidates
        else:
            probs = neighbor_selection_probs(x, pop.covariates[candidates],
                                             allocation, params.neighbor_rule)
            picks = rng.choice(len(candidates), size=coupons, replace=False, p=probs)
            chosen = [candidates[i] for i in sorted(int(v) for v in picks)]
        offsets = truncexp_sample(rng, params.zeta, params.t_min, params.t_max,
                                  size=len(chosen))
        for j, u in zip(chosen, offsets):
            heapq.heappush(state.pending, (t + float(u), node, j))
    return rec


def run_study(pop: Population, params: NetworkParams, policy, budget: float,
              rng: np.random.Generator, n0: int = None,
              max_participants: int = None) -> StudyState:
    """Run a full study until cost first exceeds the budget or events run dry."""
    if budget <= 0:
        raise ConfigError("budget must be positive")
    n0 = params.seed_count if n0 is None else n0
    state = seed_sample(pop, n0, budget, rng)
    while state.pending and state.spent <= budget:
        if max_participants is not None and state.size >= max_participants:
            break
        if process_arrival(state, pop, params, policy, rng) is None:
            break
    return state


def epoch_partition(records, t_max: float) -> EpochPartition:
    """Split arrival-ordered records into recruitment generations.

    J_kappa is the largest j such that every member of E_j has had its
    coupons expire (T_i + t_max < last arrival time); -1 when none has.
    n_J is the 1-based index of the first arrival after every E_J coupon
    expired (-1 when the study ends before that happens).
    """
    if not records:
        raise ConfigError("empty trajectory")
    epoch_of = {}
    epochs = []
    for rec in records:
        e = 0 if rec.recruiter == SEED else epoch_of[rec.recruiter] + 1
        epoch_of[rec.id] = e
        if len(epochs) <= e:
            epochs.append([])
        epochs[e].append(rec.id)
    t_arr = {rec.id: rec.arrival_time for rec in records}
    t_kappa = records[-1].arrival_time
    last_complete = -1
    expiry = {}
    for j, members in enumerate(epochs):
        expiry[j] = max(t_arr[i] for i in members) + t_max
        if expiry[j] < t_kappa:
            last_complete = j
    n_J = -1
    if last_complete >= 0:
        for v, rec in enumerate(records, start=1):
            if rec.arrival_time > expiry[last_complete]:
                n_J = v
                break
    return EpochPartition(epochs, last_complete, n_J)


def build_weighted_sample(records, t_max: float, include_ids=None,
                          weighted: bool = True) -> WeightedSample:
    """Assemble complete-generation recruiter data with stabilizing weights.

    By default recruiters are the members of epochs 0..J_kappa (their
    coupons have all expired, so every one of their recruits is observed).
    `include_ids` overrides that selection with an explicit recruiter set.
    Each datum's weight is sqrt(uniform propensity / logged propensity).
    """
    if include_ids is not None:
        complete = set(include_ids)
    else:
        part = epoch_partition(records, t_max)
        if part.last_complete < 0:
            return WeightedSample([], np.empty(0))
        complete = set()
        for j in range(part.last_complete + 1):
            complete.update(part.epochs[j])
    children = {}
    for rec in records:
        if rec.recruiter != SEED:
            children.setdefault(rec.recruiter, []).append(rec)
    data, probs, n_actions = [], [], []
    for rec in records:
        if rec.id not in complete:
            continue
        kids = children.get(rec.id, [])
        data.append(RecruiterDatum(
            rec.allocation, rec.covariates, rec.coupons,
            np.array([k.covariates for k in kids]).reshape(len(kids), -1)
            if kids else np.empty((0, len(rec.covariates))),
            np.array([k.reward for k in kids], dtype=float),
            np.array([k.arrival_time - rec.arrival_time for k in kids])))
        probs.append(rec.selection_prob)
        n_actions.append(rec.n_actions)
    if not data:
        return WeightedSample([], np.empty(0))
    if weighted:
        w = stabilizing_weights(np.array(probs), np.array(n_actions, dtype=float))
    else:
        w = np.ones(len(data))
    return WeightedSample(data, w)


# ---------------------------------------------------------------------------
# trajectory serialization


def save_trajectory(records, path) -> None:
    """One CSV row per participant, arrival-ordered."""
    if not records:
        raise ConfigError("empty trajectory")
    p = len(records[0].covariates)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "recruiter", "arrival_time"]
                    + [f"x{i}" for i in range(p)]
                    + ["reward", "allocation", "cost", "coupons",
                       "selection_prob", "n_actions"])
        for r in records:
            wr.writerow([r.id, r.recruiter, repr(r.arrival_time)]
                        + [repr(float(v)) for v in r.covariates]
                        + [r.reward, r.allocation, repr(r.cost), r.coupons,
                           repr(r.selection_prob), r.n_actions])


def load_trajectory(path):
    records = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        p = sum(1 for h in header if h.startswith("x"))
        for row in rd:
            alloc = float(row[3 + p + 1])
            records.append(ParticipantRecord(
                id=int(row[0]), recruiter=int(row[1]),
                arrival_time=float(row[2]),
                covariates=np.array([float(v) for v in row[3:3 + p]]),
                reward=int(row[3 + p]),
                allocation=int(alloc) if alloc.is_integer() else alloc,
                cost=float(row[3 + p + 2]), coupons=int(row[3 + p + 3]),
                selection_prob=float(row[3 + p + 4]),
                n_actions=int(row[3 + p + 5])))
    return records


def resolved_sample(state: StudyState, weighted: bool = True) -> WeightedSample:
    """Recruiter data for every family fully observed so far.

    A recruiter's family is complete exactly when none of its issued coupons
    is still pending a live arrival (events whose candidate was recruited by
    someone else first resolve to nothing).
    """
    busy = {r for (_, r, c) in state.pending if c not in state.recruited}
    ids = [rec.id for rec in state.records if rec.id not in busy]
    if not ids:
        return WeightedSample([], np.empty(0))
    return build_weighted_sample(state.records, t_max=np.inf,
                                 include_ids=ids, weighted=weighted)


def online_sample(state: StudyState, weighted: bool = True) -> WeightedSample:
    """Recruiter data over everyone observed so far, families as seen to date.

    During rapid recruitment almost every family is still open (coupons
    outstanding), so waiting for fully resolved families would leave the
    online refits with no data. Treating the children observed so far as the
    family censors the family-size and arrival blocks, but those are shared
    across allocations in the type model, so allocation rankings built on
    this sample are unaffected; the reward and covariate blocks are
    conditionally unbiased.
    """
    ids = [rec.id for rec in state.records]
    return build_weighted_sample(state.records, t_max=np.inf,
                                 include_ids=ids, weighted=weighted)
