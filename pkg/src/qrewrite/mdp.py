"""The planning MDP: states, transitions, rewards and termination.

A state is ``(E, C_1..C_n, T_1..T_n)``: elapsed planning time, the
predicted cost of estimating each rewritten query, and the estimated
execution time of each explored one (0 while unexplored).  All times are
milliseconds.  Actions index into the episode's option list, which may be
a subset of the environment's option space (see ``Episode.indices``).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .qte import EMPTY_CACHE, Estimate, Qte
from .sim_env import PlanTimeTable

INPUT_CLIP = 10.0


class MdpError(ValueError):
    pass


class Termination(str, enum.Enum):
    NONE = "none"
    PREDICTED_VIABLE = "predicted-viable"
    OUT_OF_TIME = "out-of-time"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class State:
    elapsed: float
    costs: np.ndarray
    times: np.ndarray

    @property
    def n(self) -> int:
        return len(self.costs)

    def vector(self, tau: float, clip: float = INPUT_CLIP) -> np.ndarray:
        """Network input: every field divided by ``tau`` and clipped."""
        raw = np.concatenate(([self.elapsed], self.costs, self.times)) / tau
        return np.minimum(raw, clip)

    def __eq__(self, other):
        return (isinstance(other, State) and self.elapsed == other.elapsed
                and np.array_equal(self.costs, other.costs)
                and np.array_equal(self.times, other.times))


@dataclass(frozen=True)
class QualityRewardConfig:
    beta: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise MdpError("beta must be in [0, 1]")


def initial_state(n: int, offline_costs: Sequence[float], elapsed: float = 0.0) -> State:
    costs = np.asarray(offline_costs, dtype=float)
    if n < 1:
        raise MdpError("a state needs at least one rewrite option")
    if costs.shape != (n,):
        raise MdpError(f"expected {n} offline costs, got {costs.shape}")
    if (costs < 0).any() or elapsed < 0:
        raise MdpError("costs and elapsed time must be >= 0")
    return State(float(elapsed), costs.copy(), np.zeros(n))


def transition(state: State, action: int, remaining: np.ndarray, cache: frozenset,
               qte: Qte, table: PlanTimeTable, query_id: int, rng: np.random.Generator,
               indices: Sequence[int] | None = None) -> tuple[State, frozenset, Estimate]:
    """Estimate option ``action`` and return the next state and stat cache.

    The estimate fills ``T[action]``; ``C[action]`` becomes the cost actually
    paid and every unexplored option that needed one of the newly collected
    statistics gets a fresh predicted cost; the paid cost is added to E.
    """
    if not remaining[action]:
        raise MdpError(f"option {action} was already explored")
    ro = indices[action] if indices is not None else action
    est = qte.estimate(table, query_id, ro, cache, rng)
    times = state.times.copy()
    costs = state.costs.copy()
    times[action] = est.t_est
    costs[action] = est.cost
    new_stats = est.cache - cache
    if new_stats:
        for j in np.flatnonzero(remaining):
            if j == action:
                continue
            rj = indices[j] if indices is not None else j
            if qte.required(rj) & new_stats:
                costs[j] = qte.predicted_cost(rj, est.cache)
    return State(state.elapsed + est.cost, costs, times), est.cache, est


def reward(elapsed: float, t_hat: float, tau: float) -> float:
    """Terminal reward ``(tau - E - T_hat) / tau``; positive iff within budget."""
    if tau <= 0:
        raise MdpError("tau must be positive")
    return (tau - elapsed - t_hat) / tau


def quality_reward(elapsed: float, t_hat: float, tau: float, quality: float,
                   cfg: QualityRewardConfig) -> float:
    if not 0.0 <= quality <= 1.0:
        raise MdpError("quality must be in [0, 1]")
    return cfg.beta * reward(elapsed, t_hat, tau) + (1.0 - cfg.beta) * quality


def check_termination(elapsed: float, last_t_est: float | None, n_remaining: int,
                      tau: float) -> Termination:
    """First matching case of: predicted viable, out of time, exhausted."""
    if last_t_est is not None and elapsed + last_t_est <= tau:
        return Termination.PREDICTED_VIABLE
    if elapsed >= tau:
        return Termination.OUT_OF_TIME
    if n_remaining == 0:
        return Termination.EXHAUSTED
    return Termination.NONE


def select_action(qvalues: np.ndarray, remaining: np.ndarray, epsilon: float,
                  rng: np.random.Generator | None = None) -> int:
    """Epsilon-greedy choice restricted to the unexplored options."""
    candidates = np.flatnonzero(remaining)
    if len(candidates) == 0:
        raise MdpError("no unexplored option left")
    if epsilon > 0:
        if rng is None:
            raise MdpError("epsilon > 0 needs a random generator")
        if rng.random() < epsilon:
            return int(candidates[rng.integers(len(candidates))])
    masked = np.where(remaining, qvalues, -np.inf)
    return int(np.argmax(masked))


@dataclass
class Step:
    action: int
    ro_index: int
    t_est: float
    cost: float
    elapsed: float


@dataclass
class Episode:
    """One query's planning session.

    ``indices`` maps the episode's actions to option indices of ``table``;
    by default every option of the table is an action.
    """

    query_id: int
    table: PlanTimeTable
    qte: Qte
    tau: float
    indices: list[int] | None = None
    elapsed: float = 0.0
    cache: frozenset = EMPTY_CACHE
    offline_costs: Sequence[float] | None = None
    steps: list[Step] = field(default_factory=list)

    def __post_init__(self):
        if self.indices is None:
            self.indices = list(range(self.table.n_options))
        self.indices = [int(i) for i in self.indices]
        costs = (self.offline_costs if self.offline_costs is not None
                 else self.qte.offline_costs(self.indices, self.cache))
        self.state = initial_state(len(self.indices), costs, self.elapsed)
        self.remaining = np.ones(len(self.indices), dtype=bool)
        self.termination = Termination.NONE
        if self.state.elapsed >= self.tau:
            self.termination = Termination.OUT_OF_TIME

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def done(self) -> bool:
        return self.termination is not Termination.NONE

    def step(self, action: int, rng: np.random.Generator) -> Termination:
        if self.done:
            raise MdpError("episode already terminated")
        self.state, self.cache, est = transition(
            self.state, action, self.remaining, self.cache, self.qte, self.table,
            self.query_id, rng, self.indices)
        self.remaining[action] = False
        self.steps.append(Step(action, self.indices[action], est.t_est, est.cost,
                               self.state.elapsed))
        self.termination = check_termination(self.state.elapsed, est.t_est,
                                             int(self.remaining.sum()), self.tau)
        return self.termination

    def explored(self) -> list[int]:
        return [s.action for s in self.steps]

    def best_estimated(self) -> int | None:
        """Explored action with the smallest estimated time, or None."""
        if not self.steps:
            return None
        best = min(self.steps, key=lambda s: (s.t_est, s.action))
        return best.action

    def decision(self) -> int | None:
        """Action decided at termination, as a local index (None if nothing explored)."""
        if self.termination is Termination.PREDICTED_VIABLE:
            return self.steps[-1].action
        return self.best_estimated()


def trace_record(query_id: int, steps: Sequence[Step], termination: Termination,
                 decided_ro: int, reward_value: float) -> dict:
    return {
        "query_id": query_id,
        "steps": [{"action": s.ro_index, "T_est": s.t_est, "cost": s.cost, "E_after": s.elapsed}
                  for s in steps],
        "termination": termination.value,
        "decided_ro": decided_ro,
        "reward": reward_value,
    }


def dump_traces(records: Sequence[dict], fh) -> None:
    for rec in records:
        fh.write(json.dumps(rec) + "\n")
