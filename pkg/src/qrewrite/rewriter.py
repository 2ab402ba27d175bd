"""Online rewriting with a trained agent.

``rewrite_online`` follows the greedy procedure: pick the unexplored
option with the highest Q-value, estimate it, and stop as soon as an
estimate predicts the query fits the budget.  If time runs out or every
option was explored, the fastest estimate so far is used; with no
estimate at all the original query is sent unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import (Episode, QualityRewardConfig, Step, Termination, quality_reward, reward,
                  select_action, trace_record)
from .qte import EMPTY_CACHE, Qte
from .sim_env import IDENTITY, PlanTimeTable, quality_of, true_execution_time
from .workload import Query


class RewriteError(ValueError):
    pass


@dataclass
class DecisionOutcome:
    query_id: int
    ro_index: int
    planning_ms: float
    exec_ms: float
    quality: float
    termination: Termination
    path: list[int] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)
    tau: float = 500.0

    @property
    def total_ms(self) -> float:
        return self.planning_ms + self.exec_ms

    @property
    def viable(self) -> bool:
        return self.total_ms <= self.tau

    def reward(self, quality_cfg: QualityRewardConfig | None = None) -> float:
        if quality_cfg is None:
            return reward(self.planning_ms, self.exec_ms, self.tau)
        return quality_reward(self.planning_ms, self.exec_ms, self.tau, self.quality, quality_cfg)

    def trace(self, quality_cfg: QualityRewardConfig | None = None) -> dict:
        return trace_record(self.query_id, self.steps, self.termination, self.ro_index,
                            self.reward(quality_cfg))


def _qid(query: Query | int) -> int:
    return int(query.id) if isinstance(query, Query) else int(query)


def _rng_for(qid: int, rng: np.random.Generator | None, seed: int) -> np.random.Generator:
    if rng is not None:
        return rng
    from .qnet import query_rng
    return query_rng(seed, qid, stream=1)


def _play_greedy(net, ep: Episode, rng: np.random.Generator) -> None:
    if net.n_actions != ep.n:
        raise RewriteError(f"network has {net.n_actions} outputs but the option space has "
                           f"{ep.n} options")
    while not ep.done:
        q = net.forward(ep.state.vector(ep.tau))
        ep.step(select_action(q, ep.remaining, 0.0), rng)


def _execute(table: PlanTimeTable, qid: int, ro: int, planning: float, tau: float,
             termination: Termination, steps: list[Step], rng: np.random.Generator
             ) -> DecisionOutcome:
    t_hat = true_execution_time(table, qid, ro, rng)
    return DecisionOutcome(qid, ro, planning, t_hat, quality_of(table, qid, ro), termination,
                           [s.ro_index for s in steps], list(steps), tau)


def rewrite_online(query: Query | int, net, table: PlanTimeTable, qte: Qte, tau: float,
                   rng: np.random.Generator | None = None, *,
                   indices: Sequence[int] | None = None, elapsed: float = 0.0,
                   cache: frozenset = EMPTY_CACHE, seed: int = 0) -> DecisionOutcome:
    """Pick a rewritten query for ``query`` greedily and run it.

    ``indices`` restricts the actions to a subset of the environment's
    options (default: all of them); ``elapsed`` starts the planning clock
    at a non-zero value, e.g. to account for a classifier run first.
    """
    qid = _qid(query)
    rng = _rng_for(qid, rng, seed)
    if indices is None:
        indices = range(table.n_options)
    ep = Episode(qid, table, qte, tau, indices=list(indices), elapsed=elapsed, cache=cache)
    _play_greedy(net, ep, rng)
    local = ep.decision()
    ro = ep.indices[local] if local is not None else IDENTITY
    return _execute(table, qid, ro, ep.state.elapsed, tau, ep.termination, ep.steps, rng)


def one_stage_rewrite(query: Query | int, quality_net, table: PlanTimeTable, qte: Qte,
                      tau: float, rng: np.random.Generator | None = None, *,
                      indices: Sequence[int] | None = None, seed: int = 0) -> DecisionOutcome:
    """Greedy rewriting over exact and approximate options together."""
    return rewrite_online(query, quality_net, table, qte, tau, rng, indices=indices, seed=seed)


def two_stage_rewrite(query: Query | int, hint_net, quality_net, table: PlanTimeTable,
                      qte: Qte, tau: float, rng: np.random.Generator | None = None, *,
                      hint_indices: Sequence[int] | None = None,
                      approx_indices: Sequence[int] | None = None,
                      seed: int = 0) -> DecisionOutcome:
    """Exhaust the exact options first, then fall back to approximate ones.

    Stage two starts only when stage one explored every exact option
    without a predicted-viable one and time is left.  It inherits the
    elapsed time and the collected statistics.  An approximate option is
    only accepted when it is predicted to fit the budget; otherwise the
    fastest exact estimate from stage one is kept, so a late answer is at
    least a complete one.
    """
    qid = _qid(query)
    rng = _rng_for(qid, rng, seed)
    hint_indices = list(hint_indices if hint_indices is not None else table.hint_indices)
    approx_indices = list(approx_indices if approx_indices is not None
                          else table.approx_indices)
    first = Episode(qid, table, qte, tau, indices=hint_indices)
    _play_greedy(hint_net, first, rng)
    if first.termination is not Termination.EXHAUSTED:
        local = first.decision()
        ro = first.indices[local] if local is not None else IDENTITY
        return _execute(table, qid, ro, first.state.elapsed, tau, first.termination,
                        first.steps, rng)

    second = Episode(qid, table, qte, tau, indices=approx_indices,
                     elapsed=first.state.elapsed, cache=first.cache)
    _play_greedy(quality_net, second, rng)
    steps = first.steps + second.steps
    if second.termination is Termination.PREDICTED_VIABLE:
        ro = second.steps[-1].ro_index
    else:
        ro = first.indices[first.best_estimated()]
    return _execute(table, qid, ro, second.state.elapsed, tau, second.termination, steps, rng)


def handoff_state(hint_net, table: PlanTimeTable, qte: Qte, tau: float,
                  hint_indices: Sequence[int] | None = None):
    """Episode-start hook for training the second-stage agent.

    Replays stage one greedily and returns the (elapsed, cache) it hands
    over, or None when stage two would not run for that query.
    """
    hint_indices = list(hint_indices if hint_indices is not None else table.hint_indices)

    def start(query_id: int, rng: np.random.Generator):
        ep = Episode(query_id, table, qte, tau, indices=hint_indices)
        _play_greedy(hint_net, ep, rng)
        if ep.termination is not Termination.EXHAUSTED:
            return None
        return ep.state.elapsed, ep.cache

    return start


def validation_score(net, queries: Sequence[Query], table: PlanTimeTable, qte: Qte, tau: float,
                     indices: Sequence[int] | None = None,
                     quality_cfg: QualityRewardConfig | None = None,
                     seed: int = 0) -> tuple[float, float]:
    """(VQP, mean reward) of the greedy policy on ``queries``."""
    from .qnet import query_rng

    viable = 0
    total = 0.0
    for q in queries:
        out = rewrite_online(q, net, table, qte, tau, query_rng(seed, q.id, stream=7),
                             indices=indices)
        viable += out.viable
        total += out.reward(quality_cfg)
    n = max(len(queries), 1)
    return viable / n, total / n
