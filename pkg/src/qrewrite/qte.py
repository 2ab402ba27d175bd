"""Query time estimation with shared, per-attribute statistics.

Estimating a rewritten query requires the selectivity of every condition
whose index it hints.  Statistics collected once stay in the episode's
cache, so later estimates that need them become cheaper.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .sim_env import PlanTimeTable
from .workload import RewriteOption

StatCache = frozenset
EMPTY_CACHE: frozenset = frozenset()


@dataclass(frozen=True)
class StatCostModel:
    unit_cost_ms: float = 40.0
    overhead_ms: float = 10.0

    def __post_init__(self):
        if self.unit_cost_ms < 0 or self.overhead_ms < 0:
            raise ValueError("estimation costs must be >= 0")


@dataclass(frozen=True)
class QteProfile:
    kind: str = "accurate"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("accurate", "approximate"):
            raise ValueError(f"unknown QTE kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "accurate" and self.sigma != 0:
            raise ValueError("an accurate QTE has sigma = 0")


@dataclass(frozen=True)
class Estimate:
    t_est: float
    cost: float
    cache: frozenset


def required_statistics(ro: RewriteOption) -> frozenset:
    """Selectivity statistics needed to estimate ``ro``: one per hinted index."""
    return frozenset(ro.hint_set)


def predicted_estimation_cost(ro: RewriteOption, cache: frozenset,
                              model: StatCostModel) -> float:
    missing = required_statistics(ro) - cache
    return model.overhead_ms + model.unit_cost_ms * len(missing)


def _round_us(ms: float) -> float:
    return round(ms * 1000.0) / 1000.0


def estimate(table: PlanTimeTable, query_id: int, ro_index: int, cache: frozenset,
             profile: QteProfile, model: StatCostModel, rng: np.random.Generator,
             cost_noise: tuple[float, float] | None = None) -> Estimate:
    """Estimate one rewritten query, paying for any statistic not yet cached."""
    true_t = table.time_ms(query_id, ro_index)
    ro = table.options[ro_index]
    cost = predicted_estimation_cost(ro, cache, model)
    if cost_noise is not None:
        cost *= rng.uniform(*cost_noise)
    t_est = true_t
    if profile.sigma > 0:
        t_est = true_t * float(np.exp(rng.normal(0.0, profile.sigma)))
    return Estimate(t_est, _round_us(cost), cache | required_statistics(ro))


class Qte:
    """Estimator bound to an option space, a cost model and a noise setting."""

    def __init__(self, options: Sequence[RewriteOption], profile: QteProfile = QteProfile(),
                 cost_model: StatCostModel = StatCostModel(),
                 cost_noise: tuple[float, float] | None = (0.9, 1.3)):
        self.options = tuple(options)
        self.profile = profile
        self.cost_model = cost_model
        self.cost_noise = tuple(cost_noise) if cost_noise else None
        self._required = [required_statistics(o) for o in self.options]

    @classmethod
    def from_config(cls, options, cfg: Mapping | None = None) -> "Qte":
        cfg = dict(cfg or {})
        noise = cfg.get("cost_noise", [0.9, 1.3])
        if noise is True:
            noise = [0.9, 1.3]
        return cls(options,
                   QteProfile(cfg.get("kind", "accurate"), float(cfg.get("sigma", 0.0))),
                   StatCostModel(float(cfg.get("unit_cost_ms", 40.0)),
                                 float(cfg.get("overhead_ms", 10.0))),
                   tuple(noise) if noise else None)

    def to_config(self) -> dict:
        return {"kind": self.profile.kind, "sigma": self.profile.sigma,
                "unit_cost_ms": self.cost_model.unit_cost_ms,
                "overhead_ms": self.cost_model.overhead_ms,
                "cost_noise": list(self.cost_noise) if self.cost_noise else None}

    def required(self, ro_index: int) -> frozenset:
        return self._required[ro_index]

    def predicted_cost(self, ro_index: int, cache: frozenset) -> float:
        missing = self._required[ro_index] - cache
        return self.cost_model.overhead_ms + self.cost_model.unit_cost_ms * len(missing)

    def offline_costs(self, indices: Sequence[int], cache: frozenset = EMPTY_CACHE) -> np.ndarray:
        return np.array([self.predicted_cost(i, cache) for i in indices], dtype=float)

    def estimate(self, table: PlanTimeTable, query_id: int, ro_index: int, cache: frozenset,
                 rng: np.random.Generator) -> Estimate:
        return estimate(table, query_id, ro_index, cache, self.profile, self.cost_model, rng,
                        self.cost_noise)


class ScriptedQte(Qte):
    """Estimator replaying fixed (estimated time, actual cost) answers.

    Statistics still accumulate in the cache as usual, so the predicted
    costs of the remaining options move exactly as with a real estimator.
    """

    def __init__(self, options, script: Mapping[int, tuple[float, float]],
                 cost_model: StatCostModel = StatCostModel()):
        super().__init__(options, QteProfile(), cost_model, cost_noise=None)
        self.script = dict(script)

    def estimate(self, table, query_id, ro_index, cache, rng) -> Estimate:
        if ro_index in self.script:
            t_est, cost = self.script[ro_index]
        else:
            t_est = table.time_ms(query_id, ro_index)
            cost = self.predicted_cost(ro_index, cache)
        return Estimate(float(t_est), float(cost), cache | self.required(ro_index))
