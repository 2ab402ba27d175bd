"""Metrics, approach comparison and learning curves."""
from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .hybrid import KnnModel, baseline_outcome, hybrid_route
from .mdp import Termination, Step
from .qnet import QNetwork, TrainingConfig, query_rng, train_agent
from .qte import EMPTY_CACHE, Qte
from .rewriter import (DecisionOutcome, one_stage_rewrite, rewrite_online, two_stage_rewrite,
                       validation_score)
from .sim_env import PlanTimeTable, quality_of, true_execution_time, viable_plan_count
from .workload import Query

log = logging.getLogger(__name__)

APPROACHES = ("baseline", "naive", "mdp-hint", "mdp-one-stage", "mdp-two-stage", "hybrid")
DEFAULT_EDGES = (0, 1, 2, 3, 4, 5)
METRIC_COLUMNS = ("approach", "bucket", "n_queries", "vqp", "aqrt_ms", "avg_quality")


class MissingArtifactError(ValueError):
    pass


@dataclass
class Agent:
    """A trained network and the option indices its outputs stand for."""

    net: QNetwork
    indices: list[int] | None = None


@dataclass
class Artifacts:
    hint: Agent | None = None
    one_stage: Agent | None = None
    # second-stage agent of the two-stage rewriter, over the approximate options
    stage2: Agent | None = None
    classifier: KnnModel | None = None
    classifier_sigma: float = 0.0
    classifier_cost_ms: float = 2.0


@dataclass
class Metrics:
    n_queries: int
    n_viable: int
    aqrt_ms: float
    avg_quality: float
    buckets: dict[str, "Metrics"] = field(default_factory=dict)

    @property
    def vqp(self) -> float:
        return self.n_viable / self.n_queries if self.n_queries else 0.0

    @classmethod
    def of(cls, outcomes: Sequence[DecisionOutcome]) -> "Metrics":
        if not outcomes:
            return cls(0, 0, 0.0, 0.0)
        return cls(len(outcomes), sum(bool(o.viable) for o in outcomes),
                   float(np.mean([o.total_ms for o in outcomes])),
                   float(np.mean([o.quality for o in outcomes])))


@dataclass
class EvalResult:
    approach: str
    metrics: Metrics
    outcomes: list[DecisionOutcome]


def bucket_label(edges: Sequence[int], i: int) -> str:
    if i == len(edges) - 1:
        return f">={edges[i]}"
    lo, hi = edges[i], edges[i + 1] - 1
    return str(lo) if lo == hi else f"{lo}-{hi}"


def bucket_labels(edges: Sequence[int] = DEFAULT_EDGES) -> list[str]:
    return [bucket_label(edges, i) for i in range(len(edges))]


def bucket_by_viable_plans(workload: Sequence[Query], table: PlanTimeTable, tau: float,
                           edges: Sequence[int] = DEFAULT_EDGES) -> dict[str, list[Query]]:
    """Group queries by how many exact plans fit the budget.

    ``edges`` are the lower bounds of the buckets; the last one is open.
    Every label is present in the result, possibly with no queries.
    """
    edges = [int(e) for e in edges]
    if not edges or edges[0] != 0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing and start at 0")
    out: dict[str, list[Query]] = {lab: [] for lab in bucket_labels(edges)}
    for q in workload:
        c = viable_plan_count(table, q, tau)
        i = int(np.searchsorted(edges, c, side="right")) - 1
        out[bucket_label(edges, i)].append(q)
    return out


def naive_rewrite(query: Query, table: PlanTimeTable, qte: Qte, tau: float,
                  rng: np.random.Generator, indices: Sequence[int] | None = None
                  ) -> DecisionOutcome:
    """Estimate every option, then run the one with the smallest estimate."""
    indices = list(indices) if indices is not None else table.hint_indices
    cache = EMPTY_CACHE
    elapsed = 0.0
    steps = []
    for k, ro in enumerate(indices):
        est = qte.estimate(table, query.id, ro, cache, rng)
        cache = est.cache
        elapsed += est.cost
        steps.append(Step(k, ro, est.t_est, est.cost, elapsed))
    ro = min(steps, key=lambda s: (s.t_est, s.ro_index)).ro_index
    t_hat = true_execution_time(table, query.id, ro, rng)
    return DecisionOutcome(query.id, ro, elapsed, t_hat, quality_of(table, query.id, ro),
                           Termination.EXHAUSTED, [s.ro_index for s in steps], steps, tau)


def _need(obj, name: str, approach: str):
    if obj is None:
        raise MissingArtifactError(f"approach {approach!r} needs the {name} artifact")
    return obj


def run_approach(approach: str, query: Query, table: PlanTimeTable, qte: Qte, tau: float,
                 artifacts: Artifacts, seed: int = 0) -> DecisionOutcome:
    rng = query_rng(seed, query.id, stream=1)
    if approach == "baseline":
        return baseline_outcome(query, table, tau, 0.0, rng)
    if approach == "naive":
        return naive_rewrite(query, table, qte, tau, rng)
    if approach == "mdp-hint":
        agent = _need(artifacts.hint, "hint checkpoint", approach)
        return rewrite_online(query, agent.net, table, qte, tau, rng,
                              indices=agent.indices if agent.indices is not None
                              else table.hint_indices)
    if approach == "mdp-one-stage":
        agent = _need(artifacts.one_stage, "one-stage checkpoint", approach)
        return one_stage_rewrite(query, agent.net, table, qte, tau, rng, indices=agent.indices)
    if approach == "mdp-two-stage":
        hint = _need(artifacts.hint, "hint checkpoint", approach)
        stage2 = _need(artifacts.stage2, "stage-2 checkpoint", approach)
        return two_stage_rewrite(query, hint.net, stage2.net, table, qte, tau, rng,
                                 hint_indices=hint.indices, approx_indices=stage2.indices)
    if approach == "hybrid":
        hint = _need(artifacts.hint, "hint checkpoint", approach)
        model = _need(artifacts.classifier, "classifier model", approach)
        return hybrid_route(query, model, hint.net, table, qte, tau,
                            sigma=artifacts.classifier_sigma,
                            cost_ms=artifacts.classifier_cost_ms,
                            indices=hint.indices if hint.indices is not None
                            else table.hint_indices, seed=seed)
    raise ValueError(f"unknown approach {approach!r}; expected one of {', '.join(APPROACHES)}")


def evaluate(approach: str, workload: Sequence[Query], table: PlanTimeTable, qte: Qte,
             tau: float, artifacts: Artifacts | None = None, seed: int = 0,
             edges: Sequence[int] = DEFAULT_EDGES) -> EvalResult:
    """Run ``approach`` on every query; overall and per-bucket metrics."""
    table.check_covers(workload)
    artifacts = artifacts or Artifacts()
    outcomes = [run_approach(approach, q, table, qte, tau, artifacts, seed) for q in workload]
    by_id = {o.query_id: o for o in outcomes}
    metrics = Metrics.of(outcomes)
    for lab, qs in bucket_by_viable_plans(workload, table, tau, edges).items():
        metrics.buckets[lab] = Metrics.of([by_id[q.id] for q in qs])
    return EvalResult(approach, metrics, outcomes)


def overall_from_buckets(metrics: Metrics) -> Fraction:
    """Overall VQP recomputed exactly from the bucket breakdown."""
    total = sum(m.n_queries for m in metrics.buckets.values())
    viable = sum(m.n_viable for m in metrics.buckets.values())
    return Fraction(viable, total) if total else Fraction(0)


def metric_rows(results: Sequence[EvalResult]) -> list[dict]:
    rows = []
    for res in results:
        for lab, m in [("all", res.metrics)] + list(res.metrics.buckets.items()):
            rows.append({"approach": res.approach, "bucket": lab, "n_queries": m.n_queries,
                         "vqp": m.vqp, "aqrt_ms": m.aqrt_ms, "avg_quality": m.avg_quality})
    return rows


def write_metrics_csv(results: Sequence[EvalResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in metric_rows(results):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["n_queries"] = int(r["n_queries"])
        for k in ("vqp", "aqrt_ms", "avg_quality"):
            r[k] = float(r[k])
    return rows


def format_table(results: Sequence[EvalResult]) -> str:
    out = io.StringIO()
    out.write(f"{'approach':<14} {'bucket':>6} {'n':>5} {'VQP':>7} {'AQRT ms':>10} {'quality':>8}\n")
    for r in metric_rows(results):
        out.write(f"{r['approach']:<14} {r['bucket']:>6} {r['n_queries']:>5} "
                  f"{100 * r['vqp']:>6.1f}% {r['aqrt_ms']:>10.1f} {r['avg_quality']:>8.3f}\n")
    return out.getvalue()


@dataclass
class CurveRow:
    size: int
    train_vqp_mean: float
    train_vqp_sd: float
    val_vqp_mean: float
    val_vqp_sd: float
    seconds_mean: float
    seconds_sd: float

    @property
    def gap(self) -> float:
        return self.train_vqp_mean - self.val_vqp_mean


CURVE_COLUMNS = tuple(CurveRow.__dataclass_fields__)


def _sd(xs: Sequence[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def learning_curve(train_pool: Sequence[Query], valid: Sequence[Query], sizes: Sequence[int],
                   repeats: int, cfg: TrainingConfig, table: PlanTimeTable, qte: Qte,
                   tau: float, *, indices: Sequence[int] | None = None,
                   seed: int = 0) -> list[CurveRow]:
    """Train on random subsets of ``train_pool`` of each size; VQP on the subset and on ``valid``.

    Checkpoints are selected on the training subset itself so the
    validation set stays unseen.
    """
    pool = list(train_pool)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for s in sizes:
        if not 1 <= s <= len(pool):
            raise ValueError(f"size {s} is outside 1..{len(pool)} (training pool size)")
    if indices is None:
        indices = table.hint_indices
    rows = []
    for size in sizes:
        tr_v, va_v, secs = [], [], []
        for rep in range(repeats):
            rng = np.random.default_rng([seed, size, rep])
            sample = [pool[i] for i in sorted(rng.choice(len(pool), size, replace=False))]
            run_cfg = TrainingConfig.from_dict({**cfg.__dict__, "seed": int(rng.integers(2**31))})
            res = train_agent(sample, table, qte, tau, run_cfg, indices=indices)
            tr_v.append(validation_score(res.net, sample, table, qte, tau, indices, None, seed)[0])
            va_v.append(validation_score(res.net, valid, table, qte, tau, indices, None, seed)[0])
            secs.append(res.seconds)
            log.info("curve size %d repeat %d: train %.3f valid %.3f", size, rep, tr_v[-1],
                     va_v[-1])
        rows.append(CurveRow(size, float(np.mean(tr_v)), _sd(tr_v), float(np.mean(va_v)),
                             _sd(va_v), float(np.mean(secs)), _sd(secs)))
    return rows


def write_curve_csv(rows: Sequence[CurveRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in CURVE_COLUMNS])
