"""Per-query routing between the plain baseline and the learned agent.

A small KNN classifier over estimated selectivities decides whether a
query is worth planning for.  Its cost is charged to every routed query.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import Termination
from .qte import Qte
from .rewriter import DecisionOutcome, rewrite_online
from .sim_env import IDENTITY, PlanTimeTable, quality_of, true_execution_time
from .workload import Query

BASELINE = "baseline"
MDP = "mdp"
ROUTES = (BASELINE, MDP)
CLASSIFIER_COST_MS = 2.0


class ClassifierError(ValueError):
    pass


def extract_features(query: Query, sigma: float = 0.0,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Estimated selectivity per attribute: truth times log-normal noise, clipped to [0, 1]."""
    sel = query.selectivities.astype(float)
    if sigma > 0:
        if rng is None:
            raise ClassifierError("sigma > 0 needs a random generator")
        sel = sel * np.exp(rng.normal(0.0, sigma, size=sel.shape))
    return np.clip(sel, 0.0, 1.0)


@dataclass(frozen=True)
class KnnModel:
    points: np.ndarray
    labels: tuple[str, ...]
    k: int = 5

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) == 0:
            raise ClassifierError("empty classifier model")
        if len(pts) != len(self.labels):
            raise ClassifierError("points and labels differ in length")
        if self.k < 1 or self.k % 2 == 0:
            raise ClassifierError(f"k must be a positive odd number, got {self.k}")
        if self.k > len(self.labels):
            raise ClassifierError(f"k={self.k} exceeds the {len(self.labels)} training points")
        bad = set(self.labels) - set(ROUTES)
        if bad:
            raise ClassifierError(f"unknown route labels {sorted(bad)}")

    def to_dict(self) -> dict:
        return {"k": self.k,
                "points": [{"features": p.tolist(), "label": lab}
                           for p, lab in zip(self.points, self.labels)]}

    @classmethod
    def from_dict(cls, d: dict) -> "KnnModel":
        try:
            pts = d["points"]
            return cls(np.array([p["features"] for p in pts], dtype=float),
                       [p["label"] for p in pts], int(d["k"]))
        except (KeyError, TypeError) as exc:
            raise ClassifierError(f"malformed classifier model ({exc})") from None


def fit_knn(samples: Sequence[tuple[np.ndarray, str]], k: int = 5) -> KnnModel:
    if not samples:
        raise ClassifierError("empty classifier model")
    return KnnModel(np.stack([f for f, _ in samples]), [lab for _, lab in samples], k)


def classify(model: KnnModel, features: np.ndarray) -> str:
    """Majority label of the k nearest points; equal distances go to the earlier point."""
    f = np.asarray(features, dtype=float)
    if f.shape != model.points.shape[1:]:
        raise ClassifierError(f"expected {model.points.shape[1]} features, got {f.shape}")
    d = np.sqrt(((model.points - f) ** 2).sum(axis=1))
    nearest = np.argsort(d, kind="stable")[:model.k]
    votes = sum(model.labels[i] == MDP for i in nearest)
    return MDP if 2 * votes > model.k else BASELINE


def baseline_outcome(query: Query | int, table: PlanTimeTable, tau: float,
                     planning_ms: float = 0.0,
                     rng: np.random.Generator | None = None) -> DecisionOutcome:
    """Send the query unchanged; ``planning_ms`` is whatever was spent before."""
    qid = query.id if isinstance(query, Query) else int(query)
    if rng is None:
        rng = _run_rng(0, qid)
    t_hat = true_execution_time(table, qid, IDENTITY, rng)
    return DecisionOutcome(qid, IDENTITY, planning_ms, t_hat, quality_of(table, qid, IDENTITY),
                           Termination.NONE, [], [], tau)


def _feature_rng(seed: int, qid: int) -> np.random.Generator:
    from .qnet import query_rng
    return query_rng(seed, qid, stream=3)


def _run_rng(seed: int, qid: int) -> np.random.Generator:
    from .qnet import query_rng
    return query_rng(seed, qid, stream=1)


def label_training_queries(workload: Sequence[Query], net, table: PlanTimeTable, qte: Qte,
                           tau: float, *, sigma: float = 0.0,
                           indices: Sequence[int] | None = None,
                           seed: int = 0) -> list[tuple[np.ndarray, str]]:
    """Label each query with the route whose total response time is lower (ties: baseline)."""
    table.check_covers(workload)
    out = []
    for q in workload:
        base = baseline_outcome(q, table, tau, rng=_run_rng(seed, q.id))
        agent = rewrite_online(q, net, table, qte, tau, _run_rng(seed, q.id), indices=indices)
        label = MDP if agent.total_ms < base.total_ms else BASELINE
        out.append((extract_features(q, sigma, _feature_rng(seed, q.id)), label))
    return out


def hybrid_route(query: Query, model: KnnModel, net, table: PlanTimeTable, qte: Qte,
                 tau: float, *, sigma: float = 0.0, cost_ms: float = CLASSIFIER_COST_MS,
                 indices: Sequence[int] | None = None, seed: int = 0) -> DecisionOutcome:
    route = classify(model, extract_features(query, sigma, _feature_rng(seed, query.id)))
    rng = _run_rng(seed, query.id)
    if route == BASELINE:
        return baseline_outcome(query, table, tau, cost_ms, rng)
    return rewrite_online(query, net, table, qte, tau, rng, indices=indices, elapsed=cost_ms)


def save_model(model: KnnModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n")


def load_model(path: str | Path) -> KnnModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ClassifierError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return KnnModel.from_dict(d)
