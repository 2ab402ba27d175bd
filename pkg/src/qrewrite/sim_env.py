"""Simulated database: per-plan execution times and result quality.

The table built here plays the role of the backend database.  Every
(query, rewrite option) pair gets a ground-truth execution time, stored in
integer microseconds, and a result quality in [0, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .workload import Query, QuerySchema, RewriteOption

IDENTITY = 0


class MissingEntryError(KeyError):
    """Lookup of a (query, option) pair that the table does not cover."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing environment entry"


@dataclass
class SynthesisProfile:
    """Knobs of the per-operator cost model used to synthesize plan times."""

    base_ms: float = 15.0
    full_scan_ms: float = 1400.0
    # cost of scanning one attribute's index when the condition selects everything
    index_ms: dict[str, float] = field(default_factory=dict)
    default_index_ms: float = 6000.0
    fetch_ms: float = 1_000_000.0
    intersect_ms: float = 50.0
    plan_noise_sigma: float = 0.35
    # probability the optimizer's own plan is far slower than the best hinted plan
    optimizer_error: float = 0.0
    error_factor: tuple[float, float] = (3.0, 10.0)
    join_ms: dict[str, float] = field(
        default_factory=lambda: {"nest-loop": 40.0, "hash": 120.0, "merge": 80.0})
    join_noise_sigma: float = 0.8
    approx_noise_sigma: float = 0.05
    quality_kappa: float = 0.3

    def __post_init__(self):
        self.error_factor = tuple(self.error_factor)
        if not 0.0 <= self.optimizer_error <= 1.0:
            raise ValueError("optimizer_error must be in [0, 1]")
        if self.quality_kappa < 0:
            raise ValueError("quality_kappa must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisProfile":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class EnvironmentConfig:
    tau_ms: float = 500.0
    hint_adherence_prob: float = 1.0
    profile: SynthesisProfile = field(default_factory=SynthesisProfile)
    seed: int = 0

    def __post_init__(self):
        if self.tau_ms <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.hint_adherence_prob <= 1.0:
            raise ValueError("hint_adherence_prob must be in [0, 1]")


def quality_law(fraction: float, kappa: float = 0.3) -> float:
    """Quality of an approximate result computed on ``fraction`` of the data."""
    return float(fraction) ** kappa


class PlanTimeTable:
    """Immutable ground truth for every (query, rewrite option) pair."""

    def __init__(self, query_ids: Sequence[int], options: Sequence[RewriteOption],
                 times_us: np.ndarray, quality: np.ndarray, hint_adherence_prob: float = 1.0):
        times_us = np.asarray(times_us, dtype=np.int64)
        quality = np.asarray(quality, dtype=float)
        if times_us.shape != (len(query_ids), len(options)) or quality.shape != times_us.shape:
            raise ValueError("table shape does not match queries x options")
        if (times_us <= 0).any():
            raise ValueError("execution times must be positive")
        if not options or not options[IDENTITY].is_identity:
            raise ValueError("option 0 must be the identity rewrite option")
        self.query_ids = tuple(int(q) for q in query_ids)
        self.options = tuple(options)
        self._row = {q: i for i, q in enumerate(self.query_ids)}
        self.times_us = times_us
        self.times_us.setflags(write=False)
        self.quality = quality
        self.quality.setflags(write=False)
        self.hint_adherence_prob = float(hint_adherence_prob)
        # for each option, the option with the same approximation and no hints
        self._fallback = np.array([self._unhinted(o) for o in self.options])

    def _unhinted(self, ro: RewriteOption) -> int:
        for j, o in enumerate(self.options):
            if not o.hint_set and o.join_method is None and o.approx == ro.approx:
                return j
        return IDENTITY

    @property
    def n_options(self) -> int:
        return len(self.options)

    @property
    def hint_indices(self) -> list[int]:
        return [i for i, o in enumerate(self.options) if o.is_exact]

    @property
    def approx_indices(self) -> list[int]:
        return [i for i, o in enumerate(self.options) if not o.is_exact]

    def row(self, query_id: int) -> int:
        try:
            return self._row[int(query_id)]
        except KeyError:
            raise MissingEntryError(f"query {query_id} is not covered by the environment") from None

    def covers(self, queries: Sequence[Query]) -> bool:
        return all(int(q.id) in self._row for q in queries)

    def check_covers(self, queries: Sequence[Query]) -> None:
        missing = [q.id for q in queries if int(q.id) not in self._row]
        if missing:
            raise MissingEntryError(f"environment has no entries for queries {missing[:5]}")

    def _check_ro(self, ro: int) -> int:
        if not 0 <= ro < self.n_options:
            raise MissingEntryError(f"rewrite option {ro} is not in the environment")
        return int(ro)

    def time_us(self, query_id: int, ro: int) -> int:
        return int(self.times_us[self.row(query_id), self._check_ro(ro)])

    def time_ms(self, query_id: int, ro: int) -> float:
        return self.time_us(query_id, ro) / 1000.0

    def times_ms(self, query_id: int) -> np.ndarray:
        return self.times_us[self.row(query_id)] / 1000.0

    def fallback_of(self, ro: int) -> int:
        return int(self._fallback[self._check_ro(ro)])

    def subset(self, query_ids: Sequence[int]) -> "PlanTimeTable":
        rows = [self.row(q) for q in query_ids]
        return PlanTimeTable(query_ids, self.options, self.times_us[rows],
                             self.quality[rows], self.hint_adherence_prob)

    def with_adherence(self, p: float) -> "PlanTimeTable":
        return PlanTimeTable(self.query_ids, self.options, self.times_us, self.quality, p)

    def __eq__(self, other):
        return (isinstance(other, PlanTimeTable)
                and self.query_ids == other.query_ids
                and self.options == other.options
                and np.array_equal(self.times_us, other.times_us)
                and np.array_equal(self.quality, other.quality))


def _hinted_time(profile: SynthesisProfile, schema: QuerySchema, sel: dict[str, float],
                 ro: RewriteOption) -> float:
    t = profile.base_ms
    for a in ro.hint_set:
        t += profile.index_ms.get(a, profile.default_index_ms) * sel[a]
    t += profile.intersect_ms * (len(ro.hint_set) - 1)
    t += profile.fetch_ms * math.prod(sel[a] for a in ro.hint_set)
    return t


def synthesize_plan_times(workload: Sequence[Query], schema: QuerySchema,
                          options: Sequence[RewriteOption],
                          config: EnvironmentConfig) -> PlanTimeTable:
    """Build the ground-truth table for ``workload`` over ``options``.

    Hinted plans cost ``base + sum(index scans) + intersections + fetch``,
    where each index scan is proportional to its condition's selectivity
    and the fetch to the product of the hinted selectivities.  The identity
    option is the optimizer's own plan: the cheapest of the full scan and
    every hinted plan, unless an optimizer error (probability
    ``optimizer_error``) inflates it to a multiple of the best hinted plan.
    Approximate options scale the matching exact plan by their fraction.
    """
    prof = config.profile
    options = list(options)
    if not options or not options[IDENTITY].is_identity:
        raise ValueError("option 0 must be the identity rewrite option")
    exact = [i for i, o in enumerate(options) if o.is_exact]
    key = {(o.hint_set, o.join_method): i for i, o in enumerate(options) if o.is_exact}
    rng = np.random.default_rng(config.seed)

    times = np.zeros((len(workload), len(options)))
    quality = np.ones((len(workload), len(options)))
    for r, q in enumerate(workload):
        sel = {c.attr: c.selectivity for c in q.conditions}
        noise = np.exp(rng.normal(0.0, prof.plan_noise_sigma, size=len(options)))
        join_noise = {m: math.exp(rng.normal(0.0, prof.join_noise_sigma))
                      for m in schema.join_methods}
        for i in exact[1:]:
            ro = options[i]
            t = _hinted_time(prof, schema, sel, ro) * noise[i]
            if ro.join_method is not None:
                t += prof.join_ms.get(ro.join_method, 100.0) * join_noise[ro.join_method]
            times[r, i] = t
        full_scan = prof.full_scan_ms * noise[IDENTITY]
        best_hinted = times[r, exact[1:]].min() if len(exact) > 1 else full_scan
        erred = rng.random() < prof.optimizer_error
        factor = rng.uniform(*prof.error_factor)
        if erred:
            times[r, IDENTITY] = best_hinted * factor
        else:
            times[r, IDENTITY] = min(full_scan, best_hinted)
        for i, ro in enumerate(options):
            if ro.is_exact:
                continue
            base = times[r, key[(ro.hint_set, ro.join_method)]]
            jitter = math.exp(rng.normal(0.0, prof.approx_noise_sigma))
            times[r, i] = base * ro.approx.fraction * jitter
            quality[r, i] = quality_law(ro.approx.fraction, prof.quality_kappa)
    times_us = np.maximum(np.rint(times * 1000.0), 1).astype(np.int64)
    return PlanTimeTable([q.id for q in workload], options, times_us, quality,
                         config.hint_adherence_prob)


def true_execution_time(table: PlanTimeTable, query: Query | int, ro: int,
                        rng: np.random.Generator, adherence: float | None = None) -> float:
    """Run the rewritten query; the database ignores the hints with
    probability ``1 - adherence`` and then runs the unhinted plan."""
    qid = query.id if isinstance(query, Query) else query
    p = table.hint_adherence_prob if adherence is None else adherence
    t = table.time_ms(qid, ro)
    if p >= 1.0:
        return t
    if rng.random() < p:
        return t
    return table.time_ms(qid, table.fallback_of(ro))


def viable_plan_count(table: PlanTimeTable, query: Query | int, tau: float) -> int:
    if tau <= 0:
        raise ValueError("tau must be positive")
    qid = query.id if isinstance(query, Query) else query
    times = table.times_us[table.row(qid), table.hint_indices]
    if math.isinf(tau):
        return len(times)
    return int((times <= tau * 1000.0).sum())


def quality_of(table: PlanTimeTable, query: Query | int, ro: int) -> float:
    qid = query.id if isinstance(query, Query) else query
    return float(table.quality[table.row(qid), table._check_ro(ro)])


def save_table(table: PlanTimeTable, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "ro_index", "time_us", "quality"])
        for r, qid in enumerate(table.query_ids):
            for i in range(table.n_options):
                w.writerow([qid, i, int(table.times_us[r, i]), repr(float(table.quality[r, i]))])
    meta = {"options": [o.to_dict() for o in table.options],
            "hint_adherence_prob": table.hint_adherence_prob}
    options_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def options_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".options.json")


def load_table(path: str | Path) -> PlanTimeTable:
    path = Path(path)
    meta = json.loads(options_path(path).read_text())
    options = [RewriteOption.from_dict(d) for d in meta["options"]]
    rows: dict[int, dict[int, tuple[int, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["query_id", "ro_index", "time_us", "quality"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.setdefault(int(rec["query_id"]), {})[int(rec["ro_index"])] = (
                int(rec["time_us"]), float(rec["quality"]))
    qids = list(rows)
    times = np.zeros((len(qids), len(options)), dtype=np.int64)
    quality = np.zeros((len(qids), len(options)))
    for r, q in enumerate(qids):
        if len(rows[q]) != len(options):
            raise ValueError(f"{path}: query {q} has {len(rows[q])} entries, expected {len(options)}")
        for i, (t, f) in rows[q].items():
            times[r, i], quality[r, i] = t, f
    return PlanTimeTable(qids, options, times, quality, meta.get("hint_adherence_prob", 1.0))


def profile_to_dict(profile: SynthesisProfile) -> dict:
    d = asdict(profile)
    d["error_factor"] = list(profile.error_factor)
    return d
