"""Queries, rewrite options and synthetic workload generation.

A rewrite option pairs a set of hinted indexes (plus an optional join
method) with an optional approximation rule.  Options are addressed by
their position in the enumerated option space; position 0 is always the
identity option, i.e. the original query sent without hints.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ATTRIBUTE_KINDS = ("keyword", "temporal-range", "spatial-range", "numeric-range")
APPROX_KINDS = ("none", "limit-fraction", "sample-table")


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    # selectivity of the condition at zoom level 0
    base_selectivity: float = 1.0
    # maximum extent in days (or cells) used to derive the zoom range
    max_extent: int = 64

    def __post_init__(self):
        if self.kind not in ATTRIBUTE_KINDS:
            raise WorkloadError(f"unknown attribute kind {self.kind!r}")
        if not 0.0 < self.base_selectivity <= 1.0:
            raise WorkloadError(f"base selectivity of {self.name} must be in (0, 1]")
        if self.max_extent < 1:
            raise WorkloadError(f"max extent of {self.name} must be >= 1")

    @property
    def max_zoom(self) -> int:
        return max_zoom_level(self.max_extent)


@dataclass(frozen=True)
class QuerySchema:
    name: str
    attributes: tuple[Attribute, ...]
    join_arms: int = 0
    join_methods: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "join_methods", tuple(self.join_methods))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise WorkloadError("attribute names must be unique")
        if (self.join_arms > 0) != bool(self.join_methods):
            raise WorkloadError("join_methods must be non-empty iff join_arms > 0")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "attributes": [
                {"name": a.name, "kind": a.kind, "base_selectivity": a.base_selectivity,
                 "max_extent": a.max_extent}
                for a in self.attributes
            ],
            "join_arms": self.join_arms,
            "join_methods": list(self.join_methods),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuerySchema":
        return cls(
            name=d.get("name", "schema"),
            attributes=tuple(Attribute(**a) for a in d["attributes"]),
            join_arms=int(d.get("join_arms", 0)),
            join_methods=tuple(d.get("join_methods", ())),
        )


@dataclass(frozen=True)
class Condition:
    attr: str
    zoom: int
    selectivity: float


@dataclass(frozen=True)
class Query:
    id: int
    conditions: tuple[Condition, ...]
    schema_ref: str = "schema"

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        for c in self.conditions:
            if not 0.0 <= c.selectivity <= 1.0:
                raise WorkloadError(f"query {self.id}: selectivity of {c.attr} outside [0, 1]")

    def selectivity(self, attr: str) -> float:
        for c in self.conditions:
            if c.attr == attr:
                return c.selectivity
        raise KeyError(attr)

    @property
    def selectivities(self) -> np.ndarray:
        return np.array([c.selectivity for c in self.conditions], dtype=float)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "conditions": [
                {"attr": c.attr, "zoom": c.zoom, "selectivity": c.selectivity}
                for c in self.conditions
            ],
            "schema_ref": self.schema_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        return cls(
            id=int(d["id"]),
            conditions=tuple(Condition(c["attr"], int(c["zoom"]), float(c["selectivity"]))
                             for c in d["conditions"]),
            schema_ref=d.get("schema_ref", "schema"),
        )


@dataclass(frozen=True)
class ApproxRule:
    kind: str = "none"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in APPROX_KINDS:
            raise WorkloadError(f"unknown approximation kind {self.kind!r}")
        if not 0.0 < self.param <= 1.0:
            raise WorkloadError("approximation parameter must be in (0, 1]")

    @property
    def is_exact(self) -> bool:
        return self.kind == "none"

    @property
    def fraction(self) -> float:
        return 1.0 if self.is_exact else self.param


NO_APPROX = ApproxRule()


@dataclass(frozen=True)
class RewriteOption:
    hint_set: tuple[str, ...] = ()
    join_method: str | None = None
    approx: ApproxRule = NO_APPROX

    @property
    def is_identity(self) -> bool:
        return not self.hint_set and self.join_method is None and self.approx.is_exact

    @property
    def is_exact(self) -> bool:
        return self.approx.is_exact

    def label(self) -> str:
        parts = ["+".join(self.hint_set) or "-"]
        if self.join_method:
            parts.append(self.join_method)
        if not self.approx.is_exact:
            parts.append(f"{self.approx.kind}:{self.approx.param:g}")
        return "|".join(parts)

    def to_dict(self) -> dict:
        return {
            "hint_set": list(self.hint_set),
            "join_method": self.join_method,
            "approx": {"kind": self.approx.kind, "param": self.approx.param},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewriteOption":
        return cls(tuple(d["hint_set"]), d.get("join_method"), ApproxRule(**d["approx"]))


@dataclass(frozen=True)
class RewrittenQuery:
    query_id: int
    ro_index: int


def _hint_subsets(names: Sequence[str]) -> list[tuple[str, ...]]:
    # bit j of the subset number selects attribute j
    return [tuple(n for j, n in enumerate(names) if mask >> j & 1)
            for mask in range(2 ** len(names))]


def enumerate_rewrite_options(schema: QuerySchema, approx_rules: Sequence[ApproxRule] = (), *,
                              include_identity: bool = True,
                              include_exact: bool = True) -> list[RewriteOption]:
    """Enumerate the rewrite-option space of ``schema`` in a fixed order.

    Single-table schemas give every subset of hinted indexes (2**m options,
    the empty set first).  Join schemas give every non-empty subset crossed
    with every join method, preceded by the identity option unless
    ``include_identity`` is false.  Each approximation rule is crossed with
    all hint options and appended after the exact options; pass
    ``include_exact=False`` to get only the approximate part.
    """
    if schema is None:
        raise WorkloadError("schema is required")
    names = schema.attribute_names
    if schema.join_arms == 0:
        hints = [RewriteOption(h) for h in _hint_subsets(names)]
        if not include_identity:
            hints = hints[1:]
    else:
        hints = [RewriteOption(h, method)
                 for method in schema.join_methods
                 for h in _hint_subsets(names)[1:]]
        if include_identity:
            hints.insert(0, RewriteOption())
    for rule in approx_rules:
        if rule.is_exact:
            raise WorkloadError("approximation rules must not be 'none'")
    options = list(hints) if include_exact else []
    for rule in approx_rules:
        options.extend(RewriteOption(h.hint_set, h.join_method, rule) for h in hints)
    return options


def max_zoom_level(extent: int) -> int:
    if extent < 1:
        raise WorkloadError("extent must be >= 1")
    return math.ceil(math.log2(extent))


def zoom_range_length(extent: float, zoom: int) -> float:
    """Length of a range condition at ``zoom``: max(extent / 2**zoom, 1)."""
    if extent < 1:
        raise WorkloadError("extent must be >= 1")
    if not 0 <= zoom <= max_zoom_level(math.ceil(extent)):
        raise WorkloadError(f"zoom level {zoom} out of range for extent {extent}")
    return max(extent / 2 ** zoom, 1)


@dataclass
class WorkloadGenConfig:
    num_queries: int
    schema: QuerySchema
    # per-attribute cap on the sampled zoom level; defaults to the attribute's max zoom
    zoom_caps: dict[str, int] = field(default_factory=dict)
    noise_sigma: float = 0.25
    seed: int = 0
    first_id: int = 0

    def __post_init__(self):
        if self.num_queries < 0:
            raise WorkloadError("num_queries must be >= 0")
        if self.noise_sigma < 0:
            raise WorkloadError("noise_sigma must be >= 0")


def generate_workload(config: WorkloadGenConfig) -> list[Query]:
    """Draw ``num_queries`` synthetic queries.

    Every condition gets a uniformly drawn zoom level z in [0, Z] and the
    selectivity ``base * 2**-z * exp(N(0, sigma**2))`` clipped to [0, 1].
    """
    rng = np.random.default_rng(config.seed)
    queries = []
    for k in range(config.num_queries):
        conditions = []
        for attr in config.schema.attributes:
            top = min(config.zoom_caps.get(attr.name, attr.max_zoom), attr.max_zoom)
            z = int(rng.integers(0, top + 1))
            noise = math.exp(rng.normal(0.0, config.noise_sigma)) if config.noise_sigma else 1.0
            sel = min(max(attr.base_selectivity * 2.0 ** -z * noise, 0.0), 1.0)
            conditions.append(Condition(attr.name, z, sel))
        queries.append(Query(config.first_id + k, tuple(conditions), config.schema.name))
    return queries


def split_workload(queries: Sequence[Query], ratios: Sequence[float], seed: int = 0):
    """Shuffle and cut ``queries`` into (train, valid, eval) by ``ratios``."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise WorkloadError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise WorkloadError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(queries)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = min(int(round(ratios[1] * n)), n - n_train)
    picked = [queries[i] for i in order]
    return (picked[:n_train], picked[n_train:n_train + n_valid], picked[n_train + n_valid:])


def save_workload(queries: Sequence[Query], path: str | Path) -> None:
    records = [q.to_dict() for q in sorted(queries, key=lambda q: q.id)]
    Path(path).write_text(json.dumps(records, indent=1) + "\n")


def load_workload(path: str | Path) -> list[Query]:
    return [Query.from_dict(d) for d in json.loads(Path(path).read_text())]


def load_schema(path: str | Path) -> QuerySchema:
    return QuerySchema.from_dict(json.loads(Path(path).read_text()))


def twitter_like_schema() -> QuerySchema:
    """Three filtering attributes of a geo-tagged message table."""
    return QuerySchema(
        name="tweets",
        attributes=(
            Attribute("coordinates", "spatial-range", base_selectivity=1.0, max_extent=512),
            Attribute("created_at", "temporal-range", base_selectivity=1.0, max_extent=448),
            Attribute("text", "keyword", base_selectivity=0.05, max_extent=256),
        ),
    )
