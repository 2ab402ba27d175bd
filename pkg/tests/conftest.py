from __future__ import annotations

import numpy as np
import pytest

from qrewrite.qte import Qte, StatCostModel
from qrewrite.sim_env import EnvironmentConfig, PlanTimeTable, SynthesisProfile, synthesize_plan_times
from qrewrite.workload import (Attribute, QuerySchema, WorkloadGenConfig, enumerate_rewrite_options,
                               generate_workload, twitter_like_schema)


def make_schema(m: int) -> QuerySchema:
    kinds = ("spatial-range", "temporal-range", "keyword", "numeric-range")
    return QuerySchema("t", tuple(Attribute(f"a{i}", kinds[i % 4]) for i in range(m)))


def table_from_ms(options, times_ms, quality=None, query_ids=None, adherence=1.0) -> PlanTimeTable:
    """Hand-built table; ``times_ms`` is (queries x options)."""
    times_ms = np.atleast_2d(np.asarray(times_ms, dtype=float))
    ids = list(query_ids) if query_ids is not None else list(range(len(times_ms)))
    q = np.ones_like(times_ms) if quality is None else np.atleast_2d(quality)
    return PlanTimeTable(ids, options, np.rint(times_ms * 1000).astype(np.int64), q, adherence)


def exact_qte(options, unit=40.0, overhead=10.0) -> Qte:
    """Accurate estimator with the cost noise switched off."""
    return Qte(options, cost_model=StatCostModel(unit, overhead), cost_noise=None)


@pytest.fixture(scope="session")
def tweets_env():
    """Small 8-option environment used by several module tests."""
    schema = twitter_like_schema()
    queries = generate_workload(WorkloadGenConfig(120, schema, seed=11))
    options = enumerate_rewrite_options(schema)
    table = synthesize_plan_times(queries, schema, options, EnvironmentConfig(
        profile=SynthesisProfile(optimizer_error=0.9), seed=11))
    return schema, queries, options, table


def ranked_net(n: int, order):
    """Q-network whose greedy choice follows ``order`` regardless of the state."""
    from qrewrite.qnet import QNetwork

    net = QNetwork(n)
    for p in net.params():
        p[...] = 0.0
    for rank, a in enumerate(order):
        net.biases[-1][a] = float(len(order) - rank)
    return net
