from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrewrite.sim_env import (IDENTITY, EnvironmentConfig, MissingEntryError, SynthesisProfile,
                              load_table, quality_law, quality_of, save_table,
                              synthesize_plan_times, true_execution_time, viable_plan_count)
from qrewrite.workload import (ApproxRule, Condition, Query, WorkloadGenConfig,
                               enumerate_rewrite_options, generate_workload, twitter_like_schema)

from conftest import make_schema, table_from_ms

SCHEMA = twitter_like_schema()
QUIET = dict(plan_noise_sigma=0.0, approx_noise_sigma=0.0)


def one_query(sel=(1.0, 1.0, 1.0), qid=0):
    return Query(qid, tuple(Condition(a.name, 0, s) for a, s in zip(SCHEMA.attributes, sel)))


def synth(queries, rules=(), seed=0, **profile):
    opts = enumerate_rewrite_options(SCHEMA, rules)
    return synthesize_plan_times(queries, SCHEMA, opts,
                                 EnvironmentConfig(profile=SynthesisProfile(**profile), seed=seed))


class TestSynthesis:
    def test_identity_is_full_scan_when_no_index_helps(self):
        t = synth([one_query()], **QUIET)
        assert t.time_ms(0, IDENTITY) == SynthesisProfile().full_scan_ms

    def test_identity_matches_best_plan_without_optimizer_error(self):
        qs = generate_workload(WorkloadGenConfig(50, SCHEMA, seed=1))
        t = synth(qs, **QUIET)
        for q in qs:
            times = t.times_ms(q.id)
            assert times[IDENTITY] == min(SynthesisProfile().full_scan_ms, times[1:8].min())

    def test_optimizer_error_inflates_identity(self):
        qs = generate_workload(WorkloadGenConfig(50, SCHEMA, seed=1))
        t = synth(qs, optimizer_error=1.0)
        for q in qs:
            times = t.times_us[t.row(q.id)]
            assert times[IDENTITY] >= 3 * times[1:8].min() - 1

    def test_hinted_formula(self):
        q = one_query((0.1, 0.5, 0.02))
        t = synth([q], **QUIET)
        p = SynthesisProfile()
        # option 5 hints coordinates and text
        expected = p.base_ms + p.default_index_ms * (0.1 + 0.02) + p.intersect_ms \
            + p.fetch_ms * 0.1 * 0.02
        assert t.time_ms(0, 5) == pytest.approx(expected, abs=1e-3)

    def test_sample_fraction_scales_time(self):
        qs = generate_workload(WorkloadGenConfig(200, SCHEMA, seed=5))
        t = synth(qs, [ApproxRule("sample-table", 0.2)])
        ratios = np.concatenate([t.times_ms(q.id)[8:] / t.times_ms(q.id)[:8] for q in qs])
        # log-normal jitter with sigma 0.05: practically all ratios within 4 sigma
        assert np.all(np.abs(np.log(ratios / 0.2)) < 4 * 0.05 + 1e-3)
        assert np.median(ratios) == pytest.approx(0.2, rel=0.02)

    def test_same_seed_same_table(self):
        qs = generate_workload(WorkloadGenConfig(30, SCHEMA, seed=5))
        assert synth(qs, seed=3) == synth(qs, seed=3)
        assert not synth(qs, seed=3) == synth(qs, seed=4)

    def test_quality_exact_vs_approximate(self):
        qs = generate_workload(WorkloadGenConfig(10, SCHEMA, seed=5))
        t = synth(qs, [ApproxRule("sample-table", 0.2), ApproxRule("limit-fraction", 0.5)])
        for q in qs:
            for i, o in enumerate(t.options):
                if o.is_exact:
                    assert quality_of(t, q, i) == 1.0
                else:
                    assert quality_of(t, q, i) == pytest.approx(o.approx.param ** 0.3)
                    assert quality_of(t, q, i) < 1.0

    def test_quality_law(self):
        assert quality_law(1.0) == 1.0
        assert quality_law(0.2) == pytest.approx(0.617, abs=1e-3)

    def test_identity_must_come_first(self):
        opts = enumerate_rewrite_options(SCHEMA)[1:]
        with pytest.raises(ValueError):
            synthesize_plan_times([one_query()], SCHEMA, opts, EnvironmentConfig())


class TestExecution:
    opts = enumerate_rewrite_options(make_schema(2))

    def table(self, p):
        return table_from_ms(self.opts, [[1000, 100, 200, 300]], adherence=p)

    def test_full_adherence_is_table_value(self):
        rng = np.random.default_rng(0)
        t = self.table(1.0)
        assert all(true_execution_time(t, 0, 2, rng) == 200 for _ in range(100))

    def test_no_adherence_is_identity_value(self):
        rng = np.random.default_rng(0)
        t = self.table(0.0)
        assert all(true_execution_time(t, 0, 2, rng) == 1000 for _ in range(100))

    def test_half_adherence_mixes(self):
        rng = np.random.default_rng(0)
        t = self.table(0.5)
        draws = np.array([true_execution_time(t, 0, 1, rng) for _ in range(10_000)])
        assert set(draws) == {100.0, 1000.0}
        assert np.mean(draws == 100.0) == pytest.approx(0.5, abs=0.02)

    def test_missing_entries(self):
        t = self.table(1.0)
        with pytest.raises(MissingEntryError):
            true_execution_time(t, 7, 1, np.random.default_rng(0))
        with pytest.raises(MissingEntryError):
            quality_of(t, 0, 9)


class TestViablePlans:
    opts = enumerate_rewrite_options(make_schema(2))

    def test_none_viable(self):
        t = table_from_ms(self.opts, [[900, 800, 700, 600]])
        assert viable_plan_count(t, 0, 500) == 0

    def test_brute_force_example(self):
        t = table_from_ms(self.opts, [[2000, 1300, 450, 300]])
        assert viable_plan_count(t, 0, 500) == 2

    def test_infinite_budget(self):
        t = table_from_ms(self.opts, [[2000, 1300, 450, 300]])
        assert viable_plan_count(t, 0, math.inf) == 4

    def test_only_exact_plans_count(self):
        opts = enumerate_rewrite_options(make_schema(1), [ApproxRule("sample-table", 0.1)])
        t = table_from_ms(opts, [[900, 800, 90, 80]], quality=[[1, 1, .5, .5]])
        assert viable_plan_count(t, 0, 500) == 0

    @settings(max_examples=50)
    @given(st.lists(st.floats(1, 5000), min_size=4, max_size=4),
           st.floats(1, 3000), st.floats(1, 3000))
    def test_monotone_in_budget(self, times, a, b):
        t = table_from_ms(self.opts, [times])
        lo, hi = sorted((a, b))
        assert viable_plan_count(t, 0, lo) <= viable_plan_count(t, 0, hi)

    def test_fixture_quality_value(self):
        opts = enumerate_rewrite_options(make_schema(1), [ApproxRule("sample-table", 0.4)])
        t = table_from_ms(opts, [[900, 800, 360, 320]], quality=[[1, 1, 0.76, 0.76]])
        assert quality_of(t, 0, 3) == 0.76


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        qs = generate_workload(WorkloadGenConfig(15, SCHEMA, seed=9))
        t = synth(qs, [ApproxRule("sample-table", 0.3)])
        save_table(t, tmp_path / "env.csv")
        back = load_table(tmp_path / "env.csv")
        assert back == t
        assert back.hint_adherence_prob == t.hint_adherence_prob
        header = (tmp_path / "env.csv").read_text().splitlines()[0]
        assert header == "query_id,ro_index,time_us,quality"

    def test_incomplete_file_rejected(self, tmp_path):
        t = table_from_ms(enumerate_rewrite_options(make_schema(1)), [[900, 100]])
        save_table(t, tmp_path / "env.csv")
        lines = (tmp_path / "env.csv").read_text().splitlines()
        (tmp_path / "env.csv").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError):
            load_table(tmp_path / "env.csv")

    def test_times_read_only(self):
        t = table_from_ms(enumerate_rewrite_options(make_schema(1)), [[900, 100]])
        with pytest.raises(ValueError):
            t.times_us[0, 0] = 5
