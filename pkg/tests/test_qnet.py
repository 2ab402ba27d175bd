from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrewrite.qnet import (CheckpointError, CheckpointVersionError, Experience, QNetwork,
                           ReplayMemory, TrainingConfig, TrainingError, bellman_target,
                           bellman_targets, load_checkpoint, save_checkpoint, sgd_update,
                           train_agent, write_training_log)

from conftest import exact_qte


def zero_net(n, hidden=None):
    net = QNetwork(n, hidden)
    for p in net.params():
        p[...] = 0.0
    return net


def exp(state, action, reward, next_state=None, terminal=True, remaining=None):
    n = (len(state) - 1) // 2
    return Experience(np.asarray(state, float), action,
                      np.asarray(next_state if next_state is not None else state, float), reward,
                      terminal, np.asarray(remaining if remaining is not None else [False] * n))


def numeric_grads(net, x, actions, targets, h=1e-5):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = net.loss_and_grads(x, actions, targets)[0]
            p[idx] = old - h
            down = net.loss_and_grads(x, actions, targets)[0]
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


class TestForward:
    def test_zero_weights_give_zero(self):
        net = zero_net(3)
        assert list(net.forward(np.ones(7))) == [0.0, 0.0, 0.0]

    def test_dims(self):
        assert QNetwork(8).dims == [17, 17, 17, 8]
        assert QNetwork(4, hidden=32).dims == [9, 32, 32, 4]

    def test_hand_computed(self):
        # n = 1: input width 3, hidden 3
        net = zero_net(1)
        net.weights[0][0] = [1.0, -1.0, 0.0]
        net.weights[0][1] = [-1.0, 0.0, 0.0]
        net.weights[1][0, 0] = 2.0
        net.biases[1][0] = 0.5
        net.weights[2][0, 0] = 3.0
        net.biases[2][0] = -1.0
        # layer1: relu([0.2 - 0.1, -0.2, 0]) = [0.1, 0, 0]; layer2: [0.7, 0, 0]
        assert net.forward(np.array([0.2, 0.1, 0.0]))[0] == pytest.approx(3 * 0.7 - 1)

    def test_batch_matches_single(self):
        net = QNetwork(4, rng=3)
        x = np.random.default_rng(0).uniform(size=(5, 9))
        batch = net.forward(x)
        for row, q in zip(x, batch):
            assert np.allclose(net.forward(row), q)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            QNetwork(3).forward(np.zeros(6))

    def test_non_finite_input(self):
        with pytest.raises(ValueError):
            QNetwork(1).forward(np.array([0.0, np.nan, 0.0]))


class TestBellman:
    def test_terminal_target_is_reward(self):
        assert bellman_target(exp([0.3, 0.1, 0.0], 0, 0.1), QNetwork(1), 1.0) == 0.1

    def test_nonterminal_adds_masked_max(self):
        net = zero_net(2)
        net.biases[2][:] = [0.6, 5.0]
        e = exp([0] * 5, 0, 0.1, terminal=False, remaining=[True, False])
        # action 1 already explored: its large Q-value is ignored
        assert bellman_target(e, net, 1.0) == pytest.approx(0.7)

    def test_gamma_zero(self):
        net = zero_net(2)
        net.biases[2][:] = [0.6, 5.0]
        e = exp([0] * 5, 0, 0.1, terminal=False, remaining=[True, True])
        assert bellman_target(e, net, 0.0) == 0.1

    def test_batch_matches_single(self):
        net = QNetwork(2, rng=1)
        rng = np.random.default_rng(0)
        batch = [exp(rng.uniform(size=5), int(rng.integers(2)), float(rng.normal()),
                     rng.uniform(size=5), bool(k % 2), [True, k % 3 == 0]) for k in range(6)]
        expected = [bellman_target(e, net, 1.0) for e in batch]
        assert np.allclose(bellman_targets(batch, net, 1.0), expected)


class TestUpdate:
    def test_zero_loss_keeps_weights(self):
        net = zero_net(2)
        before = [p.copy() for p in net.params()]
        loss = sgd_update(net, [exp([0.1] * 5, 1, 0.0)], 1.0, 0.1)
        assert loss == 0.0
        assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))

    def test_loss_decreases(self):
        net = QNetwork(3, rng=5)
        batch = [exp(np.full(7, 0.3), 1, 0.8), exp(np.full(7, 0.6), 2, -0.4)]
        first = sgd_update(net, batch, 1.0, 1e-2)
        second = sgd_update(net, batch, 1.0, 1e-2)
        assert second < first

    def test_empty_batch(self):
        with pytest.raises(TrainingError):
            sgd_update(QNetwork(1), [], 1.0, 1e-3)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self):
        net = QNetwork(1)
        net.biases[2][0] = 1e200
        with pytest.raises(TrainingError):
            sgd_update(net, [exp([0, 0, 0], 0, 0.0)], 1.0, 1e-3)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_gradient_check(self, n, seed):
        rng = np.random.default_rng(seed)
        net = QNetwork(n, rng=seed)
        x = rng.uniform(0, 1, size=(4, 2 * n + 1))
        actions = rng.integers(n, size=4)
        targets = rng.normal(size=4)
        _, grads = net.loss_and_grads(x, actions, targets)
        for g, num in zip(grads, numeric_grads(net, x, actions, targets)):
            assert np.allclose(g, num, rtol=1e-4, atol=1e-7)


class TestReplay:
    def test_fifo_eviction(self):
        mem = ReplayMemory(3)
        for k in range(5):
            mem.push(exp([0, 0, 0], 0, float(k)))
        assert [e.reward for e in mem] == [2.0, 3.0, 4.0]

    def test_sample_without_replacement(self):
        mem = ReplayMemory(10)
        for k in range(4):
            mem.push(exp([0, 0, 0], 0, float(k)))
        picked = mem.sample(32, np.random.default_rng(0))
        assert sorted(e.reward for e in picked) == [0.0, 1.0, 2.0, 3.0]

    def test_capacity_positive(self):
        with pytest.raises(ValueError):
            ReplayMemory(0)


class TestEpsilon:
    def test_schedule(self):
        cfg = TrainingConfig()
        assert cfg.epsilon(0) == 1.0
        assert cfg.epsilon(1) == pytest.approx(0.995)
        assert cfg.epsilon(10_000) == 0.05

    @given(st.integers(0, 5000), st.integers(0, 5000))
    def test_monotone(self, a, b):
        cfg = TrainingConfig()
        lo, hi = sorted((a, b))
        assert cfg.epsilon(hi) <= cfg.epsilon(lo)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainingConfig(gamma=1.5)
        with pytest.raises(ValueError):
            TrainingConfig(epsilon_end=-0.1)


class TestTraining:
    CFG = TrainingConfig(max_epochs=3, min_epochs=1, seed=4)

    def test_same_seed_same_weights(self, tweets_env, tmp_path):
        _, queries, options, table = tweets_env
        qte = exact_qte(options)
        runs = [train_agent(queries[:30], table, qte, 500, self.CFG) for _ in range(2)]
        for k, r in enumerate(runs):
            save_checkpoint(r.net, tmp_path / f"c{k}.json")
            write_training_log(r.log, tmp_path / f"l{k}.csv")
        assert (tmp_path / "c0.json").read_bytes() == (tmp_path / "c1.json").read_bytes()
        assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()

    def test_log_and_best_epoch(self, tweets_env):
        _, queries, options, table = tweets_env
        res = train_agent(queries[:30], table, exact_qte(options), 500, self.CFG)
        assert [e.epoch for e in res.log] == [1, 2, 3]
        assert 1 <= res.best_epoch <= 3
        assert all(0.0 <= e.val_vqp <= 1.0 for e in res.log)

    def test_empty_workload(self, tweets_env):
        _, _, options, table = tweets_env
        with pytest.raises(TrainingError):
            train_agent([], table, exact_qte(options), 500, self.CFG)

    def test_subset_indices(self, tweets_env):
        _, queries, options, table = tweets_env
        res = train_agent(queries[:10], table, exact_qte(options), 500, self.CFG,
                          indices=[1, 2, 4])
        assert res.net.n_actions == 3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = QNetwork(8, rng=2)
        save_checkpoint(net, tmp_path / "c.json", indices=list(range(8)))
        back, idx = load_checkpoint(tmp_path / "c.json")
        assert idx == list(range(8))
        assert back.dims == net.dims and back.tau == net.tau
        assert all(np.array_equal(a, b) for a, b in zip(back.params(), net.params()))
        x = np.random.default_rng(0).uniform(size=17)
        assert np.array_equal(back.forward(x), net.forward(x))

    def test_truncated(self, tmp_path):
        save_checkpoint(QNetwork(4), tmp_path / "c.json")
        text = (tmp_path / "c.json").read_text()
        (tmp_path / "c.json").write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(tmp_path / "c.json")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(QNetwork(2), tmp_path / "c.json")
        d = json.loads((tmp_path / "c.json").read_text())
        d["version"] = 99
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "c.json")

    def test_wrong_dims(self, tmp_path):
        save_checkpoint(QNetwork(2), tmp_path / "c.json")
        d = json.loads((tmp_path / "c.json").read_text())
        d["n"] = 3
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.json")
