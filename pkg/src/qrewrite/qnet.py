"""Q-network, replay memory and deep Q-learning for the planning MDP.

The network is a plain numpy MLP: input of width 2n+1, two ReLU hidden
layers of the same width, and a linear output with one Q-value per
rewrite option.  Gradients are computed by hand.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .mdp import Episode, QualityRewardConfig, quality_reward, reward, select_action
from .qte import EMPTY_CACHE, Qte
from .sim_env import PlanTimeTable, quality_of, true_execution_time
from .workload import Query

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qrewrite-qnet"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class QNetwork:
    """Two-hidden-layer ReLU MLP mapping a normalized state to Q-values."""

    def __init__(self, n_actions: int, hidden: int | None = None,
                 rng: np.random.Generator | int | None = 0, tau: float = 500.0):
        if n_actions < 1:
            raise ValueError("need at least one action")
        self.n_actions = n_actions
        self.tau = float(tau)
        d = 2 * n_actions + 1
        h = hidden or d
        dims = [d, h, h, n_actions]
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "QNetwork":
        other = object.__new__(QNetwork)
        other.n_actions = self.n_actions
        other.tau = self.tau
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {x.shape[-1]}")
        if not np.isfinite(x).all():
            raise ValueError("network input must be finite")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Q-values for one state (shape (d,)) or a batch (shape (B, d))."""
        a = self._check(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if k < last:
                a = np.maximum(a, 0.0)
        return a

    def loss_and_grads(self, x: np.ndarray, actions: np.ndarray, targets: np.ndarray):
        """Mean of (Q(s, a) - y)**2 over the batch and its gradient per parameter."""
        x = self._check(np.atleast_2d(x))
        actions = np.asarray(actions, dtype=int)
        targets = np.asarray(targets, dtype=float)
        acts = [x]
        pre = []
        a = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0) if k < last else z
            acts.append(a)
        batch = np.arange(len(x))
        err = a[batch, actions] - targets
        loss = float(np.mean(err ** 2))
        delta = np.zeros_like(a)
        delta[batch, actions] = 2.0 * err / len(x)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for k in range(last, -1, -1):
            grads_w[k] = delta.T @ acts[k]
            grads_b[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k]) * (pre[k - 1] > 0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads += [gw, gb]
        return loss, grads


@dataclass
class Experience:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    reward: float
    terminal: bool
    # unexplored options in next_state, used to mask the Bellman max
    next_remaining: np.ndarray


class ReplayMemory:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[Experience] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)

    def push(self, exp: Experience) -> None:
        self._buf.append(exp)

    def sample(self, size: int, rng: np.random.Generator) -> list[Experience]:
        size = min(size, len(self._buf))
        idx = rng.choice(len(self._buf), size=size, replace=False)
        return [self._buf[i] for i in idx]


def bellman_targets(batch: Sequence[Experience], net: QNetwork, gamma: float) -> np.ndarray:
    rewards = np.array([e.reward for e in batch], dtype=float)
    live = [k for k, e in enumerate(batch) if not e.terminal and e.next_remaining.any()]
    if gamma == 0 or not live:
        return rewards
    q_next = net.forward(np.stack([batch[k].next_state for k in live]))
    masks = np.stack([batch[k].next_remaining for k in live])
    best = np.where(masks, q_next, -np.inf).max(axis=1)
    rewards[live] += gamma * best
    return rewards


def bellman_target(exp: Experience, net: QNetwork, gamma: float) -> float:
    """``r`` for terminal experiences, else ``r + gamma * max`` over unexplored next actions."""
    return float(bellman_targets([exp], net, gamma)[0])


def sgd_update(net: QNetwork, batch: Sequence[Experience], gamma: float, lr: float) -> float:
    """One SGD step on the squared Bellman error; returns the pre-step loss."""
    if not batch:
        raise TrainingError("empty batch")
    targets = bellman_targets(batch, net, gamma)
    x = np.stack([e.state for e in batch])
    actions = np.array([e.action for e in batch])
    loss, grads = net.loss_and_grads(x, actions, targets)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    for p, g in zip(net.params(), grads):
        p -= lr * g
    return loss


@dataclass
class TrainingConfig:
    gamma: float = 1.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay: float = 0.995
    learning_rate: float = 1e-3
    batch_size: int = 32
    replay_capacity: int = 10_000
    updates_per_query: int = 1
    max_epochs: int = 50
    min_epochs: int = 5
    convergence_threshold: float = 0.01
    convergence_window: int = 3
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError("epsilon must be in [0, 1]")
        if self.convergence_threshold <= 0:
            raise ValueError("convergence threshold must be > 0")

    def epsilon(self, episode: int) -> float:
        return max(self.epsilon_end, self.epsilon_start * self.epsilon_decay ** episode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class EpochLog:
    epoch: int
    total_reward: float
    mean_loss: float
    epsilon: float
    val_vqp: float


@dataclass
class TrainingResult:
    net: QNetwork
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0


# episode_start(query_id, rng) -> (elapsed, cache) to resume a handed-off
# episode, or None to skip the query
EpisodeStart = Callable[[int, np.random.Generator], "tuple[float, frozenset] | None"]


def query_rng(seed: int, query_id: int, stream: int = 0) -> np.random.Generator:
    """Independent random stream for one query, stable under reordering."""
    return np.random.default_rng([int(seed), int(stream), int(query_id)])


def _finish(ep: Episode, table: PlanTimeTable, tau: float, rng: np.random.Generator,
            quality_cfg: QualityRewardConfig | None) -> float:
    local = ep.decision()
    ro = ep.indices[local] if local is not None else 0
    t_hat = true_execution_time(table, ep.query_id, ro, rng)
    if quality_cfg is None:
        return reward(ep.state.elapsed, t_hat, tau)
    return quality_reward(ep.state.elapsed, t_hat, tau, quality_of(table, ep.query_id, ro),
                          quality_cfg)


def run_training_episode(net: QNetwork, query_id: int, table: PlanTimeTable, qte: Qte,
                         tau: float, epsilon: float, rng: np.random.Generator,
                         memory: ReplayMemory, indices: Sequence[int] | None = None,
                         quality_cfg: QualityRewardConfig | None = None,
                         elapsed: float = 0.0, cache: frozenset = EMPTY_CACHE) -> float:
    """Roll out one epsilon-greedy episode, storing its experiences; returns the reward."""
    ep = Episode(query_id, table, qte, tau, indices=indices, elapsed=elapsed, cache=cache)
    r = 0.0
    while not ep.done:
        s = ep.state.vector(tau)
        a = select_action(net.forward(s), ep.remaining, epsilon, rng)
        ep.step(a, rng)
        r = _finish(ep, table, tau, rng, quality_cfg) if ep.done else 0.0
        memory.push(Experience(s, a, ep.state.vector(tau), r, ep.done, ep.remaining.copy()))
    return r


def train_agent(queries: Sequence[Query], table: PlanTimeTable, qte: Qte, tau: float,
                cfg: TrainingConfig = TrainingConfig(), *,
                indices: Sequence[int] | None = None,
                valid_queries: Sequence[Query] | None = None,
                quality_cfg: QualityRewardConfig | None = None,
                episode_start: EpisodeStart | None = None,
                validate: Callable[[QNetwork], tuple[float, float]] | None = None) -> TrainingResult:
    """Deep Q-learning over ``queries``.

    Each epoch shuffles the workload, plays one episode per query and
    takes ``updates_per_query`` SGD steps on replayed experiences after
    each one.  Training stops after ``max_epochs`` or once the epoch's
    total reward improved by less than ``convergence_threshold`` (relative)
    for ``convergence_window`` consecutive epochs.  The returned network
    is the epoch snapshot with the best validation score, compared as
    (VQP, mean reward).
    """
    if not queries:
        raise TrainingError("empty training workload")
    table.check_covers(queries)
    if valid_queries:
        table.check_covers(valid_queries)
    indices = list(indices) if indices is not None else list(range(table.n_options))
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    net = QNetwork(len(indices), cfg.hidden, rng, tau)
    memory = ReplayMemory(cfg.replay_capacity)
    if validate is None:
        from .rewriter import validation_score

        vq = list(valid_queries) if valid_queries else list(queries)

        def validate(candidate: QNetwork) -> tuple[float, float]:
            return validation_score(candidate, vq, table, qte, tau, indices, quality_cfg,
                                    cfg.seed)

    ids = np.array([q.id for q in queries])
    result = TrainingResult(net.copy())
    best_score = (-math.inf, -math.inf)
    episode = 0
    prev_total = None
    stalled = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        losses = []
        for qid in ids[rng.permutation(len(ids))]:
            start = (0.0, EMPTY_CACHE)
            if episode_start is not None:
                start = episode_start(int(qid), rng)
                if start is None:
                    continue
            eps = cfg.epsilon(episode)
            total += run_training_episode(net, int(qid), table, qte, tau, eps, rng, memory,
                                          indices, quality_cfg, *start)
            episode += 1
            for _ in range(cfg.updates_per_query):
                losses.append(sgd_update(net, memory.sample(cfg.batch_size, rng),
                                         cfg.gamma, cfg.learning_rate))
        score = validate(net)
        entry = EpochLog(epoch, total, float(np.mean(losses)) if losses else 0.0,
                         cfg.epsilon(episode), score[0])
        result.log.append(entry)
        log.debug("epoch %d reward %.3f loss %.5f eps %.3f val %.3f", epoch, total,
                  entry.mean_loss, entry.epsilon, score[0])
        if score > best_score:
            best_score = score
            result.net = net.copy()
            result.best_epoch = epoch
        if prev_total is not None:
            gain = (total - prev_total) / max(abs(prev_total), 1e-9)
            stalled = stalled + 1 if gain < cfg.convergence_threshold else 0
        prev_total = total
        if epoch >= cfg.min_epochs and stalled >= cfg.convergence_window:
            break
    result.seconds = time.perf_counter() - started
    return result


def write_training_log(entries: Sequence[EpochLog], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total_reward", "mean_loss", "epsilon", "val_vqp"])
        for e in entries:
            w.writerow([e.epoch, repr(e.total_reward), repr(e.mean_loss), repr(e.epsilon),
                        repr(e.val_vqp)])


def checkpoint_dict(net: QNetwork, indices: Sequence[int] | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "n": net.n_actions,
        "dims": net.dims,
        "tau": net.tau,
        "action_indices": list(indices) if indices is not None else None,
        "layers": [{"weight": w.ravel().tolist(), "bias": b.tolist()}
                   for w, b in zip(net.weights, net.biases)],
    }


def save_checkpoint(net: QNetwork, path: str | Path, indices: Sequence[int] | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(net, indices)) + "\n")


def load_checkpoint(path: str | Path) -> tuple[QNetwork, list[int] | None]:
    """Read a checkpoint; returns the network and its action-to-option map."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path}: corrupt checkpoint at offset {exc.pos} (line {exc.lineno}, "
            f"column {exc.colno}): {exc.msg}") from None
    return checkpoint_from_dict(d, str(path))


def checkpoint_from_dict(d: dict, where: str = "checkpoint") -> tuple[QNetwork, list[int] | None]:
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{where}: not a {CHECKPOINT_FORMAT} file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{where}: checkpoint version {d.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        dims = [int(x) for x in d["dims"]]
        n = int(d["n"])
        if dims[0] != 2 * n + 1 or dims[-1] != n or len(d["layers"]) != len(dims) - 1:
            raise CheckpointError(f"{where}: layer dims {dims} do not match n={n}")
        net = object.__new__(QNetwork)
        net.n_actions = n
        net.tau = float(d["tau"])
        net.weights, net.biases = [], []
        for k, layer in enumerate(d["layers"]):
            w = np.array(layer["weight"], dtype=float)
            b = np.array(layer["bias"], dtype=float)
            if w.size != dims[k + 1] * dims[k] or b.size != dims[k + 1]:
                raise CheckpointError(f"{where}: layer {k} has the wrong number of values")
            net.weights.append(w.reshape(dims[k + 1], dims[k]))
            net.biases.append(b)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{where}: malformed checkpoint ({exc})") from None
    if not all(np.isfinite(p).all() for p in net.params()):
        raise CheckpointError(f"{where}: non-finite weights")
    indices = d.get("action_indices")
    return net, (list(indices) if indices is not None else None)


def config_dict(cfg: TrainingConfig) -> dict:
    return asdict(cfg)
