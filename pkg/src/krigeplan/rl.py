"""High-level controller that picks a local planner at every step.

The MDP state after ``t - 1`` samples is the latest kriging mean and variance,
a one-hot position grid and the progress t/T.  During training each step is
scored against the planners that were *not* chosen ("hallucinated"
alternatives): the sign of the reward says whether the chosen planner led to
the lowest RMSE, its magnitude grows with the current RMSE and with t/T.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import FieldInstance, rmse
from .kriging import PredictionMap
from .nn import DESK_CHANNELS, PAPER_CHANNELS, Adam, QNetSpec, QNetwork, load_checkpoint, save_checkpoint
from .planners import (DEFAULT_BUDGET, SEED_LOCATIONS, MissionState, PlannerContext, make_planner,
                       run_mission, step_rng)

log = logging.getLogger(__name__)

ACTION_SETS = {
    "RL-32": ("LS-3", "LS-2"),
    "RL-21": ("LS-2", "LS-1"),
    "RL-321": ("LS-3", "LS-2", "LS-1"),
}
BETA = 4.0 * math.e
MIXTURE_STREAM = 777


@dataclass(frozen=True)
class MdpState:
    mean: np.ndarray
    variance: np.ndarray
    position: np.ndarray
    t_norm: float

    def __post_init__(self):
        if self.position.sum() != 1 or np.count_nonzero(self.position) != 1:
            raise ValueError("position grid must be one-hot")
        if not 0 < self.t_norm <= 1:
            raise ValueError("t_norm must lie in (0, 1]")

    @property
    def grids(self) -> np.ndarray:
        return np.stack([self.mean, self.variance, self.position])


FIRST_DECISION = len(SEED_LOCATIONS) + 1


def make_state(pmap: PredictionMap, position, t: int, T: int) -> MdpState:
    if not FIRST_DECISION <= t <= T:
        raise ValueError(f"step {t} outside {FIRST_DECISION}..{T}")
    h, w = pmap.shape
    r, c = position
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"position {position} outside {h}x{w} grid")
    onehot = np.zeros((h, w))
    onehot[r, c] = 1.0
    return MdpState(pmap.mean, pmap.variance, onehot, t / T)


@dataclass(frozen=True)
class RewardParams:
    C: float = 1.0
    beta: float = BETA
    denominator_floor: float = 1e-6
    scale: float = 2.0 ** -BETA  # applied by the environment, not by reward()


def sgn(x: float) -> float:
    return 1.0 if x >= 0 else -1.0


def reward(delta: float, rmse_t: float, t_norm: float, params: RewardParams = RewardParams()) -> float:
    if rmse_t < 0:
        raise ValueError("rmse must be non-negative")
    base = max(params.C - rmse_t, params.denominator_floor)
    return t_norm / base**params.beta * sgn(delta)


def _outcome(state: MissionState, planner, truth, seed: int, t: int, cache: dict):
    ctx = PlannerContext.from_state(state, step_rng(seed, t, planner.planner_id))
    loc = tuple(int(v) for v in planner(ctx))
    if loc not in cache:
        nxt = state.observe(loc, float(truth[loc]))
        cache[loc] = (nxt, rmse(nxt.pmap.mean, truth))
    return loc, *cache[loc]


def hallucinate_delta(state: MissionState, chosen: int, planners: Sequence, truth, seed: int,
                      cache: dict | None = None) -> float:
    """RMSE advantage of the chosen planner over the best alternative at this step.

    Every planner draws from its own substream of ``seed``, so evaluating the
    alternatives leaves the chosen branch untouched.  ``state`` is immutable.
    """
    cache = {} if cache is None else cache
    t = state.t + 1
    _, _, chosen_rmse = _outcome(state, planners[chosen], truth, seed, t, cache)
    alts = [_outcome(state, p, truth, seed, t, cache)[2] for i, p in enumerate(planners) if i != chosen]
    if not alts:
        return 0.0
    return min(alts) - chosen_rmse


class IppEnv:
    """Sampling mission seen through the controller's eyes."""

    def __init__(self, actions: Sequence[str], T: int = DEFAULT_BUDGET, seed_locs=SEED_LOCATIONS,
                 reward_params: RewardParams = RewardParams(), training: bool = True):
        if len(set(actions)) != len(actions) or len(actions) < 1:
            raise ValueError("actions must be distinct and non-empty")
        self.actions = tuple(actions)
        self.T = T
        self.seed_locs = tuple(seed_locs)
        self.reward_params = reward_params
        self.training = training
        self.state = None
        self.done = True

    def reset(self, instance: FieldInstance, seed: int) -> MdpState:
        self._truth = instance.truth
        self.instance_id = instance.id
        self.seed = seed
        self.planners = [make_planner(a, instance.truth.shape[1]) for a in self.actions]
        state = MissionState(instance.truth.shape)
        for loc in self.seed_locs:
            state = state.observe(loc, float(self._truth[loc]))
        self.state = state
        self.distance = sum(math.dist(a, b) for a, b in zip(self.seed_locs, self.seed_locs[1:]))
        self.done = state.t >= self.T
        self.history = []
        return self.observation()

    def observation(self) -> MdpState:
        return make_state(self.state.pmap, self.state.position, self.state.t + 1, self.T)

    def step(self, action: int):
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        if not 0 <= action < len(self.planners):
            raise IndexError(f"action {action} outside 0..{len(self.planners) - 1}")
        t = self.state.t + 1
        cache = {}
        loc, nxt, err = _outcome(self.state, self.planners[action], self._truth, self.seed, t, cache)
        delta, r = None, 0.0
        if self.training:
            delta = hallucinate_delta(self.state, action, self.planners, self._truth, self.seed, cache)
            r = self.reward_params.scale * reward(delta, err, t / self.T, self.reward_params)
        self.distance += math.dist(self.state.position, loc)
        self.state = nxt
        self.done = nxt.t >= self.T
        info = {"t": t, "action_label": self.actions[action], "waypoint": loc, "rmse": err,
                "delta": delta, "cumulative_distance": self.distance}
        self.history.append(info)
        return (None if self.done else self.observation()), r, self.done, info


def epsilon_greedy(q_values, epsilon: float, rng: np.random.Generator) -> int:
    q = np.asarray(q_values, dtype=float).reshape(-1)
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


@dataclass
class Transition:
    s: MdpState
    a: int
    r: float
    s_next: MdpState | None
    done: bool


class ReplayBuffer:
    """FIFO buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.items = deque(maxlen=capacity)
        self.rng = rng

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition):
        self.items.append(tr)

    def sample(self, n: int) -> list:
        idx = self.rng.integers(len(self.items), size=n)
        return [self.items[i] for i in idx]


@dataclass
class DqnConfig:
    discount: float = 0.99
    buffer_capacity: int = 50_000
    batch_size: int = 32
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.3
    target_sync_interval: int = 1_000
    learning_rate: float = 1e-4
    total_interactions: int = 100_000
    learning_starts: int = 1_000
    train_freq: int = 1

    def __post_init__(self):
        if not 0 <= self.discount <= 1:
            raise ValueError("discount must lie in [0, 1]")
        for name in ("buffer_capacity", "batch_size", "target_sync_interval", "total_interactions",
                     "train_freq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.epsilon_end <= 1 and 0 <= self.epsilon_start <= 1):
            raise ValueError("epsilon values must lie in [0, 1]")
        if not self.learning_rate > 0 or not 0 < self.epsilon_fraction <= 1:
            raise ValueError("learning_rate and epsilon_fraction must be positive")

    def epsilon(self, step: int) -> float:
        span = self.epsilon_fraction * self.total_interactions
        frac = min(step / span, 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass(frozen=True)
class Profile:
    grid: int
    channels: tuple
    total_interactions: int
    learning_starts: int
    learning_rate: float

    def dqn_config(self, **overrides) -> DqnConfig:
        kw = dict(total_interactions=self.total_interactions, learning_starts=self.learning_starts,
                  learning_rate=self.learning_rate)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return DqnConfig(**kw)


# The desk run has a tenth of the interactions, so it takes larger steps.
PROFILES = {
    "desk": Profile(16, DESK_CHANNELS, 10_000, 500, 1e-3),
    "paper": Profile(32, PAPER_CHANNELS, 100_000, 1_000, 1e-4),
}


def td_update(net: QNetwork, target: QNetwork, opt: Adam, batch: Sequence[Transition],
              discount: float) -> float:
    """One gradient step on the mean squared TD error; returns the pre-step loss."""
    x = np.stack([tr.s.grids for tr in batch])
    tn = np.array([tr.s.t_norm for tr in batch])
    acts = np.array([tr.a for tr in batch])
    y = np.array([tr.r for tr in batch], dtype=float)
    live = [i for i, tr in enumerate(batch) if not tr.done]
    if live:
        x2 = np.stack([batch[i].s_next.grids for i in live])
        tn2 = np.array([batch[i].s_next.t_norm for i in live])
        y[live] += discount * target.forward(x2, tn2).max(axis=1)
    q, cache = net.forward(x, tn, cache=True)
    err = q[np.arange(len(batch)), acts] - y
    dq = np.zeros_like(q)
    dq[np.arange(len(batch)), acts] = 2.0 * err / len(batch)
    opt.step(net.params, net.backward(cache, dq))
    return float(np.mean(err**2))


@dataclass
class TrainResult:
    net: QNetwork
    episode_rewards: list = field(default_factory=list)
    td_losses: list = field(default_factory=list)
    interactions: int = 0
    skipped_updates: int = 0

    def rolling_mean(self, window: int = 20) -> np.ndarray:
        r = np.asarray(self.episode_rewards, dtype=float)
        out = np.empty_like(r)
        for i in range(len(r)):
            out[i] = r[max(0, i - window + 1):i + 1].mean()
        return out


def train_dqn(train_instances: Sequence[FieldInstance], actions: Sequence[str],
              config: DqnConfig = DqnConfig(), reward_params: RewardParams = RewardParams(),
              seed: int = 0, spec: QNetSpec | None = None, T: int = DEFAULT_BUDGET,
              progress_every: int = 0) -> TrainResult:
    """Deep Q-learning with experience replay and a periodically synced target net."""
    if not train_instances:
        raise ValueError("empty training set")
    size = train_instances[0].truth.shape[0]
    spec = spec or QNetSpec(size=size, n_actions=len(actions))
    if spec.n_actions != len(actions):
        raise ValueError("network output size does not match the action set")
    rng = np.random.default_rng(seed)
    net = QNetwork(spec, seed=seed)
    target = net.copy()
    opt = Adam(config.learning_rate)
    buffer = ReplayBuffer(config.buffer_capacity, np.random.default_rng([seed, 1]))
    env = IppEnv(actions, T, reward_params=reward_params, training=True)
    res = TrainResult(net)
    step = 0
    while step < config.total_interactions:
        inst = train_instances[int(rng.integers(len(train_instances)))]
        s = env.reset(inst, seed=int(rng.integers(2**62)))
        total = 0.0
        done = False
        while not done:
            a = epsilon_greedy(net.forward(s.grids, [s.t_norm])[0], config.epsilon(step), rng)
            s_next, r, done, _ = env.step(a)
            buffer.add(Transition(s, a, r, s_next, done))
            total += r
            step += 1
            if step >= config.learning_starts and step % config.train_freq == 0:
                batch = buffer.sample(config.batch_size)
                res.td_losses.append(td_update(net, target, opt, batch, config.discount))
            if step % config.target_sync_interval == 0:
                target = net.copy()
            s = s_next
        res.episode_rewards.append(total)
        if progress_every and len(res.episode_rewards) % progress_every == 0:
            log.info("episode %d  step %d  reward %.4g  rolling %.4g", len(res.episode_rewards), step,
                     total, res.rolling_mean()[-1])
    res.interactions = step
    res.skipped_updates = opt.skipped
    return res


def write_learning_curve(result: TrainResult, path, window: int = 20) -> Path:
    path = Path(path)
    roll = result.rolling_mean(window)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "reward", "rolling_mean"])
        for i, (r, m) in enumerate(zip(result.episode_rewards, roll), 1):
            w.writerow([i, f"{r:.9g}", f"{m:.9g}"])
    return path


def save_controller(path, net: QNetwork, actions: Sequence[str], reward_params: RewardParams,
                    extra: dict | None = None) -> Path:
    meta = {"actions": list(actions), "reward_params": asdict(reward_params), **(extra or {})}
    return save_checkpoint(path, net, meta)


def load_controller(path, expected_fingerprint: str | None = None):
    net, meta = load_checkpoint(path, expected_fingerprint)
    return net, tuple(meta["actions"]), meta


# ---------------------------------------------------------------------------
# Policies for the mission loop
# ---------------------------------------------------------------------------

class ControllerPolicy:
    """Greedy controller: sees only the MDP state, never the ground truth."""

    def __init__(self, net: QNetwork, actions: Sequence[str], label: str = "RL", T: int = DEFAULT_BUDGET):
        if net.spec.n_actions != len(actions):
            raise ValueError("network output size does not match the action set")
        self.net = net
        self.actions = tuple(actions)
        self.label = label
        self.T = T
        self._planners = None

    def reset(self):
        self._planners = None

    def select(self, state: MissionState, t: int, seed: int):
        if self._planners is None:
            self._planners = [make_planner(a, state.shape[1]) for a in self.actions]
        s = make_state(state.pmap, state.position, t, self.T)
        a = int(np.argmax(self.net.forward(s.grids, [s.t_norm])[0]))
        planner = self._planners[a]
        ctx = PlannerContext.from_state(state, step_rng(seed, t, planner.planner_id))
        return planner(ctx), planner.label


class MixturePolicy:
    """Context-free controller drawing planners from fixed probabilities.

    ``probs`` maps planner label -> probability (used at every step), or is a
    list of such mappings, one per decision step.
    """

    def __init__(self, probs, label: str = "empirical-mixture"):
        rows = probs if isinstance(probs, (list, tuple)) else [probs]
        labels = sorted({k for row in rows for k in row})
        table = np.array([[row.get(k, 0.0) for k in labels] for row in rows], dtype=float)
        if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("each probability row must be non-negative and sum to 1")
        self.labels = labels
        self.table = table
        self.label = label
        self._planners = None
        self._first = None

    def reset(self):
        self._planners = None

    def draw(self, rng: np.random.Generator, step_index: int = 0) -> str:
        row = self.table[min(step_index, len(self.table) - 1)]
        return self.labels[int(rng.choice(len(row), p=row))]

    def select(self, state: MissionState, t: int, seed: int):
        if self._planners is None:
            self._planners = {k: make_planner(k, state.shape[1]) for k in self.labels}
            self._first = t
        label = self.draw(step_rng(seed, t, MIXTURE_STREAM), t - self._first)
        planner = self._planners[label]
        ctx = PlannerContext.from_state(state, step_rng(seed, t, planner.planner_id))
        return planner(ctx), label


def empirical_mixture_policy(frequencies, label: str = "empirical-mixture") -> MixturePolicy:
    """Build the context-free baseline from per-step or marginal action frequencies."""
    return MixturePolicy(frequencies, label)


PAPER_MIXTURE = {"LS-2": 0.62, "LS-1": 0.38}


@dataclass
class EvalResult:
    traces: list
    actions: tuple
    mean_rmse: np.ndarray        # per step t = 1..T
    mean_distance: np.ndarray
    action_frequencies: np.ndarray  # rows: decision steps, cols: actions

    @property
    def final_rmse(self) -> float:
        return float(self.mean_rmse[-1])

    @property
    def total_distance(self) -> float:
        return float(self.mean_distance[-1])


def mission_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def action_frequencies(traces, actions: Sequence[str]) -> np.ndarray:
    seqs = [tr.actions for tr in traces]
    n_steps = max(len(s) for s in seqs)
    out = np.zeros((n_steps, len(actions)))
    for seq in seqs:
        for i, a in enumerate(seq):
            out[i, actions.index(a)] += 1
    return out / out.sum(axis=1, keepdims=True)


def evaluate_policy(net: QNetwork, actions: Sequence[str], instances: Sequence[FieldInstance],
                    n_runs: int = 3, T: int = DEFAULT_BUDGET, seed: int = 0, label: str = "RL") -> EvalResult:
    """Greedy rollouts; ground truth is read only to observe visited cells and score RMSE."""
    policy = ControllerPolicy(net, actions, label, T)
    traces = [run_mission(inst, policy, T, seed=mission_seed(seed, label, inst.id, run))
              for inst in instances for run in range(n_runs)]
    rm = np.mean([[s.rmse for s in tr.steps] for tr in traces], axis=0)
    dist = np.mean([[s.cumulative_distance for s in tr.steps] for tr in traces], axis=0)
    return EvalResult(traces, tuple(actions), rm, dist, action_frequencies(traces, list(actions)))
