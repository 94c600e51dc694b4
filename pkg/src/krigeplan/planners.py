"""Waypoint planners driven by kriging variance, and the mission loop.

Every planner picks an unvisited cell.  Randomness enters only through the
generator handed over in the planner context; missions derive one
substream per (mission seed, step, planner id) so that alternative planners
evaluated at the same step never perturb each other.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .field import FieldInstance, rmse
from .kriging import (PredictionMap, SampleSet, VariogramParams, fit_samples,
                      noisy_kv, predict_map)

SEED_LOCATIONS = ((1, 1), (2, 2), (3, 3))
DEFAULT_BUDGET = 15
REFERENCE_GRID = 32

PLANNER_IDS = {"Rand": 1, "GS": 2, "GS-TSP": 3, "LS-1": 11, "LS-2": 12, "LS-3": 13}

# gamma(0)=0 makes any parameters give the constant prediction for a lone sample
_PLACEHOLDER_PARAMS = VariogramParams(1.0, 1.0, 0.0)


class PlanningError(RuntimeError):
    pass


def step_rng(seed: int, t: int, planner_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(t), int(planner_id)])


# ---------------------------------------------------------------------------
# Mission state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MissionState:
    """Everything the robot knows after ``t`` observations."""

    shape: tuple
    samples: SampleSet = field(default_factory=SampleSet)
    params: VariogramParams | None = None
    pmap: PredictionMap | None = None

    @property
    def t(self) -> int:
        return len(self.samples)

    @property
    def path(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in self.samples.locations]

    @property
    def position(self) -> tuple[int, int]:
        return self.path[-1]

    @property
    def visited(self) -> frozenset:
        return frozenset(self.path)

    def observe(self, loc, value: float) -> "MissionState":
        samples = self.samples.append(loc, value)
        params = fit_samples(samples) if len(samples) >= 2 else _PLACEHOLDER_PARAMS
        h, w = self.shape
        return MissionState(self.shape, samples, params, predict_map(samples, h, w, params))


@dataclass
class PlannerContext:
    position: tuple
    visited: frozenset
    pmap: PredictionMap
    rng: np.random.Generator
    shape: tuple

    def __post_init__(self):
        if self.position not in self.visited:
            raise ValueError("current position must be in the visited set")

    @classmethod
    def from_state(cls, state: MissionState, rng) -> "PlannerContext":
        return cls(state.position, state.visited, state.pmap, rng, state.shape)

    def unvisited_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for r, c in self.visited:
            mask[r, c] = False
        return mask


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def path_length(path: Sequence) -> float:
    if len(path) < 1:
        raise ValueError("path needs at least one waypoint")
    pts = np.asarray(path, dtype=float).reshape(-1, 2)
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def _length(tour) -> float:
    return sum(math.dist(a, b) for a, b in zip(tour, tour[1:]))


def nearest_neighbor_order(points, start) -> list:
    remaining = [tuple(p) for p in points]
    cur = tuple(start)
    tour = [cur]
    while remaining:
        d = [math.dist(cur, p) for p in remaining]
        cur = remaining.pop(int(np.argmin(d)))
        tour.append(cur)
    return tour


def two_opt(tour: list) -> list:
    """Improve an open path with fixed start by segment reversals until none helps."""
    tour = list(tour)
    n = len(tour)
    improved = True
    while improved:
        improved = False
        for i in range(1, n - 1):
            for j in range(i + 1, n):
                a, b = tour[i - 1], tour[i]
                c = tour[j]
                before = math.dist(a, b)
                after = math.dist(a, c)
                if j + 1 < n:
                    d = tour[j + 1]
                    before += math.dist(c, d)
                    after += math.dist(b, d)
                if after < before - 1e-12:
                    tour[i:j + 1] = tour[i:j + 1][::-1]
                    improved = True
    return tour


def or_opt(tour: list, max_seg: int = 3) -> tuple[list, bool]:
    """Best single relocation of a segment (1..max_seg stops, either direction)."""
    n = len(tour)
    best, best_len = None, _length(tour) - 1e-12
    for seg in range(1, min(max_seg, n - 1) + 1):
        for i in range(1, n - seg + 1):
            chunk = tour[i:i + seg]
            rest = tour[:i] + tour[i + seg:]
            for k in range(1, len(rest) + 1):
                if k == i:
                    continue
                for piece in (chunk, chunk[::-1]):
                    cand = rest[:k] + piece + rest[k:]
                    length = _length(cand)
                    if length < best_len:
                        best, best_len = cand, length
    return (best, True) if best is not None else (tour, False)


def _local_search(tour: list) -> list:
    tour = two_opt(tour)
    moved = True
    while moved:
        tour, moved = or_opt(tour)
        if moved:
            tour = two_opt(tour)
    return tour


def tsp_order(points, start) -> list:
    """Open path from ``start`` through all points.

    Nearest-neighbour construction followed by alternating 2-opt and Or-opt
    until neither improves.  The construction is restarted once per possible
    first stop and the shortest result kept, so the answer is never longer
    than the plain nearest-neighbour path and is 2-opt locally optimal.
    """
    pts = [tuple(p) for p in points]
    if not pts:
        raise ValueError("need at least one point")
    start = tuple(start)
    best = _local_search(nearest_neighbor_order(pts, start))
    best_len = _length(best)
    for k, first in enumerate(pts):
        cand = _local_search([start] + nearest_neighbor_order(pts[:k] + pts[k + 1:], first))
        cand_len = _length(cand)
        if cand_len < best_len - 1e-12:
            best, best_len = cand, cand_len
    return best


def brute_force_tsp(points, start) -> tuple[list, float]:
    """Exact open-path optimum by enumerating permutations; small inputs only."""
    best, best_len = None, math.inf
    for perm in itertools.permutations([tuple(p) for p in points]):
        cand = [tuple(start), *perm]
        length = _length(cand)
        if length < best_len:
            best, best_len = cand, length
    return best, best_len


# ---------------------------------------------------------------------------
# Planners
# ---------------------------------------------------------------------------

def _argmax_masked(values: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    masked = np.where(mask, values, -np.inf)
    idx = int(np.argmax(masked))  # first occurrence in row-major order
    return divmod(idx, values.shape[1])


def _require_unvisited(ctx) -> np.ndarray:
    mask = ctx.unvisited_mask()
    if not mask.any():
        raise PlanningError("no unvisited cells left")
    return mask


def plan_random(ctx: PlannerContext) -> tuple[int, int]:
    mask = _require_unvisited(ctx)
    cells = np.flatnonzero(mask)
    return divmod(int(cells[ctx.rng.integers(len(cells))]), ctx.shape[1])


def plan_gs(ctx: PlannerContext) -> tuple[int, int]:
    mask = _require_unvisited(ctx)
    return _argmax_masked(noisy_kv(ctx.pmap.variance, ctx.rng), mask)


def plan_ls(ctx: PlannerContext, radius: float) -> tuple[int, int]:
    if not radius > 0:
        raise ValueError("radius must be positive")
    mask = _require_unvisited(ctx)
    kv = noisy_kv(ctx.pmap.variance, ctx.rng)  # one draw per decision
    h, w = ctx.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist = np.hypot(rr - ctx.position[0], cc - ctx.position[1])
    while True:
        cand = mask & (dist <= radius)
        if cand.any():
            return _argmax_masked(kv, cand)
        radius *= 2.0


@dataclass(frozen=True)
class TspQueue:
    pending: tuple = ()
    origin_tags: tuple = ()

    def __post_init__(self):
        if len(self.pending) != len(self.origin_tags):
            raise ValueError("pending and origin_tags differ in length")
        if len(set(self.pending)) != len(self.pending):
            raise ValueError("duplicate queue entries")

    def push(self, loc, tag) -> "TspQueue":
        if loc in self.pending:
            return self
        return TspQueue(self.pending + (loc,), self.origin_tags + (tag,))

    def pop(self, loc) -> tuple["TspQueue", str]:
        k = self.pending.index(loc)
        return (TspQueue(self.pending[:k] + self.pending[k + 1:],
                         self.origin_tags[:k] + self.origin_tags[k + 1:]),
                self.origin_tags[k])

    def without(self, visited) -> "TspQueue":
        keep = [k for k, p in enumerate(self.pending) if p not in visited]
        return TspQueue(tuple(self.pending[k] for k in keep), tuple(self.origin_tags[k] for k in keep))


def plan_gs_tsp(ctx: PlannerContext, queue: TspQueue | None, q_init: int = 5):
    """One GS-TSP decision; returns (waypoint, updated queue, origin tag of waypoint).

    The first call seeds the queue with ``q_init`` random unvisited cells.
    Every call adds the current noisy-KV global maximum, re-orders the queue
    as an open tour from the robot and pops the first stop.
    """
    mask = _require_unvisited(ctx)
    if queue is None:
        cells = np.flatnonzero(mask)
        pick = ctx.rng.choice(len(cells), size=min(q_init, len(cells)), replace=False)
        locs = [divmod(int(cells[k]), ctx.shape[1]) for k in pick]
        queue = TspQueue(tuple(locs), ("random_init",) * len(locs))
    queue = queue.without(ctx.visited)
    queue = queue.push(plan_gs(ctx), "kv_selected")
    nxt = tsp_order(list(queue.pending), ctx.position)[1]
    queue, tag = queue.pop(nxt)
    return nxt, queue, tag


def kv_rank_fraction(variance: np.ndarray, loc, mask: np.ndarray) -> float:
    """Rank of ``loc`` by KV among unvisited cells, as a fraction (1/n = top)."""
    v = variance[loc]
    cand = variance[mask]
    return float((np.sum(cand > v) + 1) / len(cand))


class Planner:
    label = "?"

    def __init__(self, label: str | None = None):
        if label is not None:
            self.label = label

    @property
    def planner_id(self) -> int:
        return PLANNER_IDS.get(self.label, 99)

    def reset(self):
        pass

    def __call__(self, ctx: PlannerContext):
        raise NotImplementedError


class RandomPlanner(Planner):
    label = "Rand"

    def __call__(self, ctx):
        return plan_random(ctx)


class GlobalPlanner(Planner):
    label = "GS"

    def __call__(self, ctx):
        return plan_gs(ctx)


class LocalPlanner(Planner):
    def __init__(self, radius: float, label: str):
        super().__init__(label)
        self.radius = radius

    def __call__(self, ctx):
        return plan_ls(ctx, self.radius)


class GsTspPlanner(Planner):
    """GS-TSP with per-mission queue state and visit instrumentation."""

    label = "GS-TSP"

    def __init__(self, q_init: int = 5):
        super().__init__()
        self.q_init = q_init
        self.reset()

    def reset(self):
        self.queue = None
        self.random_origin_visits = 0
        self.kv_ranks = []

    def __call__(self, ctx):
        loc, self.queue, tag = plan_gs_tsp(ctx, self.queue, self.q_init)
        if tag == "random_init":
            self.random_origin_visits += 1
        else:
            self.kv_ranks.append(kv_rank_fraction(ctx.pmap.variance, loc, ctx.unvisited_mask()))
        return loc

    def instrumentation(self) -> dict:
        return {
            "random_origin_visits": self.random_origin_visits,
            "mean_kv_rank": float(np.mean(self.kv_ranks)) if self.kv_ranks else float("nan"),
        }


def ls_radius(level: int, grid_size: int = REFERENCE_GRID) -> float:
    """LS-R searches within R*10 cells on a 32-cell grid, scaled to other grids."""
    return 10.0 * level * grid_size / REFERENCE_GRID


def make_planner(label: str, grid_size: int = REFERENCE_GRID, q_init: int = 5) -> Planner:
    if label == "Rand":
        return RandomPlanner()
    if label == "GS":
        return GlobalPlanner()
    if label == "GS-TSP":
        return GsTspPlanner(q_init)
    if label.startswith("LS-"):
        return LocalPlanner(ls_radius(int(label[3:]), grid_size), label)
    raise ValueError(f"unknown planner {label!r}")


# ---------------------------------------------------------------------------
# Missions
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    action_label: str
    waypoint: tuple
    observation: float
    rmse: float
    cumulative_distance: float

    def to_dict(self):
        return {"t": self.t, "action_label": self.action_label, "waypoint": list(self.waypoint),
                "observation": self.observation, "rmse": self.rmse,
                "cumulative_distance": self.cumulative_distance}


@dataclass
class EpisodeTrace:
    instance_id: str
    policy: str
    seed: int
    steps: list = field(default_factory=list)
    maps: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def path(self):
        return [s.waypoint for s in self.steps]

    @property
    def final_rmse(self) -> float:
        return self.steps[-1].rmse

    @property
    def total_distance(self) -> float:
        return self.steps[-1].cumulative_distance

    @property
    def actions(self):
        return [s.action_label for s in self.steps if s.action_label != "seed"]

    def to_json(self) -> str:
        return json.dumps({"instance_id": self.instance_id, "policy": self.policy, "seed": self.seed,
                           "info": self.info, "steps": [s.to_dict() for s in self.steps]})


class PlannerPolicy:
    """Adapts a single low-level planner to the mission loop."""

    def __init__(self, planner: Planner):
        self.planner = planner
        self.label = planner.label

    def reset(self):
        self.planner.reset()

    def select(self, state: MissionState, t: int, seed: int):
        ctx = PlannerContext.from_state(state, step_rng(seed, t, self.planner.planner_id))
        return self.planner(ctx), self.planner.label

    def instrumentation(self) -> dict:
        fn = getattr(self.planner, "instrumentation", None)
        return fn() if fn else {}


def as_policy(policy, grid_size: int = REFERENCE_GRID):
    if isinstance(policy, str):
        return PlannerPolicy(make_planner(policy, grid_size))
    if isinstance(policy, Planner):
        return PlannerPolicy(policy)
    return policy


def run_mission(instance: FieldInstance, policy, T: int = DEFAULT_BUDGET,
                seed_locs=SEED_LOCATIONS, seed: int = 0, keep_maps: bool = False) -> EpisodeTrace:
    """Visit the seed cells, then plan, observe, refit and re-predict until T samples."""
    truth = instance.truth
    policy = as_policy(policy, truth.shape[1])
    policy.reset()
    trace = EpisodeTrace(instance.id, policy.label, seed)
    state = MissionState(truth.shape)
    dist = 0.0
    for t in range(1, T + 1):
        if t <= len(seed_locs):
            loc, label = tuple(seed_locs[t - 1]), "seed"
        else:
            loc, label = policy.select(state, t, seed)
        loc = (int(loc[0]), int(loc[1]))
        if state.t:
            dist += math.dist(state.position, loc)
        state = state.observe(loc, float(truth[loc]))
        trace.steps.append(StepRecord(t, label, loc, float(truth[loc]),
                                      rmse(state.pmap.mean, truth), dist))
        if keep_maps:
            trace.maps.append(state.pmap)
    if hasattr(policy, "instrumentation"):
        trace.info.update(policy.instrumentation())
    return trace
