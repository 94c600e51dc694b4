"""Acceptance checks shared by ``krigeplan selftest`` and the test suite.

Each check returns a :class:`CheckResult`; none of them raise on failure.
Expensive fixtures (the planner suite, the desk-scale controller) are
computed once per process and shared between checks.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import bench
from .field import split_instances, synthetic_suite
from .kriging import (EmpiricalVariogram, SampleSet, VariogramParams, fit_spherical, predict_point,
                      solve_ok_weights, spherical_gamma)
from .nn import Adam, QNetSpec, QNetwork
from .planners import _length, brute_force_tsp, nearest_neighbor_order, run_mission, tsp_order
from .rl import (ACTION_SETS, PROFILES, DqnConfig, MdpState, RewardParams, Transition, evaluate_policy,
                 mission_seed, reward, td_update, train_dqn)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float

    def line(self) -> str:
        ok = self.passed and self.seconds <= self.budget
        timing = f"{self.seconds:.1f}s/{self.budget:g}s"
        return f"{'PASS' if ok else 'FAIL'}  {self.name}: {self.detail} [{timing}]"

    @property
    def ok(self) -> bool:
        return self.passed and self.seconds <= self.budget


def _timed(name, budget, setup=None):
    """Wrap a check; ``setup`` runs before the clock starts (shared fixtures)."""
    def deco(fn):
        def run(*a, **kw):
            try:
                if setup is not None:
                    setup()
            except Exception as exc:
                return CheckResult(name, False, f"setup error: {exc!r}", 0.0, budget)
            t0 = time.perf_counter()
            try:
                passed, detail = fn(*a, **kw)
            except Exception as exc:  # a crash is a failure, reported as such
                passed, detail = False, f"error: {exc!r}"
            return CheckResult(name, bool(passed), detail, time.perf_counter() - t0, budget)
        run.__name__ = fn.__name__
        run.check_name = name
        return run
    return deco


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def ok_oracle(coords, values, target, params: VariogramParams):
    """Ordinary kriging written out element by element and solved by explicit inversion."""
    t = len(coords)
    a = np.zeros((t + 1, t + 1))
    b = np.zeros(t + 1)
    for i in range(t):
        for j in range(t):
            a[i, j] = spherical_gamma(math.dist(coords[i], coords[j]), params)
        a[i, t] = a[t, i] = 1.0
        b[i] = spherical_gamma(math.dist(coords[i], target), params)
    b[t] = 1.0
    sol = np.linalg.inv(a) @ b
    w, lam = sol[:t], sol[t]
    mean = sum(w[i] * values[i] for i in range(t))
    kv = lam + sum(w[i] * b[i] for i in range(t))
    return w, lam, mean, max(kv, 0.0)


def t_tail_quadrature(t: float, df: int) -> float:
    """Two-tailed p by integrating the Student t density numerically."""
    from scipy.integrate import quad

    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)

    def dens(x):
        return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))

    inner, _ = quad(dens, 0.0, abs(t), epsabs=1e-14, epsrel=1e-13, limit=200)
    return 1.0 - 2.0 * inner


def numeric_grad(net: QNetwork, grids, tn, dq, name, idx, h=1e-5):
    p = net.params[name]
    old = p[idx]
    p[idx] = old + h
    up = float(np.sum(dq * net.forward(grids, tn)))
    p[idx] = old - h
    down = float(np.sum(dq * net.forward(grids, tn)))
    p[idx] = old
    return (up - down) / (2 * h)


def tiny_net(seed: int = 0) -> tuple:
    """16x16 input, two filters per conv layer, random non-zero biases."""
    spec = QNetSpec(size=16, n_actions=3, channels=(2, 2, 2, 2), hidden=16)
    net = QNetwork(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k in net.params:
        if k.endswith(".b"):
            net.params[k] = rng.normal(0, 0.1, net.params[k].shape)
    grids = rng.random((2, 3, 16, 16))
    tn = np.array([0.3, 0.8])
    dq = rng.normal(size=(2, 3))
    return net, grids, tn, dq


def gradient_check_errors(seed: int = 0, per_group: int = 12) -> dict:
    """Max relative error per parameter group: |a-n| / max(|a|, |n|, 1e-8)."""
    net, grids, tn, dq = tiny_net(seed)
    _, cache = net.forward(grids, tn, cache=True)
    grads = net.backward(cache, dq)
    rng = np.random.default_rng(seed + 2)
    out = {}
    for name, p in net.params.items():
        flat = rng.choice(p.size, size=min(per_group, p.size), replace=False)
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(f, p.shape)
            num = numeric_grad(net, grids, tn, dq, name, idx)
            ana = grads[name][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
        out[name] = worst
    return out


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------

SUITE_METHODS = ("Rand", "GS", "GS-TSP", "LS-1", "LS-2", "LS-3")
SUITE_SIZE = 20
SUITE_SEEDS = 3
DESK_SUITE = 240  # 120 train + 120 test, 16x16


@lru_cache(maxsize=None)
def planner_suite(n: int = SUITE_SIZE, runs: int = SUITE_SEEDS, grid: int = 32):
    """method -> list of traces over n synthetic instances x runs seeds."""
    insts = synthetic_suite(n, seed=0, h=grid, w=grid)
    return {m: [run_mission(inst, m, seed=mission_seed(0, m, inst.id, r)) for r in range(runs) for inst in insts]
            for m in SUITE_METHODS}


@lru_cache(maxsize=None)
def desk_split():
    insts = synthetic_suite(DESK_SUITE, seed=0, h=16, w=16)
    sp = split_instances(insts, DESK_SUITE // 2, DESK_SUITE // 2, seed=0)
    by_id = {i.id: i for i in insts}
    return [by_id[k] for k in sp.train], [by_id[k] for k in sp.test]


@lru_cache(maxsize=None)
def desk_controller(method: str = "RL-21", seed: int = 0):
    prof = PROFILES["desk"]
    train, _ = desk_split()
    cfg = prof.dqn_config()
    spec = QNetSpec(size=prof.grid, n_actions=len(ACTION_SETS[method]), channels=prof.channels)
    t0 = time.perf_counter()
    res = train_dqn(train, ACTION_SETS[method], cfg, RewardParams(), seed=seed, spec=spec)
    return res, time.perf_counter() - t0


def _means(traces):
    return (float(np.mean([tr.final_rmse for tr in traces])), float(np.mean([tr.total_distance for tr in traces])))


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

@_timed("kriging correctness", 5)
def check_kriging_correctness(n_fixtures: int = 50, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = worst_sum = 0.0
    for _ in range(n_fixtures):
        t = int(rng.integers(1, 6))
        cells = rng.choice(32 * 32, size=t + 1, replace=False)
        coords = [(int(c // 32), int(c % 32)) for c in cells[:t]]
        target = (int(cells[t] // 32), int(cells[t] % 32))
        values = rng.normal(size=t).tolist()
        params = VariogramParams(rng.uniform(0.1, 3), rng.uniform(1, 30), rng.uniform(0, 0.5))
        s = SampleSet(coords, values)
        w, lam = solve_ok_weights(s, target, params)
        mean, kv = predict_point(s, target, params)
        ow, olam, omean, okv = ok_oracle(coords, values, target, params)
        worst = max(worst, np.max(np.abs(w - ow)), abs(lam - olam), abs(mean - omean), abs(kv - okv))
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
    return worst < 1e-8 and worst_sum < 1e-8, f"max |diff| {worst:.2e}, max |sum(w)-1| {worst_sum:.2e}"


@_timed("exact interpolation", 10)
def check_exact_interpolation(n_instances: int = 3):
    insts = synthetic_suite(n_instances, seed=7)
    worst_mean = worst_kv = 0.0
    missions = 0
    for inst in insts:
        for m in SUITE_METHODS:
            tr = run_mission(inst, m, seed=mission_seed(7, m, inst.id, 0), keep_maps=True)
            missions += 1
            for k, pmap in enumerate(tr.maps):
                for s in tr.steps[:k + 1]:
                    r, c = s.waypoint
                    worst_mean = max(worst_mean, abs(pmap.mean[r, c] - s.observation))
                    worst_kv = max(worst_kv, pmap.variance[r, c])
    return worst_mean <= 1e-6 and worst_kv <= 1e-8, \
        f"{missions} missions, max |mean-obs| {worst_mean:.2e}, max KV at samples {worst_kv:.2e}"


@_timed("variogram self-consistency", 1)
def check_variogram_recovery():
    truth = VariogramParams(1.0, 10.0, 0.1)
    lags = np.arange(1, 9) * 2.0
    emp = EmpiricalVariogram(tuple(lags), tuple(spherical_gamma(lags, truth)), (30,) * len(lags))
    fit = fit_spherical(emp)
    err = max(abs(a - b) for a, b in zip(fit.as_tuple(), truth.as_tuple()))
    return err < 1e-3, f"fit {tuple(round(float(v), 6) for v in fit.as_tuple())}, max abs error {err:.2e}"


@_timed("architecture arithmetic", 1)
def check_architecture():
    spec = QNetSpec(size=32, n_actions=2)
    shapes = spec.layer_shapes()
    ok = (spec.flatten_len == 1024 and shapes["hidden.w"] == (1024 + 8, 1024) and shapes["out.w"] == (1024, 2))
    return ok, f"flatten {spec.flatten_len}, hidden {shapes['hidden.w']}, out {shapes['out.w']}"


@_timed("gradient check", 30)
def check_gradients():
    errs = gradient_check_errors()
    worst = max(errs.values())
    name = max(errs, key=errs.get)
    return worst < 1e-4, f"max relative error {worst:.2e} ({name})"


@_timed("reward contract", 1)
def check_reward_contract(n: int = 1000, seed: int = 0):
    import mpmath

    rng = np.random.default_rng(seed)
    rp = RewardParams()
    worst = 0.0
    signs_ok = True
    for _ in range(n):
        delta = float(rng.normal())
        if rng.random() < 0.05:
            delta = 0.0
        e = float(rng.uniform(0, 1.2))
        tn = float(rng.uniform(0.05, 1.0))
        r = reward(delta, e, tn, rp)
        signs_ok &= (r > 0) == (delta >= 0)
        expect = tn / max(1.0 - e, rp.denominator_floor) ** (4 * math.e)
        worst = max(worst, abs(abs(r) - expect) / expect)
    mpmath.mp.dps = 50
    oracle = mpmath.mpf(2) ** (4 * mpmath.e)
    spot = reward(0.0, 0.5, 1.0, rp)
    spot_err = float(abs(mpmath.mpf(spot) - oracle) / oracle)
    ok = signs_ok and worst < 1e-12 and spot_err < 1e-6
    return ok, f"signs {'ok' if signs_ok else 'WRONG'}, max rel error {worst:.1e}, " \
               f"spot {spot:.6f} vs {float(oracle):.6f} (rel {spot_err:.1e})"


@_timed("TSP heuristic quality", 10)
def check_tsp(n_sets: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    longer_than_nn = 0
    for _ in range(n_sets):
        k = int(rng.integers(1, 8))
        cells = rng.choice(32 * 32, size=k + 1, replace=False)
        pts = [(int(c // 32), int(c % 32)) for c in cells]
        start, rest = pts[0], pts[1:]
        heur = _length(tsp_order(rest, start))
        _, opt = brute_force_tsp(rest, start)
        nn = _length(nearest_neighbor_order(rest, start))
        worst = max(worst, heur / opt - 1 if opt > 0 else 0.0)
        longer_than_nn += heur > nn + 1e-9
    return worst <= 0.05 and not longer_than_nn, \
        f"worst excess over optimum {100 * worst:.2f}%, longer than NN in {longer_than_nn} sets"


@_timed("trade-off trend", 600)
def check_tradeoff():
    suite = planner_suite()
    m = {k: _means(v) for k, v in suite.items()}
    rm = {k: v[0] for k, v in m.items()}
    dist = {k: v[1] for k, v in m.items()}
    order_ok = dist["LS-1"] < dist["LS-2"] < dist["LS-3"] < dist["GS"]
    gs_ok = rm["GS"] <= rm["LS-1"]
    rand_ok = all(rm["Rand"] > v for k, v in rm.items() if k != "Rand")
    detail = ", ".join(f"{k} {rm[k]:.4f}/{dist[k]:.1f}" for k in SUITE_METHODS)
    return order_ok and gs_ok and rand_ok, f"rmse/distance: {detail}"


@_timed("GS-TSP instrumentation", 600)
def check_gs_tsp():
    suite = planner_suite()
    visits = float(np.mean([tr.info["random_origin_visits"] for tr in suite["GS-TSP"]]))
    ranks = float(np.mean([tr.info["mean_kv_rank"] for tr in suite["GS-TSP"]]))
    d_tsp, d_gs = _means(suite["GS-TSP"])[1], _means(suite["GS"])[1]
    return visits >= 1 and d_tsp < d_gs, \
        f"random-origin visits {visits:.2f}/mission, mean KV rank {ranks:.2f}, distance {d_tsp:.1f} vs GS {d_gs:.1f}"


def overfit_single_transition(max_updates: int = 2000, seed: int = 0):
    """Repeated updates on one transition; returns (updates used, final |TD error|)."""
    prof = PROFILES["desk"]
    spec = QNetSpec(size=prof.grid, n_actions=2, channels=prof.channels)
    net = QNetwork(spec, seed=seed)
    target = net.copy()
    rng = np.random.default_rng(seed)
    pos = np.zeros((16, 16))
    pos[3, 3] = 1
    s = MdpState(rng.random((16, 16)), rng.random((16, 16)) * 0.05, pos, 4 / 15)
    pos2 = np.zeros((16, 16))
    pos2[5, 4] = 1
    s2 = MdpState(rng.random((16, 16)), rng.random((16, 16)) * 0.05, pos2, 5 / 15)
    tr = Transition(s, 1, RewardParams().scale * reward(0.1, 0.2, 4 / 15), s2, False)
    cfg = DqnConfig()
    opt = Adam(cfg.learning_rate)
    y = tr.r + cfg.discount * float(target.forward(s2.grids, [s2.t_norm]).max())
    for k in range(1, max_updates + 1):
        td_update(net, target, opt, [tr], cfg.discount)
        err = abs(float(net.forward(s.grids, [s.t_norm])[0, 1]) - y)
        if err < 1e-3:
            return k, err
    return max_updates, err


@_timed("DQN learning trend", 1200)
def check_dqn_trend():
    updates, err = overfit_single_transition()
    res, secs = desk_controller()
    roll = res.rolling_mean()
    q = len(roll) // 4
    first, last = float(roll[:q].mean()), float(roll[-q:].mean())
    ok = last > first and err < 1e-3
    return ok, (f"rolling reward first quartile {first:.4g}, last quartile {last:.4g} over "
                f"{len(roll)} episodes ({secs:.0f}s); overfit |TD| {err:.1e} after {updates} updates")


@_timed("RL efficiency", 600, setup=lambda: desk_controller())
def check_rl_efficiency(n_runs: int = 3):
    res, _ = desk_controller()
    _, test = desk_split()
    ev = evaluate_policy(res.net, ACTION_SETS["RL-21"], test, n_runs=n_runs, label="RL-21")
    ls2 = [run_mission(inst, "LS-2", seed=mission_seed(0, "LS-2", inst.id, r))
           for inst in test for r in range(n_runs)]
    r_ls2, d_ls2 = _means(ls2)
    ok = ev.total_distance <= d_ls2 and ev.final_rmse <= 1.1 * r_ls2
    return ok, (f"RL-21 rmse {ev.final_rmse:.4f} / distance {ev.total_distance:.1f}; "
                f"LS-2 rmse {r_ls2:.4f} / distance {d_ls2:.1f}; rmse ratio {ev.final_rmse / r_ls2:.3f}")


@_timed("statistics oracle", 1)
def check_statistics():
    p = bench.t_two_tailed_p(2.976, 18)
    oracle = t_tail_quadrature(2.976, 18)
    tt = bench.pooled_t(0.415, 0.014, 10, 0.400, 0.006, 10)
    ok = abs(p - oracle) < 1e-4 and tt.df == 18 and 2.8 <= tt.t <= 3.3
    return ok, f"p {p:.5f} vs quadrature {oracle:.5f}; pooled t {tt.t:.3f}, df {tt.df}"


@_timed("determinism", 600)
def check_determinism(workdir=None):
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        outs = []
        for k in range(2):
            cfg = bench.ExperimentConfig(methods=["Rand", "GS", "GS-TSP", "LS-2", bench.MIXTURE],
                                         synthetic_n=8, n_train=4, n_test=4, runs=2, grid=16,
                                         out_dir=str(Path(tmp) / f"run{k}"))
            outs.append(bench.run_experiment(cfg).paths["results"].read_bytes())
    return outs[0] == outs[1], f"results.csv {len(outs[0])} bytes, identical: {outs[0] == outs[1]}"


QUICK = (check_kriging_correctness, check_exact_interpolation, check_variogram_recovery, check_architecture,
         check_gradients, check_reward_contract, check_tsp, check_statistics)
SLOW = (check_tradeoff, check_gs_tsp, check_dqn_trend, check_rl_efficiency, check_determinism)


def run_all(quick: bool = False, workdir=None) -> list:
    out = [c() for c in QUICK]
    if not quick:
        out += [c() for c in SLOW[:-1]]
        out.append(check_determinism(workdir))
    return out
