"""Experiment harness: mission sweeps, statistics and table/figure output."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .field import FieldInstance, load_instances, split_instances, synthetic_suite
from .planners import run_mission
from .rl import ACTION_SETS, PAPER_MIXTURE, ControllerPolicy, empirical_mixture_policy, load_controller, mission_seed

BASELINES = ("Rand", "GS", "GS-TSP", "LS-1", "LS-2", "LS-3")
MIXTURE = "empirical-mixture"
ALL_METHODS = BASELINES + tuple(ACTION_SETS) + (MIXTURE,)
RESULT_COLUMNS = ("method", "run", "instance", "t", "rmse", "cumulative_distance", "action_label", "row", "col")
ALPHA = 0.05


def fmt(x, exact: bool = False) -> str:
    """Stable float formatting: 9 significant digits, or shortest round-trip when ``exact``."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if exact else f"{float(x):.9g}"
    return str(x)


class MissingCheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    methods: list = field(default_factory=lambda: list(BASELINES))
    instances: str | None = None      # directory of instance JSON files; None -> synthetic suite
    split: str | None = None          # optional split JSON (train/test id lists)
    synthetic_n: int = 40
    synthetic_seed: int = 0
    grid: int = 32
    split_seed: int = 0
    n_train: int = 20
    n_test: int = 20
    T: int = 15
    runs: int = 3
    seed: int = 0
    workers: int = 1
    out_dir: str = "out"
    models_dir: str | None = None
    mixture: dict = field(default_factory=lambda: dict(PAPER_MIXTURE))

    def __post_init__(self):
        if self.T < 4:
            raise ValueError("T must be at least 4")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(ALL_METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("duplicate methods")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    @property
    def models_path(self) -> Path:
        return Path(self.models_dir) if self.models_dir else Path(self.out_dir) / "models"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path, **overrides) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


def load_split_instances(cfg: ExperimentConfig):
    """Returns (train, test) instance lists for the config."""
    if cfg.instances:
        pool = load_instances(cfg.instances)
    else:
        pool = synthetic_suite(cfg.synthetic_n, seed=cfg.synthetic_seed, h=cfg.grid, w=cfg.grid)
    by_id = {inst.id: inst for inst in pool}
    if cfg.split:
        ids = json.loads(Path(cfg.split).read_text())
        train_ids, test_ids = ids["train"], ids["test"]
    else:
        sp = split_instances(pool, min(cfg.n_train, len(pool) - cfg.n_test), cfg.n_test, cfg.split_seed)
        train_ids, test_ids = sp.train, sp.test
    return [by_id[k] for k in train_ids], [by_id[k] for k in test_ids]


# ---------------------------------------------------------------------------
# Running missions
# ---------------------------------------------------------------------------

def checkpoint_path(cfg: ExperimentConfig, method: str) -> Path:
    return cfg.models_path / f"{method}.npz"


def make_policy(method: str, cfg: ExperimentConfig):
    if method in BASELINES:
        return method
    if method == MIXTURE:
        return empirical_mixture_policy(cfg.mixture, MIXTURE)
    path = checkpoint_path(cfg, method)
    if not path.exists():
        raise MissingCheckpointError(f"no checkpoint for {method} at {path}; "
                                     f"run `krigeplan train --method {method}` first")
    net, actions, _ = load_controller(path)
    if tuple(actions) != ACTION_SETS[method]:
        raise MissingCheckpointError(f"checkpoint {path} was trained for actions {actions}")
    return ControllerPolicy(net, actions, method, cfg.T)


def _run_block(args):
    method, cfg, instances = args
    policy = make_policy(method, cfg)
    out = []
    for run in range(cfg.runs):
        for inst in instances:
            trace = run_mission(inst, policy, cfg.T, seed=mission_seed(cfg.seed, method, inst.id, run))
            out.append((run, trace))
    return method, out


@dataclass
class ExperimentResult:
    rows: list
    traces: dict  # method -> list of (run, EpisodeTrace)
    paths: dict = field(default_factory=dict)


def trace_rows(method: str, run: int, trace) -> list:
    return [{"method": method, "run": run, "instance": trace.instance_id, "t": s.t, "rmse": s.rmse,
             "cumulative_distance": s.cumulative_distance, "action_label": s.action_label,
             "row": s.waypoint[0], "col": s.waypoint[1]} for s in trace.steps]


def write_csv(path, header: Sequence[str], rows, exact: bool = False) -> Path:
    """Rows are dicts or sequences; floats use the shared stable format.

    Summary tables pass ``exact=True`` so that statistics recomputed from
    results.csv can be compared against them without rounding slack.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        vals = [r[h] for h in header] if isinstance(r, dict) else r
        w.writerow([fmt(v, exact) for v in vals])
    path.write_text(buf.getvalue())
    return path


def read_results(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["run"], r["t"], r["row"], r["col"] = int(r["run"]), int(r["t"]), int(r["row"]), int(r["col"])
        r["rmse"], r["cumulative_distance"] = float(r["rmse"]), float(r["cumulative_distance"])
    return rows


def run_experiment(cfg: ExperimentConfig, test_instances: Sequence[FieldInstance] | None = None,
                   write: bool = True) -> ExperimentResult:
    """Run every (method, run, instance) mission and write results.csv.

    Missions carry independent seeds derived from (config seed, method,
    instance id, run), so adding a method never changes another's numbers.
    """
    if test_instances is None:
        _, test_instances = load_split_instances(cfg)
    test_instances = list(test_instances)
    for m in cfg.methods:  # fail fast on missing checkpoints
        if m in ACTION_SETS:
            make_policy(m, cfg)
    jobs = [(m, cfg, test_instances) for m in cfg.methods]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            done = list(ex.map(_run_block, jobs))
    else:
        done = [_run_block(j) for j in jobs]
    traces = dict(done)
    order = {m: i for i, m in enumerate(cfg.methods)}
    rows = []
    for m in sorted(traces, key=order.get):
        for run, tr in sorted(traces[m], key=lambda x: (x[0], x[1].instance_id)):
            rows.extend(trace_rows(m, run, tr))
    res = ExperimentResult(rows, traces)
    if write:
        out = Path(cfg.out_dir)
        res.paths["results"] = write_csv(out / "results.csv", RESULT_COLUMNS, rows)
        res.paths["instrumentation"] = write_instrumentation(out / "instrumentation.csv", traces, order)
    return res


def write_instrumentation(path, traces: dict, order: dict) -> Path:
    rows = []
    for m in sorted(traces, key=order.get):
        for run, tr in sorted(traces[m], key=lambda x: (x[0], x[1].instance_id)):
            if tr.info:
                rows.append([m, run, tr.instance_id, tr.info.get("random_origin_visits", ""),
                             tr.info.get("mean_kv_rank", "")])
    return write_csv(path, ["method", "run", "instance", "random_origin_visits", "mean_kv_rank"], rows)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    degenerate: bool = False


def t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta function."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def pooled_t(mean_a, sd_a, n_a, mean_b, sd_b, n_b) -> TTestResult:
    """Pooled two-sample test from summary statistics (sample standard deviations)."""
    df = n_a + n_b - 2
    sp2 = ((n_a - 1) * sd_a**2 + (n_b - 1) * sd_b**2) / df
    diff = mean_a - mean_b
    if sp2 <= 0:
        if diff == 0:
            return TTestResult(0.0, df, 1.0, True)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0, True)
    t = diff / math.sqrt(sp2 * (1.0 / n_a + 1.0 / n_b))
    return TTestResult(t, df, t_two_tailed_p(t, df))


def two_sample_t_test(a, b) -> TTestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    return pooled_t(a.mean(), a.std(ddof=1), len(a), b.mean(), b.std(ddof=1), len(b))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def final_values(rows) -> dict:
    """method -> {"rmse": [...], "distance": [...]} of per-mission final values."""
    last = {}
    for r in rows:
        key = (r["method"], r["run"], r["instance"])
        if key not in last or r["t"] > last[key]["t"]:
            last[key] = r
    out = {}
    for (m, _, _), r in sorted(last.items(), key=lambda kv: kv[0]):
        d = out.setdefault(m, {"rmse": [], "distance": []})
        d["rmse"].append(r["rmse"])
        d["distance"].append(r["cumulative_distance"])
    return out


def per_step_means(rows) -> dict:
    """method -> (t array, mean rmse per t, mean distance per t)."""
    acc = {}
    for r in rows:
        d = acc.setdefault(r["method"], {})
        d.setdefault(r["t"], []).append((r["rmse"], r["cumulative_distance"]))
    out = {}
    for m, d in acc.items():
        ts = sorted(d)
        out[m] = (np.array(ts), np.array([np.mean([v[0] for v in d[t]]) for t in ts]),
                  np.array([np.mean([v[1] for v in d[t]]) for t in ts]))
    return out


def _sd(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


@dataclass
class Summary:
    table: list          # per-method rows
    pairwise: list       # pairwise test rows
    instrumentation: list


def summarize(rows, instrumentation_rows=None, methods: Sequence[str] | None = None) -> Summary:
    finals = final_values(rows)
    methods = list(methods) if methods else list(dict.fromkeys(r["method"] for r in rows))
    table = []
    for m in methods:
        f = finals[m]
        table.append({"method": m, "missions": len(f["rmse"]),
                      "final_rmse_mean": float(np.mean(f["rmse"])), "final_rmse_std": _sd(f["rmse"]),
                      "distance_mean": float(np.mean(f["distance"])), "distance_std": _sd(f["distance"])})
    pairwise = []
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            for metric, key in (("final_rmse", "rmse"), ("total_distance", "distance")):
                xa, xb = finals[a][key], finals[b][key]
                if len(xa) < 2 or len(xb) < 2:
                    continue
                tt = two_sample_t_test(xa, xb)
                pairwise.append({"method_a": a, "method_b": b, "metric": metric, "t": tt.t, "df": tt.df,
                                 "p": tt.p, "significant": "yes" if tt.p < ALPHA else "no",
                                 "degenerate": "yes" if tt.degenerate else "no"})
    instr = []
    if instrumentation_rows:
        groups = {}
        for r in instrumentation_rows:
            if r.get("random_origin_visits") not in ("", None):
                groups.setdefault(r["method"], []).append(r)
        for m, rs in groups.items():
            instr.append({"method": m, "missions": len(rs),
                          "mean_random_origin_visits": float(np.mean([float(r["random_origin_visits"]) for r in rs])),
                          "mean_kv_rank": float(np.mean([float(r["mean_kv_rank"]) for r in rs]))})
    return Summary(table, pairwise, instr)


SUMMARY_COLUMNS = ("method", "missions", "final_rmse_mean", "final_rmse_std", "distance_mean", "distance_std")
PAIRWISE_COLUMNS = ("method_a", "method_b", "metric", "t", "df", "p", "significant", "degenerate")
INSTR_COLUMNS = ("method", "missions", "mean_random_origin_visits", "mean_kv_rank")


def action_history_matrix(traces, actions: Sequence[str] | None = None):
    """Per-decision-step selection frequencies; returns (matrix, action labels)."""
    seqs = [tr.actions for tr in traces]
    if actions is None:
        actions = sorted({a for s in seqs for a in s})
    actions = list(actions)
    n = max(len(s) for s in seqs)
    m = np.zeros((n, len(actions)))
    for s in seqs:
        for i, a in enumerate(s):
            m[i, actions.index(a)] += 1
    return m / m.sum(axis=1, keepdims=True), actions


# ---------------------------------------------------------------------------
# SVG output
# ---------------------------------------------------------------------------

# Eight anchors sampled from a viridis-like ramp, dark blue -> yellow.
RAMP = ((68, 1, 84), (70, 50, 127), (54, 92, 141), (39, 127, 142),
        (31, 161, 135), (74, 194, 109), (159, 218, 58), (253, 231, 37))
SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
                 "#7f7f7f", "#bcbd22", "#17becf")


def ramp_color(u: float) -> str:
    u = min(max(float(u), 0.0), 1.0) * (len(RAMP) - 1)
    i = min(int(u), len(RAMP) - 2)
    f = u - i
    rgb = [round(a + f * (b - a)) for a, b in zip(RAMP[i], RAMP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_heatmap_svg(grid, path_overlay=(), out=None, cell: int = 12) -> str:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 2 or not np.all(np.isfinite(g)):
        raise ValueError("heatmap grid must be a finite 2-D array")
    h, w = g.shape
    lo, hi = g.min(), g.max()
    span = hi - lo
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
             f'viewBox="0 0 {w * cell} {h * cell}">']
    for r in range(h):
        for c in range(w):
            u = (g[r, c] - lo) / span if span > 0 else 0.0
            parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                         f'fill="{ramp_color(u)}"/>')
    pts = [((c + 0.5) * cell, (r + 0.5) * cell) for r, c in path_overlay]
    if len(pts) > 1:
        coords = " ".join(f"{x:g},{y:g}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#ffffff" stroke-width="1.5"/>')
    for x, y in pts:
        parts.append(f'<circle cx="{x:g}" cy="{y:g}" r="{cell * 0.3:g}" fill="#e41a1c" stroke="#ffffff"/>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if out is not None:
        Path(out).write_text(text)
    return text


def emit_curves_svg(series: dict, out=None, title: str = "", width: int = 480, height: int = 320) -> str:
    """Simple line chart; ``series`` maps label -> (x values, y values)."""
    pad = 48
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
             f'<text x="{width / 2:g}" y="18" text-anchor="middle" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="#000"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#000"/>',
             f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.4g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x1:.4g}</text>',
             f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.4g}</text>',
             f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.4g}</text>']
    for k, (label, (x, y)) in enumerate(series.items()):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = pad + 14 * k
        parts.append(f'<text x="{width - pad + 4}" y="{ly}" font-size="10" fill="{color}">{label}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if out is not None:
        Path(out).write_text(text)
    return text


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def read_csv_dicts(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def actions_rows(rows) -> list:
    """Action-history matrices for every method that chose among planners."""
    per = {}
    for r in rows:
        if r["action_label"] == "seed" or r["method"] in BASELINES:
            continue
        per.setdefault(r["method"], {}).setdefault((r["run"], r["instance"]), []).append((r["t"], r["action_label"]))
    out = []
    for m, missions in per.items():
        labels = sorted({a for seq in missions.values() for _, a in seq})
        steps = sorted({t for seq in missions.values() for t, _ in seq})
        counts = {(t, a): 0 for t in steps for a in labels}
        for seq in missions.values():
            for t, a in seq:
                counts[(t, a)] += 1
        for t in steps:
            tot = sum(counts[(t, a)] for a in labels)
            out.extend([m, t, a, counts[(t, a)] / tot] for a in labels)
    return out


def write_report(out_dir, instances: Sequence[FieldInstance] = (), learning_curves: dict | None = None) -> dict:
    """summary.csv, pairwise.csv, actions.csv and SVG figures from a results directory."""
    out = Path(out_dir)
    rows = read_results(out / "results.csv")
    instr_path = out / "instrumentation.csv"
    instr = read_csv_dicts(instr_path) if instr_path.exists() else None
    s = summarize(rows, instr)
    paths = {"summary": write_csv(out / "summary.csv", SUMMARY_COLUMNS, s.table, exact=True),
             "pairwise": write_csv(out / "pairwise.csv", PAIRWISE_COLUMNS, s.pairwise, exact=True),
             "actions": write_csv(out / "actions.csv", ("method", "t", "action", "frequency"), actions_rows(rows))}
    if s.instrumentation:
        paths["instrumentation_summary"] = write_csv(out / "instrumentation_summary.csv", INSTR_COLUMNS,
                                                     s.instrumentation)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    means = per_step_means(rows)
    emit_curves_svg({m: (v[0], v[1]) for m, v in means.items()}, curves / "rmse.svg", "mean RMSE vs samples")
    emit_curves_svg({m: (v[0], v[2]) for m, v in means.items()}, curves / "distance.svg",
                    "mean cumulative distance vs samples")
    for name, (x, y) in (learning_curves or {}).items():
        emit_curves_svg({name: (x, y)}, curves / f"learning_{name}.svg", f"{name} rolling episode reward")
    by_id = {i.id: i for i in instances}
    if by_id:
        heat = out / "heatmaps"
        heat.mkdir(exist_ok=True)
        first = {}
        for r in rows:
            if r["run"] == 0 and r["instance"] in by_id:
                first.setdefault(r["method"], r["instance"])
        for m, iid in first.items():
            path = [(r["row"], r["col"]) for r in rows if r["method"] == m and r["run"] == 0
                    and r["instance"] == iid]
            emit_heatmap_svg(by_id[iid].truth, path, heat / f"{m}_{iid}.svg")
    return paths

