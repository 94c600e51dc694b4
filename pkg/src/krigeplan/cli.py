"""Command-line entry point: ``krigeplan <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .field import (IngestStats, filter_faulty_sensors, ingest_sensor_log, instances_from_readings,
                    load_instances, save_instance, split_instances, synthetic_suite)
from .nn import QNetSpec
from .rl import ACTION_SETS, PROFILES, RewardParams, save_controller, train_dqn, write_learning_curve

log = logging.getLogger("krigeplan")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML file with experiment settings")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                   help="desk: 16x16 fields, reduced net; paper: 32x32 fields, full net")


def _config(args) -> bench.ExperimentConfig:
    overrides = {"seed": args.seed, "out_dir": args.out_dir, "workers": args.workers}
    if getattr(args, "methods", None):
        overrides["methods"] = args.methods
    if args.config:
        return bench.ExperimentConfig.from_toml(args.config, **overrides)
    prof = PROFILES[args.profile]
    return bench.ExperimentConfig(grid=prof.grid, **{k: v for k, v in overrides.items() if v is not None})


def cmd_ingest(args):
    stats = IngestStats()
    readings = list(ingest_sensor_log(args.log, args.locations, args.attribute, stats))
    kept, dropped = filter_faulty_sensors(readings)
    print(f"rows {stats.rows}, emitted {stats.emitted}, malformed {stats.dropped}, "
          f"unknown mote {stats.unknown_mote}; kept {len(kept)} motes, dropped {sorted(dropped)}")
    insts = instances_from_readings(readings, args.n_instances, args.seed or 0, min_motes=args.min_motes,
                                    out_h=args.grid, out_w=args.grid)
    out = Path(args.out_dir or "instances")
    out.mkdir(parents=True, exist_ok=True)
    for inst in insts:
        save_instance(inst, out / f"{inst.id}.json")
    print(f"wrote {len(insts)} instances to {out}")


def cmd_make_synthetic(args):
    out = Path(args.out_dir or "instances")
    out.mkdir(parents=True, exist_ok=True)
    grid = args.grid or PROFILES[args.profile].grid
    insts = synthetic_suite(args.n, seed=args.seed or 0, h=grid, w=grid)
    for inst in insts:
        save_instance(inst, out / f"{inst.id}.json")
    print(f"wrote {len(insts)} synthetic {grid}x{grid} instances to {out}")


def cmd_split(args):
    insts = load_instances(args.instances)
    sp = split_instances(insts, args.n_train, args.n_test, args.seed or 0)
    out = Path(args.out or "split.json")
    out.write_text(json.dumps(sp.to_dict(), indent=1) + "\n")
    print(f"train {len(sp.train)}, test {len(sp.test)} -> {out}")


def cmd_train(args):
    cfg = _config(args)
    prof = PROFILES[args.profile]
    if not args.config:
        cfg = replace(cfg, n_train=args.n_train or 120, n_test=args.n_test or 120,
                      synthetic_n=(args.n_train or 120) + (args.n_test or 120))
    if args.instances:
        cfg = replace(cfg, instances=args.instances)
    train, _ = bench.load_split_instances(cfg)
    methods = args.method or ["RL-21"]
    rp = RewardParams() if args.reward_scale is None else RewardParams(scale=args.reward_scale)
    curves = Path(cfg.out_dir) / "curves"
    curves.mkdir(parents=True, exist_ok=True)
    cfg.models_path.mkdir(parents=True, exist_ok=True)
    for method in methods:
        actions = ACTION_SETS[method]
        dqn = prof.dqn_config(total_interactions=args.interactions, learning_rate=args.learning_rate)
        size = train[0].truth.shape[0]
        spec = QNetSpec(size=size, n_actions=len(actions), channels=prof.channels)
        res = train_dqn(train, actions, dqn, rp, seed=cfg.seed, spec=spec, T=cfg.T, progress_every=50)
        ck = save_controller(bench.checkpoint_path(cfg, method), res.net, actions, rp,
                             {"method": method, "profile": args.profile, "interactions": res.interactions,
                              "learning_rate": dqn.learning_rate, "seed": cfg.seed})
        csv_path = write_learning_curve(res, curves / f"learning_{method}.csv")
        roll = res.rolling_mean()
        bench.emit_curves_svg({method: (np.arange(1, len(roll) + 1), roll)}, curves / f"learning_{method}.svg",
                              f"{method} rolling episode reward")
        print(f"{method}: {len(res.episode_rewards)} episodes, checkpoint {ck}, curve {csv_path}")


def cmd_run(args):
    cfg = _config(args)
    try:
        res = bench.run_experiment(cfg)
    except bench.MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{len(res.rows)} rows -> {res.paths['results']}")
    return 0


def cmd_report(args):
    cfg = _config(args)
    _, test = bench.load_split_instances(cfg)
    curves = {}
    for p in sorted((Path(cfg.out_dir) / "curves").glob("learning_*.csv")):
        rows = bench.read_csv_dicts(p)
        curves[p.stem[len("learning_"):]] = ([int(r["episode"]) for r in rows],
                                             [float(r["rolling_mean"]) for r in rows])
    paths = bench.write_report(cfg.out_dir, test, curves)
    for k, v in paths.items():
        print(f"{k}: {v}")


def cmd_selftest(args):
    from . import acceptance
    results = acceptance.run_all(quick=args.quick, workdir=args.out_dir)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="krigeplan", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="sensor log -> normalized instance files")
    _common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--locations", required=True)
    p.add_argument("--attribute", default="temperature", choices=["temperature", "humidity"])
    p.add_argument("--n-instances", type=int, default=240)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--min-motes", type=int, default=45, help="motes required in a snapshot")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-synthetic", help="write a synthetic instance suite")
    _common(p)
    p.add_argument("--n", type=int, default=240)
    p.add_argument("--grid", type=int)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("split", help="train/test split of an instance directory")
    _common(p)
    p.add_argument("--instances", required=True)
    p.add_argument("--n-train", type=int, default=120)
    p.add_argument("--n-test", type=int, default=120)
    p.add_argument("--out", help="split JSON path (default split.json)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train RL controllers")
    _common(p)
    p.add_argument("--method", action="append", choices=sorted(ACTION_SETS))
    p.add_argument("--instances", help="instance directory (default: synthetic suite)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--interactions", type=int)
    p.add_argument("--reward-scale", type=float, help="multiplier on the raw reward (default 2^-4e)")
    p.add_argument("--learning-rate", type=float, help="Adam step size (default from --profile)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run baselines and RL controllers, write results.csv")
    _common(p)
    p.add_argument("--methods", nargs="+", choices=bench.ALL_METHODS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summary tables and SVG figures from results.csv")
    _common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the acceptance checks")
    _common(p)
    p.add_argument("--quick", action="store_true", help="skip the long-running checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
