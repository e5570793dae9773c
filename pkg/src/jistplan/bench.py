"""Benchmark harness: seeded trials, metrics, ablations, CSV output.

Every seed builds one world per planner from the same EnvConfig, so all
planners face identical planning problems.  Metrics follow the protocol:
success rate over all trials, simulated execution time and normalized
distance averaged over successful trials only, and wall-clock compute time
averaged over every planning iteration of every trial.

CLI:
    bench run    --env {static|forest|patrol} --planner {jist|opt|samp|all}
                 [--trials N] [--seed S] [--out FILE.csv] [--trace DIR]
                 [--config FILE.yaml] [--scale {desk|paper}]
    bench ablate --axis {obstacles|speed|noise|budget} --values v1,v2,...
                 (flags as above)
    bench sweep  --param name=v1,v2 [--param ...] (flags as above)
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .baselines import ChainConfig, TreeConfig, run_opt, run_samp
from .driver import TrialResult
from .planner import FactorParams, PlannerConfig, run_to_goal
from .world import EnvConfig, make_env

PLANNERS = ("jist", "opt", "samp")

AXES = {
    "obstacles": "obstacle_count",
    "speed": "top_speed",
    "noise": "exec_noise",
    "budget": "node_budget",
}


@dataclass
class BenchmarkConfig:
    env: EnvConfig
    jist: PlannerConfig
    opt: ChainConfig
    samp: TreeConfig
    trials: int = 10
    seed_base: int = 0
    axis: str = "none"  # none | obstacle_count | top_speed | exec_noise | node_budget
    values: list = field(default_factory=list)

    def __post_init__(self):
        if self.axis != "none" and not self.values:
            raise ValueError("ablation axis set but no values given")


@dataclass
class MetricsRow:
    planner: str
    axis_value: float | None
    success: float
    exec_time: float
    compute_time: float
    norm_dist: float
    n_trials: int


def preset(env_name: str, scale: str = "desk") -> BenchmarkConfig:
    """Tuned per-environment defaults (desk scale) or paper-scale variants."""
    if env_name == "static":
        if scale == "desk":
            env = EnvConfig(kind="static", world_size=(45.0, 60.0),
                            min_separation=35.0, seed=0)
            trials = 10
        else:
            env = EnvConfig(kind="static", world_size=(90.0, 120.0),
                            min_separation=70.0, seed=0)
            trials = 30
    elif env_name == "forest":
        if scale == "desk":
            env = EnvConfig(kind="forest", world_size=(45.0, 60.0),
                            obstacle_count=30, top_speed=1.5,
                            min_separation=35.0, seed=0)
            trials = 20
        else:
            env = EnvConfig(kind="forest", world_size=(90.0, 120.0),
                            obstacle_count=80, top_speed=1.5,
                            min_separation=70.0, seed=0)
            trials = 30
    elif env_name == "patrol":
        env = EnvConfig(kind="patrol", world_size=(40.0, 10.0),
                        obstacle_count=4, top_speed=1.0, robot_radius=0.5,
                        min_separation=0.0, visibility=12.0, seed=0)
        trials = 10 if scale == "desk" else 30
    else:
        raise ValueError(f"unknown environment {env_name!r}")
    bounds = (0.0, 0.0, env.world_size[0], env.world_size[1])
    fp = FactorParams()
    if env_name == "patrol":
        fp = FactorParams(eps_obs=0.5, sigma_goal=3.0)
    jist = PlannerConfig(node_budget=60, world_bounds=bounds, factors=fp)
    opt = ChainConfig(horizon=60, factors=dataclasses.replace(fp))
    samp = TreeConfig(node_budget=60, world_bounds=bounds,
                      collision_check_step=0.05)
    if env_name == "patrol":
        jist = replace(jist, sample_window=6.0)
        samp = replace(samp, sample_window=6.0)
    return BenchmarkConfig(env=env, jist=jist, opt=opt, samp=samp, trials=trials)


def _with_axis(cfg: BenchmarkConfig, axis: str, value) -> BenchmarkConfig:
    """One ablation point: vary a single axis, everything else at defaults."""
    env, jist, opt, samp = cfg.env, cfg.jist, cfg.opt, cfg.samp
    if axis == "obstacle_count":
        env = replace(env, obstacle_count=int(value))
    elif axis == "top_speed":
        env = replace(env, top_speed=float(value))
    elif axis == "exec_noise":
        sig = env.exec_noise_sigma
        env = replace(env, exec_noise_sigma=(float(value), float(value), sig[2]))
    elif axis == "node_budget":
        jist = replace(jist, node_budget=int(value))
        opt = replace(opt, horizon=int(value))
        samp = replace(samp, node_budget=int(value))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return replace(cfg, env=env, jist=jist, opt=opt, samp=samp)


def run_trial(planner: str, cfg: BenchmarkConfig, seed: int,
              trace_dir: str | None = None) -> TrialResult:
    """One seeded trial; the world is rebuilt from the seed so that every
    planner sees the identical planning problem."""
    env = replace(cfg.env, seed=seed)
    world, start, goal = make_env(env)
    trace = None
    if trace_dir is not None:
        path = Path(trace_dir)
        path.mkdir(parents=True, exist_ok=True)
        trace = open(path / f"{planner}_{seed}.trace", "w")
    try:
        if planner == "jist":
            pc = replace(cfg.jist, rng_seed=seed)
            return run_to_goal(world, start, goal, pc, seed=seed, trace=trace)
        if planner == "opt":
            return run_opt(world, start, goal, cfg.opt, seed=seed, trace=trace)
        if planner == "samp":
            return run_samp(world, start, goal, cfg.samp, seed=seed, trace=trace)
        raise ValueError(f"unknown planner {planner!r}")
    finally:
        if trace is not None:
            trace.close()


def aggregate(planner: str, axis_value, results: list[TrialResult]) -> MetricsRow:
    wins = [r for r in results if r.success]
    success = len(wins) / len(results)
    exec_time = float(np.mean([r.execution_time for r in wins])) if wins else math.nan
    norm = float(np.mean([r.normalized_distance for r in wins])) if wins else math.nan
    total_iters = sum(r.iterations for r in results)
    compute = sum(r.mean_compute * r.iterations for r in results) / total_iters \
        if total_iters else 0.0
    return MetricsRow(planner, axis_value, success, exec_time, compute, norm,
                      len(results))


def run_benchmark(cfg: BenchmarkConfig, planners=PLANNERS,
                  trace_dir: str | None = None,
                  progress=None) -> list[MetricsRow]:
    axis_values = cfg.values if cfg.axis != "none" else [None]
    rows = []
    for value in axis_values:
        point = cfg if value is None else _with_axis(cfg, cfg.axis, value)
        for planner in sorted(planners):
            results = []
            for k in range(cfg.trials):
                results.append(run_trial(planner, point, cfg.seed_base + k,
                                         trace_dir))
                if progress:
                    progress(planner, value, k, results[-1])
            rows.append(aggregate(planner, value, results))
    rows.sort(key=lambda r: (r.planner, math.inf if r.axis_value is None
                             else r.axis_value))
    return rows


def write_csv(rows: list[MetricsRow], path) -> None:
    def fmt(x):
        return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) \
            else f"{x:.4f}"

    lines = ["planner,axis_value,success,exec_time_s,compute_time_s,norm_dist,n_trials"]
    for r in rows:
        axis = "" if r.axis_value is None else f"{r.axis_value:g}"
        lines.append(f"{r.planner},{axis},{fmt(r.success)},{fmt(r.exec_time)},"
                     f"{fmt(r.compute_time)},{fmt(r.norm_dist)},{r.n_trials}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- config file / CLI -------------------------------------------------------


def _apply_overrides(obj, overrides: dict):
    for key, value in overrides.items():
        target = obj
        parts = key.split(".")
        for part in parts[:-1]:
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ValueError(f"unknown config field {key!r}")
        current = getattr(target, leaf)
        if isinstance(current, tuple) and isinstance(value, (list, tuple)):
            value = tuple(value)
        if isinstance(current, np.ndarray):
            value = np.asarray(value, dtype=float)
        setattr(target, leaf, value)
    return obj


def load_config(cfg: BenchmarkConfig, path) -> BenchmarkConfig:
    """Apply a YAML override file on top of the preset."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    for section in ("env", "jist", "opt", "samp"):
        if section in data:
            _apply_overrides(getattr(cfg, section), data[section])
    if "trials" in data:
        cfg.trials = int(data["trials"])
    if "seed" in data:
        cfg.seed_base = int(data["seed"])
    return cfg


def _build_cfg(args) -> BenchmarkConfig:
    cfg = preset(args.env, args.scale)
    if args.config:
        cfg = load_config(cfg, args.config)
    if args.trials is not None:
        cfg.trials = args.trials
    if args.seed is not None:
        cfg.seed_base = args.seed
    return cfg


def _planner_list(arg: str):
    if arg == "all":
        return PLANNERS
    if arg not in PLANNERS:
        raise ValueError(f"unknown planner {arg!r}")
    return (arg,)


def _add_common(p):
    p.add_argument("--env", choices=("static", "forest", "patrol"),
                   default="static")
    p.add_argument("--planner", default="all")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="bench_results.csv")
    p.add_argument("--trace", default=None, help="directory for per-trial traces")
    p.add_argument("--config", default=None, help="YAML overrides")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--quiet", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench",
                                     description="motion-planning benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="benchmark planners in one environment")
    _add_common(run_p)
    abl_p = sub.add_parser("ablate", help="sweep one environment/planner axis")
    _add_common(abl_p)
    abl_p.add_argument("--axis", choices=tuple(AXES), required=True)
    abl_p.add_argument("--values", required=True,
                       help="comma-separated axis values")
    sw_p = sub.add_parser("sweep", help="hyperparameter grid for one planner")
    _add_common(sw_p)
    sw_p.add_argument("--param", action="append", default=[],
                      help="name=v1,v2 (dotted fields allowed, repeatable)")
    args = parser.parse_args(argv)

    try:
        cfg = _build_cfg(args)
        planners = _planner_list(args.planner)
        if args.command == "run":
            rows = run_benchmark(cfg, planners, args.trace,
                                 progress=None if args.quiet else _progress)
            write_csv(rows, args.out)
        elif args.command == "ablate":
            cfg.axis = AXES[args.axis]
            cfg.values = [float(v) for v in args.values.split(",")]
            rows = run_benchmark(cfg, planners, args.trace,
                                 progress=None if args.quiet else _progress)
            write_csv(rows, args.out)
        else:
            if len(planners) != 1:
                raise ValueError("sweep requires a single --planner")
            _run_sweep(cfg, planners[0], args)
    except (ValueError, OSError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(f"wrote {args.out}")
    return 0


def _progress(planner, value, k, result):
    tag = "" if value is None else f"[{value:g}] "
    print(f"{tag}{planner} seed {result.seed}: {result.outcome} "
          f"({result.iterations} iters)", file=sys.stderr)


def _run_sweep(cfg: BenchmarkConfig, planner: str, args) -> None:
    grids = []
    for spec_arg in args.param:
        name, _, values = spec_arg.partition("=")
        if not values:
            raise ValueError(f"bad --param {spec_arg!r}, expected name=v1,v2")
        grids.append((name, [float(v) for v in values.split(",")]))
    if not grids:
        raise ValueError("sweep needs at least one --param")
    lines = ["planner,params,success,exec_time_s,compute_time_s,norm_dist,n_trials"]
    for combo in itertools.product(*[vals for _, vals in grids]):
        point = preset(args.env, args.scale)
        if args.config:
            point = load_config(point, args.config)
        point.trials = cfg.trials
        point.seed_base = cfg.seed_base
        target = {"jist": point.jist, "opt": point.opt, "samp": point.samp}[planner]
        label = []
        for (name, _), value in zip(grids, combo):
            cast = value
            current_holder = target
            parts = name.split(".")
            for part in parts[:-1]:
                current_holder = getattr(current_holder, part)
            if isinstance(getattr(current_holder, parts[-1], None), int):
                cast = int(value)
            _apply_overrides(target, {name: cast})
            label.append(f"{name}={value:g}")
        results = [run_trial(planner, point, point.seed_base + k)
                   for k in range(point.trials)]
        row = aggregate(planner, None, results)
        lines.append(f"{planner},{';'.join(label)},{row.success:.4f},"
                     f"{row.exec_time:.4f},{row.compute_time:.4f},"
                     f"{row.norm_dist:.4f},{row.n_trials}")
    Path(args.out).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
