"""The joint sampling + trajectory optimization planner (jist).

Each iteration grows the tree-structured factor graph with RRT-style
random extensions (no collision checking of samples or edges), optimizes
every state jointly with Gauss-Newton, picks the leaf whose root-to-leaf
factor cost normalized by depth is lowest, executes its first edge, and
prunes everything that did not descend from the executed child.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .factors import (CurrentStateFactor, GoalFactor, GpParams, GpPriorFactor,
                      InterpObstacleFactor, LimitFactor, NonholonomicFactor,
                      ObstacleFactor, SdfRef, goal_scale_ratio)
from .graph import FactorGraph, GraphError
from .sdf import Disk, SDFGrid
from .world import WorldState, observe_sdf


def _default_qc() -> np.ndarray:
    return np.array([1.0, 1.0, 1.0])


@dataclass
class FactorParams:
    """One cost model shared by the tree planner and the chain optimizer."""

    qc: np.ndarray = field(default_factory=_default_qc)
    sigma_obs: float = 0.08
    eps_obs: float = 1.0
    n_interp: int = 3
    sigma_current: float = 0.02
    sigma_goal: float = 4.0
    sigma_limit: float = 0.05
    eps_limit: float = 0.1
    v_max: float = 3.0
    w_max: float = 0.6
    sigma_nh: float = 0.1

    def gp(self, dt: float) -> GpParams:
        return GpParams(np.asarray(self.qc, float), dt)

    def velocity_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        inf = np.inf
        lower = np.array([-inf, -inf, -inf, -self.v_max, -self.v_max, -self.w_max])
        return lower, -lower


@dataclass
class PlannerConfig:
    node_budget: int = 60
    extend_step: float = 0.75
    dt: float = 0.25
    sample_window: float = 8.0
    world_bounds: tuple[float, float, float, float] = (0.0, 0.0, 90.0, 120.0)
    factors: FactorParams = field(default_factory=FactorParams)
    goal_tolerance: float = 0.5
    max_iterations: int = 400
    rng_seed: int = 0
    gn_max_iters: int = 6
    gn_rel_tol: float = 1.0e-3
    gn_abs_tol: float = 1.0e-8

    def __post_init__(self):
        if self.node_budget < 2:
            raise ValueError("node_budget must be at least 2")
        if self.extend_step <= 0 or self.dt <= 0:
            raise ValueError("extend_step and dt must be positive")


@dataclass
class PlanStep:
    """One planning decision: execute the first edge of the best path."""

    next_state: np.ndarray
    best_leaf: int
    best_path: list[int]
    normalized_cost: float
    compute_seconds: float = 0.0


def random_sample(current: np.ndarray, config: PlannerConfig, rng) -> np.ndarray:
    """Position uniform in the local window (clipped to world bounds), yaw
    uniform within pi of the current heading, velocities zero."""
    xmin, ymin, xmax, ymax = config.world_bounds
    w = config.sample_window
    lo = np.maximum([current[0] - w, current[1] - w], [xmin, ymin])
    hi = np.minimum([current[0] + w, current[1] + w], [xmax, ymax])
    pos = rng.uniform(lo, np.maximum(hi, lo))
    yaw = rng.uniform(current[2] - math.pi, current[2] + math.pi)
    return np.array([pos[0], pos[1], yaw, 0.0, 0.0, 0.0])


def nearest_neighbour(graph: FactorGraph, q: np.ndarray) -> int:
    """Variable closest to q in (x, y); ties go to the smallest id."""
    if graph.size() == 0:
        raise GraphError("graph is empty")
    qx, qy = float(q[0]), float(q[1])
    best, best_d = -1, math.inf
    for vid in graph.var_ids():
        v = graph.value(vid)
        d = (v[0] - qx) ** 2 + (v[1] - qy) ** 2
        if d < best_d:
            best, best_d = vid, d
    return best


def _unwrap_to(angle: float, reference: float) -> float:
    """Shift angle by multiples of 2*pi to the branch nearest the reference."""
    return reference + math.remainder(angle - reference, 2 * math.pi)


def extend_state(near: np.ndarray, rand: np.ndarray, config: PlannerConfig) -> np.ndarray:
    """Steer from near toward rand by at most extend_step; yaw faces the
    motion direction (unwrapped from the parent's yaw) and velocities are
    the resulting displacement rates."""
    delta = rand[:2] - near[:2]
    dist = float(np.linalg.norm(delta))
    if dist > config.extend_step:
        new_pos = near[:2] + delta * (config.extend_step / dist)
    else:
        new_pos = rand[:2].copy()
    if dist > 1e-12:
        yaw = _unwrap_to(math.atan2(delta[1], delta[0]), near[2])
    else:
        yaw = near[2]
    vel = (new_pos - near[:2]) / config.dt
    return np.array([new_pos[0], new_pos[1], yaw, vel[0], vel[1],
                     (yaw - near[2]) / config.dt])


def attach_edge_factors(graph: FactorGraph, parent: int, child: int,
                        fp: FactorParams, gp: GpParams, sdf_ref: SdfRef,
                        shape, goal: np.ndarray, scale_ratio: float,
                        dt: float) -> int:
    """The standard per-edge factor set shared by the tree and chain planners:
    GP prior and interpolated obstacle factors on the edge; obstacle, goal,
    velocity-limit, and nonholonomic factors on the child."""
    graph.add_factor(GpPriorFactor(gp), [parent, child])
    graph.add_factor(ObstacleFactor(sdf_ref, shape, fp.eps_obs, fp.sigma_obs),
                     [child])
    for i in range(1, fp.n_interp + 1):
        tau = dt * i / (fp.n_interp + 1)
        graph.add_factor(InterpObstacleFactor(sdf_ref, shape, fp.eps_obs,
                                              fp.sigma_obs, gp, tau),
                         [parent, child])
    graph.add_factor(GoalFactor(goal, fp.sigma_goal, scale_ratio), [child])
    lower, upper = fp.velocity_bounds()
    graph.add_factor(LimitFactor(lower, upper, fp.eps_limit, fp.sigma_limit),
                     [child])
    graph.add_factor(NonholonomicFactor(fp.sigma_nh), [child])
    return fp.n_interp + 5


def search_best_leaf(graph: FactorGraph) -> PlanStep:
    """Lowest depth-normalized root-to-leaf factor cost; ties to smallest id.

    A factor contributes to every path containing all its variables, so
    unary costs land on their vertex and edge costs on the child.
    """
    root = graph.root
    if not graph.children_of(root):
        raise GraphError("root has no children to execute")
    bucket = graph.cost_buckets()
    total = {root: bucket[root]}
    depth = {root: 0}
    stack = [root]
    while stack:
        vid = stack.pop()
        for c in graph.children_of(vid):
            total[c] = total[vid] + bucket[c]
            depth[c] = depth[vid] + 1
            stack.append(c)
    best, best_cost = -1, math.inf
    for leaf in sorted(graph.leaves()):
        if leaf == root:
            continue
        score = total[leaf] / depth[leaf]
        if score < best_cost:
            best, best_cost = leaf, score
    path = [best]
    while path[-1] != root:
        path.append(graph.parent_of(path[-1]))
    path.reverse()
    return PlanStep(graph.value(path[1]).copy(), best, path, best_cost)


class JistPlanner:
    """Owns the factor graph, RNG, and active-SDF handle for one trial."""

    name = "jist"

    def __init__(self, start: np.ndarray, goal: np.ndarray,
                 config: PlannerConfig, robot_radius: float):
        self.config = config
        self.start = np.asarray(start, float).copy()
        self.goal = np.asarray(goal, float).copy()
        self.rng = np.random.default_rng(config.rng_seed)
        self.shape = Disk(robot_radius)
        self.sdf_ref = SdfRef()
        self.gp = config.factors.gp(config.dt)
        self.measured = self.start.copy()
        self.graph = FactorGraph()
        root = self.graph.add_variable(None, self.start)
        self._current_fid = self.graph.add_factor(
            CurrentStateFactor(self.start, config.factors.sigma_current), [root])

    def size(self) -> int:
        return self.graph.size()

    def attach_factors(self, parent: int, child: int) -> int:
        """Standard factor set for a newly added edge and vertex."""
        g = self.graph
        ratio = goal_scale_ratio(g.value(g.root), self.start, self.goal)
        return attach_edge_factors(g, parent, child, self.config.factors,
                                   self.gp, self.sdf_ref, self.shape,
                                   self.goal, ratio, self.config.dt)

    def grow_factor_graph(self, sdf: SDFGrid, sample_fn=None) -> int:
        """Sample/extend until the node budget is reached; no collision checks."""
        self.sdf_ref.grid = sdf
        sample = sample_fn or (lambda: random_sample(self.measured, self.config, self.rng))
        added = 0
        g = self.graph
        while g.size() < self.config.node_budget:
            rand = sample()
            near = nearest_neighbour(g, rand)
            new_state = extend_state(g.value(near), rand, self.config)
            child = g.add_variable(near, new_state)
            self.attach_factors(near, child)
            added += 1
        return added

    def optimize(self):
        c = self.config
        return self.graph.gauss_newton(max_iters=c.gn_max_iters,
                                       rel_tol=c.gn_rel_tol, abs_tol=c.gn_abs_tol)

    def plan_iteration(self, world: WorldState) -> PlanStep:
        """Observe, grow, optimize, search; compute time excludes perception."""
        sdf = observe_sdf(world, center=self.measured[:2])
        t0 = time.perf_counter()
        self.grow_factor_graph(sdf)
        self.optimize()
        step = search_best_leaf(self.graph)
        step.compute_seconds = time.perf_counter() - t0
        return step

    # driver protocol
    def iteration(self, world: WorldState) -> PlanStep:
        return self.plan_iteration(world)

    def after_execute(self, measured: np.ndarray, step: PlanStep) -> None:
        self.prune_unreachable(measured, step.best_path[1])

    def prune_unreachable(self, measured: np.ndarray, executed_child: int) -> None:
        """Keep only the executed child's subtree and re-anchor it at the
        measurement; goal covariances rescale to the new distance ratio."""
        g = self.graph
        if g.parent_of(executed_child) != g.root:
            raise GraphError(f"{executed_child} is not a child of the root")
        g.remove_all_except_subtree(executed_child)
        measured = np.asarray(measured, float).copy()
        g.set_value(executed_child, measured)
        ratio = goal_scale_ratio(measured, self.start, self.goal)
        for fid, (factor, ids) in list(g.factors()):
            if isinstance(factor, GoalFactor):
                if ids[0] == executed_child:
                    g.remove_factor(fid)  # the root carries no goal factor
                else:
                    factor.rescale(ratio)
        anchor = CurrentStateFactor(measured, self.config.factors.sigma_current)
        self._current_fid = g.add_factor(anchor, [executed_child])
        self.measured = measured


def run_to_goal(world: WorldState, start: np.ndarray, goal: np.ndarray,
                config: PlannerConfig, seed: int = 0, trace=None,
                on_iteration=None):
    """Run the full receding-horizon loop in the given world."""
    from .driver import run_online

    planner = JistPlanner(start, goal, config, world.cfg.robot_radius)
    return run_online(world, goal, planner, dt=config.dt,
                      goal_tolerance=config.goal_tolerance,
                      max_iterations=config.max_iterations, seed=seed,
                      trace=trace, on_iteration=on_iteration)
