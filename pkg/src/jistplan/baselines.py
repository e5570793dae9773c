"""Comparison planners: a chain trajectory optimizer and a sampling tree.

``opt`` runs the same factor set as the tree planner on a single fixed-
length chain in receding-horizon fashion: optimize, execute the first
edge, shift the chain forward and extrapolate a new tail state.

``samp`` keeps a rewiring random tree over robot positions with explicit
collision checking of nodes and edges (nothing is optimized); each
iteration it prunes nodes invalidated by the newly observed SDF, grows
back to the node budget while rewiring toward cheaper parents, and
executes toward the branch that best trades smoothness, clearance, and
distance to goal.  Extensions are straight lines with the yaw faced along
the motion; velocities are fitted afterwards from the positions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .factors import CurrentStateFactor, GoalFactor, goal_scale_ratio
from .graph import FactorGraph
from .planner import FactorParams, PlanStep, attach_edge_factors
from .sdf import Disk, SDFGrid
from .world import WorldState, observe_sdf


@dataclass
class ChainConfig:
    horizon: int = 60
    dt: float = 0.25
    factors: FactorParams = field(default_factory=FactorParams)
    goal_tolerance: float = 0.5
    max_iterations: int = 400
    gn_max_iters: int = 6
    gn_rel_tol: float = 1.0e-3
    gn_abs_tol: float = 1.0e-8
    init_speed_frac: float = 0.8  # initialization speed, fraction of v_max

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")


class OptPlanner:
    """Receding-horizon chain optimizer (single-hypothesis baseline)."""

    name = "opt"

    def __init__(self, start: np.ndarray, goal: np.ndarray,
                 config: ChainConfig, robot_radius: float):
        from .factors import SdfRef

        self.config = config
        self.start = np.asarray(start, float).copy()
        self.goal = np.asarray(goal, float).copy()
        self.shape = Disk(robot_radius)
        self.sdf_ref = SdfRef()
        self.gp = config.factors.gp(config.dt)
        self.measured = self.start.copy()
        self.graph = FactorGraph()
        self.ids = [self.graph.add_variable(None, self._init_state(0))]
        for k in range(1, config.horizon):
            self.ids.append(self.graph.add_variable(self.ids[-1], self._init_state(k)))
        self._current = CurrentStateFactor(self.start, config.factors.sigma_current)
        self.graph.add_factor(self._current, [self.ids[0]])
        for parent, child in zip(self.ids, self.ids[1:]):
            attach_edge_factors(self.graph, parent, child, config.factors,
                                self.gp, self.sdf_ref, self.shape, self.goal,
                                1.0, config.dt)
        self._goal_factors = [f for _, (f, _) in self.graph.factors()
                              if isinstance(f, GoalFactor)]

    def _init_state(self, k: int) -> np.ndarray:
        """Straight-line interpolation from the start toward the goal."""
        cfg = self.config
        delta = self.goal[:2] - self.start[:2]
        dist = float(np.linalg.norm(delta))
        if dist > 1e-9:
            direction = delta / dist
        else:
            direction = np.array([math.cos(self.start[2]), math.sin(self.start[2])])
        step = min(dist / (cfg.horizon - 1),
                   cfg.init_speed_frac * cfg.factors.v_max * cfg.dt)
        pos = self.start[:2] + direction * step * k
        vel = direction * step / cfg.dt
        return np.array([pos[0], pos[1], self.start[2], vel[0], vel[1], 0.0])

    def size(self) -> int:
        return self.config.horizon

    def iteration(self, world: WorldState) -> PlanStep:
        sdf = observe_sdf(world, center=self.measured[:2])
        t0 = time.perf_counter()
        self.sdf_ref.grid = sdf
        ratio = goal_scale_ratio(self.measured, self.start, self.goal)
        for f in self._goal_factors:
            f.rescale(ratio)
        cfg = self.config
        report = self.graph.gauss_newton(max_iters=cfg.gn_max_iters,
                                         rel_tol=cfg.gn_rel_tol,
                                         abs_tol=cfg.gn_abs_tol)
        step = PlanStep(self.graph.value(self.ids[1]).copy(), self.ids[-1],
                        list(self.ids),
                        report.final_cost / (cfg.horizon - 1),
                        time.perf_counter() - t0)
        return step

    def after_execute(self, measured: np.ndarray, step: PlanStep) -> None:
        """Shift the chain one state forward and extrapolate a new tail."""
        g = self.graph
        for k in range(1, len(self.ids)):
            g.set_value(self.ids[k - 1], g.value(self.ids[k]))
        tail = g.value(self.ids[-1]).copy()
        tail[0] += tail[3] * self.config.dt
        tail[1] += tail[4] * self.config.dt
        tail[2] += tail[5] * self.config.dt
        g.set_value(self.ids[-1], tail)
        measured = np.asarray(measured, float).copy()
        g.set_value(self.ids[0], measured)
        self._current.retarget(measured)
        self.measured = measured


def run_opt(world: WorldState, start, goal, config: ChainConfig, seed: int = 0,
            trace=None, on_iteration=None):
    from .driver import run_online

    planner = OptPlanner(start, goal, config, world.cfg.robot_radius)
    return run_online(world, goal, planner, dt=config.dt,
                      goal_tolerance=config.goal_tolerance,
                      max_iterations=config.max_iterations, seed=seed,
                      trace=trace, on_iteration=on_iteration)


# --- sampling tree baseline --------------------------------------------------


def _samp_factors() -> FactorParams:
    # Tuned separately from the optimizing planners: soft smoothness so the
    # goal heuristic dominates branch choice on inherently jagged trees.
    return FactorParams(qc=np.array([20.0, 20.0, 20.0]))


@dataclass
class TreeConfig:
    node_budget: int = 60
    extend_step: float = 0.75
    sample_window: float = 8.0
    rewire_radius: float = 1.5
    goal_weight: float = 30.0
    collision_check_step: float = 0.1
    dt: float = 0.25
    goal_tolerance: float = 0.5
    max_iterations: int = 400
    world_bounds: tuple[float, float, float, float] = (0.0, 0.0, 90.0, 120.0)
    factors: FactorParams = field(default_factory=_samp_factors)
    attempts_per_node: int = 30

    def __post_init__(self):
        if self.rewire_radius < self.extend_step:
            raise ValueError("rewire_radius must be at least extend_step")


def collision_free_edge(a, b, sdf: SDFGrid, shape: Disk, step: float) -> bool:
    """True iff samples every <=step along a->b clear the robot radius.

    Points are checked one at a time so a hit exits early.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    dist = math.hypot(bx - ax, by - ay)
    n = max(1, int(math.ceil(dist / step)))
    radius = shape.radius
    for k in range(n + 1):
        t = k / n
        d, _, _, _ = sdf.query_raw(ax + t * (bx - ax), ay + t * (by - ay))
        if d - radius <= 0.0:
            return False
    return True


def fit_velocities(path, dt: float, yaw0: float | None = None) -> list[np.ndarray]:
    """Turn a position-only path into full states: velocity of state k is
    the displacement rate to k+1 (terminal state stops), yaw faces the
    motion direction."""
    path = [np.asarray(p, float) for p in path]
    if len(path) < 2:
        raise ValueError("need at least two waypoints")
    yaws = []
    prev = yaw0
    for a, b in zip(path, path[1:]):
        d = b - a
        if np.linalg.norm(d) > 1e-12:
            yaw = math.atan2(d[1], d[0])
            if prev is not None:
                yaw = prev + math.remainder(yaw - prev, 2 * math.pi)
        else:
            yaw = prev if prev is not None else 0.0
        yaws.append(yaw)
        prev = yaw
    yaws.append(yaws[-1])
    states = []
    for k, p in enumerate(path):
        if k < len(path) - 1:
            vel = (path[k + 1] - p) / dt
            wz = (yaws[k + 1] - yaws[k]) / dt if k + 1 < len(path) - 1 else 0.0
            states.append(np.array([p[0], p[1], yaws[k], vel[0], vel[1], wz]))
        else:
            states.append(np.array([p[0], p[1], yaws[k], 0.0, 0.0, 0.0]))
    return states


class SampTree:
    """Positions-only tree with parent links; ids never reused."""

    def __init__(self, root_pos):
        self.pos: dict[int, np.ndarray] = {0: np.asarray(root_pos, float).copy()}
        self.parent: dict[int, int] = {}
        self.children: dict[int, list[int]] = {0: []}
        self.root = 0
        self._next = 1

    def size(self) -> int:
        return len(self.pos)

    def add(self, parent: int, pos) -> int:
        nid = self._next
        self._next += 1
        self.pos[nid] = np.asarray(pos, float).copy()
        self.parent[nid] = parent
        self.children[parent].append(nid)
        self.children[nid] = []
        return nid

    def path_ids(self, node: int) -> list[int]:
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]])
        path.reverse()
        return path

    def positions_to(self, node: int) -> list[np.ndarray]:
        return [self.pos[i] for i in self.path_ids(node)]

    def nearest(self, q) -> int:
        qx, qy = float(q[0]), float(q[1])
        best, best_d = self.root, math.inf
        for nid, p in self.pos.items():
            d = (p[0] - qx) ** 2 + (p[1] - qy) ** 2
            if d < best_d:
                best, best_d = nid, d
        return best

    def within(self, q, radius: float) -> list[int]:
        r2 = radius * radius
        qx, qy = float(q[0]), float(q[1])
        return [nid for nid, p in self.pos.items()
                if (p[0] - qx) ** 2 + (p[1] - qy) ** 2 <= r2]

    def remove_subtree(self, node: int) -> int:
        if node == self.root:
            raise ValueError("cannot remove the root subtree")
        self.children[self.parent[node]].remove(node)
        doomed = self._subtree(node)
        for nid in doomed:
            del self.pos[nid]
            del self.children[nid]
            self.parent.pop(nid, None)
        return len(doomed)

    def reparent(self, node: int, new_parent: int) -> None:
        old = self.parent[node]
        self.children[old].remove(node)
        self.parent[node] = new_parent
        self.children[new_parent].append(node)

    def keep_only_subtree(self, node: int) -> None:
        keep = set(self._subtree(node))
        for nid in [i for i in self.pos if i not in keep]:
            del self.pos[nid]
            del self.children[nid]
            self.parent.pop(nid, None)
        self.parent.pop(node, None)
        self.root = node

    def _subtree(self, node: int) -> list[int]:
        out = [node]
        k = 0
        while k < len(out):
            out.extend(self.children[out[k]])
            k += 1
        return out


def samp_path_cost(tree: SampTree, node: int, goal_xy, cfg: TreeConfig,
                   sdf: SDFGrid, radius: float) -> float:
    return _path_cost(tree.positions_to(node), goal_xy, cfg, sdf, radius)


def _path_cost(positions, goal_xy, cfg: TreeConfig, sdf: SDFGrid,
               radius: float) -> float:
    """Smoothness (velocity-change) + clearance hinge + goal-distance heuristic,
    mirroring the tree planner's GP and obstacle terms on fitted velocities."""
    fp = cfg.factors
    qc = np.resize(np.asarray(fp.qc, float), 2)
    w_vel = 4.0 / (cfg.dt * qc)  # velocity block of the GP information matrix
    inv_var_obs = 1.0 / fp.sigma_obs ** 2
    cost = cfg.goal_weight * float(np.linalg.norm(positions[-1] - np.asarray(goal_xy)))
    if len(positions) == 1:
        return cost
    vels = [(b - a) / cfg.dt for a, b in zip(positions, positions[1:])]
    vels.append(np.zeros(2))
    for va, vb in zip(vels, vels[1:]):
        dv = va - vb
        cost += 0.5 * float(dv * dv @ w_vel)
    for p in positions[1:]:
        d, _, _, known = sdf.query_raw(p[0], p[1])
        if known:
            c = fp.eps_obs - (d - radius)
            if c > 0.0:
                cost += 0.5 * c * c * inv_var_obs
    return cost


class SampPlanner:
    """Receding-horizon rewiring tree with explicit collision checking."""

    name = "samp"

    def __init__(self, start: np.ndarray, goal: np.ndarray, config: TreeConfig,
                 robot_radius: float, rng_seed: int = 0):
        self.config = config
        self.start = np.asarray(start, float).copy()
        self.goal = np.asarray(goal, float).copy()
        self.shape = Disk(robot_radius)
        self.rng = np.random.default_rng(rng_seed)
        self.tree = SampTree(self.start[:2])
        self.measured = self.start.copy()
        self.sdf: SDFGrid | None = None

    def size(self) -> int:
        return self.tree.size()

    # -- tree maintenance --

    def _node_free(self, pos, sdf) -> bool:
        d, _, _, _ = sdf.query_raw(pos[0], pos[1])
        return d - self.shape.radius > 0.0

    def prune_invalid(self, sdf: SDFGrid) -> int:
        """Re-validate every node and edge against the new SDF.

        Nodes in collision are dropped.  Subtrees cut off by a broken edge
        are orphaned, not discarded: each orphan tries to reconnect to the
        surviving tree through the cheapest collision-free parent in range,
        and only unreconnectable nodes are removed.
        """
        cfg = self.config
        tree = self.tree
        max_edge = min(cfg.extend_step, cfg.factors.v_max * cfg.dt)
        ids = sorted(tree.pos)
        valid = {nid: nid == tree.root or self._node_free(tree.pos[nid], sdf)
                 for nid in ids}
        edge_ok = {}
        for nid in ids:
            if nid == tree.root:
                continue
            p = tree.parent[nid]
            edge_ok[nid] = valid[nid] and valid[p] and collision_free_edge(
                tree.pos[p], tree.pos[nid], sdf, self.shape,
                cfg.collision_check_step)
        connected = {tree.root}
        stack = [tree.root]
        while stack:
            for c in tree.children[stack.pop()]:
                if edge_ok.get(c):
                    connected.add(c)
                    stack.append(c)
        # orphan reconnection sweeps until no orphan can rejoin
        progress = True
        while progress:
            progress = False
            for nid in ids:
                if nid in connected or not valid[nid]:
                    continue
                p = tree.parent.get(nid)
                if p in connected and edge_ok.get(nid):
                    connected.add(nid)
                    progress = True
                    continue
                pos = tree.pos[nid]
                best, best_cost = None, math.inf
                for nb in sorted(connected):
                    if float(np.linalg.norm(pos - tree.pos[nb])) > min(
                            max_edge, cfg.rewire_radius) + 1e-9:
                        continue
                    cost = _path_cost(tree.positions_to(nb) + [pos],
                                      self.goal[:2], cfg, sdf, self.shape.radius)
                    if cost < best_cost and collision_free_edge(
                            tree.pos[nb], pos, sdf, self.shape,
                            cfg.collision_check_step):
                        best, best_cost = nb, cost
                if best is not None:
                    tree.reparent(nid, best)
                    edge_ok[nid] = True
                    connected.add(nid)
                    progress = True
        doomed = [nid for nid in ids if nid not in connected]
        for nid in doomed:
            p = tree.parent.pop(nid, None)
            if p is not None and p in tree.children:
                tree.children[p].remove(nid)
        for nid in doomed:
            del tree.pos[nid]
            del tree.children[nid]
        return len(doomed)

    def grow(self, sdf: SDFGrid) -> int:
        cfg = self.config
        tree = self.tree
        max_edge = min(cfg.extend_step, cfg.factors.v_max * cfg.dt)
        xmin, ymin, xmax, ymax = cfg.world_bounds
        added = 0
        attempts = 0
        budget_attempts = cfg.attempts_per_node * cfg.node_budget
        while tree.size() < cfg.node_budget and attempts < budget_attempts:
            attempts += 1
            w = cfg.sample_window
            lo = np.maximum([self.measured[0] - w, self.measured[1] - w], [xmin, ymin])
            hi = np.minimum([self.measured[0] + w, self.measured[1] + w], [xmax, ymax])
            q = self.rng.uniform(lo, np.maximum(hi, lo))
            near = tree.nearest(q)
            delta = q - tree.pos[near]
            dist = float(np.linalg.norm(delta))
            new = q if dist <= max_edge else tree.pos[near] + delta * (max_edge / dist)
            if not self._node_free(new, sdf):
                continue
            best_parent, best_cost = None, math.inf
            for nb in sorted(tree.within(new, cfg.rewire_radius)):
                if float(np.linalg.norm(new - tree.pos[nb])) > max_edge + 1e-9:
                    continue
                if not collision_free_edge(tree.pos[nb], new, sdf, self.shape,
                                           cfg.collision_check_step):
                    continue
                cost = _path_cost(tree.positions_to(nb) + [new], self.goal[:2],
                                  cfg, sdf, self.shape.radius)
                if cost < best_cost:
                    best_parent, best_cost = nb, cost
            if best_parent is None:
                continue
            nid = tree.add(best_parent, new)
            added += 1
            # rewire: route neighbors through the new node when cheaper
            new_path = tree.positions_to(nid)
            on_path = set(tree.path_ids(nid))
            for nb in sorted(tree.within(new, cfg.rewire_radius)):
                if nb in on_path or nb == nid:
                    continue
                if float(np.linalg.norm(tree.pos[nb] - new)) > max_edge + 1e-9:
                    continue
                cur = _path_cost(tree.positions_to(nb), self.goal[:2], cfg, sdf,
                                 self.shape.radius)
                alt = _path_cost(new_path + [tree.pos[nb]], self.goal[:2], cfg,
                                 sdf, self.shape.radius)
                if alt + 1e-12 < cur and collision_free_edge(
                        new, tree.pos[nb], sdf, self.shape,
                        cfg.collision_check_step):
                    tree.reparent(nb, nid)
        return added

    def rewire_tree(self, sdf: SDFGrid) -> int:
        """Optimality repair after the environment moved: re-choose each
        node's parent among collision-free neighbors when that lowers its
        path cost (descendants are never eligible, keeping the tree acyclic)."""
        cfg = self.config
        tree = self.tree
        max_edge = min(cfg.extend_step, cfg.factors.v_max * cfg.dt)
        rewired = 0
        for nid in sorted(tree.pos):
            if nid == tree.root:
                continue
            pos = tree.pos[nid]
            cur_cost = _path_cost(tree.positions_to(nid), self.goal[:2], cfg,
                                  sdf, self.shape.radius)
            blocked = set(tree._subtree(nid))
            best, best_cost = None, cur_cost
            for nb in sorted(tree.within(pos, cfg.rewire_radius)):
                if nb in blocked or nb == tree.parent[nid]:
                    continue
                if float(np.linalg.norm(pos - tree.pos[nb])) > max_edge + 1e-9:
                    continue
                alt = _path_cost(tree.positions_to(nb) + [pos], self.goal[:2],
                                 cfg, sdf, self.shape.radius)
                if alt + 1e-12 < best_cost and collision_free_edge(
                        tree.pos[nb], pos, sdf, self.shape,
                        cfg.collision_check_step):
                    best, best_cost = nb, alt
            if best is not None:
                tree.reparent(nid, best)
                rewired += 1
        return rewired

    def best_node(self, sdf: SDFGrid) -> int:
        best, best_cost = self.tree.root, math.inf
        for nid in sorted(self.tree.pos):
            cost = samp_path_cost(self.tree, nid, self.goal[:2], self.config,
                                  sdf, self.shape.radius)
            if cost < best_cost:
                best, best_cost = nid, cost
        return best

    # -- driver protocol --

    def iteration(self, world: WorldState) -> PlanStep:
        cfg = self.config
        sdf = observe_sdf(world, center=self.measured[:2])
        t0 = time.perf_counter()
        self.sdf = sdf
        self.prune_invalid(sdf)
        self.rewire_tree(sdf)
        self.grow(sdf)
        best = self.best_node(sdf)
        path = self.tree.path_ids(best)
        if len(path) < 2:
            # boxed in: hold position until the scene opens up
            hold = self.measured.copy()
            hold[3:] = 0.0
            return PlanStep(hold, best, path, 0.0, time.perf_counter() - t0)
        states = fit_velocities(self.tree.positions_to(best), cfg.dt,
                                yaw0=float(self.measured[2]))
        cost = samp_path_cost(self.tree, best, self.goal[:2], cfg, sdf,
                              self.shape.radius)
        return PlanStep(states[1], best, path, cost / (len(path) - 1),
                        time.perf_counter() - t0)

    def after_execute(self, measured: np.ndarray, step: PlanStep) -> None:
        """Unreachable pruning: keep the subtree of the node nearest the
        measured position and re-root there."""
        measured = np.asarray(measured, float).copy()
        nearest = self.tree.nearest(measured[:2])
        self.tree.keep_only_subtree(nearest)
        self.tree.pos[nearest] = measured[:2].copy()
        self.measured = measured


def run_samp(world: WorldState, start, goal, config: TreeConfig, seed: int = 0,
             trace=None, on_iteration=None):
    from .driver import run_online

    planner = SampPlanner(start, goal, config, world.cfg.robot_radius,
                          rng_seed=seed)
    return run_online(world, goal, planner, dt=config.dt,
                      goal_tolerance=config.goal_tolerance,
                      max_iterations=config.max_iterations, seed=seed,
                      trace=trace, on_iteration=on_iteration)
