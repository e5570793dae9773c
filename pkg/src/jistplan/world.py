"""Deterministic planar worlds with dynamic obstacles and noisy execution.

Each trial owns one :class:`WorldState`.  Three independent RNG streams
(obstacle motion, execution noise, measurement noise) are derived from the
config seed, so identical seeds give bitwise-identical obstacle
trajectories no matter which planner is driving.

The robot is a disk tracked kinematically: executing a commanded state
lands on it up to Gaussian pose noise, while collisions are checked along
the swept segment against obstacles interpolated over the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sdf import Box, SDFGrid, build_sdf

_PLACEMENT_TRIES = 2000


@dataclass
class Obstacle:
    half: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    patrol_span: tuple[float, float] | None = None  # x-range for patrol movers

    def __post_init__(self):
        self.half = np.asarray(self.half, dtype=float)
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)

    def box(self) -> Box:
        return Box(self.position.copy(), self.half.copy())


@dataclass
class EnvConfig:
    kind: str = "forest"  # static | forest | patrol | two_corridor
    world_size: tuple[float, float] = (90.0, 120.0)
    obstacle_count: int = 80
    obstacle_side: float = 6.0
    grid_spacing: float = 15.0
    top_speed: float = 1.5
    accel_max: float = 0.6
    exec_noise_sigma: tuple[float, float, float] = (0.03, 0.03, 0.03)
    exec_noise_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meas_noise_sigma: tuple[float, float, float] = (0.03, 0.03, 0.03)
    meas_noise_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    min_separation: float = 70.0
    robot_radius: float = 1.5
    start_goal_clearance: float = 1.0
    visibility: float = 15.0
    sdf_resolution: float = 0.25
    collision_substeps: int = 10
    seed: int = 0


@dataclass
class WorldState:
    cfg: EnvConfig
    bounds: tuple[float, float, float, float]
    robot_true: np.ndarray
    obstacles: list[Obstacle]
    rng_world: np.random.Generator
    rng_exec: np.random.Generator
    rng_meas: np.random.Generator
    time: float = 0.0
    collided: bool = False
    script: list[np.ndarray] = field(default_factory=list)
    replay: list[np.ndarray] | None = None
    _replay_idx: int = 0
    # two-corridor toggle bookkeeping
    gap_centers: tuple[float, float] | None = None
    toggle_y: float = 0.0
    toggled: bool = False
    _blocker: int | None = None

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def record(self) -> None:
        self.script.append(np.array([o.position.copy() for o in self.obstacles]))


def _rngs(seed: int):
    streams = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(s) for s in streams)


def _initial_state(start_xy, goal_xy) -> np.ndarray:
    heading = math.atan2(goal_xy[1] - start_xy[1], goal_xy[0] - start_xy[0])
    return np.array([start_xy[0], start_xy[1], heading, 0.0, 0.0, 0.0])


def _goal_state(start: np.ndarray, goal_xy) -> np.ndarray:
    # goal yaw keeps the approach heading, pre-unwrapped to the start branch
    return np.array([goal_xy[0], goal_xy[1], start[2], 0.0, 0.0, 0.0])


def _sample_free_point(rng, bounds, obstacles, clearance, tries=_PLACEMENT_TRIES):
    xmin, ymin, xmax, ymax = bounds
    for _ in range(tries):
        p = rng.uniform([xmin, ymin], [xmax, ymax])
        if all(float(o.box().signed_distance(p[None])[0]) > clearance
               for o in obstacles):
            return p
    raise RuntimeError("could not place a collision-free point")


def make_env(cfg: EnvConfig) -> tuple[WorldState, np.ndarray, np.ndarray]:
    """Build a seeded world; returns (world, start_state, goal_state)."""
    rng_place, rng_world, rng_exec, rng_meas = _rngs(cfg.seed)
    w, h = cfg.world_size
    bounds = (0.0, 0.0, w, h)
    margin = cfg.robot_radius + 1.0
    inner = (margin, margin, w - margin, h - margin)
    clearance = cfg.robot_radius + cfg.start_goal_clearance
    half = np.array([cfg.obstacle_side / 2.0] * 2)

    if cfg.kind == "static":
        nx = max(1, int(round(w / cfg.grid_spacing)))
        ny = max(1, int(round(h / cfg.grid_spacing)))
        ox = (w - nx * cfg.grid_spacing) / 2.0 + cfg.grid_spacing / 2.0
        oy = (h - ny * cfg.grid_spacing) / 2.0 + cfg.grid_spacing / 2.0
        obstacles = [Obstacle(half, [ox + i * cfg.grid_spacing, oy + j * cfg.grid_spacing],
                              [0.0, 0.0])
                     for j in range(ny) for i in range(nx)]
        start_xy, goal_xy = _pick_separated_pair(rng_place, inner, obstacles,
                                                 clearance, cfg.min_separation)
    elif cfg.kind == "forest":
        # start/goal first, then scatter obstacles clear of both
        for _ in range(_PLACEMENT_TRIES):
            start_xy = rng_place.uniform(inner[:2], inner[2:])
            goal_xy = rng_place.uniform(inner[:2], inner[2:])
            if np.linalg.norm(start_xy - goal_xy) >= cfg.min_separation:
                break
        else:
            raise RuntimeError("could not separate start and goal")
        obstacles = []
        tries = 0
        while len(obstacles) < cfg.obstacle_count:
            if tries > _PLACEMENT_TRIES * max(cfg.obstacle_count, 1):
                raise RuntimeError("could not place forest obstacles")
            tries += 1
            pos = rng_place.uniform([half[0], half[1]], [w - half[0], h - half[1]])
            box = Box(pos, half)
            if float(box.signed_distance(start_xy[None])[0]) <= clearance:
                continue
            if float(box.signed_distance(goal_xy[None])[0]) <= clearance:
                continue
            angle = rng_place.uniform(0, 2 * math.pi)
            speed = rng_place.uniform(0, cfg.top_speed)
            obstacles.append(Obstacle(half, pos,
                                      speed * np.array([math.cos(angle), math.sin(angle)])))
    elif cfg.kind == "patrol":
        obstacles = _patrol_obstacles(cfg, rng_place)
        x0, y0, x1, y1 = bounds
        for _ in range(_PLACEMENT_TRIES):
            start_xy = rng_place.uniform([x0 + 1.0, y0 + 1.0], [x0 + 4.0, y1 - 1.0])
            goal_xy = rng_place.uniform([x1 - 4.0, y0 + 1.0], [x1 - 1.0, y1 - 1.0])
            if all(float(o.box().signed_distance(start_xy[None])[0]) > clearance and
                   float(o.box().signed_distance(goal_xy[None])[0]) > clearance
                   for o in obstacles):
                break
        else:
            raise RuntimeError("could not place patrol start/goal")
    else:
        raise ValueError(f"unknown environment kind {cfg.kind!r}")

    start = _initial_state(start_xy, goal_xy)
    world = WorldState(cfg, bounds, start.copy(), obstacles,
                       rng_world, rng_exec, rng_meas)
    world.record()
    return world, start, _goal_state(start, goal_xy)


def _pick_separated_pair(rng, inner, obstacles, clearance, min_sep):
    for _ in range(_PLACEMENT_TRIES):
        a = _sample_free_point(rng, inner, obstacles, clearance)
        b = _sample_free_point(rng, inner, obstacles, clearance)
        if np.linalg.norm(a - b) >= min_sep:
            return a, b
    raise RuntimeError("could not separate start and goal")


def _patrol_obstacles(cfg: EnvConfig, rng) -> list[Obstacle]:
    """Two stationary blocks plus two movers sweeping the passage gaps."""
    w, h = cfg.world_size
    stationary = [
        Obstacle([1.0, 2.0], [w * 0.325, 2.0], [0.0, 0.0]),
        Obstacle([1.0, 2.0], [w * 0.675, h - 2.0], [0.0, 0.0]),
    ]
    movers = []
    for x_center, y in ((w * 0.325, h - 3.0), (w * 0.675, 3.0)):
        span = (x_center - 4.0, x_center + 4.0)
        speed = rng.uniform(0.5, 1.0) * cfg.top_speed
        direction = 1.0 if rng.random() < 0.5 else -1.0
        x = rng.uniform(*span)
        movers.append(Obstacle([1.0, 1.0], [x, y], [direction * speed, 0.0],
                               patrol_span=span))
    return stationary + movers


def make_two_corridor_world(seed: int, robot_radius: float = 1.5
                            ) -> tuple[WorldState, np.ndarray, np.ndarray]:
    """Scripted switching test: a wall with two gaps; once the robot commits
    (crosses the trigger line) the nearer gap is closed by a blocker."""
    cfg = EnvConfig(kind="two_corridor", world_size=(30.0, 30.0),
                    obstacle_count=0, robot_radius=robot_radius,
                    min_separation=0.0, seed=seed)
    _, rng_world, rng_exec, rng_meas = _rngs(seed)
    rng_place = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    wall_y, wall_half = 15.0, 1.5
    obstacles = [
        Obstacle([3.0, wall_half], [3.0, wall_y], [0.0, 0.0]),
        Obstacle([3.0, wall_half], [15.0, wall_y], [0.0, 0.0]),
        Obstacle([3.0, wall_half], [27.0, wall_y], [0.0, 0.0]),
        # blocker parked above the arena until the toggle fires
        Obstacle([3.0, wall_half], [15.0, 45.0], [0.0, 0.0]),
    ]
    start_xy = np.array([15.0 + rng_place.uniform(-5.0, 5.0), 2.5])
    goal_xy = np.array([15.0 + rng_place.uniform(-5.0, 5.0), 27.5])
    start = _initial_state(start_xy, goal_xy)
    world = WorldState(cfg, (0.0, 0.0, 30.0, 30.0), start.copy(), obstacles,
                       rng_world, rng_exec, rng_meas,
                       gap_centers=(9.0, 21.0), toggle_y=8.0, _blocker=3)
    world.record()
    return world, start, _goal_state(start, goal_xy)


def step_world(world: WorldState, dt: float) -> None:
    """Advance obstacle motion by dt (no-op for static worlds)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = world.cfg
    if world.replay is not None:
        idx = min(world._replay_idx + 1, len(world.replay) - 1)
        world._replay_idx = idx
        for o, pos in zip(world.obstacles, world.replay[idx]):
            o.position = pos.copy()
    elif cfg.kind == "forest":
        xmin, ymin, xmax, ymax = world.bounds
        for o in world.obstacles:
            accel = world.rng_world.uniform(-cfg.accel_max, cfg.accel_max, size=2)
            o.velocity = o.velocity + accel * dt
            speed = float(np.linalg.norm(o.velocity))
            if speed > cfg.top_speed:
                o.velocity *= cfg.top_speed / speed
            o.position = o.position + o.velocity * dt
            # elastic reflection keeps the full extent inside the bounds
            for ax, (lo, hi) in enumerate(((xmin, xmax), (ymin, ymax))):
                lo_c, hi_c = lo + o.half[ax], hi - o.half[ax]
                if o.position[ax] < lo_c:
                    o.position[ax] = 2 * lo_c - o.position[ax]
                    o.velocity[ax] = -o.velocity[ax]
                elif o.position[ax] > hi_c:
                    o.position[ax] = 2 * hi_c - o.position[ax]
                    o.velocity[ax] = -o.velocity[ax]
    elif cfg.kind == "patrol":
        for o in world.obstacles:
            if o.patrol_span is None:
                continue
            o.position[0] += o.velocity[0] * dt
            lo, hi = o.patrol_span
            if o.position[0] < lo:
                o.position[0] = lo
                o.velocity[0] = abs(o.velocity[0])
            elif o.position[0] > hi:
                o.position[0] = hi
                o.velocity[0] = -abs(o.velocity[0])
    elif cfg.kind == "two_corridor":
        if not world.toggled and world.robot_true[1] >= world.toggle_y:
            gaps = world.gap_centers
            nearest = min(gaps, key=lambda gx: abs(gx - world.robot_true[0]))
            world.obstacles[world._blocker].position = np.array([nearest, 15.0])
            world.toggled = True
    world.time += dt
    world.record()


def observe_sdf(world: WorldState, center=None) -> SDFGrid:
    """SDF of the visibility window; obstacle positions only, never velocities."""
    cfg = world.cfg
    c = np.asarray(center if center is not None else world.robot_true[:2], float)
    he = cfg.visibility
    boxes = []
    for o in world.obstacles:
        if (np.abs(o.position - c) <= he + o.half).all():
            boxes.append(o.box())
    return build_sdf(boxes, c, he, cfg.sdf_resolution)


def _aabb_sdf(point, center, half) -> float:
    qx = abs(point[0] - center[0]) - half[0]
    qy = abs(point[1] - center[1]) - half[1]
    ox = qx if qx > 0 else 0.0
    oy = qy if qy > 0 else 0.0
    outside = math.hypot(ox, oy)
    inside = min(max(qx, qy), 0.0)
    return outside + inside


def execute_transition(world: WorldState, commanded: np.ndarray, dt: float) -> np.ndarray:
    """Move the robot to the commanded state (plus pose noise) over dt.

    The world advances with the robot; collision is checked on the swept
    segment against linearly interpolated obstacle motion and sets the
    world's terminal flag.
    """
    cfg = world.cfg
    old_r = world.robot_true[:2].copy()
    old_pos = [o.position.copy() for o in world.obstacles]
    step_world(world, dt)
    achieved = np.asarray(commanded, dtype=float).copy()
    noise = np.asarray(cfg.exec_noise_mean) + \
        np.asarray(cfg.exec_noise_sigma) * world.rng_exec.standard_normal(3)
    achieved[:3] += noise
    new_r = achieved[:2]

    reach = float(np.linalg.norm(new_r - old_r)) + cfg.top_speed * dt + cfg.robot_radius
    relevant = [(o, p) for o, p in zip(world.obstacles, old_pos)
                if np.abs(o.position - old_r).max() - o.half.max() < reach + 2.0 or
                np.abs(p - old_r).max() - o.half.max() < reach + 2.0]
    k_sub = cfg.collision_substeps
    for k in range(k_sub + 1):
        s = k / k_sub
        rx = old_r[0] + s * (new_r[0] - old_r[0])
        ry = old_r[1] + s * (new_r[1] - old_r[1])
        for o, p_old in relevant:
            cx = p_old[0] + s * (o.position[0] - p_old[0])
            cy = p_old[1] + s * (o.position[1] - p_old[1])
            if _aabb_sdf((rx, ry), (cx, cy), o.half) <= cfg.robot_radius:
                world.collided = True
                break
        if world.collided:
            break
    world.robot_true = achieved.copy()
    return achieved


def measure_state(world: WorldState) -> np.ndarray:
    """Noisy pose measurement; velocities are reported exactly."""
    cfg = world.cfg
    meas = world.robot_true.copy()
    meas[:3] += np.asarray(cfg.meas_noise_mean) + \
        np.asarray(cfg.meas_noise_sigma) * world.rng_meas.standard_normal(3)
    return meas


def goal_reached(world: WorldState, goal: np.ndarray, tol: float) -> bool:
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    return float(np.linalg.norm(world.robot_true[:2] - np.asarray(goal)[:2])) <= tol


# --- script dump / replay ----------------------------------------------------


def dump_world_script(world: WorldState) -> str:
    """Per-step obstacle positions as plain text, for replay and plotting."""
    lines = [f"{len(world.obstacles)}"]
    for k, positions in enumerate(world.script):
        flat = " ".join(f"{v:.9f}" for p in positions for v in p)
        lines.append(f"{k} {flat}".rstrip())
    return "\n".join(lines) + "\n"


def load_world_script(text: str) -> list[np.ndarray]:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    count = int(lines[0])
    steps = []
    for ln in lines[1:]:
        vals = [float(v) for v in ln.split()[1:]]
        steps.append(np.array(vals).reshape(count, 2))
    return steps


def attach_replay(world: WorldState, script: list[np.ndarray]) -> None:
    """Re-run a recorded obstacle script instead of live dynamics."""
    if script and len(script[0]) != len(world.obstacles):
        raise ValueError("script obstacle count does not match world")
    world.replay = script
    world._replay_idx = 0
    for o, pos in zip(world.obstacles, script[0]):
        o.position = pos.copy()
    world.script = [np.array([o.position.copy() for o in world.obstacles])]
