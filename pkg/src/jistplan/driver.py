"""Shared receding-horizon execution loop and per-trial metrics.

All three planners run through :func:`run_online` so the metric
definitions are identical: executed motion time is simulated clock
(steps * dt), per-iteration compute is wall clock from SDF receipt to the
returned plan, and normalized distance divides the true path length by
the initial straight-line distance to the goal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GraphError, LinearizationError, SingularSystemError
from .world import WorldState, execute_transition, goal_reached, measure_state

OUTCOMES = ("success", "collision", "timeout", "error")


@dataclass
class TrialResult:
    planner: str
    seed: int
    outcome: str
    execution_time: float
    mean_compute: float
    normalized_distance: float | None
    iterations: int

    @property
    def success(self) -> bool:
        return self.outcome == "success"


def run_online(world: WorldState, goal: np.ndarray, planner, *, dt: float,
               goal_tolerance: float, max_iterations: int, seed: int = 0,
               trace=None, on_iteration=None) -> TrialResult:
    """Loop plan/execute/measure/update until the goal, a collision, a
    solver failure, or the iteration cap."""
    goal = np.asarray(goal, float)
    init_dist = float(np.linalg.norm(world.robot_true[:2] - goal[:2]))
    path_len = 0.0
    computes: list[float] = []
    executed = 0
    outcome = "timeout"
    for it in range(max_iterations):
        if goal_reached(world, goal, goal_tolerance):
            outcome = "success"
            break
        try:
            step = planner.iteration(world)
        except (SingularSystemError, LinearizationError, GraphError):
            outcome = "error"
            break
        computes.append(step.compute_seconds)
        prev = world.robot_true[:2].copy()
        achieved = execute_transition(world, step.next_state, dt)
        executed += 1
        path_len += float(np.linalg.norm(achieved[:2] - prev))
        if trace is not None:
            root = world.robot_true
            trace.write(
                f"{it} " + " ".join(f"{v:.6f}" for v in root) +
                f" {len(step.best_path) - 1} {step.normalized_cost:.6f}"
                f" {planner.size()} {step.compute_seconds:.6f}\n")
        if on_iteration is not None:
            on_iteration(world, planner, step, it)
        if world.collided:
            outcome = "collision"
            break
        planner.after_execute(measure_state(world), step)
    if outcome == "timeout" and goal_reached(world, goal, goal_tolerance):
        outcome = "success"  # reached on the final allowed step
    mean_compute = float(np.mean(computes)) if computes else 0.0
    if outcome == "success":
        norm = path_len / init_dist if init_dist > 0 else 0.0
    else:
        norm = None
    return TrialResult(getattr(planner, "name", "planner"), seed, outcome,
                       executed * dt, mean_compute, norm, len(computes))
