"""Online motion planning over tree-structured factor graphs.

The package bundles three receding-horizon planners sharing one cost
model -- a joint sampling + optimization tree planner (jist), a chain
trajectory optimizer (opt), and a rewiring sampling tree (samp) -- plus
deterministic planar simulation worlds and a benchmark harness.
"""

from .graph import (FactorGraph, GraphError, LinearSystem, LinearizationError,
                    SingularSystemError, SolveReport)
from .factors import (CurrentStateFactor, Factor, GoalFactor, GpParams,
                      GpPriorFactor, InterpObstacleFactor, LimitFactor,
                      NonholonomicFactor, ObstacleFactor, SdfRef,
                      goal_cov_scale, goal_scale_ratio, gp_interpolate,
                      gp_transition)
from .sdf import (Box, Disk, PointSet, RobotShape, SDFGrid, SdfSample,
                  UNKNOWN_DISTANCE, body_points, build_sdf, hinge_cost)

__all__ = [name for name in dir() if not name.startswith("_")]
