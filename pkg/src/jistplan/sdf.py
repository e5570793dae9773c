"""Signed distance fields over a local visibility window.

A planner iteration sees the world only through an :class:`SDFGrid` built
from the obstacles that intersect the robot's visibility window.  Distances
are positive outside obstacles, negative inside, and carry a large sentinel
(:data:`UNKNOWN_DISTANCE`) where nothing is observed: unknown space is
treated as free and the planners replan when it turns out not to be.

Grids are immutable after construction; queries are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

# Distance reported for cells/queries with no observed obstacle (meters).
UNKNOWN_DISTANCE = 1.0e6

DEFAULT_RESOLUTION = 0.25
DEFAULT_VISIBILITY = 15.0


@dataclass(frozen=True)
class Box:
    """Oriented rectangle: center, half extents, rotation angle (rad)."""

    center: np.ndarray
    half: np.ndarray
    angle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "half", np.asarray(self.half, dtype=float))

    @staticmethod
    def square(center, side: float, angle: float = 0.0) -> "Box":
        return Box(np.asarray(center, float), np.array([side / 2.0, side / 2.0]), angle)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance from ``points`` (N,2) to this rectangle.

        Negative inside; magnitude is always the distance to the boundary.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float)) - self.center
        if self.angle != 0.0:
            c, s = math.cos(self.angle), math.sin(self.angle)
            p = p @ np.array([[c, -s], [s, c]])  # rotate into box frame
        d = np.abs(p) - self.half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(np.maximum(d[:, 0], d[:, 1]), 0.0)
        return outside + inside

    def contains(self, point) -> bool:
        return bool(self.signed_distance(np.asarray(point, float)[None, :])[0] <= 0.0)

    def corners(self) -> np.ndarray:
        """Corner coordinates (4,2), counter-clockwise."""
        hx, hy = self.half
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = math.cos(self.angle), math.sin(self.angle)
        return local @ np.array([[c, s], [-s, c]]) + self.center

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        cs = self.corners()
        return cs.min(axis=0), cs.max(axis=0)


class SdfSample(NamedTuple):
    """Result of one grid query; ``known`` is False outside the window."""

    distance: float
    gradient: np.ndarray
    known: bool


@dataclass
class SDFGrid:
    """Regular grid of signed distances, bilinearly interpolated on query.

    ``origin`` is the world position of cell (0, 0)'s center; ``data`` is
    row-major with shape (height, width): data[iy, ix] belongs to the cell
    center origin + (ix, iy) * resolution.
    """

    origin: np.ndarray
    resolution: float
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.data = np.asarray(self.data, dtype=float)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def _cells(self) -> list:
        # flat python-float copy; scalar queries avoid numpy indexing overhead
        flat = self.__dict__.get("_flat")
        if flat is None:
            flat = self.data.ravel().tolist()
            self.__dict__["_flat"] = flat
        return flat

    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the interpolatable region."""
        ox, oy = self.origin
        return (ox, oy, ox + (self.width - 1) * self.resolution,
                oy + (self.height - 1) * self.resolution)

    def contains(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        xmin, ymin, xmax, ymax = self.extent()
        return xmin <= x <= xmax and ymin <= y <= ymax

    def query_raw(self, x: float, y: float) -> tuple[float, float, float, bool]:
        """Scalar bilinear query: (distance, grad_x, grad_y, known)."""
        res = self.resolution
        gx = (x - self.origin[0]) / res
        gy = (y - self.origin[1]) / res
        w, h = self.width, self.height
        if gx < 0.0 or gy < 0.0 or gx > w - 1 or gy > h - 1:
            return UNKNOWN_DISTANCE, 0.0, 0.0, False
        if w < 2 or h < 2:  # degenerate grid: nearest value, no slope
            return float(self.data[min(int(gy), h - 1), min(int(gx), w - 1)]), \
                0.0, 0.0, True
        ix = int(gx)
        iy = int(gy)
        if ix > w - 2:
            ix = w - 2
        if iy > h - 2:
            iy = h - 2
        fx = gx - ix
        fy = gy - iy
        flat = self._cells()
        base = iy * w + ix
        v00 = flat[base]
        v10 = flat[base + 1]
        v01 = flat[base + w]
        v11 = flat[base + w + 1]
        val = (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
               + v01 * (1 - fx) * fy + v11 * fx * fy)
        dx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / res
        dy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / res
        return val, dx, dy, True

    def query(self, point) -> SdfSample:
        """Interpolated distance and gradient at a world point.

        Out-of-window queries return an "unknown space" sample: sentinel
        distance, zero gradient, known=False.
        """
        d, dx, dy, known = self.query_raw(float(point[0]), float(point[1]))
        return SdfSample(d, np.array([dx, dy]), known)

    def distances(self, points: np.ndarray) -> np.ndarray:
        """Vectorized bilinear distance lookup for (N,2) points.

        Out-of-window points get the unknown-space sentinel.
        """
        return self.query_batch(points)[0]

    def query_batch(self, points: np.ndarray):
        """Vectorized query: (distances, grad_x, grad_y, known) arrays.

        Out-of-window points report the sentinel distance, zero gradient,
        and known=False.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(pts)
        out_d = np.full(n, UNKNOWN_DISTANCE)
        out_gx = np.zeros(n)
        out_gy = np.zeros(n)
        g = (pts - self.origin) / self.resolution
        gx, gy = g[:, 0], g[:, 1]
        valid = (gx >= 0) & (gy >= 0) & (gx <= self.width - 1) & (gy <= self.height - 1)
        if not valid.any() or self.width < 2 or self.height < 2:
            if valid.any() and (self.width < 2 or self.height < 2):
                iy = np.clip(gy[valid].astype(int), 0, self.height - 1)
                ix = np.clip(gx[valid].astype(int), 0, self.width - 1)
                out_d[valid] = self.data[iy, ix]
            return out_d, out_gx, out_gy, valid
        gxv = np.clip(gx[valid], 0, self.width - 1)
        gyv = np.clip(gy[valid], 0, self.height - 1)
        ix = np.minimum(gxv.astype(int), self.width - 2)
        iy = np.minimum(gyv.astype(int), self.height - 2)
        fx = gxv - ix
        fy = gyv - iy
        d = self.data
        v00 = d[iy, ix]
        v10 = d[iy, ix + 1]
        v01 = d[iy + 1, ix]
        v11 = d[iy + 1, ix + 1]
        out_d[valid] = (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
                        + v01 * (1 - fx) * fy + v11 * fx * fy)
        out_gx[valid] = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / self.resolution
        out_gy[valid] = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / self.resolution
        return out_d, out_gx, out_gy, valid

    def dump_text(self) -> str:
        """Plain-text dump (header, then row-major values) for plotting."""
        header = (f"{self.origin[0]:.6f} {self.origin[1]:.6f} "
                  f"{self.resolution:.6f} {self.width} {self.height}")
        rows = [" ".join(f"{v:.6f}" for v in row) for row in self.data]
        return "\n".join([header] + rows) + "\n"


def parse_sdf_text(text: str) -> SDFGrid:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    ox, oy, res, w, h = lines[0].split()
    data = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    assert data.shape == (int(h), int(w))
    return SDFGrid(np.array([float(ox), float(oy)]), float(res), data)


def build_sdf(obstacles: Sequence[Box], center, half_extent,
              resolution: float = DEFAULT_RESOLUTION) -> SDFGrid:
    """Exact signed distances to the observed obstacle set on a grid.

    Each cell center stores the distance to the nearest obstacle boundary,
    negated when the center lies inside any obstacle.  Only obstacles
    intersecting the window should be passed in (limited visibility); with
    no obstacles at all every cell holds the unknown-space sentinel.
    """
    center = np.asarray(center, dtype=float)
    he = np.asarray(half_extent, dtype=float)
    if he.ndim == 0:
        he = np.array([float(he), float(he)])
    nx = int(round(2 * he[0] / resolution)) + 1
    ny = int(round(2 * he[1] / resolution)) + 1
    origin = center - he
    xs = origin[0] + resolution * np.arange(nx)
    ys = origin[1] + resolution * np.arange(ny)
    if not obstacles:
        return SDFGrid(origin, resolution, np.full((ny, nx), UNKNOWN_DISTANCE))
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    signed = np.stack([b.signed_distance(pts) for b in obstacles])
    nearest_boundary = np.abs(signed).min(axis=0)
    sign = np.where((signed <= 0.0).any(axis=0), -1.0, 1.0)
    data = (sign * nearest_boundary).reshape(ny, nx)
    return SDFGrid(origin, resolution, data)


def hinge_cost(dist: float, eps: float) -> float:
    """Obstacle cost: eps - dist inside the safety margin, zero beyond it."""
    return eps - dist if dist <= eps else 0.0


# --- robot body model -------------------------------------------------------


@dataclass(frozen=True)
class Disk:
    """Circular robot: one representative point at the configuration origin."""

    radius: float


@dataclass(frozen=True)
class PointSet:
    """Rigid body described by body-frame points with per-point radii."""

    points: np.ndarray   # (M, 2)
    radii: np.ndarray    # (M,)

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, float)))
        object.__setattr__(self, "radii", np.atleast_1d(np.asarray(self.radii, float)))


RobotShape = Union[Disk, PointSet]


def body_points(shape: RobotShape, config: np.ndarray):
    """World-frame body points with radii and placement Jacobians.

    ``config`` is a planar state [x, y, psi, ...]; returns a list of
    (point (2,), radius, jacobian (2, len(config))) tuples.  The Jacobian
    covers the full state vector; velocity columns are zero.
    """
    config = np.asarray(config, dtype=float)
    n = len(config)
    x, y = config[0], config[1]
    if isinstance(shape, Disk):
        jac = np.zeros((2, n))
        jac[0, 0] = 1.0
        jac[1, 1] = 1.0
        return [(np.array([x, y]), shape.radius, jac)]
    psi = config[2]
    c, s = math.cos(psi), math.sin(psi)
    out = []
    for q, r in zip(shape.points, shape.radii):
        px = x + c * q[0] - s * q[1]
        py = y + s * q[0] + c * q[1]
        jac = np.zeros((2, n))
        jac[0, 0] = 1.0
        jac[1, 1] = 1.0
        jac[0, 2] = -s * q[0] - c * q[1]
        jac[1, 2] = c * q[0] - s * q[1]
        out.append((np.array([px, py]), float(r), jac))
    return out
