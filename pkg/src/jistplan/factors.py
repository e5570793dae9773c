"""Residual factors attached to the trajectory graph.

Every factor contributes 0.5 * ||h||^2_Sigma to the objective, with h the
raw residual and Sigma the factor covariance.  Factors hand the solver
*whitened* quantities (pre-multiplied by W with W^T W = Sigma^-1) so the
normal equations reduce to sums of wJ^T wJ and wJ^T wh.

States are vectors [position(d), velocity(d)]; the planar layout is
[x, y, psi, vx, vy, vpsi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .sdf import Disk, SDFGrid, RobotShape, body_points, hinge_cost

# Scale-ratio floor that keeps the goal covariance nonsingular at the goal.
GOAL_SCALE_FLOOR = 1.0e-4

# Shared zero residual for inactive single-point hinge factors; callers
# treat residuals as read-only.
_ZERO1 = np.zeros(1)
_ZERO1.setflags(write=False)


@dataclass(frozen=True, eq=False)
class GpParams:
    """Constant-velocity motion prior: power density qc (per axis) and dt."""

    qc: np.ndarray
    dt: float

    def __post_init__(self):
        qc = np.atleast_1d(np.asarray(self.qc, dtype=float))
        if (qc <= 0).any() or self.dt <= 0:
            raise ValueError("qc and dt must be positive")
        object.__setattr__(self, "qc", qc)
        object.__setattr__(self, "_interp_cache", {})

    @property
    def d(self) -> int:
        return len(self.qc)

    @cached_property
    def phi(self) -> np.ndarray:
        return transition_matrix(self.d, self.dt)

    @cached_property
    def q(self) -> np.ndarray:
        return gp_covariance(self.qc, self.dt)

    @cached_property
    def q_inv(self) -> np.ndarray:
        return gp_information(self.qc, self.dt)

    @cached_property
    def sqrt_info(self) -> np.ndarray:
        # W with W^T W = Q^-1
        return np.linalg.cholesky(self.q_inv).T

    def interp_matrices(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        cache = self._interp_cache
        if tau not in cache:
            cache[tau] = gp_interp_matrices(self, tau)
        return cache[tau]


def transition_matrix(d: int, dt: float) -> np.ndarray:
    phi = np.eye(2 * d)
    phi[:d, d:] = dt * np.eye(d)
    return phi


def gp_covariance(qc: np.ndarray, dt: float) -> np.ndarray:
    d = len(qc)
    q = np.zeros((2 * d, 2 * d))
    q[:d, :d] = np.diag(dt ** 3 / 3.0 * qc)
    q[:d, d:] = np.diag(dt ** 2 / 2.0 * qc)
    q[d:, :d] = np.diag(dt ** 2 / 2.0 * qc)
    q[d:, d:] = np.diag(dt * qc)
    return q


def gp_information(qc: np.ndarray, dt: float) -> np.ndarray:
    # Closed-form inverse of the 2x2-block covariance above.
    d = len(qc)
    qi = np.zeros((2 * d, 2 * d))
    qi[:d, :d] = np.diag(12.0 / (dt ** 3 * qc))
    qi[:d, d:] = np.diag(-6.0 / (dt ** 2 * qc))
    qi[d:, :d] = np.diag(-6.0 / (dt ** 2 * qc))
    qi[d:, d:] = np.diag(4.0 / (dt * qc))
    return qi


def gp_transition(params: GpParams) -> tuple[np.ndarray, np.ndarray]:
    """State transition Phi and covariance Q of the motion prior."""
    return params.phi, params.q


def gp_interp_matrices(params: GpParams, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Interpolation maps (Lambda, Psi) for a time tau inside one interval."""
    if tau < 0.0 or tau > params.dt:
        raise ValueError(f"tau={tau} outside [0, {params.dt}]")
    d = params.d
    psi = gp_covariance(params.qc, tau) @ \
        transition_matrix(d, params.dt - tau).T @ params.q_inv
    lam = transition_matrix(d, tau) - psi @ params.phi
    return lam, psi


def gp_interpolate(theta_t, theta_next, params: GpParams, tau: float):
    """Posterior-mean state at time tau between two support states.

    Returns (state, Lambda, Psi); Lambda/Psi are also the Jacobians of the
    interpolated state with respect to theta_t / theta_next.
    """
    lam, psi = params.interp_matrices(tau)
    return lam @ np.asarray(theta_t, float) + psi @ np.asarray(theta_next, float), lam, psi


def goal_scale_ratio(current, start, goal) -> float:
    """Squared-distance ratio that shrinks the goal covariance on approach."""
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    denom = float(np.dot(start - goal, start - goal))
    if denom == 0.0:
        raise ValueError("start and goal coincide; goal scaling undefined")
    cur = np.asarray(current, float) - goal
    return max(float(np.dot(cur, cur)) / denom, GOAL_SCALE_FLOOR)


def goal_cov_scale(current, start, goal, sigma_goal: float) -> float:
    """Effective isotropic sigma of the goal factor at the current state."""
    return sigma_goal * math.sqrt(goal_scale_ratio(current, start, goal))


class SdfRef:
    """Mutable handle to the active SDF; swapped each planner iteration."""

    __slots__ = ("grid",)

    def __init__(self, grid: SDFGrid | None = None):
        self.grid = grid


def _as_ref(sdf) -> SdfRef:
    return sdf if isinstance(sdf, SdfRef) else SdfRef(sdf)


class Factor:
    """Base residual term; subclasses define error/jacobians and whitening.

    ``whitened`` returns (residual, jacobians); hinge-style factors may
    return ``None`` for the jacobians when the residual is identically
    zero (flat region), which assembly treats as an exact zero block.
    """

    arity = 1
    # Hinge-style factors are zero (residual and Jacobian) outside their
    # margin; the solver skips assembling them when the flag is set.
    maybe_inactive = False

    def whitened_error(self, *states) -> np.ndarray:
        raise NotImplementedError

    def whitened(self, *states):
        raise NotImplementedError

    def cost(self, *states) -> float:
        wh = self.whitened_error(*states)
        return 0.5 * float(wh @ wh)


class GpPriorFactor(Factor):
    """Smoothness prior between consecutive states: h = Phi x_t - x_{t+1}."""

    arity = 2

    def __init__(self, params: GpParams):
        self.params = params
        w = params.sqrt_info
        self._w = w
        self._w_phi = w @ params.phi
        self._w_neg = -w

    def error(self, theta_t, theta_next) -> np.ndarray:
        return self.params.phi @ theta_t - theta_next

    def whitened_error(self, theta_t, theta_next) -> np.ndarray:
        return self._w_phi @ theta_t - self._w @ theta_next

    def whitened(self, theta_t, theta_next):
        return self.whitened_error(theta_t, theta_next), (self._w_phi, self._w_neg)


class ObstacleFactor(Factor):
    """Hinge collision cost on one state, queried in the active SDF.

    Body points that fall outside the observed window contribute nothing
    (unknown space is optimistic) and bump ``unknown_hits``.
    """

    arity = 1
    maybe_inactive = True

    def __init__(self, sdf, shape: RobotShape, eps: float, sigma: float):
        self.sdf = _as_ref(sdf)
        self.shape = shape
        self.eps = eps
        self.sigma = sigma
        self._inv_sigma = 1.0 / sigma
        self.unknown_hits = 0
        self._disk_radius = shape.radius if isinstance(shape, Disk) else None

    def _point_costs(self, state, with_jac: bool):
        if self._disk_radius is not None:
            # hot path: a disk has one body point at (x, y) with identity placement
            d, gx, gy, known = self.sdf.grid.query_raw(state[0], state[1])
            if not known:
                self.unknown_hits += 1
                return _ZERO1, None
            c = self.eps - (d - self._disk_radius)
            if c <= 0.0:
                return _ZERO1, None
            if not with_jac:
                return np.array([c]), None
            jac = np.zeros((1, len(state)))
            jac[0, 0] = -gx
            jac[0, 1] = -gy
            return np.array([c]), jac
        grid = self.sdf.grid
        pts = body_points(self.shape, state)
        h = np.zeros(len(pts))
        jac = np.zeros((len(pts), len(state))) if with_jac else None
        for i, (p, radius, pjac) in enumerate(pts):
            sample = grid.query(p)
            if not sample.known:
                self.unknown_hits += 1
                continue
            c = hinge_cost(sample.distance - radius, self.eps)
            if c > 0.0:
                h[i] = c
                if with_jac:
                    jac[i] = -sample.gradient @ pjac
        return h, jac

    def error(self, state) -> np.ndarray:
        return self._point_costs(state, False)[0]

    def whitened_error(self, state) -> np.ndarray:
        return self._point_costs(state, False)[0] * self._inv_sigma

    def whitened(self, state):
        h, jac = self._point_costs(state, True)
        if jac is None:
            return _ZERO1, None
        return h * self._inv_sigma, (jac * self._inv_sigma,)


class InterpObstacleFactor(Factor):
    """Collision cost at an interpolated state inside one edge interval."""

    arity = 2
    maybe_inactive = True

    def __init__(self, sdf, shape: RobotShape, eps: float, sigma: float,
                 params: GpParams, tau: float):
        if not 0.0 < tau < params.dt:
            raise ValueError("tau must lie strictly inside (0, dt)")
        self.sdf = _as_ref(sdf)
        self.eps = eps
        self.sigma = sigma
        self.params = params
        self.tau = tau
        self._inner = ObstacleFactor(self.sdf, shape, eps, sigma)
        self._lam, self._psi = params.interp_matrices(tau)

    @property
    def shape(self):
        return self._inner.shape

    @property
    def unknown_hits(self):
        return self._inner.unknown_hits

    def error(self, theta_t, theta_next) -> np.ndarray:
        return self._inner.error(self._lam @ theta_t + self._psi @ theta_next)

    def whitened_error(self, theta_t, theta_next) -> np.ndarray:
        return self.error(theta_t, theta_next) * (1.0 / self.sigma)

    def whitened(self, theta_t, theta_next):
        wh, wjs = self._inner.whitened(self._lam @ theta_t + self._psi @ theta_next)
        if wjs is None:
            return _ZERO1, None
        wj = wjs[0]
        return wh, (wj @ self._lam, wj @ self._psi)


class CurrentStateFactor(Factor):
    """Anchors the root at the latest measurement: h = x - x_meas."""

    arity = 1

    def __init__(self, target, sigma: float):
        self.target = np.asarray(target, dtype=float)
        self.sigma = sigma
        self._inv_sigma = 1.0 / sigma
        self._wjac = np.eye(len(self.target)) * self._inv_sigma

    def retarget(self, target) -> None:
        self.target = np.asarray(target, dtype=float)

    def error(self, state) -> np.ndarray:
        return state - self.target

    def whitened_error(self, state) -> np.ndarray:
        return (state - self.target) * self._inv_sigma

    def whitened(self, state):
        return self.whitened_error(state), (self._wjac,)


class GoalFactor(Factor):
    """Pulls a state toward the goal; strength grows as the robot closes in.

    Effective covariance is sigma_goal^2 * ratio * I with ratio from
    :func:`goal_scale_ratio`; call ``rescale`` whenever the robot moves.
    """

    arity = 1

    def __init__(self, goal, sigma_goal: float, scale_ratio: float = 1.0):
        self.goal = np.asarray(goal, dtype=float)
        self.sigma_goal = sigma_goal
        self.rescale(scale_ratio)

    def rescale(self, scale_ratio: float) -> None:
        self.scale_ratio = max(scale_ratio, GOAL_SCALE_FLOOR)
        self.sigma = self.sigma_goal * math.sqrt(self.scale_ratio)
        self._inv_sigma = 1.0 / self.sigma
        self._wjac = np.eye(len(self.goal)) * self._inv_sigma

    def error(self, state) -> np.ndarray:
        return state - self.goal

    def whitened_error(self, state) -> np.ndarray:
        return (state - self.goal) * self._inv_sigma

    def whitened(self, state):
        return self.whitened_error(state), (self._wjac,)


class LimitFactor(Factor):
    """Per-dimension hinge on state bounds.

    The printed rule penalizes only beyond ll+eps / ul+eps; set
    ``inner_upper_margin`` to trigger the upper branch at ul-eps instead
    (margin inside the limit).
    """

    arity = 1
    maybe_inactive = True

    def __init__(self, lower, upper, eps: float, sigma: float,
                 inner_upper_margin: bool = False):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if not (self.lower < self.upper).all():
            raise ValueError("lower limits must be below upper limits")
        self.eps = eps
        self.sigma = sigma
        self._inv_sigma = 1.0 / sigma
        self._upper_edge = self.upper + (-eps if inner_upper_margin else eps)

    def error(self, state) -> np.ndarray:
        lo = self.lower + self.eps
        hi = self._upper_edge
        h = np.zeros(len(state))
        below = state < lo
        above = state > hi
        h[below] = lo[below] - state[below]
        h[above] = state[above] - hi[above]
        return h

    def whitened_error(self, state) -> np.ndarray:
        return self.error(state) * self._inv_sigma

    def whitened(self, state):
        lo = self.lower + self.eps
        hi = self._upper_edge
        n = len(state)
        below = state < lo
        above = state > hi
        if not (below.any() or above.any()):
            return np.zeros(n), None
        h = np.zeros(n)
        jac = np.zeros((n, n))
        h[below] = lo[below] - state[below]
        h[above] = state[above] - hi[above]
        idx = np.arange(n)
        jac[idx[below], idx[below]] = -1.0
        jac[idx[above], idx[above]] = 1.0
        return h * self._inv_sigma, (jac * self._inv_sigma,)


class NonholonomicFactor(Factor):
    """Penalizes sideways velocity of a differential-drive planar robot."""

    arity = 1

    def __init__(self, sigma: float):
        self.sigma = sigma
        self._inv_sigma = 1.0 / sigma

    def error(self, state) -> np.ndarray:
        psi, vx, vy = state[2], state[3], state[4]
        return np.array([vy * math.cos(psi) - vx * math.sin(psi)])

    def whitened_error(self, state) -> np.ndarray:
        return self.error(state) * self._inv_sigma

    def whitened(self, state):
        psi, vx, vy = state[2], state[3], state[4]
        c, s = math.cos(psi), math.sin(psi)
        jac = np.zeros((1, len(state)))
        jac[0, 2] = -vy * s - vx * c
        jac[0, 3] = -s
        jac[0, 4] = c
        return np.array([vy * c - vx * s]) * self._inv_sigma, (jac * self._inv_sigma,)


# --- batched evaluation ------------------------------------------------------
#
# The solver groups homogeneous factors and evaluates each group in one
# vectorized pass; every evaluator must agree exactly with the per-instance
# ``whitened`` methods above (the dense-assembly test oracle checks this).
# Evaluators accumulate into (diag, rhs, off) arrays indexed by variable /
# edge rows and return the group's cost; with acc=None they only cost.


def batch_key(factor):
    """Grouping key for vectorized assembly; None falls back to per-factor."""
    if type(factor) is GpPriorFactor:
        return (GpPriorFactor, id(factor.params))
    if type(factor) is ObstacleFactor and factor._disk_radius is not None:
        return (ObstacleFactor,
                id(factor.sdf), factor._disk_radius, factor.eps, factor.sigma)
    if type(factor) is InterpObstacleFactor and \
            factor._inner._disk_radius is not None:
        return (InterpObstacleFactor, id(factor.sdf), factor._inner._disk_radius,
                factor.eps, factor.sigma, id(factor.params), factor.tau)
    if type(factor) is GoalFactor:
        return (GoalFactor,)
    if type(factor) is CurrentStateFactor:
        return (CurrentStateFactor,)
    if type(factor) is LimitFactor:
        return (LimitFactor, factor.lower.tobytes(), factor._upper_edge.tobytes(),
                factor.eps, factor.sigma)
    if type(factor) is NonholonomicFactor:
        return (NonholonomicFactor, factor.sigma)
    return None


def _batch_gp(factors, vidx, eidx, theta, acc, bucket=None):
    f0 = factors[0]
    w, w_phi = f0._w, f0._w_phi
    wh = theta[vidx[:, 0]] @ w_phi.T - theta[vidx[:, 1]] @ w.T
    cost = 0.5 * float((wh * wh).sum())
    if bucket is not None:
        np.add.at(bucket, vidx[:, 1], 0.5 * (wh * wh).sum(axis=1))
    if acc is None:
        return cost
    np.add.at(acc.rhs, vidx[:, 0], -(wh @ w_phi))
    np.add.at(acc.rhs, vidx[:, 1], wh @ w)
    np.add.at(acc.diag, vidx[:, 0], w_phi.T @ w_phi)
    np.add.at(acc.diag, vidx[:, 1], w.T @ w)
    np.add.at(acc.off, eidx, -(w_phi.T @ w))
    return cost


def _count_unknown(factors, known):
    if not known.all():
        for i in np.nonzero(~known)[0]:
            f = factors[i]
            inner = getattr(f, "_inner", None)
            (inner or f).unknown_hits += 1


def _batch_obstacle(factors, vidx, eidx, theta, acc, bucket=None):
    f0 = factors[0]
    inv = f0._inv_sigma
    d, gx, gy, known = f0.sdf.grid.query_batch(theta[vidx[:, 0], :2])
    _count_unknown(factors, known)
    c = f0.eps - (d - f0._disk_radius)
    active = known & (c > 0.0)
    if not active.any():
        return 0.0
    wh = c[active] * inv
    cost = 0.5 * float(wh @ wh)
    if bucket is not None:
        np.add.at(bucket, vidx[active, 0], 0.5 * wh * wh)
    if acc is None:
        return cost
    rows = vidx[active, 0]
    g2 = np.column_stack([gx[active], gy[active]]) * (-inv)
    tmp_r = np.zeros((acc.rhs.shape[0], 2))
    np.add.at(tmp_r, rows, -g2 * wh[:, None])
    acc.rhs[:, :2] += tmp_r
    tmp_d = np.zeros((acc.diag.shape[0], 2, 2))
    np.add.at(tmp_d, rows, np.einsum('ki,kj->kij', g2, g2))
    acc.diag[:, :2, :2] += tmp_d
    return cost


def _batch_interp_obstacle(factors, vidx, eidx, theta, acc, bucket=None):
    f0 = factors[0]
    inv = 1.0 / f0.sigma
    lam2, psi2 = f0._lam[:2], f0._psi[:2]
    pts = theta[vidx[:, 0]] @ lam2.T + theta[vidx[:, 1]] @ psi2.T
    d, gx, gy, known = f0.sdf.grid.query_batch(pts)
    _count_unknown(factors, known)
    c = f0.eps - (d - f0._inner._disk_radius)
    active = known & (c > 0.0)
    if not active.any():
        return 0.0
    wh = c[active] * inv
    cost = 0.5 * float(wh @ wh)
    if bucket is not None:
        np.add.at(bucket, vidx[active, 1], 0.5 * wh * wh)
    if acc is None:
        return cost
    g2 = np.column_stack([gx[active], gy[active]]) * (-inv)
    jp = g2 @ lam2
    jc = g2 @ psi2
    rows_p = vidx[active, 0]
    rows_c = vidx[active, 1]
    np.add.at(acc.rhs, rows_p, -jp * wh[:, None])
    np.add.at(acc.rhs, rows_c, -jc * wh[:, None])
    np.add.at(acc.diag, rows_p, np.einsum('ki,kj->kij', jp, jp))
    np.add.at(acc.diag, rows_c, np.einsum('ki,kj->kij', jc, jc))
    np.add.at(acc.off, eidx[active], np.einsum('ki,kj->kij', jp, jc))
    return cost


def _batch_iso_unary(factors, vidx, theta, acc, targets, inv_sigmas, bucket=None):
    wh = (theta[vidx[:, 0]] - targets) * inv_sigmas[:, None]
    cost = 0.5 * float((wh * wh).sum())
    if bucket is not None:
        np.add.at(bucket, vidx[:, 0], 0.5 * (wh * wh).sum(axis=1))
    if acc is None:
        return cost
    rows = vidx[:, 0]
    np.add.at(acc.rhs, rows, -wh * inv_sigmas[:, None])
    dv = np.zeros(acc.rhs.shape[0])
    np.add.at(dv, rows, inv_sigmas * inv_sigmas)
    idx = np.arange(acc.rhs.shape[1])
    acc.diag[:, idx, idx] += dv[:, None]
    return cost


def _batch_goal(factors, vidx, eidx, theta, acc, bucket=None):
    targets = np.stack([f.goal for f in factors])
    inv = np.array([f._inv_sigma for f in factors])
    return _batch_iso_unary(factors, vidx, theta, acc, targets, inv, bucket)


def _batch_current(factors, vidx, eidx, theta, acc, bucket=None):
    targets = np.stack([f.target for f in factors])
    inv = np.array([f._inv_sigma for f in factors])
    return _batch_iso_unary(factors, vidx, theta, acc, targets, inv, bucket)


def _batch_limit(factors, vidx, eidx, theta, acc, bucket=None):
    f0 = factors[0]
    lo = f0.lower + f0.eps
    hi = f0._upper_edge
    inv = f0._inv_sigma
    t = theta[vidx[:, 0]]
    below = t < lo
    above = t > hi
    if not (below.any() or above.any()):
        return 0.0
    h = np.where(below, lo - t, np.where(above, t - hi, 0.0))
    wh = h * inv
    cost = 0.5 * float((wh * wh).sum())
    if bucket is not None:
        np.add.at(bucket, vidx[:, 0], 0.5 * (wh * wh).sum(axis=1))
    if acc is None:
        return cost
    rows = vidx[:, 0]
    sgn = np.where(below, -1.0, np.where(above, 1.0, 0.0))
    np.add.at(acc.rhs, rows, -(sgn * inv) * wh)
    dmask = (below | above) * (inv * inv)
    tmp = np.zeros_like(acc.rhs)
    np.add.at(tmp, rows, dmask)
    idx = np.arange(acc.rhs.shape[1])
    acc.diag[:, idx, idx] += tmp
    return cost


def _batch_nonholonomic(factors, vidx, eidx, theta, acc, bucket=None):
    inv = factors[0]._inv_sigma
    t = theta[vidx[:, 0]]
    c = np.cos(t[:, 2])
    s = np.sin(t[:, 2])
    vx, vy = t[:, 3], t[:, 4]
    e = (vy * c - vx * s) * inv
    cost = 0.5 * float(e @ e)
    if bucket is not None:
        np.add.at(bucket, vidx[:, 0], 0.5 * e * e)
    if acc is None:
        return cost
    jac = np.zeros_like(t)
    jac[:, 2] = (-vy * s - vx * c) * inv
    jac[:, 3] = -s * inv
    jac[:, 4] = c * inv
    rows = vidx[:, 0]
    np.add.at(acc.rhs, rows, -jac * e[:, None])
    np.add.at(acc.diag, rows, np.einsum('ki,kj->kij', jac, jac))
    return cost


BATCH_EVALUATORS = {
    GpPriorFactor: _batch_gp,
    ObstacleFactor: _batch_obstacle,
    InterpObstacleFactor: _batch_interp_obstacle,
    GoalFactor: _batch_goal,
    CurrentStateFactor: _batch_current,
    LimitFactor: _batch_limit,
    NonholonomicFactor: _batch_nonholonomic,
}
