import math

import numpy as np
import pytest

from jistplan import FactorGraph, SingularSystemError
from jistplan.factors import (CurrentStateFactor, GoalFactor, GpParams,
                              GpPriorFactor, InterpObstacleFactor, LimitFactor,
                              NonholonomicFactor, ObstacleFactor, SdfRef,
                              GOAL_SCALE_FLOOR, goal_cov_scale, goal_scale_ratio,
                              gp_interp_matrices, gp_interpolate, gp_transition)
from jistplan.sdf import Box, Disk, build_sdf

from helpers import fd_jacobian

P1 = GpParams(np.array([1.0]), 1.0)


@pytest.fixture(scope="module")
def one_box_sdf():
    return build_sdf([Box.square((0.0, 0.0), 6.0)], center=(0, 0),
                     half_extent=15.0, resolution=0.25)


# --- GP transition / prior ---------------------------------------------------


def test_gp_transition_printed_blocks():
    phi, q = gp_transition(P1)
    assert np.allclose(phi, [[1, 1], [0, 1]])
    assert np.allclose(q, [[1 / 3, 1 / 2], [1 / 2, 1]])
    # velocity block scales linearly with dt
    q2 = gp_transition(GpParams(np.array([1.0]), 2.0))[1]
    assert np.allclose(q2[1:, 1:], 2 * q[1:, 1:])


def test_gp_information_matches_numeric_inverse():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = GpParams(rng.uniform(0.2, 3.0, size=3), rng.uniform(0.1, 2.0))
        assert np.allclose(p.q_inv, np.linalg.inv(p.q), rtol=1e-9, atol=1e-9)
    assert np.allclose(P1.q_inv, [[12, -6], [-6, 4]])


def test_gp_prior_residual_and_cost():
    f = GpPriorFactor(P1)
    assert np.allclose(f.error(np.array([0.0, 1.0]), np.array([1.0, 1.0])), 0.0)
    # overshoot of 0.5 in position: cost = 0.5 * 12 * 0.25
    cost = f.cost(np.array([0.0, 1.0]), np.array([1.5, 1.0]))
    h = np.array([-0.5, 0.0])
    assert cost == pytest.approx(0.5 * h @ P1.q_inv @ h) == pytest.approx(1.5)


def test_gp_prior_jacobians_match_fd():
    rng = np.random.default_rng(1)
    p = GpParams(rng.uniform(0.3, 2.0, size=3), 0.7)
    f = GpPriorFactor(p)
    for _ in range(20):
        a, b = rng.normal(size=6), rng.normal(size=6)
        wh, (ja, jb) = f.whitened(a, b)
        assert np.allclose(ja, fd_jacobian(lambda x: f.whitened_error(x, b), a),
                           rtol=1e-4, atol=1e-7)
        assert np.allclose(jb, fd_jacobian(lambda x: f.whitened_error(a, x), b),
                           rtol=1e-4, atol=1e-7)


# --- GP interpolation --------------------------------------------------------


def test_gp_interpolate_boundary_identities():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = GpParams(rng.uniform(0.2, 2.0, size=3), rng.uniform(0.2, 1.5))
        a, b = rng.normal(size=6), rng.normal(size=6)
        s0, _, _ = gp_interpolate(a, b, p, 0.0)
        s1, _, _ = gp_interpolate(a, b, p, p.dt)
        assert np.allclose(s0, a, atol=1e-9)
        assert np.allclose(s1, b, atol=1e-9)


def test_gp_interpolate_constant_velocity_exact():
    s, _, _ = gp_interpolate(np.array([0.0, 1.0]), np.array([1.0, 1.0]), P1, 0.5)
    assert np.allclose(s, [0.5, 1.0], atol=1e-12)
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = GpParams(rng.uniform(0.2, 2.0, size=2), rng.uniform(0.2, 1.5))
        a = rng.normal(size=4)
        b = p.phi @ a
        tau = rng.uniform(0, p.dt)
        s, _, _ = gp_interpolate(a, b, p, tau)
        phi_tau = np.eye(4)
        phi_tau[:2, 2:] = tau * np.eye(2)
        assert np.allclose(s, phi_tau @ a, atol=1e-9)


def test_gp_interp_matrices_against_formula_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = GpParams(rng.uniform(0.2, 2.0, size=2), rng.uniform(0.3, 1.2))
        tau = rng.uniform(0.05, p.dt - 0.05)
        lam, psi = gp_interp_matrices(p, tau)
        # independent construction with numeric inverses
        def q_of(t):
            qc = np.diag(p.qc)
            return np.block([[t ** 3 / 3 * qc, t ** 2 / 2 * qc],
                             [t ** 2 / 2 * qc, t * qc]])
        def phi_of(t):
            m = np.eye(4)
            m[:2, 2:] = t * np.eye(2)
            return m
        psi_o = q_of(tau) @ phi_of(p.dt - tau).T @ np.linalg.inv(q_of(p.dt))
        lam_o = phi_of(tau) - psi_o @ phi_of(p.dt)
        assert np.allclose(psi, psi_o, atol=1e-9)
        assert np.allclose(lam, lam_o, atol=1e-9)


def test_gp_interpolate_rejects_out_of_range_tau():
    with pytest.raises(ValueError):
        gp_interpolate(np.zeros(2), np.zeros(2), P1, 1.5)


# --- obstacle factors --------------------------------------------------------


def test_obstacle_residual_free_space_and_contact(one_box_sdf):
    f = ObstacleFactor(one_box_sdf, Disk(1.5), eps=0.5, sigma=0.1)
    deep = np.array([12.0, 12.0, 0, 0, 0, 0])
    assert np.allclose(f.error(deep), 0.0)
    # surface contact: distance==radius so hinge returns exactly eps
    contact = np.array([4.5, 0.0, 0, 0, 0, 0])
    assert f.error(contact)[0] == pytest.approx(0.5, abs=0.02)


def test_obstacle_outside_window_counts_unknown(one_box_sdf):
    f = ObstacleFactor(one_box_sdf, Disk(1.5), eps=0.5, sigma=0.1)
    wh, wjs = f.whitened(np.array([40.0, 0.0, 0, 0, 0, 0]))
    assert not wh.any() and wjs is None
    assert f.unknown_hits == 1


def _kink_safe(grid, point, radius, eps, margin=5e-3):
    sample = grid.query(point)
    if not sample.known or abs(sample.distance - radius - eps) < margin:
        return False
    g = (np.asarray(point) - grid.origin) / grid.resolution
    frac = g - np.floor(g)
    return bool(((frac > 0.02) & (frac < 0.98)).all())


def test_obstacle_jacobian_matches_fd(one_box_sdf):
    rng = np.random.default_rng(5)
    f = ObstacleFactor(one_box_sdf, Disk(1.5), eps=1.0, sigma=0.2)
    checked = 0
    while checked < 40:
        st = np.concatenate([rng.uniform(-8, 8, 2), rng.normal(size=4)])
        if not _kink_safe(one_box_sdf, st[:2], 1.5, 1.0):
            continue
        _, wjs = f.whitened(st)
        jac = wjs[0] if wjs is not None else np.zeros((1, 6))
        fd = fd_jacobian(f.whitened_error, st)
        assert np.allclose(jac, fd, rtol=1e-4, atol=1e-4)
        checked += 1


def test_interp_obstacle_free_and_through_center(one_box_sdf):
    f = InterpObstacleFactor(one_box_sdf, Disk(1.5), eps=0.5, sigma=0.1,
                             params=GpParams(np.ones(3), 1.0), tau=0.5)
    a = np.array([10.0, 10.0, 0, 0, 0, 0])
    b = np.array([11.0, 11.0, 0, 0, 0, 0])
    assert np.allclose(f.error(a, b), 0.0)
    # endpoints free, but the midpoint passes the obstacle center
    a = np.array([-5.0, 0.0, 0, 0, 0, 0])
    b = np.array([5.0, 0.0, 0, 0, 0, 0])
    assert f.error(a, b)[0] > 0.0


def test_interp_obstacle_jacobians_match_fd(one_box_sdf):
    rng = np.random.default_rng(6)
    params = GpParams(np.ones(3), 1.0)
    f = InterpObstacleFactor(one_box_sdf, Disk(1.5), eps=1.0, sigma=0.2,
                             params=params, tau=0.4)
    checked = 0
    while checked < 30:
        a = np.concatenate([rng.uniform(-8, 8, 2), rng.normal(size=4) * 0.5])
        b = np.concatenate([rng.uniform(-8, 8, 2), rng.normal(size=4) * 0.5])
        mid, _, _ = gp_interpolate(a, b, params, 0.4)
        if not _kink_safe(one_box_sdf, mid[:2], 1.5, 1.0):
            continue
        _, wjs = f.whitened(a, b)
        ja, jb = wjs if wjs is not None else (np.zeros((1, 6)), np.zeros((1, 6)))
        assert np.allclose(ja, fd_jacobian(lambda x: f.whitened_error(x, b), a),
                           rtol=1e-4, atol=1e-4)
        assert np.allclose(jb, fd_jacobian(lambda x: f.whitened_error(a, x), b),
                           rtol=1e-4, atol=1e-4)
        checked += 1


def test_interp_obstacle_rejects_boundary_tau(one_box_sdf):
    with pytest.raises(ValueError):
        InterpObstacleFactor(one_box_sdf, Disk(1.0), 0.5, 0.1,
                             GpParams(np.ones(3), 1.0), tau=0.0)


# --- current / goal ----------------------------------------------------------


def test_current_factor_zero_and_cost():
    target = np.array([1.0, 2.0, 0, 0, 0, 0])
    f = CurrentStateFactor(target, sigma=0.1)
    assert np.allclose(f.error(target), 0.0)
    off = target + np.eye(6)[0]
    assert f.cost(off) == pytest.approx(0.5 / 0.1 ** 2)


def test_chain_without_anchor_is_singular():
    g = FactorGraph()
    params = GpParams(np.ones(1), 1.0)
    a = g.add_variable(None, [0.0, 0.0])
    b = g.add_variable(a, [1.0, 1.0])
    c = g.add_variable(b, [2.0, 1.0])
    g.add_factor(GpPriorFactor(params), [a, b])
    g.add_factor(GpPriorFactor(params), [b, c])
    # rank oracle on the densely assembled normal matrix
    from helpers import dense_normal_equations
    a_mat, _, _ = dense_normal_equations(g)
    assert np.linalg.matrix_rank(a_mat) < a_mat.shape[0]
    with pytest.raises(SingularSystemError):
        g.gauss_newton(max_iters=1)
    # anchoring the root fixes it
    g.add_factor(CurrentStateFactor(np.array([0.0, 0.0]), 0.1), [a])
    g.gauss_newton(max_iters=5)


def test_goal_scale_ratio_cases():
    start = np.zeros(6)
    goal = np.array([10.0, 0, 0, 0, 0, 0])
    assert goal_scale_ratio(start, start, goal) == pytest.approx(1.0)
    half = np.array([5.0, 0, 0, 0, 0, 0])
    assert goal_scale_ratio(half, start, goal) == pytest.approx(0.25)
    assert goal_scale_ratio(goal, start, goal) == GOAL_SCALE_FLOOR
    with pytest.raises(ValueError):
        goal_scale_ratio(half, goal, goal)


def test_goal_scale_translation_invariant():
    rng = np.random.default_rng(7)
    for _ in range(20):
        start, cur, goal = rng.normal(size=(3, 6))
        shift = np.tile(rng.normal(size=3), 2)
        assert goal_scale_ratio(cur, start, goal) == pytest.approx(
            goal_scale_ratio(cur + shift, start + shift, goal + shift))


def test_goal_cov_scale_effective_sigma():
    start = np.zeros(6)
    goal = np.array([10.0, 0, 0, 0, 0, 0])
    assert goal_cov_scale(start, start, goal, 2.0) == pytest.approx(2.0)
    half = np.array([5.0, 0, 0, 0, 0, 0])
    assert goal_cov_scale(half, start, goal, 2.0) == pytest.approx(1.0)


def test_goal_factor_weight_and_monotonicity():
    goal = np.array([4.0, 0, 0, 0, 0, 0])
    f1 = GoalFactor(goal, sigma_goal=1.0)
    f2 = GoalFactor(goal, sigma_goal=0.5)
    st = np.zeros(6)
    assert np.allclose(f1.error(st), f2.error(st))
    assert f2.cost(st) == pytest.approx(4.0 * f1.cost(st))
    assert f1.cost(goal) == 0.0
    costs = [f1.cost(np.array([x, 0, 0, 0, 0, 0])) for x in np.linspace(0, 4, 9)]
    assert all(c1 > c2 for c1, c2 in zip(costs, costs[1:]))


# --- limit -------------------------------------------------------------------


def test_limit_factor_printed_branches():
    f = LimitFactor(np.zeros(1), np.ones(1), eps=0.1, sigma=1.0)
    assert f.error(np.array([1.2]))[0] == pytest.approx(0.1)
    assert f.error(np.array([0.5]))[0] == 0.0
    assert f.error(np.array([-0.05]))[0] == pytest.approx(0.15)
    # verbatim rule: no penalty between ul and ul+eps
    assert f.error(np.array([1.05]))[0] == 0.0


def test_limit_factor_inner_margin_switch():
    f = LimitFactor(np.zeros(1), np.ones(1), eps=0.1, sigma=1.0,
                    inner_upper_margin=True)
    assert f.error(np.array([0.95]))[0] == pytest.approx(0.05)
    assert f.error(np.array([0.85]))[0] == 0.0


def test_limit_factor_handles_unbounded_dims_and_fd():
    lower = np.array([-np.inf, -np.inf, -3.0, -0.6])
    upper = np.array([np.inf, np.inf, 3.0, 0.6])
    f = LimitFactor(lower, upper, eps=0.1, sigma=0.5)
    rng = np.random.default_rng(8)
    for _ in range(30):
        st = rng.uniform(-5, 5, size=4)
        if (np.abs(np.abs(st[2:]) - 3.1) < 1e-3).any() or \
           (np.abs(np.abs(st[3]) - 0.7) < 1e-3):
            continue
        _, wjs = f.whitened(st)
        jac = wjs[0] if wjs is not None else np.zeros((4, 4))
        fd = fd_jacobian(f.whitened_error, st)
        assert np.allclose(jac, fd, rtol=1e-4, atol=1e-6)


# --- nonholonomic ------------------------------------------------------------


def test_nonholonomic_residual_cases():
    f = NonholonomicFactor(sigma=1.0)
    forward = np.array([0, 0, 0.0, 1.0, 0.0, 0])
    sideways = np.array([0, 0, 0.0, 0.0, 1.0, 0])
    rotated = np.array([0, 0, np.pi / 2, 0.0, 1.0, 0])
    assert f.error(forward)[0] == 0.0
    assert f.error(sideways)[0] == 1.0
    assert abs(f.error(rotated)[0]) < 1e-12


def test_nonholonomic_jacobian_matches_fd():
    f = NonholonomicFactor(sigma=0.3)
    rng = np.random.default_rng(9)
    for _ in range(30):
        st = rng.normal(size=6)
        _, (jac,) = f.whitened(st)
        fd = fd_jacobian(f.whitened_error, st)
        assert np.allclose(jac, fd, rtol=1e-4, atol=1e-6)


def test_sdf_ref_swaps_active_grid(one_box_sdf):
    ref = SdfRef(one_box_sdf)
    f = ObstacleFactor(ref, Disk(1.5), eps=0.5, sigma=0.1)
    near = np.array([4.2, 0.0, 0, 0, 0, 0])
    assert f.error(near)[0] > 0.0
    ref.grid = build_sdf([], center=(0, 0), half_extent=15.0, resolution=0.5)
    assert f.error(near)[0] == 0.0
