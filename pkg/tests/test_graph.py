import numpy as np
import pytest

from jistplan import (CurrentStateFactor, FactorGraph, GoalFactor, GpParams,
                      GpPriorFactor, GraphError, SingularSystemError)

from helpers import dense_normal_equations, random_linear_tree


def test_add_variable_root_and_child():
    g = FactorGraph()
    r = g.add_variable(None, [0, 0, 0, 0, 0, 0])
    assert r == 0 and g.size() == 1 and g.root == 0
    c = g.add_variable(0, np.ones(6))
    assert c == 1 and g.parent_of(1) == 0
    with pytest.raises(GraphError):
        g.add_variable(7, np.zeros(6))
    with pytest.raises(GraphError):
        g.add_variable(0, np.zeros(4))  # dimension mismatch


def test_add_factor_arity_and_edges():
    g = FactorGraph()
    params = GpParams(np.ones(1), 1.0)
    a = g.add_variable(None, [0.0, 0.0])
    b = g.add_variable(a, [1.0, 0.0])
    c = g.add_variable(a, [2.0, 0.0])
    before = g.factor_count()
    g.add_factor(GpPriorFactor(params), [a, b])
    assert g.factor_count() == before + 1
    with pytest.raises(GraphError):
        g.add_factor(GpPriorFactor(params), [b, c])  # not a parent-child pair
    with pytest.raises(GraphError):
        g.add_factor(GpPriorFactor(params), [b])  # arity mismatch
    with pytest.raises(GraphError):
        g.add_factor(CurrentStateFactor(np.zeros(2), 1.0), [9])
    g.add_factor(CurrentStateFactor(np.zeros(2), 1.0), [b])


def test_total_cost_empty_unit_and_sum():
    g = FactorGraph()
    v = g.add_variable(None, [1.0, 0.0])
    assert g.total_cost() == 0.0
    g.add_factor(CurrentStateFactor(np.zeros(2), 1.0), [v])
    assert g.total_cost() == pytest.approx(0.5)  # half of unit residual squared
    f2 = GoalFactor(np.array([0.0, 2.0]), 1.0)
    g.add_factor(f2, [v])
    expect = 0.5 + f2.cost(g.value(v))
    assert g.total_cost() == pytest.approx(expect)


def test_linearize_single_unary_factor():
    g = FactorGraph()
    v = g.add_variable(None, [2.0, 1.0])
    m = np.array([1.0, 1.0])
    g.add_factor(CurrentStateFactor(m, 0.5), [v])
    sys = g.linearize()
    a, b = sys.to_dense()
    assert np.allclose(a, np.eye(2) / 0.25)
    assert np.allclose(b, -(g.value(v) - m) / 0.25)


def test_linearize_matches_dense_assembly_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = random_linear_tree(rng, int(rng.integers(2, 7)), d=rng.integers(1, 4))
        a, b, order = dense_normal_equations(g)
        sys = g.linearize()
        assert list(sys.order) == order
        a2, b2 = sys.to_dense()
        assert np.allclose(a, a2, atol=1e-9)
        assert np.allclose(b, b2, atol=1e-9)


def test_linearize_sibling_blocks_are_zero():
    g = FactorGraph()
    params = GpParams(np.ones(1), 1.0)
    r = g.add_variable(None, [0.0, 0.0])
    a = g.add_variable(r, [1.0, 1.0])
    b = g.add_variable(r, [-1.0, 1.0])
    g.add_factor(GpPriorFactor(params), [r, a])
    g.add_factor(GpPriorFactor(params), [r, b])
    g.add_factor(CurrentStateFactor(np.zeros(2), 0.1), [r])
    sys = g.linearize()
    assert (r, a) in sys.offdiag and (r, b) in sys.offdiag
    assert (a, b) not in sys.offdiag and (b, a) not in sys.offdiag
    dense, _ = sys.to_dense()
    ia, ib = sys.index[a] * 2, sys.index[b] * 2
    assert np.all(dense[ia:ia + 2, ib:ib + 2] == 0.0)


def test_gauss_newton_linear_one_step_matches_dense_solve():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = random_linear_tree(rng, int(rng.integers(2, 7)), d=2)
        a, b, order = dense_normal_equations(g)
        expect = {vid: g.value(vid) + d for vid, d in
                  zip(order, np.linalg.solve(a, b).reshape(len(order), -1))}
        report = g.gauss_newton(max_iters=10)
        assert report.converged and report.iterations == 1
        for vid in order:
            scale = max(1.0, float(np.abs(expect[vid]).max()))
            assert np.allclose(g.value(vid), expect[vid], atol=1e-9 * scale)


def test_gauss_newton_two_factor_mean():
    g = FactorGraph()
    v = g.add_variable(None, [10.0, -3.0])
    m = np.array([1.0, 0.0])
    target = np.array([3.0, 2.0])
    g.add_factor(CurrentStateFactor(m, 0.7), [v])
    g.add_factor(CurrentStateFactor(target, 0.7), [v])
    g.gauss_newton()
    assert np.allclose(g.value(v), (m + target) / 2, atol=1e-9)


def test_gauss_newton_stationary_point():
    g = FactorGraph()
    v = g.add_variable(None, [1.0, 0.0])
    g.add_factor(CurrentStateFactor(np.array([1.0, 0.0]), 1.0), [v])
    report = g.gauss_newton()
    assert report.converged
    assert report.iterations <= 1
    assert report.final_cost == pytest.approx(report.initial_cost, abs=1e-12)


def test_gauss_newton_cost_trace_non_increasing_nonlinear():
    from jistplan import Disk, ObstacleFactor
    from jistplan.sdf import Box, build_sdf
    rng = np.random.default_rng(2)
    grid = build_sdf([Box.square((0, 0), 4.0)], center=(0, 0), half_extent=12.0,
                     resolution=0.25)
    for _ in range(10):
        g = random_linear_tree(rng, 5, d=3)
        for vid in list(g.var_ids()):
            g.add_factor(ObstacleFactor(grid, Disk(1.0), eps=2.0, sigma=0.3), [vid])
        report = g.gauss_newton(max_iters=10)
        assert all(c1 >= c2 - 1e-9 for c1, c2 in
                   zip(report.cost_trace, report.cost_trace[1:]))
        assert report.final_cost <= report.initial_cost + 1e-9


def test_gauss_newton_unanchored_graph_raises():
    g = FactorGraph()
    params = GpParams(np.ones(2), 0.5)
    a = g.add_variable(None, np.zeros(4))
    b = g.add_variable(a, np.ones(4))
    g.add_factor(GpPriorFactor(params), [a, b])
    with pytest.raises(SingularSystemError):
        g.gauss_newton(max_iters=1)


def test_remove_all_except_subtree_chain():
    g = FactorGraph()
    a = g.add_variable(None, [0.0, 0.0])
    b = g.add_variable(a, [1.0, 0.0])
    c = g.add_variable(b, [2.0, 0.0])
    removed = g.remove_all_except_subtree(b)
    assert removed == 1
    assert set(g.var_ids()) == {b, c}
    assert g.root == b and g.parent_of(b) is None and g.parent_of(c) == b
    g.validate()


def test_remove_all_except_subtree_keep_root_noop():
    g = FactorGraph()
    a = g.add_variable(None, [0.0, 0.0])
    g.add_variable(a, [1.0, 0.0])
    assert g.remove_all_except_subtree(a) == 0
    assert g.size() == 2 and g.root == a


def test_remove_all_except_subtree_drops_factors():
    g = FactorGraph()
    r = g.add_variable(None, [0.0, 0.0])
    kids = [g.add_variable(r, [float(k), 0.0]) for k in (1, 2, 3)]
    for k in kids:
        g.add_factor(CurrentStateFactor(np.zeros(2), 1.0), [k])
    g.add_factor(CurrentStateFactor(np.zeros(2), 1.0), [r])
    before = {fid: ids for fid, (_, ids) in g.factors()}
    target = kids[1]
    removed = g.remove_all_except_subtree(target)
    assert removed == 3
    after = {fid: ids for fid, (_, ids) in g.factors()}
    # oracle: exactly the factors whose references lie inside the kept subtree
    assert after == {fid: ids for fid, ids in before.items()
                     if all(v == target for v in ids)}
    assert set(g.var_ids()) == {target}
    g.validate()


def test_variable_ids_stable_and_never_reused():
    g = FactorGraph()
    r = g.add_variable(None, [0.0, 0.0])
    a = g.add_variable(r, [1.0, 0.0])
    b = g.add_variable(a, [2.0, 0.0])
    g.remove_all_except_subtree(a)
    assert set(g.var_ids()) == {a, b}
    c = g.add_variable(a, [3.0, 0.0])
    assert c > b  # ids strictly increasing, no reuse of the removed root's id
    g.validate()


def test_validate_passes_after_random_mutations():
    rng = np.random.default_rng(3)
    g = random_linear_tree(rng, 12, d=2)
    g.validate()
    ids = list(g.var_ids())
    g.remove_all_except_subtree(ids[rng.integers(len(ids))])
    g.validate()
