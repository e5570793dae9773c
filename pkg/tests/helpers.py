"""Shared test oracles: finite differences, brute-force geometry, dense solves.

These deliberately avoid the library's own assembly/query paths so they can
serve as independent checks.
"""

import numpy as np


def fd_jacobian(fn, x, h=1e-6):
    """Central finite-difference Jacobian of fn at x (1-D array)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fn(x))
    jac = np.zeros((len(f0), len(x)))
    for k in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2 * h)
    return jac


def point_segment_distance(p, a, b):
    p, a, b = (np.asarray(v, float) for v in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def brute_force_signed_distance(p, boxes):
    """Min distance to any rectangle boundary segment, negative if inside any."""
    best = np.inf
    inside = False
    for box in boxes:
        corners = box.corners()
        for k in range(4):
            best = min(best, point_segment_distance(p, corners[k], corners[(k + 1) % 4]))
        if box.contains(p):
            inside = True
    if best is np.inf:
        return None
    return -best if inside else best


def dense_normal_equations(graph):
    """Assemble A, b by stacking whole whitened Jacobians densely."""
    order = list(graph.var_ids())
    index = {vid: k for k, vid in enumerate(order)}
    m = graph.dim
    rows = []
    rhs_rows = []
    for _, (factor, ids) in graph.factors():
        wh, wjs = factor.whitened(*[graph.value(v) for v in ids])
        if wjs is None:  # identically zero contribution
            continue
        row = np.zeros((len(wh), m * len(order)))
        for j, vid in zip(wjs, ids):
            col = index[vid] * m
            row[:, col:col + m] = j
        rows.append(row)
        rhs_rows.append(wh)
    jac = np.vstack(rows)
    res = np.concatenate(rhs_rows)
    return jac.T @ jac, -jac.T @ res, order


def random_linear_tree(rng, n_vars, d=2):
    """Random anchored tree graph with only linear (Gaussian) factors."""
    from jistplan import CurrentStateFactor, FactorGraph, GoalFactor, GpParams, GpPriorFactor

    g = FactorGraph()
    params = GpParams(rng.uniform(0.3, 2.0, size=d), rng.uniform(0.2, 1.5))
    ids = [g.add_variable(None, rng.normal(size=2 * d))]
    g.add_factor(CurrentStateFactor(rng.normal(size=2 * d), rng.uniform(0.05, 0.5)), [ids[0]])
    for _ in range(n_vars - 1):
        parent = ids[rng.integers(len(ids))]
        child = g.add_variable(parent, rng.normal(size=2 * d))
        g.add_factor(GpPriorFactor(params), [parent, child])
        if rng.random() < 0.7:
            g.add_factor(GoalFactor(rng.normal(size=2 * d), rng.uniform(0.5, 3.0),
                                    rng.uniform(0.2, 1.0)), [child])
        ids.append(child)
    return g
