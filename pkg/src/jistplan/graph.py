"""Tree-structured factor graph with sparse Gauss-Newton optimization.

Variables are fixed-size state vectors arranged in a tree rooted at the
current robot state; factors are unary or sit on (parent, child) edges.
The normal equations therefore have nonzero blocks only on the diagonal
and on tree edges, so one round of block Cholesky elimination ordered
leaves-to-root solves the system with zero fill-in.

Values live inside the graph and are updated in place by the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .factors import BATCH_EVALUATORS, Factor, batch_key

# Relative pivot threshold below which the normal matrix is declared
# singular (an unanchored graph: every tree needs a current-state factor).
_PIVOT_RTOL = 1.0e-12


class GraphError(ValueError):
    """Structural misuse: unknown ids, arity mismatch, non-edge factors."""


class SingularSystemError(RuntimeError):
    """Normal matrix is rank deficient at the current linearization point."""


class LinearizationError(RuntimeError):
    """A factor produced non-finite residuals or Jacobians."""


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    cost_trace: list[float] = field(default_factory=list)


class LinearSystem:
    """Block-sparse normal equations A * delta = b of one linearization.

    ``diag[v]`` holds A[v,v]; ``offdiag[(p,c)]`` holds A[p,c] for tree
    edges; blocks absent from ``offdiag`` are exactly zero.  The dict
    entries are views into contiguous per-variable / per-edge arrays so
    elimination can run batched by tree depth.
    """

    def __init__(self, order: list[int], dim: int, parent: dict[int, int],
                 diag_arr=None, rhs_arr=None, off_arr=None,
                 edges: list[tuple[int, int]] | None = None):
        self.order = order
        self.index = {vid: k for k, vid in enumerate(order)}
        self.dim = dim
        self.parent = parent
        self.edges = edges if edges is not None else \
            [(p, c) for c, p in parent.items()]
        n, m = len(order), len(self.edges)
        self._diag = diag_arr if diag_arr is not None else np.zeros((n, dim, dim))
        self._rhs = rhs_arr if rhs_arr is not None else np.zeros((n, dim))
        self._off = off_arr if off_arr is not None else np.zeros((m, dim, dim))
        self.diag = {vid: self._diag[i] for i, vid in enumerate(order)}
        self.rhs = {vid: self._rhs[i] for i, vid in enumerate(order)}
        self.offdiag = {e: self._off[i] for i, e in enumerate(self.edges)}

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.order)
        m = self.dim
        a = np.zeros((n * m, n * m))
        b = np.zeros(n * m)
        for vid, blk in self.diag.items():
            i = self.index[vid] * m
            a[i:i + m, i:i + m] = blk
            b[i:i + m] = self.rhs[vid]
        for (p, c), blk in self.offdiag.items():
            i, j = self.index[p] * m, self.index[c] * m
            a[i:i + m, j:j + m] = blk
            a[j:j + m, i:i + m] = blk.T
        return a, b

    def _depth_levels(self):
        """Row indices grouped by tree depth, deepest first."""
        depth = {}
        order = self.order
        for vid in order:  # parents precede children in insertion order
            p = self.parent.get(vid)
            depth[vid] = 0 if p is None else depth[p] + 1
        levels: dict[int, list[int]] = {}
        for vid, d in depth.items():
            levels.setdefault(d, []).append(self.index[vid])
        return [np.array(levels[d]) for d in sorted(levels, reverse=True)]

    def _chol_or_raise(self, blocks, rows, scale):
        try:
            chol = np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError:
            bad = self._find_bad_block(blocks, rows)
            raise SingularSystemError(
                f"variable {bad}: normal matrix block not positive definite "
                "(is the graph anchored by a current-state factor?)") from None
        piv = np.diagonal(chol, axis1=1, axis2=2)
        small = (piv * piv).min(axis=1) < _PIVOT_RTOL * scale
        if small.any():
            bad = self.order[rows[int(np.argmax(small))]]
            raise SingularSystemError(
                f"variable {bad}: near-zero pivot, system is rank deficient")
        return chol

    def _find_bad_block(self, blocks, rows):
        for blk, row in zip(blocks, rows):
            try:
                np.linalg.cholesky(blk)
            except np.linalg.LinAlgError:
                return self.order[row]
        return self.order[rows[0]]

    def _is_ordered_chain(self) -> bool:
        order = self.order
        return len(self.edges) == len(order) - 1 and all(
            e == (order[k], order[k + 1]) for k, e in enumerate(self.edges))

    def _solve_chain_banded(self, scale) -> dict[int, np.ndarray]:
        """Chains give a block-tridiagonal (banded) system: one LAPACK call."""
        n, dim = len(self.order), self.dim
        nn = n * dim
        ab = np.zeros((2 * dim, nn))  # lower banded storage: ab[i, j] = A[j+i, j]
        a_idx, b_idx = np.tril_indices(dim)
        cols = (np.arange(n)[:, None] * dim + b_idx[None, :]).ravel()
        offs = np.broadcast_to(a_idx - b_idx, (n, len(a_idx))).ravel()
        ab[offs, cols] = self._diag[:, a_idx, b_idx].ravel()
        if n > 1:
            # sub-diagonal blocks: A[child, parent] is the edge block transposed
            af, bf = np.meshgrid(np.arange(dim), np.arange(dim), indexing='ij')
            af, bf = af.ravel(), bf.ravel()
            cols = (np.arange(n - 1)[:, None] * dim + bf[None, :]).ravel()
            offs = np.broadcast_to(dim + af - bf, (n - 1, dim * dim)).ravel()
            ab[offs, cols] = self._off[:, bf, af].ravel()
        try:
            cb = scipy.linalg.cholesky_banded(ab, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            raise SingularSystemError(
                "normal matrix not positive definite "
                "(is the graph anchored by a current-state factor?)") from None
        piv = cb[0]
        if (piv * piv).min() < _PIVOT_RTOL * scale:
            bad = self.order[int(np.argmin(piv * piv)) // dim]
            raise SingularSystemError(
                f"variable {bad}: near-zero pivot, system is rank deficient")
        b = self._rhs.reshape(nn)
        delta = scipy.linalg.cho_solve_banded((cb, True), b, check_finite=False)
        return {vid: delta[i * dim:(i + 1) * dim]
                for i, vid in enumerate(self.order)}

    def solve(self) -> dict[int, np.ndarray]:
        """Block Cholesky elimination, leaves to root, batched by depth."""
        n, dim = len(self.order), self.dim
        if n == 0:
            raise SingularSystemError("empty system")
        scale = float(np.abs(np.diagonal(self._diag, axis1=1, axis2=2)).max())
        if scale == 0.0:
            raise SingularSystemError("normal matrix is identically zero")
        if n > 2 and self._is_ordered_chain():
            return self._solve_chain_banded(scale)
        # per-variable parent row and (parent, v) edge row
        pidx = np.full(n, -1)
        erow = np.full(n, -1)
        for k, (p, c) in enumerate(self.edges):
            ci = self.index[c]
            pidx[ci] = self.index[p]
            erow[ci] = k
        a = self._diag.copy()
        b = self._rhs.copy()
        gains = np.zeros((n, dim, dim))
        ys = np.zeros((n, dim))
        levels = self._depth_levels()
        for rows in levels:
            blocks = a[rows]
            self._chol_or_raise(blocks, rows, scale)
            if pidx[rows[0]] < 0:  # root level
                ys[rows] = np.linalg.solve(blocks, b[rows][:, :, None])[:, :, 0]
                continue
            a_pv = self._off[erow[rows]]
            rhs_stack = np.concatenate(
                [a_pv.transpose(0, 2, 1), b[rows][:, :, None]], axis=2)
            sol = np.linalg.solve(blocks, rhs_stack)
            gain = sol[:, :, :dim]
            yb = sol[:, :, dim]
            gains[rows] = gain
            ys[rows] = yb
            np.add.at(a, pidx[rows], -(a_pv @ gain))
            np.add.at(b, pidx[rows], -np.einsum('kij,kj->ki', a_pv, yb))
        delta = np.zeros((n, dim))
        for rows in reversed(levels):
            if pidx[rows[0]] < 0:
                delta[rows] = ys[rows]
            else:
                delta[rows] = ys[rows] - np.einsum(
                    'kij,kj->ki', gains[rows], delta[pidx[rows]])
        return {vid: delta[i] for i, vid in enumerate(self.order)}


class _Accumulator:
    __slots__ = ("diag", "rhs", "off")

    def __init__(self, n, dim, m):
        self.diag = np.zeros((n, dim, dim))
        self.rhs = np.zeros((n, dim))
        self.off = np.zeros((m, dim, dim))


class FactorGraph:
    """The single structure grown, optimized, searched, and pruned online."""

    def __init__(self):
        self.dim: int | None = None
        self._values: dict[int, np.ndarray] = {}
        self._parent: dict[int, int] = {}
        self._children: dict[int, list[int]] = {}
        self._root: int | None = None
        self._factors: dict[int, tuple[Factor, tuple[int, ...]]] = {}
        self._next_var = 0
        self._next_factor = 0
        self._version = 0  # structural revision; invalidates the group cache
        self._groups_cache = None

    # --- structure ---------------------------------------------------------

    @property
    def root(self) -> int:
        if self._root is None:
            raise GraphError("graph is empty")
        return self._root

    def size(self) -> int:
        return len(self._values)

    def var_ids(self):
        return self._values.keys()

    def has_variable(self, vid: int) -> bool:
        return vid in self._values

    def value(self, vid: int) -> np.ndarray:
        return self._values[vid]

    def set_value(self, vid: int, value) -> None:
        value = np.asarray(value, dtype=float)
        if len(value) != self.dim:
            raise GraphError(f"dimension mismatch: expected {self.dim}")
        self._values[vid] = value.copy()

    def parent_of(self, vid: int) -> int | None:
        return self._parent.get(vid)

    def children_of(self, vid: int) -> list[int]:
        return self._children[vid]

    def leaves(self) -> list[int]:
        return [vid for vid, kids in self._children.items() if not kids]

    def factors(self):
        return self._factors.items()

    def factor_count(self) -> int:
        return len(self._factors)

    def add_variable(self, parent: int | None, init) -> int:
        init = np.asarray(init, dtype=float)
        if not np.isfinite(init).all():
            raise GraphError("initial value must be finite")
        if self._root is None:
            if parent is not None:
                raise GraphError("first variable must be the root (parent=None)")
            self.dim = len(init)
        else:
            if parent is None:
                raise GraphError("graph already has a root")
            if parent not in self._values:
                raise GraphError(f"unknown parent id {parent}")
            if len(init) != self.dim:
                raise GraphError(f"dimension mismatch: expected {self.dim}")
        vid = self._next_var
        self._next_var += 1
        self._version += 1
        self._values[vid] = init.copy()
        self._children[vid] = []
        if self._root is None:
            self._root = vid
        else:
            self._parent[vid] = parent
            self._children[parent].append(vid)
        return vid

    def add_factor(self, factor: Factor, var_ids) -> int:
        ids = tuple(var_ids)
        if len(ids) != factor.arity:
            raise GraphError(f"factor arity {factor.arity} but {len(ids)} ids given")
        for vid in ids:
            if vid not in self._values:
                raise GraphError(f"unknown variable id {vid}")
        if factor.arity == 2 and self._parent.get(ids[1]) != ids[0]:
            raise GraphError(f"{ids} is not a (parent, child) edge")
        fid = self._next_factor
        self._next_factor += 1
        self._version += 1
        self._factors[fid] = (factor, ids)
        return fid

    def remove_factor(self, fid: int) -> None:
        if fid not in self._factors:
            raise GraphError(f"unknown factor id {fid}")
        self._version += 1
        del self._factors[fid]

    def remove_all_except_subtree(self, keep_root: int) -> int:
        """Drop everything outside keep_root's subtree; keep_root becomes root."""
        if keep_root not in self._values:
            raise GraphError(f"unknown variable id {keep_root}")
        keep = set()
        stack = [keep_root]
        while stack:
            vid = stack.pop()
            keep.add(vid)
            stack.extend(self._children[vid])
        removed = [vid for vid in self._values if vid not in keep]
        for vid in removed:
            del self._values[vid]
            del self._children[vid]
            self._parent.pop(vid, None)
        self._parent.pop(keep_root, None)
        self._root = keep_root
        self._version += 1
        self._factors = {fid: (f, ids) for fid, (f, ids) in self._factors.items()
                         if all(v in keep for v in ids)}
        return len(removed)

    def validate(self) -> None:
        """Check the tree and factor-reference invariants; raises on breakage."""
        if self._root is None:
            if self._values:
                raise GraphError("no root but variables present")
            return
        seen = set()
        stack = [self._root]
        while stack:
            vid = stack.pop()
            if vid in seen:
                raise GraphError(f"cycle at {vid}")
            seen.add(vid)
            for c in self._children[vid]:
                if self._parent.get(c) != vid:
                    raise GraphError(f"parent/children maps disagree at {c}")
                stack.append(c)
        if seen != set(self._values):
            raise GraphError("tree does not span all variables")
        if len(self._parent) != len(self._values) - 1:
            raise GraphError("edge count is not n-1")
        for fid, (f, ids) in self._factors.items():
            if len(ids) != f.arity:
                raise GraphError(f"factor {fid} arity mismatch")
            for vid in ids:
                if vid not in self._values:
                    raise GraphError(f"factor {fid} references removed variable {vid}")
            if f.arity == 2 and self._parent.get(ids[1]) != ids[0]:
                raise GraphError(f"factor {fid} not on a tree edge")
        for vid, val in self._values.items():
            if len(val) != self.dim or not np.isfinite(val).all():
                raise GraphError(f"bad value at {vid}")

    # --- optimization ------------------------------------------------------

    def _grouped(self):
        """Factors partitioned into homogeneous batches (cached per revision)."""
        if self._groups_cache is not None and self._groups_cache[0] == self._version:
            return self._groups_cache[1]
        order = list(self._values)
        index = {vid: i for i, vid in enumerate(order)}
        edges = [(p, c) for c, p in self._parent.items()]
        eindex = {e: i for i, e in enumerate(edges)}
        raw: dict[tuple, list] = {}
        generic = []
        for fid, (factor, ids) in self._factors.items():
            key = batch_key(factor)
            if key is None:
                generic.append((fid, factor, ids))
            else:
                raw.setdefault(key, []).append((factor, ids))
        groups = []
        for key, items in raw.items():
            fs = [f for f, _ in items]
            vidx = np.array([[index[v] for v in ids] for _, ids in items])
            if fs[0].arity == 2:
                eidx = np.array([eindex[ids] for _, ids in items])
            else:
                eidx = None
            groups.append((BATCH_EVALUATORS[key[0]], fs, vidx, eidx))
        payload = (order, index, edges, eindex, groups, generic)
        self._groups_cache = (self._version, payload)
        return payload

    def _theta(self, values, order):
        theta = np.empty((len(order), self.dim))
        for i, vid in enumerate(order):
            theta[i] = values[vid]
        return theta

    def total_cost(self, values: dict[int, np.ndarray] | None = None) -> float:
        vals = self._values if values is None else values
        if not self._factors:
            return 0.0
        order, _, _, _, groups, generic = self._grouped()
        theta = self._theta(vals, order)
        total = 0.0
        for evaluator, fs, vidx, eidx in groups:
            total += evaluator(fs, vidx, eidx, theta, None)
        for _, factor, ids in generic:
            wh = factor.whitened_error(*[vals[v] for v in ids])
            total += 0.5 * float(wh @ wh)
        return total

    def cost_buckets(self) -> dict[int, float]:
        """Current factor costs summed onto each factor's deepest variable
        (unary on its vertex, edge factors on the child)."""
        order, index, _, _, groups, generic = self._grouped()
        bucket = np.zeros(len(order))
        if self._factors:
            theta = self._theta(self._values, order)
            for evaluator, fs, vidx, eidx in groups:
                evaluator(fs, vidx, eidx, theta, None, bucket)
            for _, factor, ids in generic:
                wh = factor.whitened_error(*[self._values[v] for v in ids])
                bucket[index[ids[-1]]] += 0.5 * float(wh @ wh)
        return {vid: float(bucket[i]) for i, vid in enumerate(order)}

    def linearize(self) -> LinearSystem:
        return self._eval_system(self._values)[0]

    def _eval_system(self, values) -> tuple[LinearSystem, float]:
        """Assemble the normal equations and the total cost in one pass."""
        order, index, edges, eindex, groups, generic = self._grouped()
        acc = _Accumulator(len(order), self.dim, len(edges))
        theta = self._theta(values, order)
        cost = 0.0
        for evaluator, fs, vidx, eidx in groups:
            cost += evaluator(fs, vidx, eidx, theta, acc)
        for fid, factor, ids in generic:
            wh, wjs = factor.whitened(*[values[v] for v in ids])
            if wjs is None or (factor.maybe_inactive and not wh.any()):
                continue
            cost += 0.5 * float(wh @ wh)
            for a, va in enumerate(ids):
                ja = wjs[a]
                ia = index[va]
                acc.rhs[ia] -= ja.T @ wh
                acc.diag[ia] += ja.T @ ja
                for b in range(a + 1, len(ids)):
                    acc.off[eindex[(va, ids[b])]] += ja.T @ wjs[b]
        if not (np.isfinite(acc.diag).all() and np.isfinite(acc.rhs).all()
                and np.isfinite(acc.off).all() and np.isfinite(cost)):
            # slow scan to name the offending factor
            for fid, (factor, ids) in self._factors.items():
                wh, wjs = factor.whitened(*[values[v] for v in ids])
                if not np.isfinite(wh).all() or (wjs is not None and any(
                        not np.isfinite(j).all() for j in wjs)):
                    raise LinearizationError(f"factor {fid} produced non-finite values")
            raise LinearizationError("non-finite normal equations")
        sys = LinearSystem(order, self.dim, dict(self._parent),
                           acc.diag, acc.rhs, acc.off, edges)
        return sys, cost

    def gauss_newton(self, max_iters: int = 20, rel_tol: float = 1e-4,
                     abs_tol: float = 1e-6, step_tol: float = 1e-10,
                     max_backtracks: int = 8) -> SolveReport:
        """Iterate linearize/solve/update; cost-increasing steps backtrack.

        The full step is tried first (a purely linear graph converges in one
        accepted iteration); if it raises the cost the step is halved up to
        max_backtracks times before the solver gives up and halts at the
        previous values.  The reported cost trace is always non-increasing.
        Stops on a tiny step, a sub-tolerance decrease, an unrecoverable
        step, or after max_iters iterations; only the last case reports
        converged=False.
        """
        if max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self._values:
            raise GraphError("cannot optimize an empty graph")
        system, cost = self._eval_system(self._values)
        report = SolveReport(0, cost, cost, False, [cost])
        scale = 1.0  # last accepted step fraction; reused between iterations
        for _ in range(max_iters):
            delta = system.solve()
            if max(float(np.abs(d).max()) for d in delta.values()) < step_tol:
                report.converged = True
                break
            t = scale
            candidate = {vid: self._values[vid] + t * delta[vid]
                         for vid in self._values}
            if t == 1.0:
                cand_system, new_cost = self._eval_system(candidate)
            else:
                cand_system = None
                new_cost = self.total_cost(candidate)
            accepted = np.isfinite(new_cost) and new_cost <= cost
            backtracks = 0
            while not accepted and backtracks < max_backtracks:
                backtracks += 1
                t *= 0.5
                candidate = {vid: self._values[vid] + t * delta[vid]
                             for vid in self._values}
                cand_system = None
                new_cost = self.total_cost(candidate)
                accepted = np.isfinite(new_cost) and new_cost < cost
            if not accepted:
                report.converged = True  # no usable step along this direction
                break
            self._values = candidate
            if cand_system is None:
                cand_system, new_cost = self._eval_system(candidate)
            system = cand_system
            scale = min(2.0 * t, 1.0)
            report.iterations += 1
            decrease = cost - new_cost
            prev, cost = cost, new_cost
            report.cost_trace.append(cost)
            if cost < abs_tol or decrease <= rel_tol * prev:
                report.converged = True
                break
        report.final_cost = cost
        return report
