"""Convex QP solving, eigenvalue utilities and discrete Lyapunov equations.

The solver is an over-relaxed operator-splitting (ADMM) method with a
one-time KKT factorization, Ruiz equilibration and an active-set polish
step.  Structure-identical problems (receding-horizon instances differing
only in cost vector and bounds) share one :class:`CachedQpSolver` so the
factorization is reused across thousands of solves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernel as _kernel
from ._admm_py import DUAL_INFEASIBLE, PRIMAL_INFEASIBLE

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
MAX_ITER = "MaxIter"

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 20000


class ConfigurationError(ValueError):
    """Inconsistent problem data (dimensions, symmetry, convexity)."""


class PreconditionError(ValueError):
    """A documented mathematical precondition does not hold."""


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ConfigurationError(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


def _as_vector(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1:
        raise ConfigurationError(f"{name} must be a 1-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class QpProblem:
    """``min 1/2 z'Hz + f'z  s.t.  A_eq z = b_eq,  A_in z <= b_in``.

    Immutable after construction; matrices may be dense or scipy sparse.
    """

    H: object
    f: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    b_in: np.ndarray = None

    def __post_init__(self):
        f = _as_vector(self.f, "f")
        n = f.shape[0]
        H = self.H
        if not sp.issparse(H):
            H = _as_matrix(H, "H")
        if H.shape != (n, n):
            raise ConfigurationError(f"H shape {H.shape} incompatible with f of size {n}")
        asym = abs(H - H.T)
        asym = asym.max() if not sp.issparse(H) else (asym.max() if asym.nnz else 0.0)
        if asym > 1e-8:
            raise ConfigurationError(f"H is not symmetric (max asymmetry {asym:.2e})")
        if n <= 400:
            Hd = H.toarray() if sp.issparse(H) else H
            lo = float(np.linalg.eigvalsh(Hd).min())
            if lo < -1e-7 * max(1.0, float(np.abs(Hd).max())):
                raise ConfigurationError(f"H is not positive semidefinite (lambda_min {lo:.2e})")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "H", H)
        for mat, vec, mname, vname in ((self.A_eq, self.b_eq, "A_eq", "b_eq"),
                                       (self.A_in, self.b_in, "A_in", "b_in")):
            if mat is None:
                if vec is not None and len(vec):
                    raise ConfigurationError(f"{vname} given without {mname}")
                continue
            m = mat if sp.issparse(mat) else _as_matrix(mat, mname)
            v = _as_vector(vec, vname)
            if m.shape != (v.shape[0], n):
                raise ConfigurationError(
                    f"{mname} shape {m.shape} incompatible with {vname} ({v.shape[0]}) and n={n}")
            object.__setattr__(self, mname, m)
            object.__setattr__(self, vname, v)

    @property
    def n(self):
        return self.f.shape[0]

    @property
    def n_eq(self):
        return 0 if self.A_eq is None else self.A_eq.shape[0]

    @property
    def n_in(self):
        return 0 if self.A_in is None else self.A_in.shape[0]

    def dump_json(self, path):
        """Debug dump (row-major dense matrices, explicit dimensions)."""
        def dense(a):
            if a is None:
                return None
            a = a.toarray() if sp.issparse(a) else np.asarray(a)
            return a.tolist()
        payload = {
            "n": self.n, "n_eq": self.n_eq, "n_in": self.n_in,
            "H": dense(self.H), "f": self.f.tolist(),
            "A_eq": dense(self.A_eq), "b_eq": None if self.b_eq is None else self.b_eq.tolist(),
            "A_in": dense(self.A_in), "b_in": None if self.b_in is None else self.b_in.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)


@dataclass
class QpSolution:
    z_star: np.ndarray
    status: str
    objective: float
    iterations: int
    kkt_residual: float
    y: np.ndarray = None            # multipliers for stacked [eq; in] rows
    solve_time: float = 0.0


def _ruiz_scale(P, A, iters=10):
    """Symmetric Ruiz equilibration of [[P, A'], [A, 0]].

    Returns (d, e, c): variable scaling, row scaling, cost scaling.  The
    cost scaling is kept at 1: these problems have well-ranged cost data,
    and norm-based heuristics misfire on the many near-zero regularizer
    columns.
    """
    n = P.shape[0]
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    Pw = P.copy().tocsc()
    Aw = A.copy().tocsc()
    for _ in range(iters):
        # infinity norms of the stacked columns
        colP = np.abs(Pw).max(axis=0).toarray().ravel() if Pw.nnz else np.zeros(n)
        colA = np.abs(Aw).max(axis=0).toarray().ravel() if Aw.nnz else np.zeros(n)
        col = np.maximum(colP, colA)
        rowA = np.abs(Aw).max(axis=1).toarray().ravel() if Aw.nnz else np.zeros(m)
        dd = 1.0 / np.sqrt(np.maximum(col, 1e-8))
        ee = 1.0 / np.sqrt(np.maximum(rowA, 1e-8))
        dd = np.clip(dd, 1e-4, 1e4)
        ee = np.clip(ee, 1e-4, 1e4)
        D = sp.diags(dd)
        E = sp.diags(ee)
        Pw = (D @ Pw @ D).tocsc()
        Aw = (E @ Aw @ D).tocsc()
        d *= dd
        e *= ee
    return d, e, 1.0


class CachedQpSolver:
    """Operator-splitting solver with a cached KKT factorization.

    Built once from the quadratic term and constraint matrix; any number of
    instances differing only in ``q``, ``l``, ``u`` are then solved against
    the same factorization, warm-started from the previous solution.
    Instances hold no shared mutable state across objects and a single
    instance is only ever driven sequentially.
    """

    def __init__(self, P, A, *, eq_mask=None, rho=0.1, rho_eq_factor=1e3,
                 sigma=1e-6, alpha=1.6, ruiz_iters=10, use_kernel=None):
        P = sp.csc_matrix(P)
        A = sp.csc_matrix(A)
        if P.shape[0] != P.shape[1] or A.shape[1] != P.shape[0]:
            raise ConfigurationError("P/A dimension mismatch")
        self.n = P.shape[0]
        self.m = A.shape[0]
        self.kernel_name = use_kernel or _kernel.default_kernel()

        d, e, c = _ruiz_scale(P, A, ruiz_iters)
        self._d = d
        self._e = e
        self._c = c
        self._dinv = 1.0 / d
        self._einv = 1.0 / e
        D = sp.diags(d)
        E = sp.diags(e)
        self._Ps = (c * (D @ P @ D)).tocsr()
        self._As = (E @ A @ D).tocsr()
        self._Ats = self._As.T.tocsr()
        if eq_mask is None:
            eq_mask = np.zeros(self.m, dtype=bool)
        self._eq_mask = np.asarray(eq_mask, dtype=bool)
        self._rho_base = rho
        self._rho_eq_factor = rho_eq_factor
        self._sigma = sigma
        self._alpha = alpha
        # ladder of pre-factored penalty levels; adaptation snaps to these
        self._levels = {}
        self._level = 0
        self._get_level(0)
        # warm-start memory (scaled space)
        self._wx = np.zeros(self.n)
        self._wz = np.zeros(self.m)
        self._wy = np.zeros(self.m)
        self._warm_ok = False
        # unscaled P/A kept for polish and residuals
        self._P = P.tocsr()
        self._A = A.tocsr()

    def _get_level(self, exp):
        """Factorization for rho = rho_base * 10**exp (built on demand)."""
        exp = int(np.clip(exp, -3, 3))
        if exp not in self._levels:
            rho_vec = np.full(self.m, self._rho_base * 10.0 ** exp)
            rho_vec[self._eq_mask] *= self._rho_eq_factor
            K = sp.bmat(
                [[self._Ps + self._sigma * sp.eye(self.n), self._Ats],
                 [self._As, -sp.diags(1.0 / rho_vec)]],
                format="csc") if self.m else \
                sp.csc_matrix(self._Ps + self._sigma * sp.eye(self.n))
            lu = spla.splu(K)
            args = None
            if self.kernel_name == "compiled":
                args = _kernel.prepare_compiled(lu, self._Ps, self._As, self._Ats)
            self._levels[exp] = (rho_vec, lu, args)
        return exp, self._levels[exp]

    # ------------------------------------------------------------------

    def reset_warm_start(self):
        self._wx[:] = 0.0
        self._wz[:] = 0.0
        self._wy[:] = 0.0

    def _run_chunk(self, level, qs, ls, us, x0, z0, y0, max_iter, eps,
                   pinf_tol, streak_needed, check_every):
        rho_vec, lu, args = self._levels[level]
        if self.kernel_name == "compiled":
            return _kernel.run_compiled(
                args, qs, ls, us, rho_vec, self._sigma,
                self._alpha, self._dinv, self._einv, self._c, x0, z0, y0,
                max_iter, eps, pinf_tol, streak_needed, check_every)
        return _kernel.run_python(
            lu, self._Ps, self._As, self._Ats, qs, ls, us,
            rho_vec, self._sigma, self._alpha, self._dinv, self._einv,
            self._c, x0, z0, y0, max_iter, eps, pinf_tol,
            streak_needed, check_every)

    def _residual_ratio(self, xs, zs, ys, qs):
        """Scaled relative primal/dual residual ratio for rho adaptation."""
        Ax = self._As @ xs
        rp = float(np.abs(Ax - zs).max(initial=0.0))
        rp_den = max(float(np.abs(Ax).max(initial=0.0)),
                     float(np.abs(zs).max(initial=0.0)), 1e-9)
        Px = self._Ps @ xs
        Aty = self._Ats @ ys
        rd = float(np.abs(Px + qs + Aty).max(initial=0.0))
        rd_den = max(float(np.abs(Px).max(initial=0.0)),
                     float(np.abs(Aty).max(initial=0.0)),
                     float(np.abs(qs).max(initial=0.0)), 1e-9)
        return (rp / rp_den) / max(rd / rd_den, 1e-12)

    def _run_kernel(self, qs, ls, us, x0, z0, y0, max_iter, eps, pinf_tol,
                    streak_needed, check_every, chunk=250):
        """Chunked iteration with penalty adaptation on the cached ladder."""
        xs = np.asarray(x0, float).copy()
        zs = np.asarray(z0, float).copy()
        ys = np.asarray(y0, float).copy()
        done = 0
        code, rp, rd = 1, np.inf, np.inf
        while done < max_iter:
            budget = min(chunk, max_iter - done)
            code, it, rp, rd, xs, zs, ys = self._run_chunk(
                self._level, qs, ls, us, xs, zs, ys, budget, eps,
                pinf_tol, streak_needed, check_every)
            done += it
            if code != 1:        # solved or certificate
                break
            ratio = self._residual_ratio(xs, zs, ys, qs)
            if ratio > 25.0:
                self._level, _ = self._get_level(self._level + 1)
            elif ratio < 1.0 / 25.0:
                self._level, _ = self._get_level(self._level - 1)
        return code, done, rp, rd, xs, zs, ys

    def solve(self, q, l, u, *, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
              polish=True, warm_start=True, pinf_tol=1e-4, streak_needed=100,
              check_every=25):
        q = np.asarray(q, dtype=float)
        l = np.asarray(l, dtype=float)
        u = np.asarray(u, dtype=float)
        qs = self._c * self._d * q
        ls = np.where(np.isfinite(l), self._e * l, -np.inf)
        us = np.where(np.isfinite(u), self._e * u, np.inf)
        if warm_start and self._warm_ok:
            x0, z0, y0 = self._wx, self._wz, self._wy
        else:
            x0 = np.zeros(self.n)
            z0 = np.zeros(self.m)
            y0 = np.zeros(self.m)
            self._level = 0     # cold solves are deterministic in the inputs

        # loose first pass; the active-set polish supplies the final accuracy
        eps1 = max(tol, 3e-5) if polish else tol
        code, iters, rp, rd, xs, zs, ys = self._run_kernel(
            qs, ls, us, x0, z0, y0, max_iter, eps1, pinf_tol,
            streak_needed, check_every)
        self._wx, self._wz, self._wy = xs.copy(), zs.copy(), ys.copy()
        self._warm_ok = code == 0
        x = self._d * xs
        y = self._e * ys / self._c

        if code == PRIMAL_INFEASIBLE:
            return x, y, INFEASIBLE, iters, np.inf
        if code == DUAL_INFEASIBLE:
            return x, y, MAX_ITER, iters, np.inf

        res = self.kkt_residual(x, y, q, l, u)
        if polish:
            xp, yp = self._polish(x, y, q, l, u)
            if xp is not None:
                res_new = self.kkt_residual(xp, yp, q, l, u)
                if res_new <= res:
                    x, y, res = xp, yp, res_new
            if res > tol and eps1 > tol and iters < max_iter:
                # polish missed the active set: refine with the plain iteration
                code, it2, rp, rd, xs, zs, ys = self._run_kernel(
                    qs, ls, us, xs, zs, ys, max_iter - iters, tol, pinf_tol,
                    streak_needed, check_every)
                iters += it2
                self._wx, self._wz, self._wy = xs.copy(), zs.copy(), ys.copy()
                self._warm_ok = code == 0
                x2 = self._d * xs
                y2 = self._e * ys / self._c
                if code == PRIMAL_INFEASIBLE:
                    return x2, y2, INFEASIBLE, iters, np.inf
                res2 = self.kkt_residual(x2, y2, q, l, u)
                xp, yp = self._polish(x2, y2, q, l, u)
                if xp is not None:
                    res_p = self.kkt_residual(xp, yp, q, l, u)
                    if res_p <= res2:
                        x2, y2, res2 = xp, yp, res_p
                if res2 <= res:
                    x, y, res = x2, y2, res2
        status = OPTIMAL if res <= tol else MAX_ITER
        return x, y, status, iters, res

    def _polish_once(self, rows, up_side, q, l, u, reg=1e-7, refine=6):
        G = self._A[rows]
        b = np.where(up_side, u[rows], l[rows])
        k = rows.size
        K = sp.bmat([[self._P + reg * sp.eye(self.n), G.T],
                     [G, -reg * sp.eye(k) if k else None]], format="csc") \
            if k else sp.csc_matrix(self._P + reg * sp.eye(self.n))
        try:
            lu = spla.splu(K)
        except RuntimeError:
            return None, None
        rhs = np.concatenate([-q, b])
        sol = lu.solve(rhs)

        def kkt_res(s):
            return rhs - np.concatenate([
                self._P @ s[:self.n] + (G.T @ s[self.n:] if k else 0.0),
                G @ s[:self.n]])

        # iterative refinement towards the unregularized KKT system, with a
        # divergence guard for inconsistent active sets
        best = sol
        best_norm = float(np.abs(kkt_res(sol)).max(initial=0.0))
        for _ in range(refine):
            sol = sol + lu.solve(kkt_res(sol))
            norm = float(np.abs(kkt_res(sol)).max(initial=0.0))
            if norm < best_norm:
                best, best_norm = sol, norm
            elif norm > 10 * best_norm:
                break
        xp = best[:self.n]
        yp = np.zeros(self.m)
        yp[rows] = best[self.n:]
        return xp, yp

    def _polish(self, x, y, q, l, u, max_updates=12):
        """Active-set finisher seeded by the splitting iterate.

        Solves the KKT system on a working set, then repairs it: rows with
        wrong-sign multipliers leave, violated rows enter.  Warm-started
        close to the solution this settles in a few factorizations; a wrong
        result is rejected upstream by the residual comparison.
        """
        fin_l = np.isfinite(l) & ~self._eq_mask
        fin_u = np.isfinite(u) & ~self._eq_mask
        cap = max(self.n - int(self._eq_mask.sum()), 0)
        Ax = self._A @ x
        y_scale = max(float(np.abs(y).max(initial=0.0)), 1.0)
        act_lo = ((y < -1e-6 * y_scale)
                  | (Ax - np.where(fin_l, l, -np.inf) < 1e-6 * (1 + np.abs(np.where(fin_l, l, 0.0))))) & fin_l
        act_up = ((y > 1e-6 * y_scale)
                  | (np.where(fin_u, u, np.inf) - Ax < 1e-6 * (1 + np.abs(np.where(fin_u, u, 0.0))))) & fin_u
        act_lo &= ~act_up
        ineq = np.where(act_lo | act_up)[0]
        if ineq.size > cap:
            order = np.argsort(-np.abs(y[ineq]))
            ineq = np.sort(ineq[order[:cap]])
        on_upper = act_up.copy()

        eq_rows = np.where(self._eq_mask)[0]
        best = (None, None, np.inf)
        seen = set()
        for _ in range(max_updates):
            rows = np.sort(np.concatenate([eq_rows, ineq]))
            key = rows.tobytes() + on_upper[rows].tobytes()
            if key in seen:
                break
            seen.add(key)
            up_side = on_upper[rows] | self._eq_mask[rows]
            xp, yp = self._polish_once(rows, up_side, q, l, u)
            if xp is None:
                break
            res = self.kkt_residual(xp, yp, q, l, u)
            if res < best[2]:
                best = (xp, yp, res)
            if res < 1e-9:
                break
            Axp = self._A @ xp
            # working-set repair
            wrong = ((on_upper & (yp < -1e-9)) | (~on_upper & (yp > 1e-9))) \
                & ~self._eq_mask
            in_set = np.zeros(self.m, dtype=bool)
            in_set[ineq] = True
            viol_lo = fin_l & ~in_set & (Axp < np.where(fin_l, l, -np.inf) - 1e-9)
            viol_up = fin_u & ~in_set & (Axp > np.where(fin_u, u, np.inf) + 1e-9)
            if not (np.any(wrong[ineq]) or np.any(viol_lo) or np.any(viol_up)):
                break
            keep = ineq[~wrong[ineq]]
            enter = np.where(viol_lo | viol_up)[0]
            on_upper[viol_up] = True
            on_upper[viol_lo] = False
            ineq = np.unique(np.concatenate([keep, enter]))
            if ineq.size > cap:
                score = np.abs(yp[ineq]) + np.where(np.isin(ineq, enter), 1e6, 0.0)
                order = np.argsort(-score)
                ineq = np.sort(ineq[order[:cap]])
        return best[0], best[1]

    def kkt_residual(self, x, y, q, l, u):
        Ax = self._A @ x
        r_stat = float(np.abs(self._P @ x + q + self._A.T @ y).max(initial=0.0))
        viol_up = np.where(np.isfinite(u), np.maximum(Ax - u, 0.0), 0.0)
        viol_lo = np.where(np.isfinite(l), np.maximum(l - Ax, 0.0), 0.0)
        r_prim = float(max(viol_up.max(initial=0.0), viol_lo.max(initial=0.0)))
        yp = np.maximum(y, 0.0)
        ym = np.maximum(-y, 0.0)
        u_fin = np.where(np.isfinite(u), u, 0.0)
        l_fin = np.where(np.isfinite(l), l, 0.0)
        comp_up = np.where(np.isfinite(u), yp * np.abs(u_fin - Ax), yp)
        comp_lo = np.where(np.isfinite(l), ym * np.abs(Ax - l_fin), ym)
        free = self._eq_mask
        comp = np.where(free, 0.0, np.maximum(comp_up, comp_lo))
        r_comp = float(comp.max(initial=0.0))
        return max(r_stat, r_prim, r_comp)

    def objective(self, x, q):
        return float(0.5 * x @ (self._P @ x) + q @ x)


# ----------------------------------------------------------------------
# QpProblem-level API


def _stack_problem(p: QpProblem):
    blocks = []
    l_parts = []
    u_parts = []
    if p.n_eq:
        blocks.append(sp.csc_matrix(p.A_eq))
        l_parts.append(p.b_eq)
        u_parts.append(p.b_eq)
    if p.n_in:
        blocks.append(sp.csc_matrix(p.A_in))
        l_parts.append(np.full(p.n_in, -np.inf))
        u_parts.append(p.b_in)
    if blocks:
        A = sp.vstack(blocks, format="csc")
        l = np.concatenate(l_parts)
        u = np.concatenate(u_parts)
    else:
        A = sp.csc_matrix((0, p.n))
        l = np.zeros(0)
        u = np.zeros(0)
    eq_mask = np.zeros(A.shape[0], dtype=bool)
    eq_mask[:p.n_eq] = True
    return A, l, u, eq_mask


def solve_qp(p: QpProblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
             polish=True) -> QpSolution:
    """Solve a one-off QP.  For repeated structure use CachedQpSolver."""
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    A, l, u, eq_mask = _stack_problem(p)
    solver = CachedQpSolver(sp.csc_matrix(p.H), A, eq_mask=eq_mask)
    x, y, status, iters, res = solver.solve(
        p.f, l, u, tol=tol, max_iter=max_iter, polish=polish, warm_start=False)
    obj = float(0.5 * x @ (p.H @ x) + p.f @ x) if status == OPTIMAL else np.nan
    return QpSolution(z_star=x, status=status, objective=obj,
                      iterations=iters, kkt_residual=res, y=y)


def is_feasible(p: QpProblem, tol=DEFAULT_TOL) -> bool:
    """Phase-1 check: minimize inequality violation, keep equalities hard."""
    n = p.n
    m_in = p.n_in
    if m_in == 0 and p.n_eq == 0:
        return True
    # variables (z, s): min |s|^2 + eps|z|^2  s.t. A_eq z = b_eq, A_in z - s <= b_in, s >= 0
    H = sp.block_diag([1e-8 * sp.eye(n), sp.eye(max(m_in, 0))], format="csc") \
        if m_in else sp.csc_matrix(1e-8 * sp.eye(n))
    f = np.zeros(n + m_in)
    blocks = []
    l_parts, u_parts = [], []
    n_eq = p.n_eq
    if n_eq:
        blocks.append(sp.hstack([sp.csc_matrix(p.A_eq), sp.csc_matrix((n_eq, m_in))]))
        l_parts.append(p.b_eq)
        u_parts.append(p.b_eq)
    if m_in:
        blocks.append(sp.hstack([sp.csc_matrix(p.A_in), -sp.eye(m_in)]))
        l_parts.append(np.full(m_in, -np.inf))
        u_parts.append(p.b_in)
        blocks.append(sp.hstack([sp.csc_matrix((m_in, n)), sp.eye(m_in)]))
        l_parts.append(np.zeros(m_in))
        u_parts.append(np.full(m_in, np.inf))
    A = sp.vstack(blocks, format="csc")
    l = np.concatenate(l_parts)
    u = np.concatenate(u_parts)
    eq_mask = np.zeros(A.shape[0], dtype=bool)
    eq_mask[:n_eq] = True
    solver = CachedQpSolver(H, A, eq_mask=eq_mask)
    x, y, status, iters, res = solver.solve(f, l, u, tol=max(tol * 1e-2, 1e-9),
                                            warm_start=False)
    if status == INFEASIBLE:
        return False
    s = x[n:]
    return bool(s.max(initial=0.0) <= tol)


# ----------------------------------------------------------------------
# Dense interior-point solver (second route for ill-conditioned instances)


def solve_qp_dense_ipm(H, f, A, l, u, A_eq=None, b_eq=None, *,
                       max_iter=60, tol=1e-9, elastic_penalty=None,
                       _scale=None):
    """Mehrotra predictor-corrector method for small dense QPs.

    Solves ``min 1/2 w'Hw + f'w  s.t.  l <= Aw <= u, A_eq w = b_eq``.
    With ``elastic_penalty = (rho_t, c_t)`` every inequality is widened by a
    single elastic variable ``t >= 0`` penalized by ``1/2 rho_t t^2 + c_t t``
    (an exact penalty), so the solve always succeeds and ``t*`` measures the
    infeasibility of the original instance.

    Returns ``(w, status, iterations, t_star)``.
    """
    H = np.asarray(H, float)
    f = np.asarray(f, float)
    A = np.asarray(A, float)
    l = np.asarray(l, float)
    u = np.asarray(u, float)
    n = f.shape[0]
    if A_eq is None:
        A_eq = np.zeros((0, n))
        b_eq = np.zeros(0)
    A_eq = np.asarray(A_eq, float)
    b_eq = np.asarray(b_eq, float)

    if elastic_penalty is not None:
        rho_t, c_t = elastic_penalty
        fin_u = np.isfinite(u)
        fin_l = np.isfinite(l)
        rows = [np.hstack([A[fin_u], -np.ones((int(fin_u.sum()), 1))]),
                np.hstack([-A[fin_l], -np.ones((int(fin_l.sum()), 1))]),
                np.hstack([np.zeros((1, n)), -np.ones((1, 1))])]
        A2 = np.vstack(rows)
        u2 = np.concatenate([u[fin_u], -l[fin_l], [0.0]])
        l2 = np.full(A2.shape[0], -np.inf)
        H2 = np.zeros((n + 1, n + 1))
        H2[:n, :n] = H
        H2[n, n] = rho_t
        f2 = np.concatenate([f, [c_t]])
        Aeq2 = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
        scale = max(1.0, float(np.abs(f).max(initial=0.0)),
                    float(np.abs(u2).max(initial=0.0)))
        w, status, iters, _ = solve_qp_dense_ipm(
            H2, f2, A2, l2, u2, Aeq2, b_eq, max_iter=max_iter, tol=tol,
            _scale=scale)
        return w[:n], status, iters, float(w[n])

    # split two-sided rows into slack pairs
    fin_u = np.isfinite(u)
    fin_l = np.isfinite(l)
    G = np.vstack([A[fin_u], -A[fin_l]])          # G w + s = h, s >= 0
    h = np.concatenate([u[fin_u], -l[fin_l]])
    m = G.shape[0]
    me = A_eq.shape[0]
    if m == 0:
        KKT = np.block([[H + 1e-12 * np.eye(n), A_eq.T],
                        [A_eq, np.zeros((me, me))]])
        sol = np.linalg.solve(KKT, np.concatenate([-f, b_eq]))
        return sol[:n], OPTIMAL, 1, 0.0

    w = np.zeros(n)
    slack0 = h - G @ w
    shift = max(0.0, float(-slack0.min(initial=0.0))) + 1.0
    s = slack0 + shift
    z = np.ones(m)
    nu = np.zeros(me)
    scale = _scale if _scale is not None else \
        max(1.0, float(np.abs(f).max(initial=0.0)),
            float(np.abs(h).max(initial=0.0)))
    reg = 1e-9 * max(1.0, float(np.abs(H).max(initial=0.0)))
    best = (np.inf, w.copy())
    stall = 0

    for it in range(1, max_iter + 1):
        r_dual = H @ w + f + G.T @ z + (A_eq.T @ nu if me else 0.0)
        r_prim = G @ w + s - h
        r_eq = A_eq @ w - b_eq if me else np.zeros(0)
        mu = float(s @ z) / m
        res = max(float(np.abs(r_prim).max(initial=0.0)),
                  float(np.abs(r_eq).max(initial=0.0)))
        r_d = float(np.abs(r_dual).max(initial=0.0))
        rel_d = r_d / max(scale, float(np.abs(z).max(initial=1.0)))
        if mu < tol * scale and res < 1e3 * tol * scale and rel_d < 1e3 * tol:
            return w, OPTIMAL, it, 0.0
        # track the best iterate; degenerate instances stagnate near the
        # optimum with an oscillating dual residual
        merit = max(mu / scale, res / scale, rel_d)
        if merit < 0.98 * best[0]:
            best = (merit, w.copy())
            stall = 0
        else:
            stall += 1
            if stall >= 10 and best[0] < 1e-6:
                return best[1], OPTIMAL, it, 0.0

        zs = z / s
        Mmat = H + (G.T * zs) @ G + reg * np.eye(n)
        KKT = np.block([[Mmat, A_eq.T],
                        [A_eq, -reg * np.eye(me)]]) if me else Mmat

        def newton(r_d, r_p, r_e, r_c):
            # eliminate ds, dz:  dz = (r_c - z*ds)/s with ds = -r_p - G dw
            rhs_w = -r_d - G.T @ (zs * r_p + r_c / s)
            rhs = np.concatenate([rhs_w, -r_e]) if me else rhs_w
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
            dw = sol[:n]
            dnu = sol[n:] if me else np.zeros(0)
            ds = -r_p - G @ dw
            dz = (r_c - z * ds) / s
            return dw, dnu, ds, dz

        # affine scaling (predictor) step
        r_c_aff = -s * z
        dw_a, dnu_a, ds_a, dz_a = newton(r_dual, r_prim, r_eq, r_c_aff)

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        alpha_aff = min(max_step(s, ds_a), max_step(z, dz_a))
        mu_aff = float((s + alpha_aff * ds_a) @ (z + alpha_aff * dz_a)) / m
        sigma = min(max((mu_aff / mu) ** 3, 1e-6), 0.99) if mu > 0 else 0.0

        # corrector step
        r_c = sigma * mu - s * z - ds_a * dz_a
        dw, dnu, ds, dz = newton(r_dual, r_prim, r_eq, r_c)
        alpha = 0.995 * min(max_step(s, ds), max_step(z, dz))
        w = w + alpha * dw
        s = np.maximum(s + alpha * ds, 1e-14)
        z = np.maximum(z + alpha * dz, 1e-14)
        if me:
            nu = nu + alpha * dnu
    if best[0] < 1e-6:
        return best[1], OPTIMAL, max_iter, 0.0
    return w, MAX_ITER, max_iter, 0.0


# ----------------------------------------------------------------------
# Matrix equation / eigenvalue utilities


def max_eigenvalue_sym(S) -> float:
    """Largest eigenvalue of a symmetric matrix."""
    S = _as_matrix(S, "S")
    if S.shape[0] != S.shape[1]:
        raise ConfigurationError("S must be square")
    asym = float(np.abs(S - S.T).max(initial=0.0))
    if asym > 1e-10 * max(1.0, float(np.abs(S).max(initial=1.0))):
        raise ConfigurationError(f"S is not symmetric (max asymmetry {asym:.2e})")
    return float(np.linalg.eigvalsh(0.5 * (S + S.T)).max())


def spectral_radius(M) -> float:
    M = _as_matrix(M, "M")
    return float(np.abs(np.linalg.eigvals(M)).max(initial=0.0))


def solve_discrete_lyapunov(M, Q) -> np.ndarray:
    """Solve ``M' P M - P = -Q`` for symmetric positive definite ``P``."""
    M = _as_matrix(M, "M")
    Q = _as_matrix(Q, "Q")
    if M.shape != Q.shape or M.shape[0] != M.shape[1]:
        raise ConfigurationError("M and Q must be square and of equal size")
    if float(np.abs(Q - Q.T).max(initial=0.0)) > 1e-10:
        raise ConfigurationError("Q must be symmetric")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() <= 0:
        raise PreconditionError("Q must be positive definite")
    if spectral_radius(M) >= 1.0:
        raise PreconditionError("spectral radius of M must be < 1")
    P = scipy.linalg.solve_discrete_lyapunov(M.T, Q)
    P = 0.5 * (P + P.T)
    resid = float(np.linalg.norm(M.T @ P @ M - P + Q, "fro"))
    if resid > 1e-9 * max(1.0, float(np.linalg.norm(Q, "fro"))):
        raise PreconditionError(f"Lyapunov residual {resid:.2e} too large")
    return P
