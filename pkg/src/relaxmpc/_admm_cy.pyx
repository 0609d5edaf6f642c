# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ADMM iteration loop.

Mirrors ``_admm_py.admm_loop`` step for step.  The cached KKT factorization
is consumed as raw CSC triangular factors plus row/column permutations so
the whole iteration runs without touching the interpreter.
"""
import numpy as np
from libc.math cimport INFINITY, fabs
from libc.stdint cimport int64_t

ctypedef int64_t I64
ctypedef double F64

SOLVED = 0
MAX_ITER = 1
PRIMAL_INFEASIBLE = 2
DUAL_INFEASIBLE = 3


cdef inline void csr_matvec(const I64[:] indptr, const I64[:] indices,
                            const F64[:] data, const F64[:] x, F64[:] out,
                            Py_ssize_t nrows) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(nrows):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc


cdef inline void lu_solve(const I64[:] Lp, const I64[:] Li, const F64[:] Lx,
                          const I64[:] Up, const I64[:] Ui, const F64[:] Ux,
                          const I64[:] perm_r, const I64[:] perm_c,
                          const F64[:] b, F64[:] work, F64[:] out,
                          Py_ssize_t nk) noexcept nogil:
    # K = Pr^T L U Pc^T ; solve K out = b
    cdef Py_ssize_t j, k
    cdef double vj, diag
    for j in range(nk):
        work[perm_r[j]] = b[j]
    # forward solve L w = t (diagonal entry first in each sorted column)
    for j in range(nk):
        diag = 1.0
        k = Lp[j]
        if k < Lp[j + 1] and Li[k] == j:
            diag = Lx[k]
            k += 1
        vj = work[j] / diag
        work[j] = vj
        while k < Lp[j + 1]:
            work[Li[k]] -= Lx[k] * vj
            k += 1
    # backward solve U v = w (diagonal entry last in each sorted column)
    for j in range(nk - 1, -1, -1):
        k = Up[j + 1] - 1
        diag = 1.0
        if k >= Up[j] and Ui[k] == j:
            diag = Ux[k]
            k -= 1
        vj = work[j] / diag
        work[j] = vj
        while k >= Up[j]:
            work[Ui[k]] -= Ux[k] * vj
            k -= 1
    for j in range(nk):
        out[j] = work[perm_c[j]]


def admm_loop(I64[:] Lp, I64[:] Li, F64[:] Lx,
              I64[:] Up, I64[:] Ui, F64[:] Ux,
              I64[:] perm_r, I64[:] perm_c,
              I64[:] Pp, I64[:] Pi, F64[:] Px,
              I64[:] Ap, I64[:] Ai, F64[:] Ax,
              I64[:] Atp, I64[:] Ati, F64[:] Atx,
              F64[:] q, F64[:] l, F64[:] u,
              F64[:] rho, double sigma, double alpha,
              F64[:] dinv, F64[:] einv, double cost_scale,
              F64[:] x, F64[:] z, F64[:] y,
              long max_iter, double eps_abs, double pinf_tol,
              long streak_needed, long check_every):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t m = l.shape[0]
    cdef Py_ssize_t nk = n + m
    cdef double cinv = 1.0 / cost_scale

    rhs_np = np.empty(nk); sol_np = np.empty(nk); work_np = np.empty(nk)
    dyn_np = np.empty(m); dxn_np = np.empty(n)
    sn_np = np.empty(n); sn2_np = np.empty(n); sm_np = np.empty(m)
    cdef F64[:] rhs = rhs_np, sol = sol_np, work = work_np
    cdef F64[:] dy = dyn_np, dxs = dxn_np
    cdef F64[:] sn = sn_np, sn2 = sn2_np, sm = sm_np

    cdef double r_prim = INFINITY, r_dual = INFINITY
    cdef long it = 0, pinf_streak = 0, dinf_streak = 0
    cdef Py_ssize_t i
    cdef double v, zp, znew, dy_norm, dx_norm, atdy, support, pdx, qdx
    cdef double ri, lo, hi
    cdef bint check_now, pinf_hit, dinf_hit, ok
    cdef int C_SOLVED = 0, C_MAX_ITER = 1, C_PINF = 2, C_DINF = 3
    cdef int code = C_MAX_ITER

    with nogil:
        for it in range(1, max_iter + 1):
            for i in range(n):
                rhs[i] = sigma * x[i] - q[i]
            for i in range(m):
                rhs[n + i] = z[i] - y[i] / rho[i]
            lu_solve(Lp, Li, Lx, Up, Ui, Ux, perm_r, perm_c, rhs, work, sol, nk)
            for i in range(n):
                # x_new = alpha*x_tilde + (1-alpha)*x
                dxs[i] = alpha * (sol[i] - x[i])
                x[i] = x[i] + dxs[i]
            for i in range(m):
                # z_tilde = z + (nu - y)/rho ; z_pre = alpha*z_tilde + (1-alpha)*z
                zp = alpha * (z[i] + (sol[n + i] - y[i]) / rho[i]) + (1.0 - alpha) * z[i]
                znew = zp + y[i] / rho[i]
                if znew < l[i]:
                    znew = l[i]
                if znew > u[i]:
                    znew = u[i]
                dy[i] = rho[i] * (zp - znew)
                y[i] = y[i] + dy[i]
                z[i] = znew

            check_now = (it % check_every == 0) or it == max_iter \
                or pinf_streak > 0 or dinf_streak > 0
            if not check_now:
                continue

            # unscaled residuals
            csr_matvec(Ap, Ai, Ax, x, sm, m)
            r_prim = 0.0
            for i in range(m):
                ri = fabs(einv[i] * (sm[i] - z[i]))
                if ri > r_prim:
                    r_prim = ri
            csr_matvec(Pp, Pi, Px, x, sn, n)
            csr_matvec(Atp, Ati, Atx, y, sn2, n)
            r_dual = 0.0
            for i in range(n):
                ri = fabs((sn[i] + q[i] + sn2[i]) * dinv[i] * cinv)
                if ri > r_dual:
                    r_dual = ri
            if r_prim <= eps_abs and r_dual <= eps_abs:
                code = C_SOLVED
                break

            # primal infeasibility certificate (all quantities unscaled)
            dy_norm = 0.0
            for i in range(m):
                ri = fabs(dy[i] / einv[i] * cinv)
                if ri > dy_norm:
                    dy_norm = ri
            pinf_hit = False
            if dy_norm > 1e-14:
                csr_matvec(Atp, Ati, Atx, dy, sn, n)
                atdy = 0.0
                for i in range(n):
                    ri = fabs(sn[i] * dinv[i] * cinv)
                    if ri > atdy:
                        atdy = ri
                if atdy <= pinf_tol * dy_norm:
                    support = 0.0
                    ok = True
                    for i in range(m):
                        v = dy[i] / einv[i] * cinv
                        if v > pinf_tol * dy_norm:
                            hi = u[i]
                            if hi == INFINITY:
                                ok = False
                                break
                            support += einv[i] * hi * v
                        elif v < -pinf_tol * dy_norm:
                            lo = l[i]
                            if lo == -INFINITY:
                                ok = False
                                break
                            support += einv[i] * lo * v
                    if ok and support <= -pinf_tol * dy_norm:
                        pinf_hit = True
            if pinf_hit:
                pinf_streak += 1
            else:
                pinf_streak = 0
            if pinf_streak >= streak_needed:
                code = C_PINF
                break

            # dual infeasibility certificate on the primal step
            dx_norm = 0.0
            for i in range(n):
                ri = fabs(dxs[i] / dinv[i])
                if ri > dx_norm:
                    dx_norm = ri
            dinf_hit = False
            if dx_norm > 1e-14:
                csr_matvec(Pp, Pi, Px, dxs, sn, n)
                pdx = 0.0
                qdx = 0.0
                for i in range(n):
                    ri = fabs(sn[i] * dinv[i] * cinv)
                    if ri > pdx:
                        pdx = ri
                    qdx += q[i] * dxs[i]
                qdx *= cinv
                if pdx <= pinf_tol * dx_norm and qdx <= -pinf_tol * dx_norm:
                    csr_matvec(Ap, Ai, Ax, dxs, sm, m)
                    ok = True
                    for i in range(m):
                        v = einv[i] * sm[i]
                        if u[i] != INFINITY and l[i] != -INFINITY:
                            if fabs(v) > pinf_tol * dx_norm:
                                ok = False
                                break
                        elif u[i] != INFINITY:
                            if v > pinf_tol * dx_norm:
                                ok = False
                                break
                        elif l[i] != -INFINITY:
                            if v < -pinf_tol * dx_norm:
                                ok = False
                                break
                    dinf_hit = ok
            if dinf_hit:
                dinf_streak += 1
            else:
                dinf_streak = 0
            if dinf_streak >= streak_needed:
                code = C_DINF
                break

    return code, it, r_prim, r_dual
