"""Independent oracles used to check the package against a second route.

Everything here is deliberately written without the package's own solver
machinery: brute-force enumeration, truncated series, Jacobi rotations,
Taylor series and scipy's LP simplex-family solvers.
"""
import itertools

import numpy as np
from scipy.optimize import linprog


def active_set_qp_oracle(H, f, A_in, b_in, A_eq=None, b_eq=None, tol=1e-9):
    """Solve a strictly convex QP by enumerating inequality active sets.

    Returns (z, objective) or None when every active set fails feasibility.
    """
    H = np.asarray(H, float)
    f = np.asarray(f, float)
    A_in = np.asarray(A_in, float)
    b_in = np.asarray(b_in, float)
    n = f.shape[0]
    m = A_in.shape[0]
    if A_eq is None:
        A_eq = np.zeros((0, n))
        b_eq = np.zeros(0)
    A_eq = np.asarray(A_eq, float)
    b_eq = np.asarray(b_eq, float)

    best = None
    for r in range(m + 1):
        for subset in itertools.combinations(range(m), r):
            G = np.vstack([A_eq, A_in[list(subset)]])
            h = np.concatenate([b_eq, b_in[list(subset)]])
            k = G.shape[0]
            KKT = np.block([[H, G.T], [G, np.zeros((k, k))]])
            rhs = np.concatenate([-f, h])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            lam = sol[n + A_eq.shape[0]:]
            if np.any(lam < -tol):
                continue
            if np.any(A_in @ z > b_in + 1e-8):
                continue
            if A_eq.shape[0] and np.abs(A_eq @ z - b_eq).max() > 1e-8:
                continue
            obj = 0.5 * z @ H @ z + f @ z
            if best is None or obj < best[1] - 1e-12:
                best = (z, obj)
    return best


def lyapunov_series_oracle(M, Q, kmax=200):
    """P = sum_k (M^T)^k Q M^k, valid for spectral radius < 1."""
    M = np.asarray(M, float)
    Q = np.asarray(Q, float)
    P = Q.copy()
    term = Q.copy()
    for _ in range(kmax):
        term = M.T @ term @ M
        P += term
    return P


def jacobi_max_eigenvalue(S, sweeps=100, tol=1e-14):
    """Largest eigenvalue via classical Jacobi rotations (no LAPACK)."""
    A = np.array(S, float)
    n = A.shape[0]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(A[p, q]))
        if off < tol * max(1.0, np.abs(np.diag(A)).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = 0.5 * np.arctan2(2 * A[p, q], A[q, q] - A[p, p])
                c, s = np.cos(theta), np.sin(theta)
                J = np.eye(n)
                J[p, p] = c
                J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return float(np.diag(A).max())


def expm_taylor_oracle(M, order=24):
    """Matrix exponential by scaling-and-squaring with a Taylor series."""
    M = np.asarray(M, float)
    norm = np.abs(M).sum(axis=1).max()
    s = max(0, int(np.ceil(np.log2(max(norm, 1e-16)))) + 2)
    B = M / (2 ** s)
    E = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, order + 1):
        term = term @ B / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def stopping_distance_lp(A, B, t_s, limits, x0, horizon=100,
                         dj=0.0, da=0.0, u_prev=None):
    """Minimal stopping position via an LP over the input sequence.

    States are eliminated through the propagation form
    ``x_n = A^n x0 + sum A^(n-1-i) B u_i``.  Returns the optimal final
    position or None when no stopping trajectory exists.  ``dj``/``da``
    relax the lower jerk and acceleration bounds respectively (the same
    semantics as relaxation modes 1 and 2).
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float).reshape(3, 1)
    x0 = np.asarray(x0, float)
    T = horizon
    # prop[n] maps u (T-vector) to x_n contribution; xfree[n] = A^n x0
    xfree = np.zeros((T + 1, 3))
    prop = np.zeros((T + 1, 3, T))
    xfree[0] = x0
    An = np.eye(3)
    for nn in range(1, T + 1):
        prop[nn] = A @ prop[nn - 1]
        prop[nn][:, nn - 1:nn] += B
        xfree[nn] = A @ xfree[nn - 1]
    for nn in range(1, T + 1):
        xfree[nn] = np.linalg.matrix_power(A, nn) @ x0

    rows = []
    rhs = []

    def add_le(coef_u, const, bound):
        # coef_u . u + const <= bound
        rows.append(coef_u)
        rhs.append(bound - const)

    v_max = limits["v_max"]
    a_min, a_max = limits["a_min"], limits["a_max"]
    j_min, j_max = limits["j_min"] - dj, limits["j_max"]
    jr_min, jr_max = limits["jreq_min"] - dj, limits["jreq_max"]
    u_lo, u_hi = limits["a_min"] - da, limits["a_max"]
    a_lo = a_min - da

    for nn in range(T):
        cv = prop[nn][1]
        ca = prop[nn][2]
        add_le(cv, xfree[nn][1], v_max)
        add_le(-cv, -xfree[nn][1], 0.0)
        add_le(ca, xfree[nn][2], a_max)
        add_le(-ca, -xfree[nn][2], -a_lo)
        eu = np.zeros(T)
        eu[nn] = 1.0
        add_le(eu, 0.0, u_hi)
        add_le(-eu, 0.0, -u_lo)
        # jerk (a_{n+1} - a_n)/t_s
        cj = (prop[nn + 1][2] - prop[nn][2]) / t_s
        kj = (xfree[nn + 1][2] - xfree[nn][2]) / t_s
        add_le(cj, kj, j_max)
        add_le(-cj, -kj, -j_min)
        # requested jerk (u_n - u_{n-1})/t_s
        cjr = np.zeros(T)
        cjr[nn] = 1.0 / t_s
        kk = 0.0
        if nn > 0:
            cjr[nn - 1] = -1.0 / t_s
        elif u_prev is not None:
            kk = -u_prev / t_s
        add_le(cjr, kk, jr_max)
        add_le(-cjr, -kk, -jr_min)

    A_ub = np.array(rows)
    b_ub = np.array(rhs)
    # terminal stop: v_T = 0, a_T = 0, u_{T-1} = 0
    A_eq = np.vstack([prop[T][1], prop[T][2], np.eye(T)[T - 1]])
    b_eq = np.array([-xfree[T][1], -xfree[T][2], 0.0])
    c = prop[T][0]  # minimize final position
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=[(None, None)] * T, method="highs")
    if not res.success:
        return None
    return float(c @ res.x + xfree[T][0])
