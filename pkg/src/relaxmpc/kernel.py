"""Kernel selection for the ADMM iteration loop.

The hot loop exists twice: a Cython extension (``_admm_cy``) and a pure
python twin (``_admm_py``).  The compiled kernel is used when the extension
built; set ``RELAXMPC_PURE_PYTHON=1`` to force the fallback.  ``benchmark``
runs a like-for-like comparison of the two.
"""
import os
import time

import numpy as np
import scipy.sparse as sp

from . import _admm_py

try:
    from . import _admm_cy
    HAVE_COMPILED = True
except ImportError:
    _admm_cy = None
    HAVE_COMPILED = False


def default_kernel() -> str:
    if os.environ.get("RELAXMPC_PURE_PYTHON"):
        return "python"
    return "compiled" if HAVE_COMPILED else "python"


def prepare_compiled(lu, Ps, As, Ats):
    """Extract LU factors and CSR arrays in the form the C loop consumes."""
    if not HAVE_COMPILED:
        raise RuntimeError("compiled kernel requested but _admm_cy is not built")
    L = lu.L.tocsc()
    U = lu.U.tocsc()
    return {
        "L_indptr": L.indptr.astype(np.int64),
        "L_indices": L.indices.astype(np.int64),
        "L_data": L.data.astype(np.float64),
        "U_indptr": U.indptr.astype(np.int64),
        "U_indices": U.indices.astype(np.int64),
        "U_data": U.data.astype(np.float64),
        "perm_r": lu.perm_r.astype(np.int64),
        "perm_c": lu.perm_c.astype(np.int64),
        "P_indptr": Ps.indptr.astype(np.int64),
        "P_indices": Ps.indices.astype(np.int64),
        "P_data": Ps.data.astype(np.float64),
        "A_indptr": As.indptr.astype(np.int64),
        "A_indices": As.indices.astype(np.int64),
        "A_data": As.data.astype(np.float64),
        "At_indptr": Ats.indptr.astype(np.int64),
        "At_indices": Ats.indices.astype(np.int64),
        "At_data": Ats.data.astype(np.float64),
    }


def run_compiled(args, q, l, u, rho, sigma, alpha, dinv, einv, cost_scale,
                 x0, z0, y0, max_iter, eps_abs, pinf_tol, streak_needed,
                 check_every):
    x = np.array(x0, dtype=np.float64)
    z = np.array(z0, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    code, iters, rp, rd = _admm_cy.admm_loop(
        args["L_indptr"], args["L_indices"], args["L_data"],
        args["U_indptr"], args["U_indices"], args["U_data"],
        args["perm_r"], args["perm_c"],
        args["P_indptr"], args["P_indices"], args["P_data"],
        args["A_indptr"], args["A_indices"], args["A_data"],
        args["At_indptr"], args["At_indices"], args["At_data"],
        np.ascontiguousarray(q), np.ascontiguousarray(l), np.ascontiguousarray(u),
        np.ascontiguousarray(rho), float(sigma), float(alpha),
        np.ascontiguousarray(dinv), np.ascontiguousarray(einv), float(cost_scale),
        x, z, y, int(max_iter), float(eps_abs), float(pinf_tol),
        int(streak_needed), int(check_every))
    return code, iters, rp, rd, x, z, y


def run_python(lu, Ps, As, Ats, q, l, u, rho, sigma, alpha, dinv, einv,
               cost_scale, x0, z0, y0, max_iter, eps_abs, pinf_tol,
               streak_needed, check_every):
    return _admm_py.admm_loop(
        lu.solve, Ps, As, Ats, q, l, u, rho, sigma, alpha, dinv, einv,
        cost_scale, x0, z0, y0, max_iter, eps_abs, pinf_tol, streak_needed,
        check_every)


def benchmark(n_states=60, n_rows=140, n_solves=20, seed=0, max_iter=4000):
    """Compare compiled vs python kernel on a family of random sparse QPs.

    Returns a dict with per-kernel wall times and the iterate agreement.
    """
    from .qpcore import CachedQpSolver

    rng = np.random.default_rng(seed)
    M = sp.random(n_states, n_states, density=0.08, random_state=seed)
    P = (M.T @ M + sp.eye(n_states)).tocsc()
    A = sp.random(n_rows, n_states, density=0.1, random_state=seed + 1).tocsc()
    A = A + sp.random(n_rows, n_states, density=0.02, random_state=seed + 2)
    results = {}
    sols = {}
    kernels = ["python"] + (["compiled"] if HAVE_COMPILED else [])
    for name in kernels:
        solver = CachedQpSolver(P, A.tocsc(), use_kernel=name)
        rng = np.random.default_rng(seed + 3)
        t0 = time.perf_counter()
        total_iters = 0
        last = None
        for _ in range(n_solves):
            q = rng.standard_normal(n_states)
            width = rng.uniform(0.5, 2.0, n_rows)
            mid = rng.standard_normal(n_rows)
            x, y, status, iters, res = solver.solve(
                q, mid - width, mid + width, tol=1e-6, max_iter=max_iter)
            total_iters += iters
            last = x
        results[name] = {
            "seconds": time.perf_counter() - t0,
            "iterations": total_iters,
        }
        sols[name] = last
    if len(sols) == 2:
        results["max_solution_diff"] = float(
            np.abs(sols["python"] - sols["compiled"]).max())
        results["speedup"] = results["python"]["seconds"] / max(
            results["compiled"]["seconds"], 1e-12)
    return results
