"""Pure-python ADMM iteration loop.

Twin of the compiled kernel in ``_admm_cy``; selected at import time by
:mod:`relaxmpc.kernel`.  Operates entirely in the scaled space prepared by
the caller, but checks termination on unscaled residuals.
"""
import numpy as np

# exit codes shared with the compiled kernel
SOLVED = 0
MAX_ITER = 1
PRIMAL_INFEASIBLE = 2
DUAL_INFEASIBLE = 3


def admm_loop(kkt_solve, P, A, At, q, l, u, rho, sigma, alpha,
              dinv, einv, cost_scale, x, z, y,
              max_iter, eps_abs, pinf_tol, streak_needed, check_every):
    """Run over-relaxed ADMM on ``min 1/2 x'Px + q'x  s.t. l <= Ax <= u``.

    ``kkt_solve`` maps a right-hand side of size n+m to the solution of the
    cached KKT system.  ``x, z, y`` are warm-start iterates (scaled) and are
    not mutated.  Returns ``(code, iters, r_prim, r_dual, x, z, y)`` with the
    residuals unscaled.
    """
    n = q.shape[0]
    m = l.shape[0]
    rho_inv = 1.0 / rho
    cinv = 1.0 / cost_scale
    e = 1.0 / einv
    u_raw = np.where(np.isfinite(u), einv * u, np.inf)     # unscaled bounds
    l_raw = np.where(np.isfinite(l), einv * l, -np.inf)
    u_fin = np.isfinite(u_raw)
    l_fin = np.isfinite(l_raw)

    x = x.copy()
    z = z.copy()
    y = y.copy()
    rhs = np.empty(n + m)

    r_prim = np.inf
    r_dual = np.inf
    pinf_streak = 0
    dinf_streak = 0

    for it in range(1, max_iter + 1):
        rhs[:n] = sigma * x - q
        rhs[n:] = z - rho_inv * y
        sol = kkt_solve(rhs)
        x_t = sol[:n]
        nu = sol[n:]
        z_t = z + rho_inv * (nu - y)

        x_new = alpha * x_t + (1.0 - alpha) * x
        z_pre = alpha * z_t + (1.0 - alpha) * z
        z_new = np.clip(z_pre + rho_inv * y, l, u)
        y_new = y + rho * (z_pre - z_new)

        delta_y = y_new - y
        delta_x = x_new - x
        x, z, y = x_new, z_new, y_new

        check_now = (it % check_every == 0) or it == max_iter \
            or pinf_streak > 0 or dinf_streak > 0
        if not check_now:
            continue

        # unscaled residuals
        r_prim = float(np.abs(einv * (A @ x - z)).max(initial=0.0))
        r_dual = float(np.abs((P @ x + q + At @ y) * dinv * cinv).max(initial=0.0))
        if r_prim <= eps_abs and r_dual <= eps_abs:
            return SOLVED, it, r_prim, r_dual, x, z, y

        # primal infeasibility certificate on the unscaled dual step
        dy = e * delta_y * cinv
        dy_norm = float(np.abs(dy).max(initial=0.0))
        pinf_hit = False
        if dy_norm > 1e-14:
            atdy = float(np.abs((At @ delta_y) * dinv * cinv).max(initial=0.0))
            if atdy <= pinf_tol * dy_norm:
                pos = dy > pinf_tol * dy_norm
                neg = dy < -pinf_tol * dy_norm
                if not np.any(pos & ~u_fin) and not np.any(neg & ~l_fin):
                    support = float(np.sum(u_raw[pos & u_fin] * dy[pos & u_fin])
                                    + np.sum(l_raw[neg & l_fin] * dy[neg & l_fin]))
                    pinf_hit = support <= -pinf_tol * dy_norm
        pinf_streak = pinf_streak + 1 if pinf_hit else 0
        if pinf_streak >= streak_needed:
            return PRIMAL_INFEASIBLE, it, r_prim, r_dual, x, z, y

        # dual infeasibility certificate (unbounded direction)
        dx = delta_x / dinv
        dx_norm = float(np.abs(dx).max(initial=0.0))
        dinf_hit = False
        if dx_norm > 1e-14:
            pdx = float(np.abs((P @ delta_x) * dinv * cinv).max(initial=0.0))
            qdx = float(q @ delta_x) * cinv
            if pdx <= pinf_tol * dx_norm and qdx <= -pinf_tol * dx_norm:
                adx = einv * (A @ delta_x)
                bad = ((u_fin & l_fin & (np.abs(adx) > pinf_tol * dx_norm))
                       | (u_fin & ~l_fin & (adx > pinf_tol * dx_norm))
                       | (l_fin & ~u_fin & (adx < -pinf_tol * dx_norm)))
                dinf_hit = not bool(np.any(bad))
        dinf_streak = dinf_streak + 1 if dinf_hit else 0
        if dinf_streak >= streak_needed:
            return DUAL_INFEASIBLE, it, r_prim, r_dual, x, z, y

    return MAX_ITER, max_iter, r_prim, r_dual, x, z, y
