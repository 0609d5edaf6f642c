"""Receding-horizon problem builders.

Four problems share one machinery: the nominal safe-MPC problem, the
minimal-relaxation problem (slack optimization), the responsive problem
with fixed slacks, and its learned variant with predicted slacks plus an
error margin.  Problems are stacked sparse (states kept as variables,
dynamics as equality rows); instances that share a structure reuse one
cached KKT factorization, so per-step work is a right-hand-side update.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import qpcore
from .plant import (DisturbanceTrajectory, LtiModel, ReferenceTrajectory,
                    StageConstraints, TerminalIngredients,
                    ROW_V_MIN, ROW_A_MIN, ROW_U_MIN, ROW_J_MIN, ROW_JR_MIN)
from .qpcore import CachedQpSolver, ConfigurationError, PreconditionError, QpProblem

N_DELTA = 2
SLACK_J, SLACK_A = 0, 1


def default_E_list():
    """Priority-ordered relaxation selectors on the canonical 10 stage rows.

    Mode 1 softens the lower jerk rows with the jerk slack; mode 2
    additionally softens the lower acceleration/request rows with the
    acceleration slack.
    """
    E1 = np.zeros((10, N_DELTA))
    E1[ROW_J_MIN, SLACK_J] = 1.0
    E1[ROW_JR_MIN, SLACK_J] = 1.0
    E2 = E1.copy()
    E2[ROW_A_MIN, SLACK_A] = 1.0
    E2[ROW_U_MIN, SLACK_A] = 1.0
    return (E1, E2)


@dataclass(frozen=True)
class RelaxationConfig:
    E_list: tuple
    M_h: np.ndarray
    Q_h: np.ndarray
    P_h: np.ndarray
    delta_bar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M_h", np.asarray(self.M_h, float))
        object.__setattr__(self, "Q_h", np.asarray(self.Q_h, float))
        object.__setattr__(self, "P_h", np.asarray(self.P_h, float))
        object.__setattr__(self, "delta_bar", np.asarray(self.delta_bar, float))
        for E in self.E_list:
            if E.shape[1] != self.M_h.shape[0]:
                raise ConfigurationError("selector width inconsistent with slack dimension")
            if not np.all((E == 0) | (E == 1)):
                raise ConfigurationError("selector entries must be 0/1")
            sums = E.sum(axis=1)
            if np.any((sums != 0) & (sums != 1)):
                raise ConfigurationError("each row selects at most one slack")
        if np.any(self.M_h < 0):
            raise ConfigurationError("M_h must be elementwise nonnegative")
        if qpcore.spectral_radius(self.M_h) >= 1.0:
            raise ConfigurationError("M_h must be a contraction")
        resid = np.linalg.norm(self.M_h.T @ self.P_h @ self.M_h - self.P_h + self.Q_h)
        if resid > 1e-8 * max(1.0, np.linalg.norm(self.Q_h)):
            raise ConfigurationError("P_h does not solve the slack Lyapunov relation")

    @property
    def n_modes(self):
        return len(self.E_list)


def default_relaxation(delta_bar=(5.0, 6.0), contraction=0.9) -> RelaxationConfig:
    M_h = contraction * np.eye(N_DELTA)
    Q_h = np.eye(N_DELTA)
    P_h = qpcore.solve_discrete_lyapunov(M_h, Q_h)
    return RelaxationConfig(E_list=default_E_list(), M_h=M_h, Q_h=Q_h, P_h=P_h,
                            delta_bar=np.asarray(delta_bar, float))


def expand_slack_sequence(delta0, N: int, M: int, M_h=None) -> np.ndarray:
    """Uniform slack prediction over the whole horizon.

    The slack contraction ``M_h`` governs the continuation beyond the
    horizon (the extended-terminal-set analysis), not the in-horizon
    values, so a single predicted relaxation expands as a constant
    sequence; by relaxation monotonicity this preserves feasibility
    whenever the prediction dominates the per-step optimum.
    """
    delta0 = np.asarray(delta0, float)
    return np.tile(delta0, (M, 1))


@dataclass
class HorizonPlan:
    u_seq: np.ndarray            # (M,)
    x_seq: np.ndarray            # (M+1, 3)
    delta_seq: np.ndarray        # (M, 2)
    objective: float
    feasible: bool
    status: str
    iterations: int
    solve_time: float

    def dynamics_residual(self, model: LtiModel) -> float:
        r = 0.0
        for n in range(self.u_seq.shape[0]):
            nxt = model.step(self.x_seq[n], self.u_seq[n])
            r = max(r, float(np.abs(nxt - self.x_seq[n + 1]).max()))
        return r


class _Structure:
    """One sparse problem structure: fixed matrices, per-solve bounds."""

    def __init__(self, A, eq_mask, H, meta):
        self.A = A.tocsc()
        self.eq_mask = eq_mask
        self.H = H.tocsc()
        self.meta = meta
        self.solver = None
        self.phase1_solver = None

    def get_solver(self, kernel=None):
        if self.solver is None:
            self.solver = CachedQpSolver(self.H, self.A, eq_mask=self.eq_mask,
                                         use_kernel=kernel)
        return self.solver

    def phase1_violation(self, l, u, kernel=None, tol=1e-7):
        """Smallest constraint perturbation making the instance feasible.

        Solved as ``min |w|^2 s.t. l <= A z + w <= u``; the decision "is this
        instance feasible" reduces to whether the optimal ``w`` vanishes.
        Always feasible, so it converges where the divergence certificate of
        the main iteration may stall.  Returns None when the arbitration
        itself fails to converge.
        """
        n = self.A.shape[1]
        m = self.A.shape[0]
        if self.phase1_solver is None:
            A1 = sp.hstack([self.A, sp.eye(m)], format="csc")
            H1 = sp.block_diag([1e-8 * sp.eye(n), 2.0 * sp.eye(m)], format="csc")
            self.phase1_solver = CachedQpSolver(H1, A1, eq_mask=self.eq_mask,
                                                use_kernel=kernel)
        q1 = np.zeros(n + m)
        x, y, status, iters, res = self.phase1_solver.solve(
            q1, l, u, tol=tol, max_iter=20000)
        if status != qpcore.OPTIMAL:
            return None
        w = x[n:]
        return float(np.abs(w).max(initial=0.0))


class SmpcFamily:
    """Shared builder for all receding-horizon problems of one scenario."""

    def __init__(self, model: LtiModel, constraints: StageConstraints,
                 terminal: TerminalIngredients, relax: RelaxationConfig,
                 N: int, M: int, reference: ReferenceTrajectory,
                 q_state=(0.0, 10.0, 1.0), r_input=1.0, u_reg_tail=1e-6,
                 stop_margin=0.1, kernel=None):
        if N > M:
            raise ConfigurationError("require N <= M")
        self.model = model
        self.cons = constraints
        self.terminal = terminal
        self.relax = relax
        self.N = N
        self.M = M
        self.ref = reference
        self.q_state = np.asarray(q_state, float)
        self.r_input = float(r_input)
        self.u_reg_tail = float(u_reg_tail)
        self.u_reg_slack = 1e-6
        self.stop_margin = float(stop_margin)
        self.kernel = kernel
        self.n_fixed = 3 * (M + 1) + M
        self._fixed = self._build_fixed_structure()
        self._slack = {i: self._build_slack_structure(i)
                       for i in range(relax.n_modes)}
        self._uniform = {i: self._build_slack_structure(i, uniform=True)
                         for i in range(relax.n_modes)}
        self._baseline = {}
        self._cond = {}

    def _condensed(self, kind, mode=None, penalty=None):
        key = (kind, mode, penalty)
        if key not in self._cond:
            self._cond[key] = _CondensedKind(self, kind, mode, penalty)
        return self._cond[key]

    def reconstruct_states(self, x_k, u_seq):
        cond = self._condensed("fixed")
        x0 = np.asarray(x_k, float)
        return (cond.F @ x0) + np.einsum("nij,j->ni", cond.G, u_seq)

    def tracking_objective(self, x_seq, u_seq, k):
        obj = 0.0
        Q = np.diag(self.q_state)
        for n in range(self.N):
            dx = x_seq[n] - self.ref.r_x[k + n]
            du = u_seq[n] - self.ref.r_u[k + n, 0]
            obj += dx @ Q @ dx + self.r_input * du ** 2
        dN = x_seq[self.N] - self.ref.r_x[k + self.N]
        obj += dN @ self.terminal.P_term @ dN
        for n in range(self.N, self.M):
            du = u_seq[n] - self.ref.r_u[k + n, 0]
            obj += self.u_reg_tail * du ** 2
        return float(obj)

    # ------------------------------------------------------------------
    # structure assembly

    def _x_idx(self, n):
        return slice(3 * n, 3 * n + 3)

    def _u_idx(self, n):
        return 3 * (self.M + 1) + n

    def _delta_idx(self, n, extra_base):
        return slice(extra_base + N_DELTA * n, extra_base + N_DELTA * (n + 1))

    def _core_rows(self, n_vars, row_hook=None):
        """Equality rows (init, dynamics, stop) shared by every problem."""
        M = self.M
        A = self.model.A
        B = self.model.B
        rows, cols, vals = [], [], []
        r = 0

        def put(i, j, v):
            rows.append(i)
            cols.append(j)
            vals.append(v)

        # x_0 = x_k
        for i in range(3):
            put(r + i, 3 * 0 + i, 1.0)
        r += 3
        # dynamics
        for n in range(M):
            for i in range(3):
                put(r + i, 3 * (n + 1) + i, 1.0)
                for j in range(3):
                    if A[i, j]:
                        put(r + i, 3 * n + j, -A[i, j])
                if B[i, 0]:
                    put(r + i, self._u_idx(n), -B[i, 0])
            r += 3
        # full stop: v_M = 0, a_M = 0, u_{M-1} = 0
        put(r, 3 * M + 1, 1.0)
        put(r + 1, 3 * M + 2, 1.0)
        put(r + 2, self._u_idx(M - 1), 1.0)
        r += 3
        return rows, cols, vals, r

    def _tracking_cost(self, n_vars):
        """Quadratic tracking cost entries; q depends on the reference window."""
        M, N = self.M, self.N
        H = sp.lil_matrix((n_vars, n_vars))
        # tiny velocity/acceleration regularization keeps the otherwise
        # cost-free tail states well conditioned (position stays exact)
        for n in range(M + 1):
            sl = self._x_idx(n)
            H[sl, sl] = np.diag([0.0, 2e-6, 2e-6])
        Q2 = 2.0 * np.diag(self.q_state)
        for n in range(N):
            H[self._x_idx(n), self._x_idx(n)] = Q2 + np.diag([0.0, 2e-6, 2e-6])
            H[self._u_idx(n), self._u_idx(n)] = 2.0 * self.r_input
        H[self._x_idx(N), self._x_idx(N)] = \
            2.0 * self.terminal.P_term + np.diag([0.0, 2e-6, 2e-6])
        for n in range(N, M):
            H[self._u_idx(n), self._u_idx(n)] = 2.0 * self.u_reg_tail
        return H

    def _tracking_linear(self, k: int):
        """f vector and objective constant for the window starting at step k."""
        M, N = self.M, self.N
        f = np.zeros(self.n_fixed)
        const = 0.0
        Q = np.diag(self.q_state)
        for n in range(N):
            r_x = self.ref.r_x[k + n]
            r_u = self.ref.r_u[k + n, 0]
            f[self._x_idx(n)] = -2.0 * Q @ r_x
            const += r_x @ Q @ r_x
            f[self._u_idx(n)] = -2.0 * self.r_input * r_u
            const += self.r_input * r_u ** 2
        r_xN = self.ref.r_x[k + N]
        f[self._x_idx(N)] += -2.0 * self.terminal.P_term @ r_xN
        const += r_xN @ self.terminal.P_term @ r_xN
        for n in range(N, M):
            r_u = self.ref.r_u[k + n, 0]
            f[self._u_idx(n)] += -2.0 * self.u_reg_tail * r_u
            const += self.u_reg_tail * r_u ** 2
        return f, const

    def _build_fixed_structure(self):
        """Two-sided box rows; relaxation enters only through the bounds."""
        M, N = self.M, self.N
        n_vars = self.n_fixed
        rows, cols, vals, r = self._core_rows(n_vars)
        n_eq = r
        C, D, Dp = self.cons.C_h, self.cons.D_h, self.cons.D_h_prev
        box_rows = [("v", 1, None), ("a", 2, None), ("u", None, None),
                    ("j", None, None), ("jr", None, None)]
        box_start = r

        def put(i, j, v):
            rows.append(i)
            cols.append(j)
            vals.append(v)

        for n in range(M):
            # v, a rows are plain state selectors
            put(r, 3 * n + 1, 1.0)
            put(r + 1, 3 * n + 2, 1.0)
            put(r + 2, self._u_idx(n), 1.0)
            # jerk row uses the canonical coefficients of the upper jerk row
            for j in range(3):
                if C[6, j]:
                    put(r + 3, 3 * n + j, C[6, j])
            put(r + 3, self._u_idx(n), D[6, 0])
            # requested jerk row: u_n and u_{n-1}
            put(r + 4, self._u_idx(n), D[8, 0])
            if n > 0:
                put(r + 4, self._u_idx(n - 1), Dp[8, 0])
            r += 5
        g_start = r
        for n in range(M):
            put(r, 3 * n + 0, 1.0)
            r += 1
        env_start = r
        env = self.terminal
        cut_rows = np.where(env.relax_slack_idx < 0)[0]
        cut_rows = [i for i in cut_rows if np.any(env.X_rs_rows[i][[0]] == 0.0)
                    and env.X_rs_rows[i][2] != 0.0 and env.X_rs_rows[i][1] != 0.0]
        self._cut_idx = cut_rows
        for n in range(N, M):
            for i in cut_rows:
                row = env.X_rs_rows[i]
                put(r, 3 * n + 1, row[1])
                put(r, 3 * n + 2, row[2])
                r += 1
        A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n_vars))
        eq_mask = np.zeros(r, dtype=bool)
        eq_mask[:n_eq] = True
        H = self._tracking_cost(n_vars)
        meta = {"n_eq": n_eq, "box_start": box_start, "g_start": g_start,
                "env_start": env_start, "n_rows": r, "cut_rows": cut_rows}
        return _Structure(A, eq_mask, H, meta)

    def _fixed_bounds(self, x_k, bg_values, u_prev, slack_seq):
        """l, u vectors for the fixed-slack structure."""
        M, N = self.M, self.N
        lim = self.cons.limits
        st = self._fixed.meta
        n_rows = st["n_rows"]
        l = np.full(n_rows, -np.inf)
        u = np.full(n_rows, np.inf)
        l[0:3] = u[0:3] = np.asarray(x_k, float)
        l[3:st["box_start"]] = u[3:st["box_start"]] = 0.0
        E = None
        relax_lo = np.zeros((M, 5))
        if slack_seq is not None:
            E, seq = slack_seq
            # per canonical row relief mapped onto the five box rows
            relief = seq @ E.T            # (M, 10)
            relax_lo[:, 1] = relief[:, ROW_A_MIN]
            relax_lo[:, 2] = relief[:, ROW_U_MIN]
            relax_lo[:, 3] = relief[:, ROW_J_MIN]
            relax_lo[:, 4] = relief[:, ROW_JR_MIN]
        r = st["box_start"]
        t_s = self.model.t_s
        for n in range(M):
            l[r] = 0.0
            u[r] = lim.v_max
            l[r + 1] = lim.a_min - relax_lo[n, 1]
            u[r + 1] = lim.a_max
            l[r + 2] = lim.a_min - relax_lo[n, 2]
            u[r + 2] = lim.a_max
            l[r + 3] = lim.j_min - relax_lo[n, 3]
            u[r + 3] = lim.j_max
            shift = (u_prev / t_s) if n == 0 else 0.0
            l[r + 4] = lim.jreq_min - relax_lo[n, 4] + shift
            u[r + 4] = lim.jreq_max + shift
            r += 5
        reach = float(np.asarray(x_k, float)[0]) \
            + lim.v_max * M * self.model.t_s + 10.0
        u[st["g_start"]:st["g_start"] + M] = \
            np.minimum(np.asarray(bg_values, float), reach) - self.stop_margin
        r = st["env_start"]
        env = self.terminal
        for n in range(N, M):
            for i in st["cut_rows"]:
                u[r] = env.X_rs_rhs[i]
                r += 1
        return l, u

    def _build_slack_structure(self, mode: int, uniform: bool = False):
        """Split relaxable rows and couple slack variables.

        ``uniform=False`` is the literal minimal-relaxation problem with one
        slack vector per stage.  ``uniform=True`` restricts all stages to a
        single shared slack vector: the form the learned pipeline predicts
        and applies, and a formulation without the per-stage shuffle
        degeneracy that stalls first-order solvers on long parked tails.
        """
        M, N = self.M, self.N
        E = self.relax.E_list[mode]
        extra_base = self.n_fixed
        n_slack = N_DELTA if uniform else N_DELTA * M
        n_vars = self.n_fixed + n_slack
        rows, cols, vals, r = self._core_rows(n_vars)
        n_eq = r

        def put(i, j, v):
            rows.append(i)
            cols.append(j)
            vals.append(v)

        C, D, Dp = self.cons.C_h, self.cons.D_h, self.cons.D_h_prev
        box_start = r
        # canonical relaxable lower rows and their slack column under E
        lower_rows = {1: ROW_A_MIN, 3: ROW_U_MIN, 5: ROW_J_MIN, 7: ROW_JR_MIN}

        for n in range(M):
            # 9 rows per stage: v two-sided, then (upper, lower) pairs
            put(r, 3 * n + 1, 1.0)               # v
            put(r + 1, 3 * n + 2, 1.0)           # a upper
            put(r + 2, 3 * n + 2, -1.0)          # a lower
            put(r + 3, self._u_idx(n), 1.0)      # u upper
            put(r + 4, self._u_idx(n), -1.0)     # u lower
            for j in range(3):
                if C[6, j]:
                    put(r + 5, 3 * n + j, C[6, j])
                    put(r + 6, 3 * n + j, -C[6, j])
            put(r + 5, self._u_idx(n), D[6, 0])
            put(r + 6, self._u_idx(n), -D[6, 0])
            put(r + 7, self._u_idx(n), D[8, 0])
            put(r + 8, self._u_idx(n), -D[8, 0])
            if n > 0:
                put(r + 7, self._u_idx(n - 1), Dp[8, 0])
                put(r + 8, self._u_idx(n - 1), -Dp[8, 0])
            # slack coupling on the lower rows
            base = extra_base if uniform else extra_base + N_DELTA * n
            for off, canon in lower_rows.items():
                e_row = E[canon]
                for jj in range(N_DELTA):
                    if e_row[jj]:
                        put(r + off + 1, base + jj, -e_row[jj])
            r += 9
        g_start = r
        for n in range(M):
            put(r, 3 * n + 0, 1.0)
            r += 1
        env_start = r
        for n in range(N, M):
            for i in self._cut_idx:
                row = self.terminal.X_rs_rows[i]
                put(r, 3 * n + 1, row[1])
                put(r, 3 * n + 2, row[2])
                r += 1
        dbox_start = r
        for i in range(n_slack):
            put(r, extra_base + i, 1.0)
            r += 1
        A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n_vars))
        eq_mask = np.zeros(r, dtype=bool)
        eq_mask[:n_eq] = True
        # cost: stage slack norms across the horizon, terminal weight at N;
        # the stage weight also covers the tail so the optimum is unique and
        # the polish KKT systems stay well posed
        H = sp.lil_matrix((n_vars, n_vars))
        for n in range(M + 1):
            sl = self._x_idx(n)
            H[sl, sl] = np.diag([0.0, 2e-6, 2e-6])
        for n in range(self.M):
            H[self._u_idx(n), self._u_idx(n)] = 2.0 * self.u_reg_slack
        Q2 = 2.0 * self.relax.Q_h
        if uniform:
            sl = slice(extra_base, extra_base + N_DELTA)
            H[sl, sl] = (M - 1) * Q2 + 2.0 * (self.relax.P_h + self.relax.Q_h)
        else:
            for n in range(M):
                sl = self._delta_idx(n, extra_base)
                H[sl, sl] = Q2
            sl = self._delta_idx(N, extra_base)
            H[sl, sl] = 2.0 * (self.relax.P_h + self.relax.Q_h)
        meta = {"n_eq": n_eq, "box_start": box_start, "g_start": g_start,
                "env_start": env_start, "dbox_start": dbox_start,
                "n_rows": r, "extra_base": extra_base, "mode": mode,
                "n_slack": n_slack, "uniform": uniform}
        return _Structure(A, eq_mask, H, meta)

    def _slack_bounds(self, struct, x_k, bg_values, u_prev):
        M, N = self.M, self.N
        lim = self.cons.limits
        st = struct.meta
        n_rows = st["n_rows"]
        l = np.full(n_rows, -np.inf)
        u = np.full(n_rows, np.inf)
        l[0:3] = u[0:3] = np.asarray(x_k, float)
        l[3:st["box_start"]] = u[3:st["box_start"]] = 0.0
        t_s = self.model.t_s
        r = st["box_start"]
        for n in range(M):
            l[r] = 0.0
            u[r] = lim.v_max
            u[r + 1] = lim.a_max
            u[r + 2] = -lim.a_min
            u[r + 3] = lim.a_max
            u[r + 4] = -lim.a_min
            u[r + 5] = lim.j_max
            u[r + 6] = -lim.j_min
            shift = (u_prev / t_s) if n == 0 else 0.0
            u[r + 7] = lim.jreq_max + shift
            u[r + 8] = -lim.jreq_min - shift
            r += 9
        reach = float(np.asarray(x_k, float)[0]) \
            + lim.v_max * M * self.model.t_s + 10.0
        u[st["g_start"]:st["g_start"] + M] = \
            np.minimum(np.asarray(bg_values, float), reach) - self.stop_margin
        r = st["env_start"]
        for n in range(N, M):
            for i in self._cut_idx:
                u[r] = self.terminal.X_rs_rhs[i]
                r += 1
        r = st["dbox_start"]
        for i in range(st["n_slack"]):
            l[r] = 0.0
            u[r] = self.relax.delta_bar[i % N_DELTA]
            r += 1
        return l, u

    # ------------------------------------------------------------------
    # public builders (QpProblem form, for inspection and tests)

    def _to_qp_problem(self, struct, q, l, u):
        eq = struct.eq_mask
        A = struct.A.tocsr()
        A_eq = A[eq]
        b_eq = u[eq]
        rows = []
        b_in = []
        A_in_part = A[~eq]
        l_in = l[~eq]
        u_in = u[~eq]
        fin_u = np.isfinite(u_in)
        fin_l = np.isfinite(l_in)
        A_up = A_in_part[fin_u]
        b_up = u_in[fin_u]
        A_lo = -A_in_part[fin_l]
        b_lo = -l_in[fin_l]
        A_in = sp.vstack([A_up, A_lo], format="csr")
        b_in = np.concatenate([b_up, b_lo])
        return QpProblem(H=struct.H, f=q, A_eq=A_eq, b_eq=b_eq,
                         A_in=A_in, b_in=b_in)

    def build_nominal(self, x_k, b_g: DisturbanceTrajectory, k: int = 0,
                      u_prev: float = 0.0) -> QpProblem:
        q, _ = self._tracking_linear(k)
        l, u = self._fixed_bounds(x_k, b_g.values, u_prev, None)
        return self._to_qp_problem(self._fixed, q, l, u)

    def build_slack_opt(self, x_k, b_g: DisturbanceTrajectory, mode: int,
                        k: int = 0, u_prev: float = 0.0,
                        uniform: bool = False) -> QpProblem:
        if mode not in self._slack:
            raise ConfigurationError(f"unknown relaxation mode {mode}")
        st = (self._uniform if uniform else self._slack)[mode]
        q = np.zeros(st.A.shape[1])
        l, u = self._slack_bounds(st, x_k, b_g.values, u_prev)
        return self._to_qp_problem(st, q, l, u)

    def build_responsive(self, x_k, b_g: DisturbanceTrajectory, delta_star,
                         mode: int, k: int = 0, u_prev: float = 0.0) -> QpProblem:
        seq = self._as_sequence(delta_star)
        q, _ = self._tracking_linear(k)
        E = self.relax.E_list[mode]
        l, u = self._fixed_bounds(x_k, b_g.values, u_prev, (E, seq))
        return self._to_qp_problem(self._fixed, q, l, u)

    def build_learned(self, x_k, b_g: DisturbanceTrajectory, delta_hat,
                      eps: float, mode: int, k: int = 0,
                      u_prev: float = 0.0) -> QpProblem:
        seq = self._learned_sequence(delta_hat, eps)
        q, _ = self._tracking_linear(k)
        E = self.relax.E_list[mode]
        l, u = self._fixed_bounds(x_k, b_g.values, u_prev, (E, seq))
        return self._to_qp_problem(self._fixed, q, l, u)

    def _as_sequence(self, delta):
        delta = np.asarray(delta, float)
        if delta.ndim == 1:
            return expand_slack_sequence(delta, self.N, self.M, self.relax.M_h)
        if delta.shape != (self.M, N_DELTA):
            raise ConfigurationError(f"slack sequence must be ({self.M}, {N_DELTA})")
        return delta

    def _learned_sequence(self, delta_hat, eps):
        if eps < 0:
            raise PreconditionError("eps must be nonnegative")
        delta_hat = np.asarray(delta_hat, float)
        if delta_hat.ndim != 1:
            raise ConfigurationError("learned slacks are one vector, expanded internally")
        inflated = delta_hat + eps
        if np.any(inflated > self.relax.delta_bar + 1e-12):
            raise PreconditionError(
                f"predicted slack plus margin {inflated} exceeds caps {self.relax.delta_bar}")
        if np.any(delta_hat < -1e-12):
            raise PreconditionError("predicted slacks must be nonnegative")
        return expand_slack_sequence(inflated, self.N, self.M, self.relax.M_h)

    # ------------------------------------------------------------------
    # fast solve paths (cached factorization, warm started)

    def _budgeted_solve(self, struct, q, l, u, tol, max_iter, polish,
                        first_budget=3000):
        """Solve with a phase-1 arbitration when the iteration stalls.

        The divergence certificate catches crude infeasibility quickly; on
        structured instances it can stall, so a stalled run is arbitrated by
        the always-feasible phase-1 problem before spending the full budget.
        """
        solver = struct.get_solver(self.kernel)
        budget = min(first_budget, max_iter)
        x, y, status, iters, res = solver.solve(q, l, u, tol=tol,
                                                max_iter=budget, polish=polish)
        if status == qpcore.OPTIMAL or status == qpcore.INFEASIBLE \
                or budget >= max_iter:
            return x, status, iters
        viol = struct.phase1_violation(l, u, kernel=self.kernel)
        if viol is not None and viol > 10 * tol:
            return x, qpcore.INFEASIBLE, iters
        x, y, status, it2, res = solver.solve(q, l, u, tol=tol,
                                              max_iter=max_iter - iters,
                                              polish=polish)
        return x, status, iters + it2

    def solve_fixed(self, x_k, bg_values, k=0, u_prev=0.0, slack_seq=None,
                    mode=None, tol=1e-6, max_iter=20000, polish=True,
                    admm_budget=1500, warm_start=True) -> HorizonPlan:
        """Tracking problem with optional fixed relaxations.

        The warm-startable splitting kernel is tried first; instances it
        cannot finish (tight post-disturbance geometry) fall through to the
        dense condensed interior-point route, whose elastic variable also
        settles feasibility.
        """
        q, const = self._tracking_linear(k)
        pair = None
        if slack_seq is not None:
            E = self.relax.E_list[mode]
            pair = (E, self._as_sequence(slack_seq))
        l, u = self._fixed_bounds(x_k, bg_values, u_prev, pair)
        t0 = time.perf_counter()
        solver = self._fixed.get_solver(self.kernel)
        x, y, status, iters, res = solver.solve(
            q, l, u, tol=tol, max_iter=min(admm_budget, max_iter),
            polish=polish, warm_start=warm_start)
        if status == qpcore.OPTIMAL:
            dt = time.perf_counter() - t0
            return self._plan_from_solution(self._fixed, x, status, iters,
                                            dt, const, q,
                                            pair[1] if pair else None)
        cond = self._condensed("fixed")
        w, st2, it2, t_star = cond.solve(x_k, bg_values, u_prev, pair)
        dt = time.perf_counter() - t0
        iters += it2
        slack = pair[1] if pair else np.zeros((self.M, N_DELTA))
        if st2 == qpcore.OPTIMAL and t_star <= 1e-6:
            u_seq = w[:self.M]
            x_seq = self.reconstruct_states(x_k, u_seq)
            return HorizonPlan(u_seq=u_seq, x_seq=x_seq, delta_seq=slack,
                               objective=self.tracking_objective(x_seq, u_seq, k),
                               feasible=True, status=qpcore.OPTIMAL,
                               iterations=iters, solve_time=dt)
        status = qpcore.INFEASIBLE if st2 == qpcore.OPTIMAL else qpcore.MAX_ITER
        return HorizonPlan(u_seq=np.zeros(self.M),
                           x_seq=np.tile(np.asarray(x_k, float), (self.M + 1, 1)),
                           delta_seq=slack, objective=np.nan, feasible=False,
                           status=status, iterations=iters, solve_time=dt)

    def solve_slack_opt(self, mode, x_k, bg_values, u_prev=0.0, tol=1e-6,
                        max_iter=20000, polish=True, uniform: bool = False,
                        engine: str = "admm"):
        if engine == "ipm":
            return self._solve_slack_ipm(mode, x_k, bg_values, u_prev,
                                         uniform=uniform)
        st = (self._uniform if uniform else self._slack)[mode]
        q = np.zeros(st.A.shape[1])
        l, u = self._slack_bounds(st, x_k, bg_values, u_prev)
        t0 = time.perf_counter()
        x, status, iters = self._budgeted_solve(st, q, l, u, tol, max_iter,
                                                polish)
        dt = time.perf_counter() - t0
        base = st.meta["extra_base"]
        if uniform:
            delta = np.clip(x[base:base + N_DELTA], 0.0, None)
            seq = expand_slack_sequence(delta, self.N, self.M)
        else:
            seq = x[base:base + N_DELTA * self.M].reshape(self.M, N_DELTA)
            seq = np.clip(seq, 0.0, None)
        plan = self._plan_from_solution(st, x, status, iters, dt, 0.0, q, seq)
        return plan

    def solve_softened(self, x_k, bg_values, weights, k=0, u_prev=0.0,
                       tol=1e-6, admm_budget=2000) -> HorizonPlan:
        """Exact-penalty softened problem: tracking cost plus weighted
        squared slacks on the relaxable rows, uncapped, hard clearance."""
        key = (float(weights[0]), float(weights[1]))
        if key not in self._baseline:
            st_sl = self._slack[1]
            n_vars = st_sl.A.shape[1]
            H = self._tracking_cost(n_vars).tolil()
            base = st_sl.meta["extra_base"]
            for n in range(self.M):
                H[base + 2 * n, base + 2 * n] = 2.0 * key[0]
                H[base + 2 * n + 1, base + 2 * n + 1] = 2.0 * key[1]
            self._baseline[key] = _Structure(st_sl.A, st_sl.eq_mask,
                                             H.tocsc(), st_sl.meta)
        st = self._baseline[key]
        q_f, const = self._tracking_linear(k)
        q = np.concatenate([q_f, np.zeros(st.A.shape[1] - self.n_fixed)])
        l, u = self._slack_bounds(st, x_k, bg_values, u_prev)
        d0 = st.meta["dbox_start"]
        u[d0:d0 + st.meta["n_slack"]] = np.inf
        t0 = time.perf_counter()
        solver = st.get_solver(self.kernel)
        x, y, status, iters, res = solver.solve(q, l, u, tol=tol,
                                                max_iter=admm_budget)
        base = st.meta["extra_base"]
        if status != qpcore.OPTIMAL:
            cond = self._condensed("baseline", 1, key)
            w, st2, it2, t_star = cond.solve(x_k, bg_values, u_prev)
            iters += it2
            if st2 == qpcore.OPTIMAL and t_star <= 1e-6:
                u_seq = w[:self.M]
                seq = np.clip(w[self.M:].reshape(self.M, N_DELTA), 0.0, None)
                x_seq = self.reconstruct_states(x_k, u_seq)
                obj = self.tracking_objective(x_seq, u_seq, k) \
                    + float(np.sum(seq ** 2 @ np.array(key)))
                return HorizonPlan(u_seq=u_seq, x_seq=x_seq, delta_seq=seq,
                                   objective=obj, feasible=True,
                                   status=qpcore.OPTIMAL, iterations=iters,
                                   solve_time=time.perf_counter() - t0)
            status = qpcore.INFEASIBLE if st2 == qpcore.OPTIMAL else qpcore.MAX_ITER
            return HorizonPlan(u_seq=np.zeros(self.M),
                               x_seq=np.tile(np.asarray(x_k, float),
                                             (self.M + 1, 1)),
                               delta_seq=np.zeros((self.M, N_DELTA)),
                               objective=np.nan, feasible=False,
                               status=status, iterations=iters,
                               solve_time=time.perf_counter() - t0)
        seq = np.clip(x[base:base + N_DELTA * self.M].reshape(self.M, N_DELTA),
                      0.0, None)
        plan = self._plan_from_solution(st, x, status, iters,
                                        time.perf_counter() - t0, const, q,
                                        seq)
        return plan

    def _solve_slack_ipm(self, mode, x_k, bg_values, u_prev, uniform=False):
        cond = self._condensed("uniform" if uniform else "perstage", mode)
        t0 = time.perf_counter()
        w, status, iters, t_star = cond.solve(x_k, bg_values, u_prev)
        dt = time.perf_counter() - t0
        M = self.M
        if status == qpcore.OPTIMAL and t_star <= 1e-6:
            u_seq = w[:M]
            mask = (self.relax.E_list[mode].sum(axis=0) > 0).astype(float)
            if uniform:
                seq = expand_slack_sequence(
                    np.clip(w[M:M + N_DELTA], 0, None) * mask, self.N, M)
            else:
                seq = np.clip(w[M:].reshape(M, N_DELTA), 0.0, None) * mask
            x_seq = self.reconstruct_states(x_k, u_seq)
            cost = float(sum(d @ self.relax.Q_h @ d for d in seq)
                         + seq[self.N] @ self.relax.P_h @ seq[self.N])
            return HorizonPlan(u_seq=u_seq, x_seq=x_seq, delta_seq=seq,
                               objective=cost, feasible=True,
                               status=qpcore.OPTIMAL, iterations=iters,
                               solve_time=dt)
        status = qpcore.INFEASIBLE if status == qpcore.OPTIMAL else qpcore.MAX_ITER
        return HorizonPlan(u_seq=np.zeros(M),
                           x_seq=np.tile(np.asarray(x_k, float), (M + 1, 1)),
                           delta_seq=np.zeros((M, N_DELTA)), objective=np.nan,
                           feasible=False, status=status, iterations=iters,
                           solve_time=dt)

    def solve_min_uniform_relaxation(self, mode, x_k, bg_values, u_prev=0.0,
                                     tol=1e-9):
        """Smallest horizon-wide slack pair restoring feasibility for the
        given mode; the prediction target of the learned regressors.

        Solved on the dense condensed form: these instances sit exactly in
        the regime where the splitting kernel stalls.  Returns
        ``(delta, plan)`` with ``delta=None`` on infeasibility.
        """
        cond = self._condensed("uniform", mode)
        t0 = time.perf_counter()
        w, status, iters, t_star = cond.solve(x_k, bg_values, u_prev, tol=tol)
        dt = time.perf_counter() - t0
        M = self.M
        if status == qpcore.OPTIMAL and t_star <= 1e-6:
            u_seq = w[:M]
            # slack coordinates outside the mode's selector are inert
            # variables; interior iterates leave dust on them
            mask = (self.relax.E_list[mode].sum(axis=0) > 0).astype(float)
            delta = np.clip(w[M:M + N_DELTA], 0.0, None) * mask
            x_seq = self.reconstruct_states(x_k, u_seq)
            W = (M - 1) * self.relax.Q_h + self.relax.P_h + self.relax.Q_h
            plan = HorizonPlan(u_seq=u_seq, x_seq=x_seq,
                               delta_seq=expand_slack_sequence(delta, self.N, M),
                               objective=float(delta @ W @ delta),
                               feasible=True, status=qpcore.OPTIMAL,
                               iterations=iters, solve_time=dt)
            return delta, plan
        status = qpcore.INFEASIBLE if status == qpcore.OPTIMAL else qpcore.MAX_ITER
        plan = HorizonPlan(u_seq=np.zeros(M),
                           x_seq=np.tile(np.asarray(x_k, float), (M + 1, 1)),
                           delta_seq=np.zeros((M, N_DELTA)), objective=np.nan,
                           feasible=False, status=status, iterations=iters,
                           solve_time=dt)
        return None, plan

    def _plan_from_solution(self, struct, x, status, iters, dt, const, q,
                            slack_seq):
        M = self.M
        feasible = status == qpcore.OPTIMAL
        x_seq = x[:3 * (M + 1)].reshape(M + 1, 3)
        u_seq = np.array([x[self._u_idx(n)] for n in range(M)])
        obj = float(0.5 * x @ (struct.H @ x) + q @ x + const)
        if slack_seq is None:
            slack_seq = np.zeros((M, N_DELTA))
        return HorizonPlan(u_seq=u_seq, x_seq=x_seq, delta_seq=slack_seq,
                           objective=obj if feasible else np.nan,
                           feasible=feasible, status=status,
                           iterations=iters, solve_time=dt)


# ----------------------------------------------------------------------
# dense condensed forms (second solution route)


class _CondensedKind:
    """State-condensed dense instance family.

    Eliminating the states through the propagation maps leaves a small
    dense QP in the inputs (plus slack coordinates), which the dense
    interior-point route solves robustly on the tightly constrained
    instances where operator splitting stalls.  The constraint matrix is
    instance-independent; initial state and obstacle data only move bounds.
    """

    def __init__(self, fam: "SmpcFamily", kind: str, mode=None,
                 penalty=None):
        self.fam = fam
        self.kind = kind
        self.mode = mode
        self.penalty = penalty
        M, N = fam.M, fam.N
        model = fam.model
        A, B = model.A, model.B
        # propagation: x_n = F[n] x0 + G[n] u
        F = np.zeros((M + 1, 3, 3))
        G = np.zeros((M + 1, 3, M))
        F[0] = np.eye(3)
        for n in range(M):
            F[n + 1] = A @ F[n]
            G[n + 1] = A @ G[n]
            G[n + 1][:, n:n + 1] += B
        self.F = F
        self.G = G
        if kind == "uniform":
            n_delta = N_DELTA
        elif kind in ("perstage", "baseline"):
            n_delta = N_DELTA * M
        else:
            n_delta = 0
        nw = M + n_delta
        self.nw = nw

        lim = fam.cons.limits
        t_s = model.t_s
        cj = (A[2] - np.eye(3)[2]) / t_s
        dj = B[2, 0] / t_s
        rows = []          # (coef_u (nw,), xcoef (3,), kind-tag, stage)
        E = fam.relax.E_list[mode] if mode is not None else None

        def urow(n):
            r = np.zeros(nw)
            r[n] = 1.0
            return r

        for n in range(M):
            xrow_v = F[n][1]
            urow_v = G[n][1]
            xrow_a = F[n][2]
            urow_a = G[n][2]
            xrow_j = cj @ F[n]
            urow_j = cj @ G[n]
            urow_j = urow_j.copy()
            urow_j[n] += dj
            ujr = np.zeros(M)
            ujr[n] = 1.0 / t_s
            if n > 0:
                ujr[n - 1] = -1.0 / t_s
            stage = [("v", urow_v, xrow_v, ROW_V_MIN),
                     ("a", urow_a, xrow_a, ROW_A_MIN),
                     ("u", urow(n)[:M], np.zeros(3), ROW_U_MIN),
                     ("j", urow_j, xrow_j, ROW_J_MIN),
                     ("jr", ujr, np.zeros(3), ROW_JR_MIN)]
            for tag, uc, xc, canon in stage:
                if kind != "fixed" and E is not None and E[canon].any():
                    # split: upper one-sided, relaxed lower one-sided
                    base = M if kind == "uniform" else M + N_DELTA * n
                    up = np.zeros(nw)
                    up[:M] = uc
                    rows.append((up, xc, f"{tag}_up", n))
                    lo = np.zeros(nw)
                    lo[:M] = -uc
                    lo[base:base + N_DELTA] = -E[canon]
                    rows.append((lo, -xc, f"{tag}_lo", n))
                else:
                    full = np.zeros(nw)
                    full[:M] = uc
                    rows.append((full, xc, tag, n))
        for n in range(M):
            r = np.zeros(nw)
            r[:M] = G[n][0]
            rows.append((r, F[n][0], "g", n))
        for n in range(N, M):
            for i in fam._cut_idx:
                crow = fam.terminal.X_rs_rows[i]
                r = np.zeros(nw)
                r[:M] = crow[1] * G[n][1] + crow[2] * G[n][2]
                rows.append((r, crow[1] * F[n][1] + crow[2] * F[n][2],
                             "env", (n, i)))
        for jj in range(n_delta):
            r = np.zeros(nw)
            r[M + jj] = 1.0
            rows.append((r, np.zeros(3), "dbox", jj % N_DELTA))

        self.A = np.array([r[0] for r in rows])
        self.xshift = np.array([r[1] for r in rows])     # bound -= xshift @ x0
        self.tags = [(r[2], r[3]) for r in rows]
        # equalities: full stop v_M = a_M = 0 and u_{M-1} = 0
        A_eq = np.zeros((3, nw))
        A_eq[0, :M] = G[M][1]
        A_eq[1, :M] = G[M][2]
        A_eq[2, M - 1] = 1.0
        self.A_eq = A_eq
        self.eq_xshift = np.vstack([F[M][1], F[M][2], np.zeros(3)])

        # cost
        H = np.zeros((nw, nw))
        self.T1 = np.zeros((nw, 3))
        self.fref = np.zeros(nw)
        if kind in ("fixed", "baseline"):
            Q = np.diag(fam.q_state)
            for n in range(N):
                Gn = G[n][:, :M]
                H[:M, :M] += 2.0 * Gn.T @ Q @ Gn
                self.T1[:M] += 2.0 * Gn.T @ Q @ F[n]
                self.fref[:M] += -2.0 * Gn.T @ Q @ fam.ref.r_x[n]
            GN = G[N][:, :M]
            P = fam.terminal.P_term
            H[:M, :M] += 2.0 * GN.T @ P @ GN
            self.T1[:M] += 2.0 * GN.T @ P @ F[N]
            self.fref[:M] += -2.0 * GN.T @ P @ fam.ref.r_x[N]
            for n in range(M):
                H[n, n] += 2.0 * (fam.r_input if n < N else fam.u_reg_tail)
            if kind == "baseline":
                r_dj, r_da = penalty
                for n in range(M):
                    base = M + N_DELTA * n
                    H[base, base] = 2.0 * r_dj
                    H[base + 1, base + 1] = 2.0 * r_da
        elif kind == "uniform":
            for n in range(M):
                H[n, n] = 2.0 * fam.u_reg_slack
            W = (M - 1) * fam.relax.Q_h + fam.relax.P_h + fam.relax.Q_h
            H[M:, M:] = 2.0 * W
        else:
            for n in range(M):
                H[n, n] = 2.0 * fam.u_reg_slack
            for n in range(M):
                sl = slice(M + N_DELTA * n, M + N_DELTA * (n + 1))
                H[sl, sl] = 2.0 * fam.relax.Q_h
            slN = slice(M + N_DELTA * N, M + N_DELTA * (N + 1))
            H[slN, slN] = 2.0 * (fam.relax.P_h + fam.relax.Q_h)
        self.H = H

    def bounds(self, x0, bg_values, u_prev, slack_seq=None):
        fam = self.fam
        lim = fam.cons.limits
        x0 = np.asarray(x0, float)
        shift = self.xshift @ x0
        m = self.A.shape[0]
        l = np.full(m, -np.inf)
        u = np.full(m, np.inf)
        t_s = fam.model.t_s
        relief = None
        if slack_seq is not None:
            E, seq = slack_seq
            relief = seq @ E.T
        for i, (tag, meta) in enumerate(self.tags):
            if tag == "v":
                l[i], u[i] = 0.0, lim.v_max
            elif tag == "a":
                lo = lim.a_min - (relief[meta, ROW_A_MIN] if relief is not None else 0.0)
                l[i], u[i] = lo, lim.a_max
            elif tag == "u":
                lo = lim.a_min - (relief[meta, ROW_U_MIN] if relief is not None else 0.0)
                l[i], u[i] = lo, lim.a_max
            elif tag == "j":
                lo = lim.j_min - (relief[meta, ROW_J_MIN] if relief is not None else 0.0)
                l[i], u[i] = lo, lim.j_max
            elif tag == "jr":
                lo = lim.jreq_min - (relief[meta, ROW_JR_MIN] if relief is not None else 0.0)
                sh = (u_prev / t_s) if meta == 0 else 0.0
                l[i], u[i] = lo + sh, lim.jreq_max + sh
            elif tag == "g":
                reach = x0[0] + lim.v_max * fam.M * t_s + 10.0
                u[i] = min(bg_values[meta], reach) - fam.stop_margin
            elif tag == "env":
                n, ci = meta
                u[i] = fam.terminal.X_rs_rhs[ci]
            elif tag == "dbox":
                cap = np.inf if self.kind == "baseline" \
                    else fam.relax.delta_bar[meta]
                l[i], u[i] = 0.0, cap
            elif tag.endswith("_up"):
                base = tag[:-3]
                u[i] = {"a": lim.a_max, "u": lim.a_max, "j": lim.j_max,
                        "jr": lim.jreq_max}[base]
                if base == "jr" and meta == 0:
                    u[i] += u_prev / t_s
            elif tag.endswith("_lo"):
                base = tag[:-3]
                u[i] = -{"a": lim.a_min, "u": lim.a_min, "j": lim.j_min,
                         "jr": lim.jreq_min}[base]
                if base == "jr" and meta == 0:
                    u[i] -= u_prev / t_s
        l = l - shift
        u = u - shift
        b_eq = -self.eq_xshift @ x0
        return l, u, b_eq

    def linear_cost(self, x0):
        if self.kind in ("fixed", "baseline"):
            return self.fref + self.T1 @ np.asarray(x0, float)
        return np.zeros(self.nw)

    def solve(self, x0, bg_values, u_prev, slack_seq=None, tol=1e-9,
              elastic=True):
        l, u, b_eq = self.bounds(x0, bg_values, u_prev, slack_seq)
        f = self.linear_cost(x0)
        pen = (1.0, 1e5) if elastic else None
        w, status, iters, t_star = qpcore.solve_qp_dense_ipm(
            self.H, f, self.A, l, u, self.A_eq, b_eq,
            tol=tol, elastic_penalty=pen)
        return w, status, iters, t_star


# ----------------------------------------------------------------------
# consistency gate


@dataclass(frozen=True)
class ConsistencyGate:
    """Per-step admissible-disturbance bound from the certified constants."""

    eta_bar: np.ndarray        # per-output slack caps
    eps: float                 # uniform approximation-error margin
    lipschitz: np.ndarray      # certified per-output constants

    def margin(self) -> float:
        L = np.maximum(np.asarray(self.lipschitz, float), 1e-12)
        return float(np.min((np.asarray(self.eta_bar, float) - self.eps) / L))


@dataclass(frozen=True)
class ConsistencyResult:
    kind: str                  # consistent | relaxable | blocked
    delta_norm: float          # euclidean norm of the tightening vector
    bound: float               # admissible per-step bound actually applied


def check_consistency(prev: DisturbanceTrajectory, next: DisturbanceTrajectory,
                      gate: ConsistencyGate, state_shift_norm: float,
                      tol: float = 1e-9) -> ConsistencyResult:
    dg = compute_delta_g_safe(prev, next)
    norm2 = float(np.linalg.norm(dg))
    worst = float(dg.max(initial=0.0))
    bound = gate.margin() - float(state_shift_norm)
    if worst <= tol:
        return ConsistencyResult("consistent", norm2, bound)
    if worst <= bound:
        return ConsistencyResult("relaxable", norm2, bound)
    return ConsistencyResult("blocked", norm2, bound)


def compute_delta_g_safe(prev, next):
    from .plant import compute_delta_g
    return compute_delta_g(prev, next)
