import numpy as np
import pytest

from relaxmpc import qpcore
from relaxmpc.qpcore import (ConfigurationError, PreconditionError, QpProblem,
                             is_feasible, max_eigenvalue_sym, solve_qp,
                             solve_discrete_lyapunov)

from oracles import (active_set_qp_oracle, jacobi_max_eigenvalue,
                     lyapunov_series_oracle)


def random_convex_qp(rng, n=8, m_in=5, feasible=True):
    M = rng.standard_normal((n, n))
    H = M.T @ M + np.eye(n)
    f = rng.standard_normal(n)
    A = rng.standard_normal((m_in, n))
    z0 = rng.standard_normal(n)
    slack = rng.uniform(0.1, 1.0, m_in) if feasible else rng.uniform(-2.0, -1.0, m_in)
    b = A @ z0 + slack
    return QpProblem(H=H, f=f, A_in=A, b_in=b)


class TestSolveQp:
    def test_active_single_bound(self):
        p = QpProblem(H=[[2.0]], f=[0.0], A_in=[[-1.0]], b_in=[-1.0])
        s = solve_qp(p)
        assert s.status == qpcore.OPTIMAL
        assert abs(s.z_star[0] - 1.0) < 1e-8
        assert abs(s.objective - 1.0) < 1e-8

    def test_unconstrained_minimum_at_origin(self):
        p = QpProblem(H=2 * np.eye(2), f=np.zeros(2))
        s = solve_qp(p)
        assert s.status == qpcore.OPTIMAL
        assert np.abs(s.z_star).max() < 1e-8

    def test_matches_active_set_enumeration_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = random_convex_qp(rng)
            s = solve_qp(p, tol=1e-8)
            assert s.status == qpcore.OPTIMAL
            oracle = active_set_qp_oracle(p.H, p.f, p.A_in, p.b_in)
            assert oracle is not None
            z_ref, obj_ref = oracle
            assert np.abs(s.z_star - z_ref).max() < 1e-6
            assert abs(s.objective - obj_ref) < 1e-6

    def test_optimal_implies_kkt_residual_below_tol(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            p = random_convex_qp(rng, n=6, m_in=4)
            s = solve_qp(p, tol=1e-7)
            assert s.status == qpcore.OPTIMAL
            assert s.kkt_residual <= 1e-7

    def test_primal_feasibility_of_optimal_points(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            p = random_convex_qp(rng)
            s = solve_qp(p)
            assert (p.A_in @ s.z_star <= p.b_in + 1e-6).all()

    def test_objective_beats_sampled_feasible_points(self):
        rng = np.random.default_rng(19)
        p = random_convex_qp(rng, n=5, m_in=4)
        s = solve_qp(p)
        # rejection-sample feasible points around a strictly feasible anchor
        hits = 0
        anchor = s.z_star
        while hits < 1000:
            cand = anchor + rng.standard_normal(5) * rng.uniform(0.01, 2.0)
            if (p.A_in @ cand <= p.b_in).all():
                hits += 1
                obj = 0.5 * cand @ p.H @ cand + p.f @ cand
                assert s.objective <= obj + 1e-8

    def test_equality_constraints(self):
        # min |z|^2 s.t. z1 + z2 = 1 -> (0.5, 0.5)
        p = QpProblem(H=2 * np.eye(2), f=np.zeros(2),
                      A_eq=[[1.0, 1.0]], b_eq=[1.0])
        s = solve_qp(p)
        assert s.status == qpcore.OPTIMAL
        assert np.abs(s.z_star - 0.5).max() < 1e-7

    def test_infeasible_detection(self):
        p = QpProblem(H=[[2.0]], f=[0.0], A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
        s = solve_qp(p)
        assert s.status == qpcore.INFEASIBLE

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ConfigurationError):
            QpProblem(H=np.eye(2), f=np.zeros(3))
        with pytest.raises(ConfigurationError):
            QpProblem(H=np.eye(2), f=np.zeros(2), A_in=np.eye(3), b_in=np.zeros(2))

    def test_non_psd_rejected(self):
        with pytest.raises(ConfigurationError):
            QpProblem(H=[[1.0, 0.0], [0.0, -1.0]], f=[0.0, 0.0])

    def test_asymmetric_H_rejected(self):
        with pytest.raises(ConfigurationError):
            QpProblem(H=[[1.0, 0.5], [0.0, 1.0]], f=[0.0, 0.0])

    def test_dump_json(self, tmp_path):
        p = QpProblem(H=[[2.0]], f=[1.0], A_in=[[-1.0]], b_in=[0.0])
        path = tmp_path / "qp.json"
        p.dump_json(path)
        import json
        with open(path) as fh:
            payload = json.load(fh)
        assert payload["n"] == 1
        assert payload["H"] == [[2.0]]


class TestIsFeasible:
    def test_empty_polytope(self):
        p = QpProblem(H=[[2.0]], f=[0.0], A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
        assert is_feasible(p) is False

    def test_unit_interval(self):
        p = QpProblem(H=[[2.0]], f=[0.0], A_in=[[1.0], [-1.0]], b_in=[1.0, 0.0])
        assert is_feasible(p) is True

    def test_agrees_with_solver_status(self):
        rng = np.random.default_rng(23)
        for _ in range(8):
            feas = bool(rng.integers(0, 2))
            n = int(rng.integers(2, 6))
            z0 = rng.standard_normal(n)
            A = rng.standard_normal((4, n))
            if feas:
                b = A @ z0 + rng.uniform(0.05, 1.0, 4)
                p = QpProblem(H=np.eye(n), f=np.zeros(n), A_in=A, b_in=b)
            else:
                # x >= 1 and x <= 0 on the first coordinate
                A = np.vstack([np.eye(n)[:1], -np.eye(n)[:1], A])
                b = np.concatenate([[0.0, -1.0], A[2:] @ z0 + 1.0])
                p = QpProblem(H=np.eye(n), f=np.zeros(n), A_in=A, b_in=b)
            assert is_feasible(p) is feas
            assert (solve_qp(p).status == qpcore.OPTIMAL) is feas

    def test_monotone_in_b(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            p = random_convex_qp(rng, n=4, m_in=5, feasible=bool(rng.integers(0, 2)))
            base = is_feasible(p)
            wider = QpProblem(H=p.H, f=p.f, A_in=p.A_in,
                              b_in=p.b_in + rng.uniform(0.0, 2.0, 5))
            if base:
                assert is_feasible(wider)


class TestLyapunov:
    def test_scalar_closed_form(self):
        P = solve_discrete_lyapunov(np.array([[0.5]]), np.array([[1.0]]))
        assert abs(P[0, 0] - 4.0 / 3.0) < 1e-12

    def test_zero_contraction_gives_Q(self):
        Q = np.diag([2.0, 3.0])
        P = solve_discrete_lyapunov(np.zeros((2, 2)), Q)
        assert np.abs(P - Q).max() < 1e-12

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            M = rng.standard_normal((3, 3))
            M *= 0.9 / max(np.abs(np.linalg.eigvals(M)).max(), 1e-9)
            P = solve_discrete_lyapunov(M, np.eye(3))
            P_ref = lyapunov_series_oracle(M, np.eye(3))
            assert np.abs(P - P_ref).max() < 1e-8

    def test_residual_bound(self):
        rng = np.random.default_rng(9)
        M = 0.8 * rng.standard_normal((4, 4))
        M *= 0.95 / max(np.abs(np.linalg.eigvals(M)).max(), 1e-9)
        Q = np.eye(4)
        P = solve_discrete_lyapunov(M, Q)
        assert np.linalg.norm(M.T @ P @ M - P + Q, "fro") <= 1e-9
        assert max_eigenvalue_sym(M.T @ P @ M - P + Q) <= 1e-9

    def test_unstable_M_rejected(self):
        with pytest.raises(PreconditionError):
            solve_discrete_lyapunov(np.array([[1.0]]), np.array([[1.0]]))

    def test_indefinite_Q_rejected(self):
        with pytest.raises(PreconditionError):
            solve_discrete_lyapunov(np.array([[0.5]]), np.array([[-1.0]]))


class TestMaxEigenvalue:
    def test_diagonal(self):
        assert abs(max_eigenvalue_sym(np.diag([1.0, -2.0, 3.0])) - 3.0) < 1e-12

    def test_rank_one(self):
        v = np.array([1.0, 1.0, 1.0, 1.0])  # norm 2
        assert abs(max_eigenvalue_sym(np.outer(v, v)) - 4.0) < 1e-9

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(13)
        A = rng.standard_normal((10, 10))
        S = 0.5 * (A + A.T)
        lam = max_eigenvalue_sym(S)
        lam_ref = jacobi_max_eigenvalue(S)
        assert abs(lam - lam_ref) < 1e-9 * max(1.0, abs(lam_ref))

    def test_asymmetric_rejected(self):
        with pytest.raises(ConfigurationError):
            max_eigenvalue_sym(np.array([[0.0, 1.0], [0.5, 0.0]]))


class TestKernelParity:
    def test_python_and_compiled_agree(self):
        from relaxmpc import kernel
        if not kernel.HAVE_COMPILED:
            pytest.skip("compiled kernel not built")
        res = kernel.benchmark(n_states=40, n_rows=90, n_solves=5, max_iter=8000)
        assert res["python"]["iterations"] == res["compiled"]["iterations"]
        assert res["max_solution_diff"] < 1e-8

    def test_warm_start_reuses_factorization(self):
        import scipy.sparse as sp
        rng = np.random.default_rng(2)
        n, m = 20, 30
        M = rng.standard_normal((n, n))
        P = sp.csc_matrix(M.T @ M + np.eye(n))
        A = sp.csc_matrix(rng.standard_normal((m, n)))
        solver = qpcore.CachedQpSolver(P, A)
        q = rng.standard_normal(n)
        mid = rng.standard_normal(m)
        x1, y1, st1, it1, _ = solver.solve(q, mid - 1, mid + 1, warm_start=False)
        x2, y2, st2, it2, _ = solver.solve(q, mid - 1, mid + 1)
        assert st1 == st2 == qpcore.OPTIMAL
        assert np.abs(x1 - x2).max() < 1e-6
        assert it2 <= it1
