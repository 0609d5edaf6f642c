import numpy as np
import pytest

from relaxmpc import plant
from relaxmpc.plant import (DisturbanceTrajectory, VehicleLimits,
                            build_cruise_reference, build_terminal_ingredients,
                            build_vehicle_constraints, build_vehicle_model,
                            compute_delta_g, evaluate_g, min_stop_position,
                            rampout_velocity_loss)
from relaxmpc.qpcore import ConfigurationError

from oracles import expm_taylor_oracle, stopping_distance_lp


@pytest.fixture(scope="module")
def model():
    return build_vehicle_model(t_acc=1.8, t_s=0.05)


@pytest.fixture(scope="module")
def limits():
    return VehicleLimits()


@pytest.fixture(scope="module")
def constraints(model, limits):
    return build_vehicle_constraints(limits, model)


class TestVehicleModel:
    def test_matches_matrix_exponential_oracle(self, model):
        aug = np.zeros((4, 4))
        aug[:3, :3] = np.array([[0, 1, 0], [0, 0, 1], [0, 0, -1.8]])
        aug[:3, 3] = [0, 0, 1.8]
        E = expm_taylor_oracle(aug * 0.05)
        assert np.abs(model.A - E[:3, :3]).max() < 1e-12
        assert np.abs(model.B[:, 0] - E[:3, 3]).max() < 1e-12

    def test_position_velocity_coupling(self, model):
        assert abs(model.A[0, 1] - 0.05) < 1e-12
        assert abs(model.A[2, 2] - np.exp(-1.8 * 0.05)) < 1e-12

    def test_small_step_limit(self):
        m = build_vehicle_model(1.8, 1e-9)
        assert np.abs(m.A - np.eye(3)).max() < 1e-6
        assert np.abs(m.B).max() < 1e-6

    def test_lag_row_sums_to_one(self, model):
        assert abs(model.B[2, 0] + model.A[2, 2] - 1.0) < 1e-12

    def test_spectral_radius_one_with_lag_eigenvalue(self, model):
        eig = np.sort(np.abs(np.linalg.eigvals(model.A)))
        assert abs(eig[-1] - 1.0) < 1e-12
        assert abs(eig[0] - np.exp(-1.8 * 0.05)) < 1e-12

    def test_invalid_inputs(self):
        with pytest.raises(ConfigurationError):
            build_vehicle_model(-1.0, 0.05)
        with pytest.raises(ConfigurationError):
            build_vehicle_model(1.8, 0.0)


class TestStageConstraints:
    def test_velocity_row_violation(self, constraints):
        h = constraints.evaluate_h([0.0, 6.0, 0.0], 0.0)
        assert abs(h[plant.ROW_V_MAX] - 0.5) < 1e-12

    def test_steady_acceleration_has_zero_jerk(self, constraints, limits):
        # holding the request at the lag state keeps both jerk rows slack
        h = constraints.evaluate_h([0.0, 3.0, -1.0], -1.0, u_prev=-1.0)
        assert h[plant.ROW_J_MAX] == pytest.approx(-limits.j_max)
        assert h[plant.ROW_J_MIN] == pytest.approx(limits.j_min)

    def test_stacked_rows_match_symbolic_expansion(self, model, constraints):
        # independent per-step expansion over a 3-step horizon
        rng = np.random.default_rng(4)
        xs = [rng.standard_normal(3)]
        us = rng.standard_normal(3)
        for n in range(3):
            xs.append(model.A @ xs[n] + model.B[:, 0] * us[n])
        t_s = model.t_s
        for n in range(3):
            p, v, a = xs[n]
            a_next = xs[n + 1][2]
            u = us[n]
            u_prev = us[n - 1] if n else 0.0
            expected = np.array([
                v - constraints.limits.v_max,
                -v,
                a - constraints.limits.a_max,
                constraints.limits.a_min - a,
                u - constraints.limits.a_max,
                constraints.limits.a_min - u,
                (a_next - a) / t_s - constraints.limits.j_max,
                constraints.limits.j_min - (a_next - a) / t_s,
                (u - u_prev) / t_s - constraints.limits.jreq_max,
                constraints.limits.jreq_min - (u - u_prev) / t_s,
            ])
            got = constraints.evaluate_h(xs[n], us[n], u_prev)
            assert np.abs(got - expected).max() < 1e-9

    def test_inconsistent_limits_rejected(self):
        with pytest.raises(ConfigurationError):
            VehicleLimits(a_min=1.0, a_max=-1.0)


class TestUnknownConstraint:
    def test_far_obstacle(self, constraints):
        assert evaluate_g([10.0, 0, 0], 0.0, 30.0, constraints) == pytest.approx(-20.0)

    def test_boundary(self, constraints):
        assert evaluate_g([30.0, 0, 0], 0.0, 30.0, constraints) == pytest.approx(0.0)

    def test_predicted_violation_after_jump(self, constraints):
        # one-meter obstacle jump turns a 0.5 m margin into a violation
        assert evaluate_g([29.5, 0, 0], 0.0, 29.0, constraints) == pytest.approx(0.5)

    def test_affine_in_state(self, constraints):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal(3)
            d = rng.standard_normal(3)
            lhs = evaluate_g(x + d, 0.3, 12.0, constraints) \
                - evaluate_g(x, 0.3, 12.0, constraints)
            assert abs(lhs - constraints.C_g[0] @ d) < 1e-12


class TestDisturbance:
    def test_identical_trajectories(self):
        a = DisturbanceTrajectory(np.full(10, 30.0), k=0)
        b = DisturbanceTrajectory(np.full(10, 30.0), k=1)
        assert np.abs(compute_delta_g(a, b)).max() == 0.0

    def test_one_meter_jump(self):
        a = DisturbanceTrajectory(np.full(10, 30.0), k=3)
        b = DisturbanceTrajectory(np.full(10, 29.0), k=4)
        dg = compute_delta_g(a, b)
        assert dg.shape == (9,)
        assert np.all(dg == 1.0)

    def test_receding_obstacle_is_consistent(self):
        a = DisturbanceTrajectory(np.full(10, 30.0), k=0)
        b = DisturbanceTrajectory(np.full(10, 31.5), k=1)
        assert np.all(compute_delta_g(a, b) < 0)

    def test_antisymmetry_same_step(self):
        rng = np.random.default_rng(8)
        va = rng.uniform(20, 40, 12)
        vb = rng.uniform(20, 40, 12)
        a = DisturbanceTrajectory(va, k=5)
        b = DisturbanceTrajectory(vb, k=5)
        assert np.abs(compute_delta_g(a, b) + compute_delta_g(b, a)).max() == 0.0

    def test_misaligned_rejected(self):
        a = DisturbanceTrajectory(np.zeros(10), k=0)
        b = DisturbanceTrajectory(np.zeros(10), k=4)
        with pytest.raises(ConfigurationError):
            compute_delta_g(a, b)


class TestReference:
    def test_cruise_reference_valid(self, model, constraints):
        ref = build_cruise_reference(model, p0=0.0, v_ref=5.0, length=200)
        ref.validate(model, constraints)

    def test_dynamics_residual_tolerance(self, model, constraints):
        ref = build_cruise_reference(model, 0.0, 5.0, 50)
        r_x = ref.r_x.copy()
        r_x[10, 0] += 1e-6
        broken = plant.ReferenceTrajectory(r_x=r_x, r_u=ref.r_u)
        with pytest.raises(ConfigurationError):
            broken.validate(model, constraints)


class TestStoppingEstimator:
    def test_upper_bounds_lp_oracle(self, model, limits):
        cases = [(5.0, 0.0, 0.0, 0.0), (5.0, -3.5, 0.0, 0.0),
                 (3.0, -2.0, 5.0, 0.0), (4.0, -1.0, 5.0, 6.0),
                 (1.0, -1.0, 0.0, 0.0), (2.5, -3.0, 5.0, 6.0)]
        for v0, a0, dj, da in cases:
            greedy = min_stop_position(model, limits, [0.0, v0, a0],
                                       dj=dj, da=da, u_prev=a0)
            exact = stopping_distance_lp(model.A, model.B, model.t_s,
                                         limits.as_dict(), [0.0, v0, a0],
                                         dj=dj, da=da, u_prev=a0)
            assert greedy is not None and exact is not None
            assert exact - 1e-6 <= greedy <= exact + 0.6

    def test_relaxation_shortens_stops(self, model, limits):
        base = min_stop_position(model, limits, [0.0, 4.0, -1.0], u_prev=-1.0)
        relaxed = min_stop_position(model, limits, [0.0, 4.0, -1.0],
                                    dj=5.0, da=6.0, u_prev=-1.0)
        assert relaxed < base

    def test_rampout_loss_monotone(self, model, limits):
        losses = [rampout_velocity_loss(a, model, limits, u0=None)
                  for a in (-8.0, -5.0, -2.0, -0.5)]
        assert losses == sorted(losses, reverse=True)
        assert rampout_velocity_loss(0.0, model, limits) == 0.0


class TestTerminalIngredients:
    def test_full_stop_membership(self, model, constraints):
        term = build_terminal_ingredients(model, constraints)
        assert term.in_safe_set([12.0, 0.0, 0.0])
        assert not term.in_safe_set([12.0, 0.1, 0.0])

    def test_safe_set_is_equilibrium(self, model, constraints):
        term = build_terminal_ingredients(model, constraints)
        x = np.array([7.0, 0.0, 0.0])
        nxt = model.step(x, 0.0)
        assert np.abs(nxt - x).max() < 1e-12

    def test_safe_set_rows_imply_known_rows(self, model, constraints):
        term = build_terminal_ingredients(model, constraints)
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = np.array([rng.uniform(0, 30), 0.0, 0.0])
            assert term.in_safe_set(x)
            assert constraints.evaluate_h(x, 0.0, 0.0).max() <= 1e-9

    def test_monte_carlo_invariance(self, model, constraints):
        # closed loop under the terminal law stays in the stabilizing set
        term = build_terminal_ingredients(model, constraints)
        ref = build_cruise_reference(model, 0.0, 5.0, 100)
        rng = np.random.default_rng(11)
        count = 0
        while count < 100:
            x = np.array([rng.uniform(-5, 5),
                          rng.uniform(0.0, 5.5),
                          rng.uniform(-8.0, 2.5)])
            if not term.contains(x):
                continue
            count += 1
            for step in range(50):
                u = term.kappa(x, ref.r_x[step], ref.r_u[step])
                x = model.step(x, u)
                assert term.contains(x, tol=1e-7), \
                    f"left the stabilizing set at step {step}: {x}"

    def test_lqr_gain_ignores_position(self, model, constraints):
        term = build_terminal_ingredients(model, constraints)
        assert term.K_term[0, 0] == 0.0
        assert term.P_term[0, 0] == 0.0
        # Riccati residual on the velocity/acceleration block
        A_sub = model.A[1:, 1:]
        B_sub = model.B[1:]
        P = term.P_term[1:, 1:]
        Q = np.diag([10.0, 1.0])
        R = np.array([[1.0]])
        K = np.linalg.solve(R + B_sub.T @ P @ B_sub, B_sub.T @ P @ A_sub)
        resid = A_sub.T @ P @ A_sub - P \
            - A_sub.T @ P @ B_sub @ K + Q
        assert np.abs(resid).max() < 1e-8
