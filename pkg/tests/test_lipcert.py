import numpy as np
import pytest

from relaxmpc import lipcert, nets, plant
from relaxmpc.lipcert import (ACCEPTED, REJECTED, CertifiedBounds,
                              assemble_lmi, certify_output,
                              check_safety_bound, empirical_lower_bound,
                              max_feature_shift, trivial_bound)
from relaxmpc.nets import MlpNetwork, init_mlp
from relaxmpc.qpcore import ConfigurationError


def scalar_net(w0=2.0, w1=3.0):
    return MlpNetwork(weights=[[[w0]], [[w1]]], biases=[[0.0], [0.0]])


class TestLmiAssembly:
    def test_zero_hidden_weights_nsd_for_any_L(self):
        net = MlpNetwork(weights=[np.zeros((4, 3)), np.zeros((1, 4))],
                         biases=[np.zeros(4), np.zeros(1)])
        M = assemble_lmi(net, 0, 1.0, np.ones(4))
        assert np.linalg.eigvalsh(M).max() <= 1e-12

    def test_scalar_oracle_certificate_at_six(self):
        # closed form: NSD iff L^2 (2t - 9) >= 4 t^2; optimum t=9 gives L=6
        net = scalar_net()
        M = assemble_lmi(net, 0, 36.0, np.array([9.0]))
        assert np.linalg.eigvalsh(M).max() <= 1e-12
        M_bad = assemble_lmi(net, 0, 35.9, np.array([9.0]))
        assert np.linalg.eigvalsh(M_bad).max() > 0
        for t in np.linspace(4.6, 40, 40):
            Mt = assemble_lmi(net, 0, 35.9, np.array([t]))
            assert np.linalg.eigvalsh(Mt).max() > 0

    def test_exactly_symmetric(self):
        net = init_mlp([3, 8, 8, 2], seed=0)
        n = 16
        M = assemble_lmi(net, 1, 4.0, np.abs(np.random.default_rng(0).normal(1, 0.3, n)))
        assert np.array_equal(M, M.T)

    def test_negative_multipliers_rejected(self):
        net = scalar_net()
        with pytest.raises(ConfigurationError):
            assemble_lmi(net, 0, 1.0, np.array([-1.0]))

    def test_monotone_in_L(self):
        # if L certifies, any larger L certifies with the same multipliers
        net = init_mlp([2, 6, 1], seed=1)
        cert = certify_output(net, 0)
        T = cert["T"]
        for factor in (1.1, 2.0, 10.0):
            M = assemble_lmi(net, 0, (cert["L"] * factor) ** 2, T)
            assert np.linalg.eigvalsh(M).max() <= 1e-9


class TestCertification:
    def test_scalar_toy_within_tolerance(self):
        cert = certify_output(scalar_net(), 0, tol_L=1e-3)
        assert 6.0 * (1 - 1e-3) <= cert["L"] <= 6.0 * (1 + 1e-3)

    def test_zero_network(self):
        net = MlpNetwork(weights=[np.zeros((4, 3)), np.zeros((1, 4))],
                         biases=[np.zeros(4), np.zeros(1)])
        assert certify_output(net, 0)["L"] == 0.0

    def test_linear_chain_recovers_product(self):
        # identity-weight two-layer chain has unit gain
        net = MlpNetwork(weights=[np.eye(2), np.eye(2)],
                         biases=[np.zeros(2), np.zeros(2)])
        assert trivial_bound(net, 0) == pytest.approx(1.0)
        cert = certify_output(net, 0)
        assert cert["L"] <= 1.0 * (1 + 2e-3)

    def test_sandwich_on_random_nets(self):
        for seed in (0, 1, 2):
            net = init_mlp([3, 12, 12, 2], seed=seed)
            for j in range(2):
                cert = certify_output(net, j)
                emp = empirical_lower_bound(net, j, [-3, -3, -3], [3, 3, 3],
                                            n_samples=20_000, seed=seed)
                assert emp <= cert["L"] * (1 + 1e-6)
                assert cert["L"] <= cert["trivial_bound"] * (1 + 3e-3)

    def test_trivial_bound_values(self):
        assert trivial_bound(scalar_net(), 0) == pytest.approx(6.0)
        net = MlpNetwork(weights=[np.eye(3), np.eye(3)],
                         biases=[np.zeros(3), np.zeros(3)])
        assert trivial_bound(net, 0) == pytest.approx(1.0)


class TestSafetyGate:
    def test_boundary_accepted(self):
        b = CertifiedBounds(L=[1.0], eta_bar=[2.0], delta_g_bar=1.0,
                            delta_x_bar=1.0)
        assert check_safety_bound(b)[0] == ACCEPTED

    def test_rejected_with_margin(self):
        b = CertifiedBounds(L=[1.01], eta_bar=[2.0], delta_g_bar=1.0,
                            delta_x_bar=1.0)
        verdict, (j, margin) = check_safety_bound(b)
        assert verdict == REJECTED
        assert j == 0
        assert margin == pytest.approx(0.01)

    def test_monotone_in_eta(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            L = rng.uniform(0.1, 3.0, 2)
            eta = rng.uniform(0.5, 6.0, 2)
            b1 = CertifiedBounds(L=L, eta_bar=eta, delta_g_bar=1.0,
                                 delta_x_bar=0.6)
            b2 = CertifiedBounds(L=L, eta_bar=eta + rng.uniform(0, 2, 2),
                                 delta_g_bar=1.0, delta_x_bar=0.6)
            if check_safety_bound(b1)[0] == ACCEPTED:
                assert check_safety_bound(b2)[0] == ACCEPTED

    def test_feature_shift_over_vehicle_box(self):
        model = plant.build_vehicle_model(1.8, 0.05)
        limits = plant.VehicleLimits()
        shift = max_feature_shift(model, limits, da_cap=6.0)
        # dominated by the acceleration move of one step at extreme request
        assert 0.3 < shift < 2.0
        assert max_feature_shift(model, limits, 0.0) < shift


class TestEmpiricalBound:
    def test_gradient_matches_finite_difference(self):
        net = init_mlp([3, 8, 2], seed=5)
        rng = np.random.default_rng(5)
        theta = rng.standard_normal(3)
        g = lipcert.output_gradient(net, theta, 1)
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (net.forward(theta + e)[1] - net.forward(theta - e)[1]) / (2 * h)
            assert abs(fd - g[i]) < 1e-6
