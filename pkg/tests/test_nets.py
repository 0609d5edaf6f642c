import numpy as np
import pytest

from relaxmpc import nets
from relaxmpc.nets import (GridSpec, MlpNetwork, TrainingConfig,
                           conservative_threshold, estimate_epsilon,
                           generate_dataset, gradient_check, init_mlp,
                           mlp_forward, read_dataset, regressor_samples,
                           classifier_samples, train, write_dataset)
from relaxmpc.qpcore import ConfigurationError


class TestForward:
    def test_zero_weights_pass_bias_through(self):
        net = MlpNetwork(weights=[np.zeros((4, 3)), np.zeros((2, 4))],
                         biases=[np.zeros(4), np.array([0.7, -0.3])])
        out = mlp_forward(net, np.array([1.0, -2.0, 3.0]))
        assert np.allclose(out, [0.7, -0.3])

    def test_single_neuron_chain_is_tanh(self):
        net = MlpNetwork(weights=[[[1.0]], [[1.0]]], biases=[[0.0], [0.0]])
        for theta in (-2.0, -0.3, 0.0, 1.7):
            assert mlp_forward(net, [theta])[0] == pytest.approx(np.tanh(theta))

    def test_matches_independent_reference(self):
        # reference forward pass written separately from the implementation
        rng = np.random.default_rng(7)
        net = init_mlp([3, 16, 16, 2], seed=7)
        for _ in range(10):
            theta = rng.standard_normal(3)
            s = theta.copy()
            for W, b in zip(net.weights[:-1], net.biases[:-1]):
                s = np.tanh(W.dot(s) + b)
            ref = net.weights[-1].dot(s) + net.biases[-1]
            assert np.abs(mlp_forward(net, theta) - ref).max() < 1e-12

    def test_dimension_mismatch(self):
        net = init_mlp([3, 8, 1], seed=0)
        with pytest.raises(ConfigurationError):
            mlp_forward(net, np.zeros(4))

    def test_slope_restriction_property(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-20, 20, 500)
        y = rng.uniform(-20, 20, 500)
        keep = np.abs(x - y) > 1e-9
        slopes = (np.tanh(x[keep]) - np.tanh(y[keep])) / (x[keep] - y[keep])
        assert slopes.min() >= 0.0
        assert slopes.max() <= 1.0

    def test_json_roundtrip(self, tmp_path):
        net = init_mlp([3, 8, 2], seed=3)
        net.meta["epsilon"] = 0.12
        path = tmp_path / "net.json"
        net.to_json(path)
        back = MlpNetwork.from_json(str(path))
        for W1, W2 in zip(net.weights, back.weights):
            assert np.array_equal(W1, W2)
        assert back.meta["epsilon"] == 0.12


class TestGradients:
    def test_zero_network_bias_gradient_exact(self):
        net = MlpNetwork(weights=[np.zeros((4, 3)), np.zeros((1, 4))],
                         biases=[np.zeros(4), np.zeros(1)])
        err = gradient_check(net, np.array([0.5, -1.0, 2.0]), np.array([1.0]))
        assert err < 1e-7

    def test_random_small_net(self):
        net = init_mlp([3, 6, 5, 2], seed=9)
        rng = np.random.default_rng(9)
        err = gradient_check(net, rng.standard_normal(3), rng.standard_normal(2))
        assert err < 1e-5

    def test_saturated_region(self):
        net = init_mlp([2, 5, 1], seed=2)
        err = gradient_check(net, np.array([20.0, -20.0]), np.array([0.3]))
        assert err < 1e-4

    def test_classifier_gradients(self):
        net = init_mlp([3, 6, 1], seed=4, output="sigmoid")
        err = gradient_check(net, np.array([0.2, -0.4, 1.0]), np.array([1.0]),
                             task="classification")
        assert err < 1e-5


class TestTraining:
    def test_memorizes_single_sample(self):
        net = init_mlp([3, 8, 2], seed=0)
        X = np.tile([[0.5, -0.2, 1.0]], (32, 1))
        Y = np.tile([[0.3, -0.7]], (32, 1))
        hp = TrainingConfig(lr=0.05, epochs=200, batch=8, seed=0,
                            weight_decay=0.0)
        trained = train(net, X, Y, hp)
        loss, _, _ = nets.loss_and_gradients(trained, X, Y)
        assert loss < 1e-4

    def test_recovers_linear_synthetic_target(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, (2000, 3))
        Y = (2.0 * X[:, :1])
        net = init_mlp([3, 16, 16, 1], seed=1)
        hp = TrainingConfig(lr=0.08, epochs=400, batch=128, seed=1,
                            weight_decay=0.0)
        trained = train(net, X, Y, hp)
        Xh = rng.uniform(-1, 1, (500, 3))
        pred = trained.forward_batch(Xh)
        rms = float(np.sqrt(np.mean((pred - 2.0 * Xh[:, :1]) ** 2)))
        assert rms < 1e-2

    def test_separable_classification(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, (1500, 3))
        Y = (X[:, :1] + 0.5 * X[:, 1:2] > 0).astype(float)
        net = init_mlp([3, 8, 8, 1], seed=2, output="sigmoid")
        hp = TrainingConfig(lr=0.1, epochs=150, batch=128, seed=2,
                            weight_decay=0.0)
        trained = train(net, X, Y, hp, task="classification")
        Xh = rng.uniform(-1, 1, (500, 3))
        margin = np.abs(Xh[:, 0] + 0.5 * Xh[:, 1]) > 0.05
        Yh = (Xh[:, :1] + 0.5 * Xh[:, 1:2] > 0).astype(float)
        pred = (trained.forward_batch(Xh) > 0.5).astype(float)
        assert (pred[margin] == Yh[margin]).all()

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, (300, 3))
        Y = X[:, :2] ** 2
        hp = TrainingConfig(lr=0.03, epochs=30, batch=64, seed=3)
        t1 = train(init_mlp([3, 8, 2], seed=3), X, Y, hp)
        t2 = train(init_mlp([3, 8, 2], seed=3), X, Y, hp)
        for W1, W2 in zip(t1.weights, t2.weights):
            assert np.array_equal(W1, W2)

    def test_empty_data_rejected(self):
        with pytest.raises(ConfigurationError):
            train(init_mlp([3, 4, 1], seed=0), np.zeros((0, 3)),
                  np.zeros((0, 1)), TrainingConfig())

    def test_nonfinite_targets_rejected(self):
        with pytest.raises(ConfigurationError):
            train(init_mlp([3, 4, 1], seed=0), np.zeros((4, 3)),
                  np.full((4, 1), np.nan), TrainingConfig())


class TestEpsilon:
    def test_exact_net_zero_eps(self):
        net = MlpNetwork(weights=[np.zeros((4, 3)), np.zeros((2, 4))],
                         biases=[np.zeros(4), np.array([1.0, 2.0])])
        X = np.zeros((10, 3))
        Y = np.tile([[1.0, 2.0]], (10, 1))
        assert estimate_epsilon(net, X, Y) == 0.0

    def test_constant_offset(self):
        net = MlpNetwork(weights=[np.zeros((4, 3)), np.zeros((2, 4))],
                         biases=[np.zeros(4), np.array([1.05, 2.0])])
        X = np.zeros((10, 3))
        Y = np.tile([[1.0, 2.0]], (10, 1))
        assert estimate_epsilon(net, X, Y) == pytest.approx(0.05)

    def test_empty_validation_rejected(self):
        net = init_mlp([3, 4, 1], seed=0)
        with pytest.raises(ConfigurationError):
            estimate_epsilon(net, np.zeros((0, 3)), np.zeros((0, 1)))

    def test_clamping_never_hurts_in_range(self):
        rng = np.random.default_rng(6)
        cap = np.array([5.0, 6.0])
        pred = rng.uniform(-1, 7, (200, 2))
        truth = rng.uniform(0, 1, (200, 2)) * cap
        clamped = np.clip(pred, 0.0, cap)
        assert (np.abs(clamped - truth) <= np.abs(pred - truth) + 1e-12).all()


class TestGrid:
    def test_paper_grid_cardinality(self):
        grid = GridSpec()
        assert grid.counts() == (50, 56, 37)
        assert grid.size() == 50 * 56 * 37

    def test_optional_request_axis(self):
        grid = GridSpec(a_req=(-3.7, 2.5, 0.1))
        assert grid.counts()[-1] == 63
        assert grid.points().shape[1] == 4

    def test_points_cover_ranges(self):
        grid = GridSpec(gap=(0.1, 0.5, 0.1), v=(0.0, 1.0, 0.5), a=(-1.0, 0.0, 0.5))
        pts = grid.points()
        assert pts.shape == (5 * 3 * 3, 3)
        assert pts[:, 0].min() == pytest.approx(0.1)
        assert pts[:, 0].max() == pytest.approx(0.5)


class TestDataset:
    def oracle(self, theta, mode):
        gap, v, a = theta[:3]
        # synthetic labels: feasible iff gap exceeds a quadratic threshold
        need = v ** 2 / (7.0 + 3.0 * mode)
        if gap < need:
            return "Infeasible", None
        return "Optimal", np.array([max(need + 0.5 - gap, 0.0), 0.1 * mode])

    def test_far_low_speed_all_feasible_zero_slack(self):
        grid = GridSpec(gap=(4.9, 5.0, 0.1), v=(0.0, 0.0, 0.1), a=(-0.1, 0.0, 0.1))
        data, dropped = generate_dataset(grid, self.oracle)
        assert dropped == 0
        assert (data[:, 4] == 1).all()
        assert np.nanmax(data[:, 5]) == 0.0

    def test_nonconverged_dropped_not_mislabeled(self):
        calls = []

        def flaky(theta, mode):
            calls.append(theta)
            return ("MaxIter", None) if len(calls) % 3 == 0 else self.oracle(theta, mode)

        grid = GridSpec(gap=(0.1, 0.5, 0.1), v=(5.0, 5.5, 0.5), a=(0.0, 0.0, 0.1))
        data, dropped = generate_dataset(grid, flaky)
        assert dropped > 0
        assert len(data) + dropped == 2 * grid.size()

    def test_roundtrip_and_sample_selection(self, tmp_path):
        grid = GridSpec(gap=(0.1, 2.0, 0.5), v=(0.0, 5.0, 1.0), a=(-2.0, 0.0, 1.0))
        data, _ = generate_dataset(grid, self.oracle)
        path = tmp_path / "data.csv"
        write_dataset(path, data, grid)
        back = read_dataset(path)
        assert back.shape == data.shape
        finite = np.isfinite(data)
        assert np.allclose(back[finite], data[finite], atol=1e-7)
        X, Y = regressor_samples(back, mode=1)
        assert np.allclose(Y[:, 1], 0.1)
        Xc, Yc = classifier_samples(back, mode=0)
        assert set(np.unique(Yc)) <= {0.0, 1.0}

    def test_boundary_margin_trims_saturated_targets(self):
        data = np.array([
            [1.0, 1.0, 0.0, 1, 1, 4.9, 0.1],
            [2.0, 1.0, 0.0, 1, 1, 0.5, 0.2],
        ])
        X, Y = regressor_samples(data, mode=1, delta_bar=[5.0, 6.0],
                                 boundary_margin=0.05)
        assert len(X) == 1 and Y[0, 0] == 0.5


class TestThreshold:
    def test_no_false_feasible_on_validation(self):
        rng = np.random.default_rng(8)
        net = init_mlp([3, 8, 1], seed=8, output="sigmoid")
        X = rng.uniform(-1, 1, (200, 3))
        Y = (X[:, :1].sum(axis=1, keepdims=True) > 0).astype(float)
        thr = conservative_threshold(net, X, Y)
        pred_feasible = net.forward_batch(X).ravel() >= thr
        actually_infeasible = Y.ravel() <= 0.5
        assert not np.any(pred_feasible & actually_infeasible)
