"""Slack regressors and feasibility classifiers.

Plain-numpy multilayer perceptrons with slope-restricted activations,
trained by deterministic mini-batch gradient descent with momentum.  The
networks stay deliberately small so the Lipschitz certification matrices
remain tractable for dense eigensolvers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .qpcore import ConfigurationError, PreconditionError

ACTIVATIONS = {
    # name: (function, derivative, slope bounds)
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2, (0.0, 1.0)),
}


@dataclass
class MlpNetwork:
    weights: list
    biases: list
    activation: str = "tanh"
    alpha: float = 0.0
    beta: float = 1.0
    output: str = "linear"          # "sigmoid" for feasibility classifiers
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(W, float) for W in self.weights]
        self.biases = [np.asarray(b, float) for b in self.biases]
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation}")
        dims = self.dims
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ConfigurationError(f"layer {i} dimension mismatch")

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_hidden_layers(self):
        return len(self.weights) - 1

    def hidden_weights(self):
        return self.weights[:-1]

    def forward(self, theta):
        theta = np.asarray(theta, float)
        if theta.shape != (self.dims[0],):
            raise ConfigurationError(
                f"input size {theta.shape} does not match n0={self.dims[0]}")
        return self.forward_batch(theta[None, :])[0]

    def forward_batch(self, X):
        X = np.asarray(X, float)
        act = ACTIVATIONS[self.activation][0]
        s = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            s = act(s @ W.T + b)
        out = s @ self.weights[-1].T + self.biases[-1]
        if self.output == "sigmoid":
            out = 1.0 / (1.0 + np.exp(-out))
        return out

    # ------------------------------------------------------------------

    def to_json(self, path=None):
        payload = {
            "dims": self.dims,
            "activation": self.activation,
            "alpha": self.alpha,
            "beta": self.beta,
            "output": self.output,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "metadata": self.meta,
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(payload, fh, indent=1)
        return payload

    @classmethod
    def from_json(cls, path_or_payload):
        if isinstance(path_or_payload, (str, bytes)) or hasattr(path_or_payload, "read"):
            with open(path_or_payload) as fh:
                payload = json.load(fh)
        else:
            payload = path_or_payload
        return cls(weights=payload["weights"], biases=payload["biases"],
                   activation=payload["activation"], alpha=payload["alpha"],
                   beta=payload["beta"], output=payload.get("output", "linear"),
                   meta=payload.get("metadata", {}))


def mlp_forward(net: MlpNetwork, theta) -> np.ndarray:
    return net.forward(theta)


def init_mlp(dims, seed=0, output="linear", activation="tanh") -> MlpNetwork:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, (n_out, n_in)))
        biases.append(np.zeros(n_out))
    a, b = ACTIVATIONS[activation][2]
    return MlpNetwork(weights=weights, biases=biases, activation=activation,
                      alpha=a, beta=b, output=output,
                      meta={"seed": int(seed)})


# ----------------------------------------------------------------------
# training


def _forward_caches(net, X):
    act = ACTIVATIONS[net.activation][0]
    pre = []
    post = [X]
    s = X
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = s @ W.T + b
        pre.append(z)
        s = act(z)
        post.append(s)
    out = s @ net.weights[-1].T + net.biases[-1]
    return out, pre, post


def loss_and_gradients(net: MlpNetwork, X, Y, task="regression",
                       class_weights=None, weight_decay=0.0):
    """Mean loss plus analytic parameter gradients.

    ``task`` selects mean squared error (regression, linear output) or
    class-weighted binary cross entropy (classification, sigmoid output).
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    n = X.shape[0]
    dact = ACTIVATIONS[net.activation][1]
    out, pre, post = _forward_caches(net, X)
    if task == "regression":
        diff = out - Y
        loss = float(np.mean(diff ** 2))
        dout = 2.0 * diff / diff.size
    elif task == "classification":
        p = 1.0 / (1.0 + np.exp(-out))
        w = np.ones_like(p)
        if class_weights is not None:
            w = np.where(Y > 0.5, class_weights[1], class_weights[0])
        eps = 1e-12
        loss = float(-np.mean(w * (Y * np.log(p + eps)
                                   + (1 - Y) * np.log(1 - p + eps))))
        dout = w * (p - Y) / p.size
    else:
        raise ConfigurationError(f"unknown task {task}")

    grads_W = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    delta = dout
    for i in range(len(net.weights) - 1, -1, -1):
        grads_W[i] = delta.T @ post[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * dact(pre[i - 1])
    if weight_decay:
        for i, W in enumerate(net.weights):
            loss += 0.5 * weight_decay * float(np.sum(W * W))
            grads_W[i] = grads_W[i] + weight_decay * W
    return loss, grads_W, grads_b


@dataclass
class TrainingConfig:
    lr: float = 0.02
    epochs: int = 400
    batch: int = 256
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    val_fraction: float = 0.1
    class_weighted: bool = True
    lr_decay: float = 0.5
    lr_steps: int = 3


def split_by_hash(X, fraction=0.1):
    """Deterministic train/validation split keyed on the sample coordinates."""
    X = np.atleast_2d(X)
    keys = np.array([hash(tuple(np.round(row, 6))) % 10_000 for row in X])
    val = keys < int(fraction * 10_000)
    if val.all() or (~val).any() is False:
        val[:] = False
        val[:: max(1, int(1 / fraction))] = True
    return ~val, val


def train(net_init: MlpNetwork, X, Y, hp: TrainingConfig,
          task="regression") -> MlpNetwork:
    """Deterministic mini-batch gradient descent with momentum.

    Returns the parameters achieving the best validation loss; raises on
    divergence.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    if X.shape[0] == 0:
        raise ConfigurationError("empty training set")
    if not np.isfinite(Y).all():
        raise ConfigurationError("non-finite training targets")
    rng = np.random.default_rng(hp.seed)
    tr_mask, val_mask = split_by_hash(X, hp.val_fraction)
    if val_mask.sum() == 0 or tr_mask.sum() == 0:
        tr_mask = np.ones(X.shape[0], bool)
        val_mask = tr_mask
    Xtr, Ytr = X[tr_mask], Y[tr_mask]
    Xval, Yval = X[val_mask], Y[val_mask]

    cw = None
    if task == "classification" and hp.class_weighted:
        n_pos = max(float((Ytr > 0.5).sum()), 1.0)
        n_neg = max(float((Ytr <= 0.5).sum()), 1.0)
        total = n_pos + n_neg
        cw = (total / (2 * n_neg), total / (2 * n_pos))

    net = MlpNetwork(weights=[W.copy() for W in net_init.weights],
                     biases=[b.copy() for b in net_init.biases],
                     activation=net_init.activation, alpha=net_init.alpha,
                     beta=net_init.beta, output=net_init.output,
                     meta=dict(net_init.meta))
    vel_W = [np.zeros_like(W) for W in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    best = None
    best_loss = np.inf
    lr = hp.lr
    step_every = max(1, hp.epochs // (hp.lr_steps + 1))
    n_tr = Xtr.shape[0]
    for epoch in range(hp.epochs):
        if epoch and epoch % step_every == 0:
            lr *= hp.lr_decay
        order = rng.permutation(n_tr)
        for start in range(0, n_tr, hp.batch):
            idx = order[start:start + hp.batch]
            loss, gW, gb = loss_and_gradients(net, Xtr[idx], Ytr[idx], task,
                                              cw, hp.weight_decay)
            if not np.isfinite(loss):
                raise PreconditionError(
                    f"training diverged at epoch {epoch} (loss={loss})")
            for i in range(len(net.weights)):
                vel_W[i] = hp.momentum * vel_W[i] - lr * gW[i]
                vel_b[i] = hp.momentum * vel_b[i] - lr * gb[i]
                net.weights[i] += vel_W[i]
                net.biases[i] += vel_b[i]
        val_loss, _, _ = loss_and_gradients(net, Xval, Yval, task, cw, 0.0)
        if val_loss < best_loss:
            best_loss = val_loss
            best = ([W.copy() for W in net.weights],
                    [b.copy() for b in net.biases])
    net.weights, net.biases = best
    net.meta.update({"epochs": hp.epochs, "val_loss": float(best_loss),
                     "lr": hp.lr, "batch": hp.batch, "seed": hp.seed,
                     "weight_decay": hp.weight_decay, "task": task})
    return net


def gradient_check(net: MlpNetwork, x, y, task="regression", step=1e-5):
    """Max relative error of analytic gradients vs central differences."""
    X = np.atleast_2d(np.asarray(x, float))
    Y = np.atleast_2d(np.asarray(y, float))
    _, gW, gb = loss_and_gradients(net, X, Y, task)
    worst = 0.0
    for li in range(len(net.weights)):
        for arr, grad in ((net.weights[li], gW[li]), (net.biases[li], gb[li])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + step
                lp, _, _ = loss_and_gradients(net, X, Y, task)
                arr[ix] = orig - step
                lm, _, _ = loss_and_gradients(net, X, Y, task)
                arr[ix] = orig
                fd = (lp - lm) / (2 * step)
                denom = max(abs(fd), abs(grad[ix]), 1e-8)
                worst = max(worst, abs(fd - grad[ix]) / denom)
    return worst


def estimate_epsilon(net: MlpNetwork, X_val, Y_val) -> float:
    """Largest elementwise approximation error on held-out samples.

    An empirical stand-in for the uniform error bound; the certification
    artifact records it alongside the grid it was measured on.
    """
    X_val = np.atleast_2d(np.asarray(X_val, float))
    Y_val = np.atleast_2d(np.asarray(Y_val, float))
    if X_val.shape[0] == 0:
        raise ConfigurationError("empty validation set")
    pred = net.forward_batch(X_val)
    return float(np.abs(pred - Y_val).max())


# ----------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class GridSpec:
    """Sampling grid over the reduced network input (gap, v, a).

    ``gap`` is the obstacle clearance ahead of the vehicle.  The optional
    requested-acceleration axis is disabled by default; when enabled it
    parameterizes the previous request in the seam constraint.
    """

    gap: tuple = (0.1, 5.0, 0.1)
    v: tuple = (0.0, 5.5, 0.1)
    a: tuple = (-3.5, 0.1, 0.1)
    a_req: tuple = None

    def axis(self, spec):
        lo, hi, step = spec
        n = int(round((hi - lo) / step)) + 1
        return lo + step * np.arange(n)

    def counts(self):
        base = [len(self.axis(self.gap)), len(self.axis(self.v)),
                len(self.axis(self.a))]
        if self.a_req is not None:
            base.append(len(self.axis(self.a_req)))
        return tuple(base)

    def size(self):
        return int(np.prod(self.counts()))

    def points(self):
        axes = [self.axis(self.gap), self.axis(self.v), self.axis(self.a)]
        if self.a_req is not None:
            axes.append(self.axis(self.a_req))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


DATASET_HEADER = "theta_0,theta_1,theta_2,mode,feasible,delta_j,delta_a"


def generate_dataset(grid: GridSpec, slack_oracle, modes=(0, 1),
                     progress=None):
    """Label every grid point with the minimal-relaxation solve.

    ``slack_oracle(theta, mode)`` returns ``(status, delta)`` with delta the
    uniform slack pair for feasible instances and None otherwise; status is
    the solver status string.  Non-converged solves are dropped and counted,
    never mislabeled.
    """
    pts = grid.points()
    rows = []
    dropped = 0
    for i, theta in enumerate(pts):
        for mode in modes:
            status, delta = slack_oracle(theta, mode)
            if status == "Optimal":
                rows.append((*theta[:3], mode, 1, delta[0], delta[1]))
            elif status == "Infeasible":
                rows.append((*theta[:3], mode, 0, np.nan, np.nan))
            else:
                dropped += 1
        if progress and (i + 1) % progress == 0:
            print(f"  {i + 1}/{len(pts)} grid points, {len(rows)} samples,"
                  f" {dropped} dropped")
    data = np.array(rows, dtype=float)
    return data, dropped


def write_dataset(path, data, grid: GridSpec):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# grid gap={grid.gap} v={grid.v} a={grid.a}"
                 f" a_req={grid.a_req}\n")
        fh.write(DATASET_HEADER + "\n")
        for row in data:
            fh.write("%.9g,%.9g,%.9g,%d,%d,%.9g,%.9g\n" % tuple(row))


def read_dataset(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("theta_0"):
                continue
            rows.append([float(v) for v in line.strip().split(",")])
    return np.array(rows, dtype=float)


def regressor_samples(data, mode, delta_bar=None, boundary_margin=0.0):
    """Feasible samples for one mode as (theta, delta) arrays.

    ``boundary_margin`` drops near-saturated relaxations, keeping the
    regression targets inside the certified operating envelope.
    """
    sel = (data[:, 3] == mode) & (data[:, 4] == 1)
    X = data[sel, :3]
    Y = data[sel, 5:7]
    if delta_bar is not None and boundary_margin > 0:
        keep = np.all(Y <= (1.0 - boundary_margin) * np.asarray(delta_bar),
                      axis=1)
        X, Y = X[keep], Y[keep]
    return X, Y


def classifier_samples(data, mode):
    sel = data[:, 3] == mode
    X = data[sel, :3]
    Y = data[sel, 4:5]
    return X, Y


def conservative_threshold(net: MlpNetwork, X_val, Y_val, margin=1e-3,
                           cap=0.98):
    """Feasibility decision threshold with zero false-feasible calls on the
    validation set (erring toward declaring infeasibility)."""
    p = net.forward_batch(X_val).ravel()
    infeasible = np.asarray(Y_val).ravel() <= 0.5
    if not infeasible.any():
        return 0.5
    thr = float(p[infeasible].max() + margin)
    return float(min(max(0.5, thr), cap))
