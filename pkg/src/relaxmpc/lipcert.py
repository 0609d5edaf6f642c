"""Lipschitz certification of the slack regressors.

Certifies per-output Lipschitz upper bounds through the quadratic-constraint
matrix inequality for slope-restricted activations, minimized by bisection
over the squared constant with a multiplier search in the inner loop, and
checks the admissible-disturbance safety bound against the slack caps.
No cone solver is involved: the inequality is affine in the multipliers, so
negative semidefiniteness is tested with a dense symmetric eigensolver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import MlpNetwork
from .qpcore import ConfigurationError

ACCEPTED = "Accepted"
REJECTED = "Rejected"


@dataclass(frozen=True)
class LmiBlocks:
    Sigma: np.ndarray       # (n, n0+n) block bidiagonal hidden-weight map
    V: np.ndarray           # (n, n0+n) selector of the stacked activations
    n: int                  # total hidden neurons
    n0: int
    W_out_row: np.ndarray   # (1, n_last) output row for the certified output


def build_blocks(net: MlpNetwork, j: int) -> LmiBlocks:
    hidden = net.hidden_weights()
    dims = net.dims
    n0 = dims[0]
    hidden_dims = dims[1:-1]
    n = int(sum(hidden_dims))
    Sigma = np.zeros((n, n0 + n))
    row = 0
    col = 0
    for i, W in enumerate(hidden):
        r, c = W.shape
        Sigma[row:row + r, col:col + c] = W
        row += r
        col += c
    V = np.zeros((n, n0 + n))
    V[:, n0:] = np.eye(n)
    W_out = net.weights[-1]
    if not (0 <= j < W_out.shape[0]):
        raise ConfigurationError(f"output index {j} out of range")
    return LmiBlocks(Sigma=Sigma, V=V, n=n, n0=n0,
                     W_out_row=W_out[j:j + 1, :])


def assemble_lmi(net: MlpNetwork, j: int, L2: float, T: np.ndarray) -> np.ndarray:
    """Matrix whose negative semidefiniteness certifies ``L2`` for output j."""
    T = np.asarray(T, float)
    if np.any(T < 0):
        raise ConfigurationError("multipliers must be nonnegative")
    blocks = build_blocks(net, j)
    if T.shape != (blocks.n,):
        raise ConfigurationError(f"T must have {blocks.n} entries")
    a, b = net.alpha, net.beta
    SV = np.vstack([blocks.Sigma, blocks.V])
    F = np.block([[-2 * a * b * np.diag(T), (a + b) * np.diag(T)],
                  [(a + b) * np.diag(T), -2 * np.diag(T)]])
    Mmat = SV.T @ F @ SV
    n0 = blocks.n0
    n_last = blocks.W_out_row.shape[1]
    Mmat[:n0, :n0] -= L2 * np.eye(n0)
    Mmat[-n_last:, -n_last:] += blocks.W_out_row.T @ blocks.W_out_row
    return 0.5 * (Mmat + Mmat.T)


def trivial_bound(net: MlpNetwork, j: int) -> float:
    """Operator-norm product bound per layer (cross-check oracle)."""
    bound = 1.0
    for W in net.hidden_weights():
        bound *= float(np.linalg.norm(W, 2)) * net.beta
    W_out = net.weights[-1][j:j + 1, :]
    return bound * float(np.linalg.norm(W_out, 2))


def _max_eig(S):
    return float(np.linalg.eigvalsh(S).max())


def _certifies(net, j, L2, T, tol=1e-9):
    return _max_eig(assemble_lmi(net, j, L2, T)) <= tol


def _search_multipliers(net, j, L2, T0, sweeps=200, tol=1e-9):
    """Maximize the negative-definiteness margin over diagonal multipliers.

    Exponentiated-gradient sweeps with a multiplicative line search; the
    inequality is affine in the multipliers so the eigenvector of the
    largest eigenvalue supplies all coordinate derivatives at once.
    """
    blocks = build_blocks(net, j)
    SV = np.vstack([blocks.Sigma, blocks.V])
    a, b = net.alpha, net.beta
    T = np.maximum(np.asarray(T0, float), 1e-8)

    def top_eig(T):
        M = assemble_lmi(net, j, L2, T)
        vals, vecs = np.linalg.eigh(M)
        return vals[-1], vecs[:, -1]

    val, vec = top_eig(T)
    for _ in range(sweeps):
        if val <= tol:
            return T, val
        # d(max_eig)/dT_i = y' dF/dT_i y with y = [Sigma; V] vec
        y = SV @ vec
        y1 = y[:blocks.n]
        y2 = y[blocks.n:]
        grad = -2 * a * b * y1 ** 2 + 2 * (a + b) * y1 * y2 - 2 * y2 ** 2
        step = 1.0
        improved = False
        for _ in range(12):
            T_new = T * np.exp(-step * grad * np.maximum(T, 1e-6)
                               / max(np.abs(grad).max(), 1e-12))
            val_new, vec_new = top_eig(T_new)
            if val_new < val - 1e-14:
                T, val, vec = T_new, val_new, vec_new
                improved = True
                break
            step *= 0.5
        if not improved:
            return T, val
    return T, val


def certify_output(net: MlpNetwork, j: int, L_hi=None, tol_L=1e-3,
                   seed=0, sweeps=200) -> dict:
    """Smallest certified Lipschitz constant for output ``j`` by bisection.

    Conservatism is safe here: a failed multiplier search only ever makes
    the certified constant larger, never unsound.  Falls back to the
    operator-norm product bound when nothing certifies below it.
    """
    triv = trivial_bound(net, j)
    if triv == 0.0:
        return {"L": 0.0, "trivial_bound": 0.0, "certified": True,
                "method": "bisection+multiplier-ascent"}
    hi = (L_hi if L_hi is not None else triv) * (1.0 + 2 * tol_L)
    blocks = build_blocks(net, j)
    rng = np.random.default_rng(seed)
    restarts = [np.ones(blocks.n),
                np.abs(rng.normal(1.0, 0.5, blocks.n)) + 0.1]

    def feasible(L):
        best = None
        for T0 in restarts:
            T, val = _search_multipliers(net, j, L * L, T0, sweeps=sweeps)
            if val <= 1e-9:
                return T
        return None

    T_hi = feasible(hi)
    if T_hi is None:
        return {"L": float(triv), "trivial_bound": float(triv),
                "certified": False, "method": "bisection+multiplier-ascent"}
    lo, up = 0.0, hi
    T_best = T_hi
    while up - lo > tol_L * max(up, 1.0):
        mid = 0.5 * (lo + up)
        T_mid = feasible(mid)
        if T_mid is not None:
            up, T_best = mid, T_mid
        else:
            lo = mid
    return {"L": float(up), "T": T_best, "trivial_bound": float(triv),
            "certified": True, "method": "bisection+multiplier-ascent"}


def output_gradient(net: MlpNetwork, theta, j: int) -> np.ndarray:
    """Input gradient of output j (chain rule through the hidden stack)."""
    from .nets import ACTIVATIONS
    dact = ACTIVATIONS[net.activation][1]
    theta = np.asarray(theta, float)
    s = theta
    pres = []
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = W @ s + b
        pres.append(z)
        s = np.tanh(z)
    g = net.weights[-1][j]
    for W, z in zip(reversed(net.hidden_weights()), reversed(pres)):
        g = (g * dact(z)) @ W
    return g


def empirical_lower_bound(net: MlpNetwork, j: int, box_lo, box_hi,
                          n_samples=100_000, seed=0) -> float:
    """Sampled slope lower bound: random pairs plus gradient norms."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(box_lo, float)
    hi = np.asarray(box_hi, float)
    n_pairs = n_samples // 2
    X = rng.uniform(lo, hi, (n_pairs, lo.size))
    Y = X + rng.normal(0.0, 1e-3, X.shape)
    fx = net.forward_batch(X)[:, j]
    fy = net.forward_batch(Y)[:, j]
    dist = np.linalg.norm(X - Y, axis=1)
    slopes = np.abs(fx - fy) / np.maximum(dist, 1e-12)
    best = float(slopes.max(initial=0.0))
    for _ in range(min(400, n_samples // 32)):
        theta = rng.uniform(lo, hi)
        best = max(best, float(np.linalg.norm(output_gradient(net, theta, j))))
    return best


# ----------------------------------------------------------------------
# safety gate


@dataclass(frozen=True)
class CertifiedBounds:
    """Certified constants against the relaxation caps.

    ``eta_bar`` are the per-output caps already reduced by the approximation
    margin (the conservative variant); ``delta_g_bar`` is the admissible
    obstacle jump and ``delta_x_bar`` the largest one-step input-feature
    shift of the closed loop.
    """

    L: np.ndarray
    eta_bar: np.ndarray
    delta_g_bar: float
    delta_x_bar: float

    def __post_init__(self):
        object.__setattr__(self, "L", np.asarray(self.L, float))
        object.__setattr__(self, "eta_bar", np.asarray(self.eta_bar, float))
        if np.any(self.L < 0):
            raise ConfigurationError("certified constants must be nonnegative")

    @property
    def L_bar(self):
        return self.eta_bar / (self.delta_g_bar + self.delta_x_bar)


def check_safety_bound(bounds: CertifiedBounds):
    """Accept iff every certified constant obeys the cap-derived bound."""
    L_bar = bounds.L_bar
    margins = bounds.L - L_bar
    worst = int(np.argmax(margins))
    if margins[worst] <= 0:
        return ACCEPTED, None
    return REJECTED, (worst, float(margins[worst]))


def max_feature_shift(model, limits, da_cap: float) -> float:
    """Largest one-step move of the network input (gap, v, a).

    Maximized over the vertices of the state/input box, with the
    acceleration coordinates widened by the acceleration slack cap since
    the relaxed closed loop may operate there.
    """
    a_lo = limits.a_min - da_cap
    best = 0.0
    for v in (0.0, limits.v_max):
        for a in (a_lo, limits.a_max):
            for u in (a_lo, limits.a_max):
                x = np.array([0.0, v, a])
                dx = model.step(x, u) - x
                shift = np.array([-dx[0], dx[1], dx[2]])
                best = max(best, float(np.linalg.norm(shift)))
    return best


def certify_network(net: MlpNetwork, delta_bar, eps: float,
                    delta_g_bar: float, delta_x_bar: float,
                    box_lo=None, box_hi=None, tol_L=1e-3, seed=0) -> dict:
    """Certify every output and evaluate the safety gate; returns the
    report that is appended to the network metadata."""
    n_out = net.dims[-1]
    delta_bar = np.asarray(delta_bar, float)[:n_out]
    if box_lo is None:
        box_lo = np.array([0.0, 0.0, -10.0])
        box_hi = np.array([10.0, 6.0, 3.0])
    reports = []
    Ls = []
    for j in range(n_out):
        cert = certify_output(net, j, tol_L=tol_L, seed=seed)
        emp = empirical_lower_bound(net, j, box_lo, box_hi, seed=seed)
        cert["empirical_lower"] = emp
        reports.append(cert)
        Ls.append(cert["L"])
    bounds = CertifiedBounds(L=np.array(Ls), eta_bar=delta_bar - eps,
                             delta_g_bar=delta_g_bar, delta_x_bar=delta_x_bar)
    verdict, detail = check_safety_bound(bounds)
    report = {
        "outputs": [
            {"L": float(r["L"]), "L_bar": float(bounds.L_bar[j]),
             "accepted": bool(r["L"] <= bounds.L_bar[j]),
             "method": r["method"],
             "trivial_bound": float(r["trivial_bound"]),
             "empirical_lower": float(r["empirical_lower"])}
            for j, r in enumerate(reports)],
        "eps": float(eps),
        "delta_g_bar": float(delta_g_bar),
        "delta_x_bar": float(delta_x_bar),
        "verdict": verdict,
    }
    net.meta["certification"] = report
    net.meta["certified_L"] = [float(v) for v in Ls]
    net.meta["epsilon"] = float(eps)
    return report
