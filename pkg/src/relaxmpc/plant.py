"""Plant model, constraints and terminal ingredients for the longitudinal
driving application.

State is ``(p, v, a)`` (position, velocity, acceleration), the input is the
requested acceleration.  Acceleration tracks the request through a
first-order lag; jerk limits are expressed as difference quotients so their
bounds carry physical units (m/s^3).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .qpcore import ConfigurationError, PreconditionError, solve_discrete_lyapunov

N_H_ROWS = 10
# canonical one-sided stage row order; lower-side rows are the relaxable ones
ROW_V_MAX, ROW_V_MIN, ROW_A_MAX, ROW_A_MIN, ROW_U_MAX, ROW_U_MIN, \
    ROW_J_MAX, ROW_J_MIN, ROW_JR_MAX, ROW_JR_MIN = range(N_H_ROWS)


@dataclass(frozen=True)
class LtiModel:
    A: np.ndarray
    B: np.ndarray
    t_s: float

    def __post_init__(self):
        A = np.asarray(self.A, float)
        B = np.asarray(self.B, float).reshape(A.shape[0], -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.t_s <= 0:
            raise ConfigurationError("t_s must be positive")
        # PBH test on marginally stable / unstable modes
        n = A.shape[0]
        for lam in np.linalg.eigvals(A):
            if abs(lam) >= 1.0 - 1e-9:
                M = np.hstack([A - lam * np.eye(n), B])
                if np.linalg.matrix_rank(M) < n:
                    raise ConfigurationError(
                        f"(A, B) not stabilizable: mode {lam} uncontrollable")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ np.atleast_1d(u)


@dataclass(frozen=True)
class VehicleLimits:
    v_max: float = 5.5
    a_min: float = -3.5
    a_max: float = 2.5
    j_min: float = -2.5
    j_max: float = 20.0
    jreq_min: float = -2.5
    jreq_max: float = 20.0

    def __post_init__(self):
        if not (self.a_min < self.a_max and self.j_min < self.j_max
                and self.jreq_min < self.jreq_max and self.v_max > 0):
            raise ConfigurationError("inconsistent limit values")

    def as_dict(self):
        return {k: getattr(self, k) for k in
                ("v_max", "a_min", "a_max", "j_min", "j_max", "jreq_min", "jreq_max")}


def build_vehicle_model(t_acc: float, t_s: float) -> LtiModel:
    """Exact zero-order-hold discretization of the triple-chain model."""
    if t_acc <= 0 or t_s <= 0:
        raise ConfigurationError("t_acc and t_s must be positive")
    Ac = np.array([[0.0, 1.0, 0.0],
                   [0.0, 0.0, 1.0],
                   [0.0, 0.0, -t_acc]])
    Bc = np.array([[0.0], [0.0], [t_acc]])
    aug = np.zeros((4, 4))
    aug[:3, :3] = Ac
    aug[:3, 3:] = Bc
    E = scipy.linalg.expm(aug * t_s)
    return LtiModel(A=E[:3, :3], B=E[:3, 3:], t_s=t_s)


@dataclass(frozen=True)
class StageConstraints:
    """Known stage rows ``C_h x + D_h u + D_h_prev u_prev <= b_h`` plus the
    unknown-constraint template ``C_g x + D_g u - b_g <= 0``."""

    C_h: np.ndarray
    D_h: np.ndarray
    D_h_prev: np.ndarray
    b_h: np.ndarray
    C_g: np.ndarray
    D_g: np.ndarray
    limits: VehicleLimits

    def evaluate_h(self, x, u, u_prev=0.0):
        u = float(np.atleast_1d(u)[0])
        return (self.C_h @ np.asarray(x, float) + self.D_h[:, 0] * u
                + self.D_h_prev[:, 0] * float(u_prev) - self.b_h)


def build_vehicle_constraints(limits: VehicleLimits, model: LtiModel) -> StageConstraints:
    t_s = model.t_s
    A, B = model.A, model.B
    C = np.zeros((N_H_ROWS, 3))
    D = np.zeros((N_H_ROWS, 1))
    Dp = np.zeros((N_H_ROWS, 1))
    b = np.zeros(N_H_ROWS)

    C[ROW_V_MAX, 1] = 1.0
    b[ROW_V_MAX] = limits.v_max
    C[ROW_V_MIN, 1] = -1.0
    b[ROW_V_MIN] = 0.0
    C[ROW_A_MAX, 2] = 1.0
    b[ROW_A_MAX] = limits.a_max
    C[ROW_A_MIN, 2] = -1.0
    b[ROW_A_MIN] = -limits.a_min
    D[ROW_U_MAX, 0] = 1.0
    b[ROW_U_MAX] = limits.a_max
    D[ROW_U_MIN, 0] = -1.0
    b[ROW_U_MIN] = -limits.a_min
    # jerk rows: j = ((A x + B u) - x)[2] / t_s
    cj = (A[2] - np.eye(3)[2]) / t_s
    dj = B[2, 0] / t_s
    C[ROW_J_MAX] = cj
    D[ROW_J_MAX, 0] = dj
    b[ROW_J_MAX] = limits.j_max
    C[ROW_J_MIN] = -cj
    D[ROW_J_MIN, 0] = -dj
    b[ROW_J_MIN] = -limits.j_min
    # requested jerk rows: (u_n - u_{n-1}) / t_s, coupled across stages
    D[ROW_JR_MAX, 0] = 1.0 / t_s
    Dp[ROW_JR_MAX, 0] = -1.0 / t_s
    b[ROW_JR_MAX] = limits.jreq_max
    D[ROW_JR_MIN, 0] = -1.0 / t_s
    Dp[ROW_JR_MIN, 0] = 1.0 / t_s
    b[ROW_JR_MIN] = -limits.jreq_min

    return StageConstraints(
        C_h=C, D_h=D, D_h_prev=Dp, b_h=b,
        C_g=np.array([[1.0, 0.0, 0.0]]), D_g=np.zeros((1, 1)),
        limits=limits)


def evaluate_g(x, u, b_g: float, c: StageConstraints) -> float:
    """Signed obstacle clearance; <= 0 means safe."""
    u = np.atleast_1d(u)
    return float(c.C_g[0] @ np.asarray(x, float) + c.D_g[0] @ u - b_g)


@dataclass(frozen=True)
class DisturbanceTrajectory:
    """Predicted obstacle positions for steps ``k .. k+M-1``."""

    values: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, float))

    @property
    def horizon(self):
        return self.values.shape[0]


def compute_delta_g(prev: DisturbanceTrajectory, next: DisturbanceTrajectory) -> np.ndarray:
    """Prediction-tightening vector over the overlapping absolute steps.

    Positive entries mean the new prediction is more restrictive.  Accepts
    either the successive pair (next.k == prev.k + 1) or two predictions
    made at the same step.
    """
    if prev.horizon != next.horizon:
        raise ConfigurationError("horizon length mismatch")
    shift = next.k - prev.k
    if shift == 0:
        return prev.values - next.values
    if shift == 1:
        return prev.values[1:] - next.values[:-1]
    raise ConfigurationError(f"trajectories misaligned: k {prev.k} vs {next.k}")


@dataclass(frozen=True)
class ReferenceTrajectory:
    r_x: np.ndarray          # (T+1, 3)
    r_u: np.ndarray          # (T, 1)

    def __post_init__(self):
        object.__setattr__(self, "r_x", np.asarray(self.r_x, float))
        object.__setattr__(self, "r_u", np.asarray(self.r_u, float).reshape(-1, 1))

    @property
    def length(self):
        return self.r_u.shape[0]

    def validate(self, model: LtiModel, constraints: StageConstraints, tol=1e-12):
        for n in range(self.length):
            nxt = model.step(self.r_x[n], self.r_u[n])
            if np.abs(nxt - self.r_x[n + 1]).max() > tol:
                raise ConfigurationError(f"reference dynamics residual at step {n}")
            u_prev = self.r_u[n - 1, 0] if n else self.r_u[0, 0]
            if constraints.evaluate_h(self.r_x[n], self.r_u[n, 0], u_prev).max() > 1e-9:
                raise ConfigurationError(f"reference violates known constraints at step {n}")


def build_cruise_reference(model: LtiModel, p0: float, v_ref: float, length: int) -> ReferenceTrajectory:
    """Constant-speed reference from the initial position; zero input."""
    t = np.arange(length + 1) * model.t_s
    r_x = np.stack([p0 + v_ref * t, np.full(length + 1, v_ref),
                    np.zeros(length + 1)], axis=1)
    r_u = np.zeros((length, 1))
    return ReferenceTrajectory(r_x=r_x, r_u=r_u)


# ----------------------------------------------------------------------
# Stopping profiles and the braking envelope


def rampout_velocity_loss(a0: float, model: LtiModel, limits: VehicleLimits,
                          u0=None, u_cap=None, max_steps=400) -> float:
    """Velocity lost while steering acceleration from ``a0`` up to zero.

    With ``u0=None`` the request history is ignored and only the absolute
    caps (jerk row, input box) limit the ramp-out: a valid lower bound on
    the loss of any feasible continuation, used for the envelope cuts.
    With a concrete ``u0`` the request-rate chain applies and the request is
    additionally capped at ``u_cap`` so the landing leaves no positive
    request to unwind; this is the executable-policy variant.
    """
    A, B = model.A, model.B
    t_s = model.t_s
    e = A[2, 2]
    gain = B[2, 0]
    a = float(a0)
    if a >= 0:
        return 0.0
    chain = u0 is not None
    u = float(u0) if chain else limits.a_max
    if u_cap is None:
        u_cap = 0.3 if chain else limits.a_max
    v_loss = 0.0
    for _ in range(max_steps):
        # jerk row: (e*a + gain*u - a)/t_s <= j_max
        u_new = min(limits.a_max, u_cap,
                    (limits.j_max * t_s - (e - 1.0) * a) / gain)
        if chain:
            u_new = min(u_new, u + limits.jreq_max * t_s)
        u = u_new
        a_next = e * a + gain * u
        if a_next > 0.0:
            u = -e * a / gain
            a_next = 0.0
        v_loss -= A[1, 2] * a + B[1, 0] * u   # exact discrete velocity change
        a = a_next
        if a >= -1e-9:
            break
    return max(v_loss, 0.0)


def rampdown_velocity_gain(a0: float, model: LtiModel, limits: VehicleLimits,
                           max_steps=400) -> float:
    """Velocity gained while steering a positive acceleration down to zero
    as fast as the jerk and input boxes allow (history-free bound)."""
    A, B = model.A, model.B
    t_s = model.t_s
    e = A[2, 2]
    gain = B[2, 0]
    a = float(a0)
    if a <= 0:
        return 0.0
    v_gain = 0.0
    for _ in range(max_steps):
        u = max(limits.a_min, (limits.j_min * t_s - (e - 1.0) * a) / gain)
        a_next = e * a + gain * u
        if a_next < 0.0:
            u = -e * a / gain
            a_next = 0.0
        v_gain += A[1, 2] * a + B[1, 0] * u
        a = a_next
        if a <= 1e-9:
            break
    return max(v_gain, 0.0)


def braking_envelope_cuts(model: LtiModel, limits: VehicleLimits,
                          a_samples=(-8.0, -6.0, -4.0, -2.0)) -> np.ndarray:
    """Tangent cuts ``v >= c0 + c1*a`` under-approximating the ramp-out
    velocity loss, valid wherever the loss curve is convex."""
    cuts = []
    h = 0.05
    for a0 in a_samples:
        f0 = rampout_velocity_loss(a0, model, limits, u0=None)
        fp = (rampout_velocity_loss(a0 + h, model, limits, u0=None)
              - rampout_velocity_loss(a0 - h, model, limits, u0=None)) / (2 * h)
        c1 = fp
        c0 = f0 - fp * a0
        cuts.append((c0, c1))
    cuts = np.array(cuts)
    # convexity slack: make sure every cut lower-bounds the sampled curve
    grid = np.linspace(min(a_samples) - 1.0, 0.0, 120)
    env = np.array([rampout_velocity_loss(a, model, limits, u0=None) for a in grid])
    for i, (c0, c1) in enumerate(cuts):
        gap = (c0 + c1 * grid) - env
        overshoot = gap.max()
        if overshoot > 0:
            cuts[i, 0] -= overshoot + 1e-9
    return cuts


def speedup_envelope_cuts(model: LtiModel, limits: VehicleLimits,
                          a_samples=(1.0, 2.0)) -> np.ndarray:
    """Tangent cuts ``v <= v_max - (g0 + g1*a)`` bounding the unavoidable
    velocity gained while a positive acceleration ramps out."""
    cuts = []
    h = 0.05
    for a0 in a_samples:
        f0 = rampdown_velocity_gain(a0, model, limits)
        fp = (rampdown_velocity_gain(a0 + h, model, limits)
              - rampdown_velocity_gain(a0 - h, model, limits)) / (2 * h)
        cuts.append((f0 - fp * a0, fp))
    cuts = np.array(cuts)
    grid = np.linspace(0.0, max(a_samples) + 0.6, 80)
    env = np.array([rampdown_velocity_gain(a, model, limits) for a in grid])
    for i, (c0, c1) in enumerate(cuts):
        overshoot = ((c0 + c1 * grid) - env).max()
        if overshoot > 0:
            cuts[i, 0] -= overshoot + 1e-9
    return cuts


def stopping_policy_step(model: LtiModel, limits: VehicleLimits, x, u,
                         u_cap: float = 0.3):
    """One step of the greedy stop-and-settle policy.

    Brakes as hard as the boxes allow while the jerk-limited ramp-out stays
    feasible, then replays that ramp-out and settles the lag state on zero.
    Returns the next request, or None when no admissible input exists.
    """
    t_s = model.t_s
    e = model.A[2, 2]
    gain = model.B[2, 0]
    p, v, a = np.asarray(x, float)
    u = float(u)
    u_try = max(limits.a_min, u + limits.jreq_min * t_s,
                (limits.j_min * t_s - (e - 1.0) * a) / gain)
    if u_try > min(limits.a_max, u + limits.jreq_max * t_s) + 1e-12:
        return None
    xn = model.step(np.asarray(x, float), u_try)
    if xn[1] >= rampout_velocity_loss(xn[2], model, limits, u0=u_try) \
            and xn[1] >= 0.0:
        return u_try
    if a < -1e-9:
        u_new = min(limits.a_max, u_cap, u + limits.jreq_max * t_s,
                    (limits.j_max * t_s - (e - 1.0) * a) / gain)
        if e * a + gain * u_new > 0.0:
            u_new = -e * a / gain
        return u_new
    # settle the lag state toward zero within the request-rate box
    u_new = -e * a / gain
    lo = max(limits.a_min, u + limits.jreq_min * t_s)
    hi = min(limits.a_max, u + limits.jreq_max * t_s)
    return float(np.clip(u_new, lo, hi))


def min_stop_position(model: LtiModel, limits: VehicleLimits, x0,
                      dj: float = 0.0, da: float = 0.0, u_prev=None,
                      horizon: int = 100):
    """Greedy near-minimal stopping position (an upper bound on the true
    minimum).  Brakes as hard as the relaxed boxes allow for as long as the
    jerk-limited ramp-out to ``(v, a) = (0, 0)`` stays feasible, then replays
    that ramp-out; residual creep is removed by repeating shallower cycles.
    Returns the final position, or None when no admissible stop fits the
    horizon."""
    lims = replace(limits, a_min=limits.a_min - da, j_min=limits.j_min - dj,
                   jreq_min=limits.jreq_min - dj)
    A, B = model.A, model.B
    t_s = model.t_s
    e = A[2, 2]
    gain = B[2, 0]
    x = np.asarray(x0, float).copy()
    u = float(x[2]) if u_prev is None else float(u_prev)
    u_cap = 0.3
    for _ in range(horizon):
        p, v, a = x
        if v <= 1e-6 and abs(a) <= 1e-6:
            return float(p)
        # preferred move: brake as hard as the boxes allow
        u_try = max(lims.a_min, u + lims.jreq_min * t_s,
                    (lims.j_min * t_s - (e - 1.0) * a) / gain)
        if u_try > min(lims.a_max, u + lims.jreq_max * t_s) + 1e-12:
            return None
        xn = model.step(x, u_try)
        if xn[1] >= rampout_velocity_loss(xn[2], model, lims, u0=u_try) \
                and xn[1] >= 0.0:
            x, u = xn, u_try
            continue
        # otherwise one step of the executable ramp-out policy
        if a < -1e-9:
            u = min(lims.a_max, u_cap, u + lims.jreq_max * t_s,
                    (lims.j_max * t_s - (e - 1.0) * a) / gain)
            a_next = e * a + gain * u
            if a_next > 0.0:
                u = -e * a / gain
        else:
            u = -e * a / gain   # hold the lag state at zero, coast
        x = model.step(x, u)
    p, v, a = x
    if v <= 2e-3 and abs(a) <= 5e-2:
        return float(p + 2.0 * v)   # bound on the remaining creep
    return None


# ----------------------------------------------------------------------
# Terminal ingredients


@dataclass(frozen=True)
class TerminalIngredients:
    """LQR terminal gain/weight plus polyhedral terminal sets.

    ``X_rs_rows``/``X_rs_rhs`` describe the stabilizing set (on absolute
    states, with the velocity/acceleration boxes and braking-envelope cuts);
    ``relax_slack_idx`` marks rows that soften with a slack coordinate in
    the extended set; ``Xsafe`` is the full-stop set (v = a = 0 plus the
    boxes)."""

    K_term: np.ndarray          # (1, 3) feedback on the state deviation
    P_term: np.ndarray          # (3, 3) terminal tracking weight
    X_rs_rows: np.ndarray       # (n_r, 3) rows G with G x <= rhs
    X_rs_rhs: np.ndarray
    relax_slack_idx: np.ndarray  # (n_r,) slack coordinate or -1
    Xsafe_eq_rows: np.ndarray   # (2, 3): v = 0, a = 0
    model: LtiModel
    limits: VehicleLimits

    def contains(self, x, tol=1e-9) -> bool:
        return bool((self.X_rs_rows @ np.asarray(x, float) <= self.X_rs_rhs + tol).all())

    def in_safe_set(self, x, tol=1e-9) -> bool:
        x = np.asarray(x, float)
        if np.abs(self.Xsafe_eq_rows @ x).max() > tol:
            return False
        lims = self.limits
        return bool(-tol <= x[1] <= lims.v_max + tol
                    and lims.a_min - tol <= x[2] <= lims.a_max + tol)

    def kappa(self, x, r_x, r_u, u_prev=None) -> float:
        """Terminal law: LQR tracking clamped into the input/jerk boxes.

        The law is a memoryless state feedback; pass ``u_prev`` to clamp the
        request rate as well (the set-invariance analysis does not).
        """
        dx = np.asarray(x, float) - np.asarray(r_x, float)
        u = float(np.atleast_1d(r_u)[0]) - float((self.K_term @ dx)[0])
        lims = self.limits
        t_s = self.model.t_s
        e = self.model.A[2, 2]
        gain = self.model.B[2, 0]
        a = float(x[2])
        lo = max(lims.a_min, (lims.j_min * t_s - (e - 1.0) * a) / gain)
        hi = min(lims.a_max, (lims.j_max * t_s - (e - 1.0) * a) / gain)
        if u_prev is not None:
            lo = max(lo, float(u_prev) + lims.jreq_min * t_s)
            hi = min(hi, float(u_prev) + lims.jreq_max * t_s)
        return float(np.clip(u, lo, min(hi, max(lo, hi))))


def build_terminal_ingredients(model: LtiModel, constraints: StageConstraints,
                               q_state=(0.0, 10.0, 1.0), r_input=1.0,
                               env_samples=(-8.0, -6.0, -4.0, -2.0)) -> TerminalIngredients:
    limits = constraints.limits
    # LQR on the (v, a) subsystem; position deviation carries no weight
    A_sub = model.A[1:, 1:]
    B_sub = model.B[1:]
    Q_sub = np.diag(q_state[1:])
    R = np.array([[r_input]])
    try:
        P_sub = scipy.linalg.solve_discrete_are(A_sub, B_sub, Q_sub, R)
    except Exception as exc:  # pragma: no cover - scipy raises on bad data
        raise ConfigurationError(f"Riccati solve failed: {exc}")
    K_sub = np.linalg.solve(R + B_sub.T @ P_sub @ B_sub, B_sub.T @ P_sub @ A_sub)
    K = np.zeros((1, 3))
    K[0, 1:] = K_sub
    P = np.zeros((3, 3))
    P[1:, 1:] = P_sub

    cuts = braking_envelope_cuts(model, limits, env_samples)
    up_cuts = speedup_envelope_cuts(model, limits)
    rows = [np.array([0.0, 1.0, 0.0]),     # v <= v_max
            np.array([0.0, -1.0, 0.0]),    # v >= 0
            np.array([0.0, 0.0, 1.0]),     # a <= a_max
            np.array([0.0, 0.0, -1.0])]    # a >= a_min  (softens with da)
    rhs = [limits.v_max, 0.0, limits.a_max, -limits.a_min]
    relax = [-1, -1, -1, 1]
    for c0, c1 in cuts:
        rows.append(np.array([0.0, -1.0, c1]))   # v >= c0 + c1 a
        rhs.append(-c0)
        relax.append(-1)
    for c0, c1 in up_cuts:
        rows.append(np.array([0.0, 1.0, c1]))    # v <= v_max - (c0 + c1 a)
        rhs.append(limits.v_max - c0)
        relax.append(-1)
    return TerminalIngredients(
        K_term=K, P_term=P,
        X_rs_rows=np.array(rows), X_rs_rhs=np.array(rhs),
        relax_slack_idx=np.array(relax, dtype=int),
        Xsafe_eq_rows=np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        model=model, limits=limits)
