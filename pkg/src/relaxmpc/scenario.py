"""Closed-loop receding-horizon simulation of the crosswalk scenario.

Implements the priority-driven controller (consistency check, learned
infeasibility indicators, learned slack prediction, mode fallthrough), the
exact two-problem pipeline it approximates, and the exact-penalty softened
baseline, with CSV logging of every step.

Two closed-loop safeguards keep the receding horizon numerically robust
without touching the theory: when every solve of a step fails, the stored
feasible plan is shifted one step (that plan is exactly the recursive-
feasibility certificate, ending in the full-stop safe set); and once the
vehicle is parked at the clearance boundary the stop is held directly,
since millimeter boundary-riding solves are numerically meaningless.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import plant, qpcore, smpc
from .nets import MlpNetwork
from .qpcore import ConfigurationError
from .smpc import (ConsistencyGate, N_DELTA, check_consistency,
                   expand_slack_sequence)

MODE_NOMINAL = 0
LOG_COLUMNS = "t,p,v,a,a_req,j,j_req,p_obs,delta_j,delta_a,mode,F1,F2,qp_status,solve_time_ms"


@dataclass(frozen=True)
class ScenarioConfig:
    t_acc: float = 1.8
    t_s: float = 0.05
    N: int = 20
    M: int = 100
    limits: plant.VehicleLimits = field(default_factory=plant.VehicleLimits)
    initial_state: tuple = (0.0, 5.0, 0.0)
    v_ref: float = 5.0
    obstacle_schedule: tuple = ((0.0, 18.4),)
    events: tuple = ((2.5, 1.0),)
    duration: float = 8.0
    stop_margin: float = 0.5
    delta_bar: tuple = (5.0, 6.0)
    q_state: tuple = (0.0, 10.0, 1.0)
    r_input: float = 1.0
    baseline_designs: dict = field(default_factory=lambda: {
        "design1": (1e1, 1.5e3), "design2": (1e5, 1e1)})
    seed: int = 0
    timing: bool = True
    priority_order: str = "narrative"

    def __post_init__(self):
        times = [t for t, _ in self.obstacle_schedule]
        if sorted(times) != times or len(set(times)) != len(times):
            raise ConfigurationError("obstacle schedule times must strictly increase")
        if self.priority_order not in ("narrative", "literal"):
            raise ConfigurationError("priority_order must be narrative|literal")

    @property
    def n_steps(self):
        return int(round(self.duration / self.t_s))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        kw = {}
        model = raw.get("model", {})
        kw["t_acc"] = model.get("t_acc", 1.8)
        kw["t_s"] = model.get("t_s", 0.05)
        hor = raw.get("horizons", {})
        kw["N"] = hor.get("N", 20)
        kw["M"] = hor.get("M", 100)
        if "limits" in raw:
            kw["limits"] = plant.VehicleLimits(**raw["limits"])
        for key in ("initial_state", "v_ref", "duration", "stop_margin",
                    "delta_bar", "q_state", "r_input", "seed", "timing",
                    "priority_order"):
            if key in raw:
                kw[key] = tuple(raw[key]) if isinstance(raw[key], list) else raw[key]
        obstacle = raw.get("obstacle", {})
        if "schedule" in obstacle:
            kw["obstacle_schedule"] = tuple((float(t), float(p))
                                            for t, p in obstacle["schedule"])
        if "events" in obstacle:
            kw["events"] = tuple((float(t), float(j))
                                 for t, j in obstacle["events"])
        if "baseline" in raw:
            kw["baseline_designs"] = {k: tuple(v) for k, v in raw["baseline"].items()}
        return cls(**kw)


@dataclass
class StepRecord:
    t: float
    x: np.ndarray
    u: float
    j: float
    j_req: float
    p_obs: float
    delta_j: float
    delta_a: float
    mode_index: int
    F1: int
    F2: int
    qp_status: str
    solve_time_ms: float


@dataclass
class ScenarioLog:
    records: list = field(default_factory=list)
    failed: bool = False
    failure_reason: str = ""

    def column(self, name):
        idx = LOG_COLUMNS.split(",").index(name)
        return np.array([_record_row(r)[idx] for r in self.records])

    def applied_inputs(self):
        return np.array([r.u for r in self.records])


def _record_row(r: StepRecord):
    return (r.t, r.x[0], r.x[1], r.x[2], r.u, r.j, r.j_req, r.p_obs,
            r.delta_j, r.delta_a, r.mode_index, r.F1, r.F2, r.qp_status,
            r.solve_time_ms)


def emit_log(log: ScenarioLog, path, timing=True):
    """CSV dump, one row per control step, 9 significant digits, LF."""
    with open(path, "w", newline="\n") as fh:
        fh.write(LOG_COLUMNS + "\n")
        for r in log.records:
            row = _record_row(r)
            fh.write(
                "%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d,%d,%d,%s,%.9g\n"
                % (*row[:10], row[10], row[11], row[12], row[13],
                   row[14] if timing else 0.0))


def read_log(path):
    cols = LOG_COLUMNS.split(",")
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_COLUMNS:
            raise ConfigurationError(f"unexpected log header: {header}")
        for line in fh:
            parts = line.strip().split(",")
            rows.append([parts[i] if cols[i] == "qp_status" else float(parts[i])
                         for i in range(len(cols))])
    return rows


# ----------------------------------------------------------------------


class ScenarioRig:
    """Everything a closed-loop run needs, built once from the config."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.model = plant.build_vehicle_model(cfg.t_acc, cfg.t_s)
        self.constraints = plant.build_vehicle_constraints(cfg.limits, self.model)
        self.terminal = plant.build_terminal_ingredients(
            self.model, self.constraints, q_state=cfg.q_state,
            r_input=cfg.r_input)
        self.relax = smpc.default_relaxation(delta_bar=cfg.delta_bar)
        length = cfg.n_steps + cfg.M + 2
        self.reference = plant.build_cruise_reference(
            self.model, cfg.initial_state[0], cfg.v_ref, length)
        self.family = smpc.SmpcFamily(
            self.model, self.constraints, self.terminal, self.relax,
            cfg.N, cfg.M, self.reference, q_state=cfg.q_state,
            r_input=cfg.r_input, stop_margin=cfg.stop_margin)

    def obstacle_position(self, t: float, include_events=True) -> float:
        pos = self.cfg.obstacle_schedule[0][1]
        for ts, p in self.cfg.obstacle_schedule:
            if t >= ts - 1e-9:
                pos = p
        if include_events:
            for ts, jump in self.cfg.events:
                if t >= ts - 1e-9:
                    pos -= jump
        return pos

    def disturbance(self, k: int, position: float) -> plant.DisturbanceTrajectory:
        return plant.DisturbanceTrajectory(np.full(self.cfg.M, position), k=k)

    def nominal_margin(self, x, u_prev, p_obs) -> float:
        """Clearance beyond a conservatively estimated nominal stop."""
        stop = plant.min_stop_position(self.model, self.cfg.limits, x,
                                       u_prev=u_prev, horizon=self.cfg.M)
        if stop is None:
            return -np.inf
        return (p_obs - self.cfg.stop_margin) - stop

    def parked(self, x, u_prev, p_obs) -> bool:
        """Maneuver complete: at rest next to (or anywhere before) the
        clearance boundary with the request settled."""
        return (x[1] <= 2e-3 and abs(x[2]) <= 2e-2 and abs(u_prev) <= 5e-2
                and x[0] - p_obs <= -self.cfg.stop_margin / 2)

    def hold_input(self, x, u_prev) -> float:
        u = plant.stopping_policy_step(self.model, self.cfg.limits, x, u_prev)
        return 0.0 if u is None else float(u)


@dataclass
class NetBundle:
    """Trained regressors/classifiers per mode plus certified constants."""

    regressors: dict
    classifiers: dict
    eps: dict
    thresholds: dict
    gate: ConsistencyGate

    @classmethod
    def load(cls, paths: dict, delta_bar):
        regs, clss, eps, thr = {}, {}, {}, {}
        L_all, eta_all = [], []
        for mode, p in paths["regressors"].items():
            net = MlpNetwork.from_json(p)
            regs[int(mode)] = net
            eps[int(mode)] = float(net.meta.get("epsilon", 0.0))
            cert = net.meta.get("certification")
            if cert is None or cert.get("verdict") != "Accepted":
                raise ConfigurationError(
                    f"regressor for mode {mode} lacks an accepted certificate")
            n_out = net.dims[-1]
            L_all.extend(net.meta["certified_L"])
            eta_all.extend(np.asarray(delta_bar, float)[:n_out] - eps[int(mode)])
        for mode, p in paths["classifiers"].items():
            net = MlpNetwork.from_json(p)
            clss[int(mode)] = net
            thr[int(mode)] = float(net.meta.get("threshold", 0.5))
        gate = ConsistencyGate(eta_bar=np.array(eta_all), eps=0.0,
                               lipschitz=np.array(L_all))
        return cls(regressors=regs, classifiers=clss, eps=eps,
                   thresholds=thr, gate=gate)


def _theta(x, p_obs):
    return np.array([p_obs - x[0], x[1], x[2]])


def _jerks(model, x, u, x_next, u_prev):
    j = (x_next[2] - x[2]) / model.t_s
    j_req = (u - u_prev) / model.t_s
    return j, j_req


class _Loop:
    """Shared stepping state: plant propagation, logging, plan continuation."""

    def __init__(self, rig: ScenarioRig, log: ScenarioLog):
        self.rig = rig
        self.log = log
        self.x = np.array(rig.cfg.initial_state, float)
        self.u_prev = float(rig.cfg.initial_state[2])
        self.stored_plan = None
        self.stored_at = -1

    def parked_hold(self, k, p_obs, t0):
        """Hold a completed stop without solving."""
        rig = self.rig
        if not rig.parked(self.x, self.u_prev, p_obs):
            return False
        u = rig.hold_input(self.x, self.u_prev)
        self.emit(k, p_obs, u, MODE_NOMINAL, np.zeros(N_DELTA), {}, "Parked",
                  (time.perf_counter() - t0) * 1e3)
        return True

    def shift_stored(self, k, p_obs, t0, flags):
        """Continue the last feasible plan when every solve failed; its tail
        is exactly the recursive-feasibility certificate."""
        if self.stored_plan is None:
            return False
        idx = k - self.stored_at
        if idx >= self.rig.cfg.M:
            u = self.rig.hold_input(self.x, self.u_prev)
        else:
            u = float(self.stored_plan.u_seq[idx])
        self.emit(k, p_obs, u, MODE_NOMINAL, np.zeros(N_DELTA), flags,
                  "Shifted", (time.perf_counter() - t0) * 1e3)
        return True

    def apply(self, k, p_obs, plan, mode_used, flags, t0):
        self.stored_plan = plan
        self.stored_at = k
        self.emit(k, p_obs, float(plan.u_seq[0]), mode_used,
                  plan.delta_seq[0], flags, plan.status,
                  (time.perf_counter() - t0) * 1e3)

    def emit(self, k, p_obs, u, mode_used, delta, flags, status, dt_ms):
        rig = self.rig
        t = k * rig.cfg.t_s
        x_next = rig.model.step(self.x, u)
        j, j_req = _jerks(rig.model, self.x, u, x_next, self.u_prev)
        self.log.records.append(StepRecord(
            t=t, x=self.x.copy(), u=float(u), j=j, j_req=j_req, p_obs=p_obs,
            delta_j=float(delta[0]), delta_a=float(delta[1]),
            mode_index=mode_used, F1=flags.get(0, 0), F2=flags.get(1, 0),
            qp_status=status, solve_time_ms=dt_ms))
        self.x = x_next
        self.u_prev = float(u)


def run_algorithm1(cfg: ScenarioConfig, bundle: NetBundle,
                   rig: ScenarioRig = None,
                   jump_sampler=None, seed=None) -> ScenarioLog:
    """Priority-driven soft-constrained controller.

    Per step: consistency check on the obstacle prediction; the nominal
    problem while unrelaxed; otherwise learned indicators pick the softest
    sufficient mode, the learned slacks (plus the error margin) parameterize
    the relaxed problem, and infeasibility falls through to the next mode.
    ``jump_sampler(loop, p_obs, rng)`` makes the obstacle schedule random
    (the recursive-feasibility soak).
    """
    rig = rig or ScenarioRig(cfg)
    fam = rig.family
    log = ScenarioLog()
    loop = _Loop(rig, log)
    rng = np.random.default_rng(seed)
    prev_bg = None
    theta_prev = None
    relaxed = False
    n_modes = rig.relax.n_modes
    order = list(range(n_modes))
    if cfg.priority_order == "literal":
        order = order[::-1]
    p_obs_rand = rig.obstacle_position(0.0, include_events=False)

    for k in range(cfg.n_steps):
        t = k * cfg.t_s
        if jump_sampler is None:
            p_obs = rig.obstacle_position(t)
        else:
            p_obs_rand -= jump_sampler(rig, bundle, loop.x, loop.u_prev,
                                       p_obs_rand, rng)
            p_obs = p_obs_rand
        bg = rig.disturbance(k, p_obs)
        t0 = time.perf_counter()
        if loop.parked_hold(k, p_obs, t0):
            prev_bg, theta_prev = bg, _theta(loop.x, p_obs)
            continue
        flags = {i: 0 for i in range(n_modes)}
        plan = None
        mode_used = MODE_NOMINAL

        if prev_bg is None:
            branch = "nominal"
        else:
            shift = float(np.linalg.norm(_theta(loop.x, p_obs) - theta_prev))
            res = check_consistency(prev_bg, bg, bundle.gate, shift)
            if res.kind == "consistent":
                branch = "relaxed" if relaxed else "nominal"
            elif rig.nominal_margin(loop.x, loop.u_prev, p_obs) > 0.5:
                # jump absorbed by the standing margin: no relaxation needed
                branch = "relaxed" if relaxed else "nominal"
            elif res.kind == "relaxable":
                branch = "relaxed"
            else:
                log.failed = True
                log.failure_reason = (
                    f"step {k}: tightening {res.delta_norm:.3f} exceeds the"
                    f" admissible bound {res.bound:.3f}")
                break

        if branch == "nominal":
            plan = fam.solve_fixed(loop.x, bg.values, k=k, u_prev=loop.u_prev)
            if plan.feasible:
                relaxed = False
            else:
                plan = None
                branch = "relaxed"

        if branch == "relaxed":
            relaxed = True
            theta = _theta(loop.x, p_obs)
            for i in range(n_modes):
                flags[i] = _indicator(rig, bundle, i, theta, loop.x)
            # once the softest mode's predicted relaxation has decayed, probe
            # the unrelaxed problem and leave the relaxation regime
            if flags[order[0]] == 0:
                raw = bundle.regressors[order[0]].forward_batch(theta[None, :])[0]
                if float(np.abs(raw).max()) < 0.05:
                    cand = fam.solve_fixed(loop.x, bg.values, k=k,
                                           u_prev=loop.u_prev)
                    if cand.feasible:
                        plan = cand
                        mode_used = MODE_NOMINAL
                        relaxed = False
                        flags = {i: 0 for i in range(n_modes)}
            if plan is None:
                for flag_pass in (0, 1):
                    for i in order:
                        if flags[i] != flag_pass:
                            continue
                        cand = _solve_learned(rig, bundle, i, theta, loop.x,
                                              bg, k, loop.u_prev)
                        if cand is not None and cand.feasible:
                            plan = cand
                            mode_used = i + 1
                            break
                    if plan is not None:
                        break

        if plan is None:
            if loop.shift_stored(k, p_obs, t0, flags):
                prev_bg, theta_prev = bg, _theta(loop.x, p_obs)
                continue
            log.failed = True
            log.failure_reason = f"step {k}: no relaxation mode is feasible"
            break
        theta_prev = _theta(loop.x, p_obs)
        loop.apply(k, p_obs, plan, mode_used, flags, t0)
        prev_bg = bg
    return log


def _indicator(rig, bundle, mode, theta, x):
    """Learned infeasibility flag with the structural guard.

    A state already violating a row the mode cannot soften makes the mode
    infeasible without consulting the network.
    """
    E = rig.relax.E_list[mode]
    lims = rig.cfg.limits
    if E[plant.ROW_A_MIN].sum() == 0 and x[2] < lims.a_min - 1e-9:
        return 1
    net = bundle.classifiers[mode]
    p_feasible = float(net.forward_batch(theta[None, :])[0, 0])
    return 0 if p_feasible >= bundle.thresholds[mode] else 1


def _solve_learned(rig, bundle, mode, theta, x, bg, k, u_prev):
    net = bundle.regressors[mode]
    eps = bundle.eps[mode]
    raw = net.forward_batch(theta[None, :])[0]
    delta_bar = rig.relax.delta_bar
    delta_hat = np.zeros(N_DELTA)
    delta_hat[:raw.shape[0]] = raw
    delta_hat = np.clip(delta_hat, 0.0, np.maximum(delta_bar - eps, 0.0))
    inflated = delta_hat + eps * (np.arange(N_DELTA) < net.dims[-1])
    seq = expand_slack_sequence(inflated, rig.cfg.N, rig.cfg.M)
    return rig.family.solve_fixed(x, bg.values, k=k, u_prev=u_prev,
                                  slack_seq=seq, mode=mode)


def run_responsive_exact(cfg: ScenarioConfig, rig: ScenarioRig = None) -> ScenarioLog:
    """Exact two-problem pipeline: per step the minimal-relaxation problem
    (switching modes on infeasibility) followed by the responsive problem
    with the optimal slacks."""
    rig = rig or ScenarioRig(cfg)
    fam = rig.family
    log = ScenarioLog()
    loop = _Loop(rig, log)
    n_modes = rig.relax.n_modes

    for k in range(cfg.n_steps):
        t = k * cfg.t_s
        p_obs = rig.obstacle_position(t)
        bg = rig.disturbance(k, p_obs)
        t0 = time.perf_counter()
        if loop.parked_hold(k, p_obs, t0):
            continue
        flags = {}
        plan = None
        mode_used = 0
        for i in range(n_modes):
            delta, _ = fam.solve_min_uniform_relaxation(
                i, loop.x, bg.values, u_prev=loop.u_prev)
            flags[i] = 0 if delta is not None else 1
            if delta is None:
                continue
            # cushion by the slack-solve precision so the handover problem
            # is not marginally infeasible at the numerical boundary; only
            # coordinates the mode actually softens get the cushion
            mask = (rig.relax.E_list[i].sum(axis=0) > 0).astype(float)
            cushioned = np.minimum(delta + 2e-2 * mask,
                                   np.asarray(cfg.delta_bar, float))
            plan = fam.solve_fixed(loop.x, bg.values, k=k, u_prev=loop.u_prev,
                                   slack_seq=cushioned, mode=i)
            if plan.feasible:
                mode_used = i + 1
                break
            plan = None
        if plan is None:
            if loop.shift_stored(k, p_obs, t0, flags):
                continue
            log.failed = True
            log.failure_reason = f"step {k}: every relaxation mode infeasible"
            break
        loop.apply(k, p_obs, plan, mode_used, flags, t0)
    return log


def run_softened_baseline(cfg: ScenarioConfig, design="design1",
                          rig: ScenarioRig = None) -> ScenarioLog:
    """Exact-penalty softened controller: one problem per step with
    per-stage slack variables penalized by the design weights."""
    rig = rig or ScenarioRig(cfg)
    fam = rig.family
    weights = cfg.baseline_designs[design]
    log = ScenarioLog()
    loop = _Loop(rig, log)
    for k in range(cfg.n_steps):
        t = k * cfg.t_s
        p_obs = rig.obstacle_position(t)
        bg = rig.disturbance(k, p_obs)
        t0 = time.perf_counter()
        if loop.parked_hold(k, p_obs, t0):
            continue
        plan = fam.solve_softened(loop.x, bg.values, weights, k=k,
                                  u_prev=loop.u_prev)
        if not plan.feasible:
            if loop.shift_stored(k, p_obs, t0, {}):
                continue
            log.failed = True
            log.failure_reason = f"step {k}: softened problem infeasible"
            break
        loop.apply(k, p_obs, plan, 2, {}, t0)
    return log


# ----------------------------------------------------------------------
# randomized soak support


def sample_admissible_jump(rig: ScenarioRig, bundle: NetBundle, x, u_prev,
                           p_obs, rng, jump_prob=0.2):
    """Obstacle jump within both the certified bound and the standing
    feasibility margin of the most relaxed mode."""
    if rng.random() > jump_prob:
        return 0.0
    lims = rig.cfg.limits
    caps = rig.relax.delta_bar
    stop = plant.min_stop_position(rig.model, lims, x, dj=0.8 * caps[0],
                                   da=0.8 * caps[1], u_prev=u_prev,
                                   horizon=rig.cfg.M)
    if stop is None:
        return 0.0
    margin = (p_obs - rig.cfg.stop_margin) - stop - 0.3
    from .lipcert import max_feature_shift
    shift = max_feature_shift(rig.model, lims, caps[1])
    bound = bundle.gate.margin() - shift
    hi = min(margin, 0.9 * bound)
    if hi <= 0:
        return 0.0
    return float(rng.uniform(0.0, hi))
