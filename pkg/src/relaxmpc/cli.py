"""Command-line entry points: dataset generation, training, certification,
closed-loop simulation and the kernel benchmark."""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import kernel, lipcert, nets, plant, scenario, smpc
from .qpcore import ConfigurationError

EXIT_OK = 0
EXIT_SAFETY = 2
EXIT_CONFIG = 3

_WORKER_RIG = None


def _worker_init(cfg_json):
    global _WORKER_RIG
    cfg = scenario.ScenarioConfig.from_json(cfg_json) if isinstance(cfg_json, str) \
        else cfg_json
    _WORKER_RIG = scenario.ScenarioRig(cfg)


def _solve_chunk(args):
    thetas, mode = args
    rig = _WORKER_RIG
    out = []
    for theta in thetas:
        gap, v, a = theta[:3]
        u_prev = theta[3] if len(theta) > 3 else a
        delta, plan = rig.family.solve_min_uniform_relaxation(
            mode, [0.0, v, a], np.full(rig.cfg.M, gap), u_prev=u_prev)
        out.append((plan.status, None if delta is None else delta.tolist()))
    return out


def make_slack_oracle(rig):
    def oracle(theta, mode):
        gap, v, a = theta[:3]
        u_prev = theta[3] if len(theta) > 3 else a
        delta, plan = rig.family.solve_min_uniform_relaxation(
            mode, [0.0, v, a], np.full(rig.cfg.M, gap), u_prev=u_prev)
        return plan.status, delta
    return oracle


def cmd_gen_data(args):
    cfg = scenario.ScenarioConfig.from_json(args.config)
    with open(args.config) as fh:
        raw = json.load(fh)
    gspec = raw.get("grid", {})
    grid = nets.GridSpec(
        gap=tuple(gspec.get("gap", (0.1, 5.0, 0.1))),
        v=tuple(gspec.get("v", (0.0, 5.5, 0.1))),
        a=tuple(gspec.get("a", (-3.5, 0.1, 0.1))),
        a_req=tuple(gspec["a_req"]) if gspec.get("a_req") else None)
    pts = grid.points()
    modes = [int(m) for m in args.modes.split(",")]
    print(f"grid: {grid.counts()} = {grid.size()} points, modes {modes}")
    rows = []
    dropped = 0
    if args.workers > 1:
        chunks = np.array_split(pts, max(1, len(pts) // 200))
        jobs = [(chunk, mode) for mode in modes for chunk in chunks]
        done = 0
        with ProcessPoolExecutor(max_workers=args.workers,
                                 initializer=_worker_init,
                                 initargs=(args.config,)) as pool:
            results = pool.map(_solve_chunk,
                               jobs, chunksize=1)
            for (chunk, mode), res in zip(jobs, results):
                for theta, (status, delta) in zip(chunk, res):
                    if status == "Optimal":
                        rows.append((*theta[:3], mode, 1, delta[0], delta[1]))
                    elif status == "Infeasible":
                        rows.append((*theta[:3], mode, 0, np.nan, np.nan))
                    else:
                        dropped += 1
                done += 1
                if done % 20 == 0:
                    print(f"  {done}/{len(jobs)} chunks")
        data = np.array(rows)
    else:
        rig = scenario.ScenarioRig(cfg)
        data, dropped = nets.generate_dataset(grid, make_slack_oracle(rig),
                                              modes=tuple(modes),
                                              progress=500)
    nets.write_dataset(args.out, data, grid)
    print(f"wrote {len(data)} samples to {args.out} ({dropped} dropped)")
    return EXIT_OK


def secant_prune(X, Y, s_max, radius=0.6, rounds=4):
    """Drop the high-relaxation side of sample pairs whose secant slope
    exceeds the certifiable budget.

    The minimal-relaxation surface is arbitrarily steep where a mode has
    little stopping authority (for example jerk relaxation at low speed);
    those shells are unreachable under admissible disturbances but would
    force the certified constant far above the cap-derived bound.
    """
    from scipy.spatial import cKDTree
    X, Y = X.copy(), Y.copy()
    for _ in range(rounds):
        tree = cKDTree(X)
        pairs = tree.query_pairs(r=radius, output_type="ndarray")
        if len(pairs) == 0:
            break
        d = np.linalg.norm(X[pairs[:, 0]] - X[pairs[:, 1]], axis=1)
        dy = np.abs(Y[pairs[:, 0]] - Y[pairs[:, 1]]).max(axis=1)
        bad = pairs[dy / np.maximum(d, 1e-9) > s_max]
        if len(bad) == 0:
            break
        drop = np.zeros(len(X), bool)
        ymax = Y.max(axis=1)
        hi = np.where(ymax[bad[:, 0]] >= ymax[bad[:, 1]], bad[:, 0], bad[:, 1])
        drop[hi] = True
        X, Y = X[~drop], Y[~drop]
    return X, Y


def cmd_train(args):
    with open(args.arch) as fh:
        arch = json.load(fh)
    data = nets.read_dataset(args.dataset)
    os.makedirs(args.out_dir, exist_ok=True)
    delta_bar = arch.get("delta_bar", [5.0, 6.0])
    summary = {}
    for mode in (0, 1):
        n_out = 1 if mode == 0 else 2
        # regressor on feasible samples inside the certified operating
        # envelope: large relaxations are only reachable under admissible
        # disturbances at driving speeds, and the near-saturated band next
        # to the feasibility boundary is arbitrarily steep
        X, Y = nets.regressor_samples(data, mode)
        caps = np.asarray(delta_bar, float)[:n_out]
        Yr = Y[:, :n_out]
        frac_small = arch.get("envelope_small", 0.25)
        frac_large = arch.get("envelope_large", 0.6)
        v_floor = arch.get("envelope_v_floor", 1.5)
        keep = np.all(Yr <= frac_small * caps, axis=1) \
            | ((X[:, 1] >= v_floor) & np.all(Yr <= frac_large * caps, axis=1))
        X, Yr = X[keep], Yr[keep]
        X, Yr = secant_prune(X, Yr, arch.get("envelope_secant", 1.5))
        rcfg = arch["regressor"]
        hp = nets.TrainingConfig(lr=rcfg.get("lr", 0.02),
                                 epochs=rcfg.get("epochs", 400),
                                 batch=rcfg.get("batch", 256),
                                 seed=rcfg.get("seed", 0) + mode,
                                 weight_decay=rcfg.get("weight_decay", 3e-4))
        dims = [3] + list(rcfg.get("hidden", [32, 32])) + [n_out]
        # standardized inputs train better; the affine map folds exactly
        # into the first layer so certificates cover the raw inputs
        mu, sig = X.mean(axis=0), X.std(axis=0)
        net = nets.train(nets.init_mlp(dims, seed=hp.seed), (X - mu) / sig,
                         Yr, hp)
        net.weights[0], net.biases[0] = \
            net.weights[0] / sig, net.biases[0] - net.weights[0] @ (mu / sig)
        tr, val = nets.split_by_hash(X, hp.val_fraction)
        eps = nets.estimate_epsilon(net, X[val], Yr[val])
        net.meta["epsilon"] = float(eps)
        net.meta["role"] = f"regressor_mode{mode}"
        net.meta["n_train"] = int(tr.sum())
        net.meta["envelope"] = {"small": frac_small, "large": frac_large,
                                "v_floor": v_floor,
                                "secant": arch.get("envelope_secant", 1.5)}
        path = os.path.join(args.out_dir, f"regressor_e{mode + 1}.json")
        net.to_json(path)
        summary[f"regressor_e{mode + 1}"] = {"epsilon": eps,
                                             "val_loss": net.meta["val_loss"],
                                             "samples": int(len(X))}
        # classifier on all samples
        Xc, Yc = nets.classifier_samples(data, mode)
        ccfg = arch["classifier"]
        hpc = nets.TrainingConfig(lr=ccfg.get("lr", 0.05),
                                  epochs=ccfg.get("epochs", 300),
                                  batch=ccfg.get("batch", 256),
                                  seed=ccfg.get("seed", 100) + mode,
                                  weight_decay=ccfg.get("weight_decay", 1e-4))
        dims = [3] + list(ccfg.get("hidden", [16, 16])) + [1]
        cls = nets.train(nets.init_mlp(dims, seed=hpc.seed, output="sigmoid"),
                         Xc, Yc, hpc, task="classification")
        trc, valc = nets.split_by_hash(Xc, hpc.val_fraction)
        thr = nets.conservative_threshold(cls, Xc[valc], Yc[valc])
        pred = (cls.forward_batch(Xc[valc]).ravel() >= thr)
        acc = float((pred == (Yc[valc].ravel() > 0.5)).mean())
        cls.meta["threshold"] = float(thr)
        cls.meta["val_accuracy"] = acc
        cls.meta["role"] = f"classifier_mode{mode}"
        cpath = os.path.join(args.out_dir, f"classifier_e{mode + 1}.json")
        cls.to_json(cpath)
        summary[f"classifier_e{mode + 1}"] = {"threshold": thr, "val_acc": acc}
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_certify(args):
    with open(args.bounds) as fh:
        bounds = json.load(fh)
    net = nets.MlpNetwork.from_json(args.net)
    model = plant.build_vehicle_model(bounds.get("t_acc", 1.8),
                                      bounds.get("t_s", 0.05))
    limits = plant.VehicleLimits(**bounds.get("limits", {}))
    delta_bar = np.asarray(bounds.get("delta_bar", [5.0, 6.0]), float)
    dgbar = float(bounds.get("delta_g_bar", 1.0))
    dxbar = lipcert.max_feature_shift(model, limits, delta_bar[1])
    eps = float(net.meta.get("epsilon", 0.0))
    box_lo = np.array(bounds.get("theta_lo", [0.0, 0.0, limits.a_min - delta_bar[1]]))
    box_hi = np.array(bounds.get("theta_hi", [8.0, limits.v_max, limits.a_max]))
    report = lipcert.certify_network(net, delta_bar, eps, dgbar, dxbar,
                                     box_lo=box_lo, box_hi=box_hi)
    net.to_json(args.net)
    print(json.dumps(report, indent=1))
    return EXIT_OK if report["verdict"] == lipcert.ACCEPTED else EXIT_SAFETY


def load_bundle(models_dir, delta_bar):
    paths = {
        "regressors": {0: os.path.join(models_dir, "regressor_e1.json"),
                       1: os.path.join(models_dir, "regressor_e2.json")},
        "classifiers": {0: os.path.join(models_dir, "classifier_e1.json"),
                        1: os.path.join(models_dir, "classifier_e2.json")},
    }
    return scenario.NetBundle.load(paths, delta_bar)


def cmd_simulate(args):
    cfg = scenario.ScenarioConfig.from_json(args.config)
    if args.no_timing:
        pass
    rig = scenario.ScenarioRig(cfg)
    if args.mode == "algorithm1":
        bundle = load_bundle(args.models, cfg.delta_bar)
        log = scenario.run_algorithm1(cfg, bundle, rig)
    elif args.mode == "responsive":
        log = scenario.run_responsive_exact(cfg, rig)
    elif args.mode == "softened":
        log = scenario.run_softened_baseline(cfg, args.design, rig)
    else:
        raise ConfigurationError(f"unknown mode {args.mode}")
    scenario.emit_log(log, args.out, timing=not args.no_timing)
    if log.failed:
        print(f"FAILURE: {log.failure_reason}", file=sys.stderr)
        return EXIT_SAFETY
    print(f"wrote {len(log.records)} steps to {args.out}")
    return EXIT_OK


def cmd_baseline_compare(args):
    cfg = scenario.ScenarioConfig.from_json(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    code = EXIT_OK
    for design in cfg.baseline_designs:
        rig = scenario.ScenarioRig(cfg)
        log = scenario.run_softened_baseline(cfg, design, rig)
        path = os.path.join(args.out_dir, f"baseline_{design}.csv")
        scenario.emit_log(log, path, timing=cfg.timing)
        dj = log.column("delta_j") if log.records else np.zeros(0)
        da = log.column("delta_a") if log.records else np.zeros(0)
        print(f"{design}: steps={len(log.records)} failed={log.failed} "
              f"int(delta_j)={dj.sum() * cfg.t_s:.4f} "
              f"int(delta_a)={da.sum() * cfg.t_s:.4f} -> {path}")
        if log.failed:
            code = EXIT_SAFETY
    return code


def cmd_bench(args):
    res = kernel.benchmark(n_states=args.n, n_rows=args.m,
                           n_solves=args.solves)
    print(json.dumps(res, indent=1))
    return EXIT_OK


def cmd_dump_qp(args):
    cfg = scenario.ScenarioConfig.from_json(args.config)
    rig = scenario.ScenarioRig(cfg)
    bg = rig.disturbance(0, rig.obstacle_position(0.0))
    qp = rig.family.build_nominal(cfg.initial_state, bg, k=0,
                                  u_prev=cfg.initial_state[2])
    qp.dump_json(args.out)
    print(f"dumped nominal problem ({qp.n} vars, {qp.n_eq} eq, {qp.n_in} in)"
          f" to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="relaxmpc",
                                description="priority-driven soft-constrained safe MPC")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="label a parameter grid with minimal relaxations")
    g.add_argument("config")
    g.add_argument("out")
    g.add_argument("--modes", default="0,1")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train slack regressors and feasibility classifiers")
    t.add_argument("dataset")
    t.add_argument("arch")
    t.add_argument("out_dir")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="certify Lipschitz bounds and the safety gate")
    c.add_argument("net")
    c.add_argument("bounds")
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("simulate", help="closed-loop run")
    s.add_argument("config")
    s.add_argument("--mode", choices=["algorithm1", "responsive", "softened"],
                   required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--models", default="models")
    s.add_argument("--design", default="design1")
    s.add_argument("--no-timing", action="store_true")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("baseline-compare", help="run every softened design")
    b.add_argument("config")
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_baseline_compare)

    k = sub.add_parser("bench", help="compare compiled and python kernels")
    k.add_argument("--n", type=int, default=80)
    k.add_argument("--m", type=int, default=200)
    k.add_argument("--solves", type=int, default=20)
    k.set_defaults(func=cmd_bench)

    d = sub.add_parser("dump-qp", help="dump the initial nominal problem as JSON")
    d.add_argument("config")
    d.add_argument("out")
    d.set_defaults(func=cmd_dump_qp)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
