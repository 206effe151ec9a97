"""Command-line interface: ``gmreg {gen,solve,register,bench,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .affinity import CostMatrices, coarse_affinities
from .geometry import PointCloud, overlap_labels
from .losses import gradcheck_suite
from .minibatch import minibatch_gm
from .ot import Marginals, fgm_solve, partial_ot_dykstra, pgm_proximal, sinkhorn
from .registration import INDOOR, compute_metrics, farthest_point_sampling, register
from .synth import SHAPES, SceneConfig, generate_pair, local_descriptor, oracle_features
from ._random import substream

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-4
METHODS = ("sinkhorn", "partial", "pgm", "fgm", "minibatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- scenes ------------------------------------------------------------------

def scene_id(seed):
    return f"scene_{seed:05d}"


def scene_paths(prefix):
    prefix = str(prefix)
    return Path(prefix + "_P.ply"), Path(prefix + "_Q.ply"), Path(prefix + "_gt.json")


def write_scene(out_dir, cfg):
    P, Q, gt, corr = generate_pair(cfg)
    pP, pQ, pgt = scene_paths(Path(out_dir) / scene_id(cfg.seed))
    io.write_cloud(P, pP)
    io.write_cloud(Q, pQ)
    meta = {
        "n_points": cfg.n_points, "shape": cfg.shape, "overlap_target": cfg.overlap_target,
        "noise_sigma": cfg.noise_sigma, "seed": cfg.seed, "overlap_radius": cfg.overlap_radius,
    }
    io.write_ground_truth(pgt, gt, corr, meta)
    return pP, pQ, pgt


def find_scenes(directory):
    return sorted(p.name[: -len("_gt.json")] for p in Path(directory).glob("*_gt.json"))


def load_scene(prefix):
    pP, pQ, pgt = scene_paths(prefix)
    for p in (pP, pQ):
        if not p.exists():
            raise UsageError(f"missing scene file {p}")
    gt = io.read_ground_truth(pgt) if pgt.exists() else (None, None, {})
    return io.read_cloud(pP), io.read_cloud(pQ), gt[0], gt[1]


def attach_features(P, Q, gt, run):
    if run.features == "oracle":
        if gt is None:
            raise UsageError("oracle features need a ground-truth sidecar")
        return oracle_features(P, Q, gt, dim=run.feature_dim, seed=run.seed)
    return (local_descriptor(P, run.descriptor_radius, run.feature_dim, seed=run.seed),
            local_descriptor(Q, run.descriptor_radius, run.feature_dim, seed=run.seed))


def register_scene(P, Q, gt, gt_corr, run, sid, timing=False):
    t0 = time.perf_counter()
    P, Q = attach_features(P, Q, gt, run)
    res = register(P, Q, run.pipeline)
    elapsed = (time.perf_counter() - t0) * 1e3
    if gt is not None and gt_corr is not None and len(gt_corr):
        res = res.with_metrics(*compute_metrics(res.transform, gt, gt_corr, P, Q, INDOOR))
    return io.result_record(sid, res, round(elapsed, 3) if timing else None)


# -- configuration -----------------------------------------------------------

# flag dest -> config key
_RUN_FLAGS = {
    "seed": "seed", "features": "features", "epsilon": "epsilon", "outer_iters": "outer_iters",
    "inner_iters": "inner_iters", "tol": "tol", "temperature": "temperature",
    "n_samples": "n_samples", "iters": "iters", "inlier_thresh": "inlier_thresh",
    "n_super": "n_super", "overlap_mass": "overlap_mass", "alpha": "alpha",
    "descriptor_radius": "descriptor_radius", "feature_dim": "feature_dim",
}


def _add_run_options(p):
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="flat key = value configuration file")
    g.add_argument("--seed", type=int)
    g.add_argument("--features", choices=io.FEATURE_PROVIDERS)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--outer-iters", type=int)
    g.add_argument("--inner-iters", type=int)
    g.add_argument("--tol", type=float)
    g.add_argument("--temperature", type=float)
    g.add_argument("--n-samples", type=int)
    g.add_argument("--iters", type=int, help="RANSAC iterations")
    g.add_argument("--inlier-thresh", type=float)
    g.add_argument("--n-super", type=int)
    g.add_argument("--overlap-mass", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--descriptor-radius", type=float)
    g.add_argument("--feature-dim", type=int)


def run_config(args):
    values = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        values.update(io.read_config(args.config))
    for dest, key in _RUN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = str(v)
    try:
        return io.build_run_config(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _require_paths(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"no such file or directory: {p}")


# -- subcommands -------------------------------------------------------------

def cmd_gen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        cfg = SceneConfig(
            n_points=args.n_points, shape=args.shape, overlap_target=args.overlap,
            noise_sigma=args.noise, seed=args.seed + k,
        )
        paths = write_scene(out, cfg)
        print(" ".join(str(p) for p in paths))
    return EXIT_OK


def _marginal_vector(path, n):
    if path is None:
        return np.full(n, 1.0 / n)
    return io.read_matrix(path).ravel()


def _scene_costs(args, run):
    P, Q, gt, _ = load_scene(args.scene)
    P, Q = attach_features(P, Q, gt, run)
    rng_p, rng_q = substream(run.seed, "superpoints-P"), substream(run.seed, "superpoints-Q")
    Phat = P.subset(farthest_point_sampling(P.points, run.pipeline.n_super, rng_p))
    Qhat = Q.subset(farthest_point_sampling(Q.points, run.pipeline.n_super, rng_q))
    Phat = Phat.with_overlap_scores(np.ones(len(Phat)))
    Qhat = Qhat.with_overlap_scores(np.ones(len(Qhat)))
    return coarse_affinities(Phat, Qhat, run.pipeline.alpha)


def cmd_solve(args):
    run = run_config(args)
    _require_paths(args.cost, args.cp, args.cq, args.cpq, args.p, args.q)
    cfg = run.solver
    if args.method == "minibatch":
        if args.scene is None:
            raise UsageError("minibatch needs --scene")
        P, Q, gt, _ = load_scene(args.scene)
        if gt is None:
            raise UsageError("minibatch needs a ground-truth sidecar to find the overlap region")
        P, Q = attach_features(P, Q, gt, run)
        mP = overlap_labels(P, Q, gt, args.overlap_radius).astype(bool)
        mQ = overlap_labels(Q, P, gt.inverse(), args.overlap_radius).astype(bool)
        mb = minibatch_gm(P, Q, mP, mQ, args.m, args.K, cfg, seed=run.seed)
        io.write_plan(mb.global_gamma, args.out)
        print(io.dumps_record({"method": args.method, "K": mb.K, "m": mb.m,
                               "shape": list(mb.global_gamma.shape)}))
        return EXIT_OK

    if args.method in ("sinkhorn", "partial"):
        if args.cost is None:
            raise UsageError(f"{args.method} needs --cost")
        cost = io.read_matrix(args.cost)
        C = None
    elif args.scene is not None:
        C = _scene_costs(args, run)
        cost = None
    elif None not in (args.cp, args.cq, args.cpq):
        C = CostMatrices(io.read_matrix(args.cp), io.read_matrix(args.cq), io.read_matrix(args.cpq))
        cost = None
    else:
        raise UsageError(f"{args.method} needs --scene or --cp/--cq/--cpq")
    N, M = (cost if cost is not None else C.Cpq).shape
    p, q = _marginal_vector(args.p, N), _marginal_vector(args.q, M)
    if args.method in ("partial", "pgm"):
        if args.mass is None:
            raise UsageError(f"{args.method} needs --mass")
        marg = Marginals(p, q, "inequality", args.mass)
    else:
        marg = Marginals(p, q)
    solver = {"sinkhorn": sinkhorn, "partial": partial_ot_dykstra, "pgm": pgm_proximal, "fgm": fgm_solve}
    plan = solver[args.method](cost if cost is not None else C, marg, cfg)
    io.write_plan(plan.gamma, args.out)
    print(io.dumps_record({
        "method": args.method, "n_iter": plan.n_iter, "converged": plan.converged,
        "objective": plan.objective_trace[-1] if plan.objective_trace else None,
        "shape": [N, M],
    }))
    return EXIT_OK


def cmd_register(args):
    run = run_config(args)
    if args.scene is not None:
        P, Q, gt, corr = load_scene(args.scene)
        sid = Path(args.scene).name
    elif args.p is not None and args.q is not None:
        _require_paths(args.p, args.q, args.gt)
        P, Q = io.read_cloud(args.p), io.read_cloud(args.q)
        gt, corr = (None, None) if args.gt is None else io.read_ground_truth(args.gt)[:2]
        sid = Path(args.p).stem
    else:
        raise UsageError("register needs --scene or both --p and --q")
    line = io.dumps_record(register_scene(P, Q, gt, corr, run, sid, args.timing))
    _emit([line], args.out)
    return EXIT_OK


def _emit(lines, out):
    text = "".join(l + "\n" for l in lines)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def summarize(records):
    """RR in percent over all scenes; RRE and RTE averaged over the registered ones."""
    scored = [r for r in records if r["rr"] is not None]
    ok = [r for r in scored if r["rr"]]
    rr = 100.0 * len(ok) / len(scored) if scored else float("nan")
    rre = float(np.mean([r["rre_deg"] for r in ok])) if ok else float("nan")
    rte = float(np.mean([r["rte_m"] for r in ok])) if ok else float("nan")
    return {"n_scenes": len(records), "rr_percent": rr, "mean_rre_deg": rre, "mean_rte_m": rte}


def format_table(summary):
    return (
        f"{'scenes':>8} {'RR %':>8} {'RRE deg':>10} {'RTE m':>10}\n"
        f"{summary['n_scenes']:>8d} {summary['rr_percent']:>8.2f} "
        f"{summary['mean_rre_deg']:>10.4f} {summary['mean_rte_m']:>10.5f}\n"
    )


def cmd_bench(args):
    directory = Path(args.directory)
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    scenes = find_scenes(directory)
    if not scenes:
        raise UsageError(f"no scenes (*_gt.json) found in {directory}")
    run = run_config(args)
    records, lock = [], threading.Lock()

    def work(sid):
        P, Q, gt, corr = load_scene(directory / sid)
        rec = register_scene(P, Q, gt, corr, run, sid, args.timing)
        with lock:
            records.append(rec)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for fut in [pool.submit(work, sid) for sid in scenes]:
            fut.result()
    records.sort(key=lambda r: r["scene_id"])
    _emit([io.dumps_record(r) for r in records], args.out)
    table = format_table(summarize(records))
    (sys.stderr if args.out is None else sys.stdout).write(table)
    return EXIT_OK


def cmd_gradcheck(args):
    errors = gradcheck_suite(n_seeds=args.seeds, h=args.h)
    failed = False
    for name, err in errors.items():
        ok = err < GRADCHECK_TOL
        failed |= not ok
        print(f"{name:<8} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- dispatch ----------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="gmreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scene pairs")
    g.add_argument("--out", default=".", help="output directory")
    g.add_argument("--seed", type=int, default=0, help="seed of the first scene")
    g.add_argument("--count", type=int, default=1, help="number of scenes (seeds seed, seed+1, ...)")
    g.add_argument("--overlap", type=float, default=SceneConfig.overlap_target)
    g.add_argument("--noise", type=float, default=SceneConfig.noise_sigma)
    g.add_argument("--n-points", type=int, default=SceneConfig.n_points)
    g.add_argument("--shape", choices=SHAPES, default=SceneConfig.shape)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve a transport or matching problem")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--out", required=True, help="output plan file")
    s.add_argument("--cost", type=Path, help="cost matrix file (sinkhorn, partial)")
    s.add_argument("--cp", type=Path, help="intra-P distance matrix file (pgm, fgm)")
    s.add_argument("--cq", type=Path, help="intra-Q distance matrix file (pgm, fgm)")
    s.add_argument("--cpq", type=Path, help="cross affinity matrix file (pgm, fgm)")
    s.add_argument("--scene", help="scene prefix, e.g. DIR/scene_00007")
    s.add_argument("--p", type=Path, help="row histogram file (default uniform)")
    s.add_argument("--q", type=Path, help="column histogram file (default uniform)")
    s.add_argument("--mass", type=float, help="transported mass s (partial, pgm)")
    s.add_argument("--m", type=int, default=128, help="minibatch size")
    s.add_argument("--K", type=int, default=8, help="number of minibatches")
    s.add_argument("--overlap-radius", type=float, default=0.05)
    _add_run_options(s)
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("register", help="register one scene or cloud pair")
    r.add_argument("--scene", help="scene prefix, e.g. DIR/scene_00007")
    r.add_argument("--p", type=Path)
    r.add_argument("--q", type=Path)
    r.add_argument("--gt", type=Path, help="ground-truth JSON for metrics")
    r.add_argument("--out", help="write the JSON line here instead of stdout")
    r.add_argument("--timing", action="store_true", help="record runtime_ms")
    _add_run_options(r)
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("bench", help="register every scene of a directory")
    b.add_argument("directory")
    b.add_argument("--out", help="JSON-lines output file (default stdout)")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--timing", action="store_true", help="record runtime_ms")
    _add_run_options(b)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference check of the losses")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--h", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("gmreg: error: a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"gmreg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
