"""Command-line entry point: ``flowik {train,evaluate,solve,path,bench,fk}``.

Exit codes: 0 success, 2 input error, 3 training abort, 4 no continuous path.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, cnf
from .dynamics import DynamicsConfig, closed_form_parameter_count
from .iksolver import (DEFAULT_STEP_THRESHOLD, TargetFileError, dls_solve_batch, latent_draws,
                       read_targets_csv, retry_path, solve_targets)
from .kinematics import RobotSpecError, forward_kinematics, load_robot, sample_joints
from .odeint import SolverConfig
from .trainer import (TrainConfig, TrainingAborted, evaluate, evaluation_targets, metrics_path_for,
                      train_loop)

log = logging.getLogger("flowik")

EXIT_OK, EXIT_INPUT, EXIT_ABORT, EXIT_NO_PATH = 0, 2, 3, 4


class InputError(Exception):
    """Bad command-line input; reported on stderr with exit code 2."""


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path_for(out_path):
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".manifest.json")


def write_manifest(out_path, command, robot_path, inputs, seed, artifacts):
    """Record what produced ``out_path``; warn if a previous run used different inputs.

    No timestamps are stored, so identical runs write identical manifests.
    """
    path = manifest_path_for(out_path)
    doc = {
        "command": command,
        "robot_hash": file_hash(robot_path),
        "config_hashes": {k: file_hash(v) for k, v in sorted(inputs.items()) if v is not None},
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "tool_version": __version__,
    }
    if path.exists():
        try:
            old = json.loads(path.read_text())
        except json.JSONDecodeError:
            old = {}
        if old.get("command") == command and (
                old.get("robot_hash") != doc["robot_hash"]
                or old.get("config_hashes") != doc["config_hashes"]):
            print(f"warning: inputs differ from the previous run recorded in {path}", file=sys.stderr)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _robot(path):
    try:
        robot = load_robot(path)
    except FileNotFoundError:
        raise InputError(f"robot file not found: {path}") from None
    except (RobotSpecError, ValueError, KeyError) as exc:
        raise InputError(f"bad robot file {path}: {exc}") from None
    return robot, _robot_file(path)


def _robot_file(path):
    p = Path(path)
    if p.exists():
        return p
    return Path(__file__).parent / "robots" / f"{path}.json"


def _model(path, robot):
    if not Path(path).exists():
        raise InputError(f"model file not found: {path}")
    try:
        return cnf.load_checkpoint(path, robot)
    except cnf.CheckpointError as exc:
        raise InputError(f"{path}: {exc}") from None


def _targets(path, m):
    if not Path(path).exists():
        raise InputError(f"target file not found: {path}")
    try:
        return read_targets_csv(path, m)
    except TargetFileError as exc:
        raise InputError(f"{path}: {exc}") from None


def _solver(model, args):
    """Inference solver from flags; defaults to the one stored in the checkpoint."""
    base = model.infer_solver
    if args.solver is None and args.steps is None:
        return base
    method = args.solver or base.method
    steps = args.steps if args.steps is not None else base.steps
    return SolverConfig(method, steps=steps, rtol=base.rtol, atol=base.atol, max_steps=base.max_steps)


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _num(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    robot, robot_file = _robot(args.robot)
    if not Path(args.config).exists():
        raise InputError(f"config file not found: {args.config}")
    try:
        cfg = TrainConfig.load(args.config)
    except (ValueError, TypeError) as exc:
        raise InputError(f"bad training config {args.config}: {exc}") from None
    if args.resume and not Path(args.resume).exists():
        raise InputError(f"resume checkpoint not found: {args.resume}")
    out = Path(args.out)
    write_manifest(out, "train", robot_file, {"config": args.config, "resume": args.resume},
                   cfg.rng_seed, [out, metrics_path_for(out)])

    def progress(row):
        print(", ".join(f"{k}={v}" for k, v in row.items()), file=sys.stderr)

    try:
        train_loop(robot, cfg, out, args.resume, progress=progress)
    except cnf.CheckpointError as exc:
        raise InputError(str(exc)) from None
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_evaluate(args):
    robot, robot_file = _robot(args.robot)
    model = _model(args.model, robot)
    if args.out:
        write_manifest(args.out, "evaluate", robot_file, {"model": args.model}, args.seed, [args.out])
    ev = evaluate(model, robot, args.targets, args.samples, args.seed, _solver(model, args))
    report = {"targets": args.targets, "samples": args.samples, "seed": args.seed,
              "pos_err_mean": ev.pos_err_mean, "pos_err_p95": ev.pos_err_p95,
              "ori_err_mean": ev.ori_err_mean, "ori_err_p95": ev.ori_err_p95,
              "failures": ev.failures}
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return EXIT_OK


def solve_rows(model, robot, pos, quat, samples, seed, solver):
    """Per-solution CSV text and the flat error arrays behind it."""
    n, m = robot.dof, robot.n_targets
    z = latent_draws(seed, pos.shape[0], samples, n)
    q, pe, oe, failed = solve_targets(model, robot, pos, quat, z, solver)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "sample"] + [f"q{j}" for j in range(n)]
               + [f"pos_err_{t}" for t in range(m)] + [f"ori_err_{t}" for t in range(m)] + ["failed"])
    for i in range(pos.shape[0]):
        for s in range(samples):
            vals = list(q[i, s]) + list(pe[i, s]) + list(oe[i, s])
            w.writerow([i, s] + [_num(v) for v in vals] + [int(i in failed)])
    return buf.getvalue(), pe, oe, failed


def cmd_solve(args):
    if args.samples < 1:
        raise InputError("--samples must be >= 1")
    robot, robot_file = _robot(args.robot)
    model = _model(args.model, robot)
    pos, quat = _targets(args.targets, robot.n_targets)
    if args.out:
        write_manifest(args.out, "solve", robot_file, {"model": args.model, "targets": args.targets},
                       args.seed, [args.out])
    text, pe, oe, failed = solve_rows(model, robot, pos, quat, args.samples, args.seed,
                                      _solver(model, args))
    _emit(text, args.out)
    ok_p, ok_o = pe[np.isfinite(pe)], oe[np.isfinite(oe)]
    mean_p = float(np.mean(ok_p)) if ok_p.size else float("nan")
    mean_o = float(np.mean(ok_o)) if ok_o.size else float("nan")
    print(f"solved {pos.shape[0]} targets x {args.samples} samples: "
          f"mean position error {mean_p!r} m ({mean_p * 1000:.3f} mm), "
          f"mean orientation error {mean_o!r} rad ({np.degrees(mean_o):.3f} deg), "
          f"failed targets {len(failed)}", file=sys.stderr)
    return EXIT_OK


def cmd_path(args):
    if args.retries < 1:
        raise InputError("--retries must be >= 1")
    if args.step_threshold < 0:
        raise InputError("--step-threshold must be >= 0")
    robot, robot_file = _robot(args.robot)
    model = _model(args.model, robot)
    pos, quat = _targets(args.path, robot.n_targets)
    if pos.shape[0] < 2:
        raise InputError(f"{args.path}: a path needs at least two waypoints")
    joints = args.joints
    if joints is None and args.out:
        joints = str(Path(args.out).with_name(Path(args.out).stem + ".joints.csv"))
    if args.out:
        write_manifest(args.out, "path", robot_file, {"model": args.model, "path": args.path},
                       args.seed, [a for a in (args.out, joints) if a])
    rep = retry_path(model, robot, (pos, quat), args.retries, args.seed, args.step_threshold,
                     _solver(model, args))
    _emit(json.dumps(rep.summary(), indent=2) + "\n", args.out)
    if joints:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["waypoint"] + [f"q{j}" for j in range(robot.dof)])
        for i, row in enumerate(rep.result.q):
            w.writerow([i] + [_num(v) for v in row])
        Path(joints).write_text(buf.getvalue())
    if not rep.continuous:
        print(f"no continuous path in {args.retries} attempts "
              f"(best max joint step {rep.max_joint_step:.4f} rad)", file=sys.stderr)
        return EXIT_NO_PATH
    return EXIT_OK


def parse_arch(spec):
    """``"STATE:W1,W2,...:COND"`` -> DynamicsConfig (COND excludes time)."""
    try:
        state, widths, cond = spec.split(":")
        return DynamicsConfig(int(state), int(cond), tuple(int(w) for w in widths.split(",")))
    except ValueError as exc:
        raise InputError(f"bad --arch {spec!r}: expected STATE:W1,W2,...:COND ({exc})") from None


BENCH_HEADER = ["robot", "targets", "samples", "method", "pos_err_mean_mm", "pos_err_p95_mm",
                "ori_err_mean_deg", "ori_err_p95_deg", "success_rate", "parameters",
                "solutions_per_s", "failures"]


def cmd_bench(args):
    if args.arch:
        cfg = parse_arch(args.arch)
        count = cfg.parameter_count()
        print("state_dim,condition_dim,hidden_widths,parameters,closed_form")
        print(f"{cfg.state_dim},{cfg.condition_dim},{'x'.join(map(str, cfg.hidden_widths))},{count},"
              f"{closed_form_parameter_count(cfg.state_dim, cfg.condition_dim, cfg.hidden_widths)}")
        return EXIT_OK
    if not (args.model and args.robot):
        raise InputError("bench needs --model and --robot (or --arch)")
    if args.targets < 1 or args.samples < 1:
        raise InputError("--targets and --samples must be >= 1")
    robot, robot_file = _robot(args.robot)
    model = _model(args.model, robot)
    if args.out:
        write_manifest(args.out, "bench", robot_file, {"model": args.model}, args.seed, [args.out])
    solver = _solver(model, args)
    t0 = time.perf_counter()
    ev = evaluate(model, robot, args.targets, args.samples, args.seed, solver)
    elapsed = time.perf_counter() - t0
    total = args.targets * args.samples
    tol = args.success_tol
    rows = [[robot.name, args.targets, args.samples, "flow",
             ev.pos_err_mean * 1000, ev.pos_err_p95 * 1000,
             np.degrees(ev.ori_err_mean), np.degrees(ev.ori_err_p95),
             _success(ev.pos_err, tol), model.parameter_count, total / elapsed, ev.failures]]
    if args.baseline:
        _, pos, quat = evaluation_targets(robot, args.targets, args.seed)
        pos_r, quat_r = np.repeat(pos, args.samples, axis=0), np.repeat(quat, args.samples, axis=0)
        q0 = sample_joints(robot, total, np.random.default_rng([args.seed, 2]))
        t0 = time.perf_counter()
        res = dls_solve_batch(robot, pos_r, quat_r, q0)
        elapsed = time.perf_counter() - t0
        rows.append([robot.name, args.targets, args.samples, "dls",
                     float(np.mean(res.pos_err)) * 1000, float(np.percentile(res.pos_err, 95)) * 1000,
                     float(np.degrees(np.mean(res.ori_err))),
                     float(np.degrees(np.percentile(res.ori_err, 95))),
                     float(np.mean(res.converged)), 0, total / elapsed, 0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])
    _emit(buf.getvalue(), args.out)
    for r in rows:
        print(f"{r[3]:>5}: position {r[4]:.3f} mm mean / {r[5]:.3f} mm p95, "
              f"orientation {r[6]:.3f} deg mean / {r[7]:.3f} deg p95, "
              f"success {100 * r[8]:.1f}%, {r[10]:.1f} solutions/s"
              + (f", {r[9]} parameters" if r[9] else ""), file=sys.stderr)
    return EXIT_OK


def _success(pos_err, tol):
    """Fraction of solutions whose worst per-target position error is below ``tol`` (m)."""
    worst = np.max(np.nan_to_num(pos_err, nan=np.inf), axis=-1)
    return float(np.mean(worst < tol))


def format_pose(pose):
    p = " ".join(f"{v + 0.0:.9f}" for v in pose.position)
    q = " ".join(f"{v + 0.0:.9g}" for v in pose.orientation)
    return f"{p}  {q}"


def cmd_fk(args):
    robot, _ = _robot(args.robot)
    try:
        q = np.array([float(v) for v in args.q.replace(",", " ").split()])
    except ValueError:
        raise InputError(f"--q must be a comma-separated list of numbers, got {args.q!r}") from None
    if q.shape != (robot.dof,):
        raise InputError(f"{robot.name} has {robot.dof} joints, --q gave {q.size} values")
    for pose in forward_kinematics(robot, q):
        print(format_pose(pose))
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_solver_flags(p):
    p.add_argument("--solver", choices=("rk4", "dopri5"),
                   help="inference solver (default: the one stored in the checkpoint)")
    p.add_argument("--steps", type=int, help="rk4 step count")


def build_parser():
    ap = argparse.ArgumentParser(prog="flowik", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS thread limit (default: machine parallelism)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow from online FK samples")
    p.add_argument("--robot", required=True, help="robot JSON (or a bundled robot name)")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="pose errors on freshly sampled reachable targets")
    p.add_argument("--model", required=True)
    p.add_argument("--robot", required=True)
    p.add_argument("--targets", type=int, default=100)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("solve", help="batch IK for the targets in a CSV file")
    p.add_argument("--model", required=True)
    p.add_argument("--robot", required=True)
    p.add_argument("--targets", required=True, help="target CSV")
    p.add_argument("--samples", type=int, default=1, help="latent draws per target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV (default: stdout)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("path", help="joint path for a Cartesian path with a shared latent")
    p.add_argument("--model", required=True)
    p.add_argument("--robot", required=True)
    p.add_argument("--path", required=True, help="waypoint CSV")
    p.add_argument("--retries", type=int, default=20)
    p.add_argument("--step-threshold", type=float, default=DEFAULT_STEP_THRESHOLD,
                   help="largest allowed joint step per waypoint (rad, inf-norm)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--joints", help="joint CSV (default: <out stem>.joints.csv)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("bench", help="evaluation protocol report, optionally against DLS")
    p.add_argument("--model")
    p.add_argument("--robot")
    p.add_argument("--targets", type=int, default=100)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline", action="store_true", help="also run DLS from random inits")
    p.add_argument("--success-tol", type=float, default=0.01,
                   help="position error counted as success (m)")
    p.add_argument("--arch", help="only report the parameter count of STATE:W1,W2,...:COND")
    p.add_argument("--out", help="report CSV (default: stdout)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fk", help="print end-effector poses for a joint vector")
    p.add_argument("--robot", required=True)
    p.add_argument("--q", required=True, help='joint values, e.g. "0.1,0.2"')
    p.set_defaults(func=cmd_fk)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else os.cpu_count()
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
