"""Command-line pipeline: gen-motion, analyze, simulate, train, eval.

Exit codes: 0 success, 2 usage or input error, 3 numerical non-convergence,
4 training divergence.  Every output file is written to a temporary sibling and
renamed into place, and each command records its fully resolved arguments in a
``*.config.json`` file next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import policy as pol
from .backend import NAME as BACKEND
from .decomp import (Analysis, FrameError, ImpulseProfile, analyze, profile_csv, read_profile_csv)
from .metrics import EvalReport, evaluate, summarize
from .model import (BUILTIN_MODELS, MOTION_KINDS, ModelError, MotionParams, TrajectoryError,
                    dump_trajectory, finite_difference_derivatives, load_model, load_trajectory,
                    synthesize_exaggerated)
from .sim import (ControlOutput, Episode, FeedbackGains, SimConfig, beta_one_controller,
                  default_gains, feedback_controller, open_loop_controller, run_episode,
                  sample_perturbations)
from .train import TASKS, Task, TrainConfig, make_task, policy_controller, train_loop

OUT_ENV = "IMPULSE_ASSIST_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class NonConvergence(Exception):
    pass


# ---------------------------------------------------------------------------
# file plumbing

def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def atomic_write(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_file(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _check_writable_dir(d: Path) -> None:
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {d}: {exc}")
    if not os.access(d, os.W_OK):
        raise UsageError(f"output directory {d} is not writable")


def _resolved(args: argparse.Namespace, **extra) -> str:
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n"


def _load_model_arg(spec: str):
    if spec in BUILTIN_MODELS:
        return BUILTIN_MODELS[spec]()
    p = _require_file(spec, "model file")
    try:
        return load_model(p.read_text())
    except ModelError as exc:
        raise UsageError(f"{p}: {exc}")


def _load_traj_arg(path: Optional[str], model):
    p = _require_file(path, "trajectory file")
    try:
        return finite_difference_derivatives(load_trajectory(p.read_text(), model))
    except TrajectoryError as exc:
        raise UsageError(f"{p}: {exc}")


def _load_profile_arg(path: str, traj) -> ImpulseProfile:
    p = _require_file(path, "impulse profile")
    try:
        prof = read_profile_csv(p.read_text())
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{p}: malformed impulse profile ({exc})")
    if prof.n_frames != traj.n_frames:
        raise UsageError(f"{p}: {prof.n_frames} frames but the trajectory has {traj.n_frames}")
    # the time column is rounded text; the trajectory carries the exact step
    return ImpulseProfile(prof.I_base, prof.I_base / traj.dt, traj.dt)


def _load_checkpoint_arg(path: Optional[str]) -> pol.PolicyParams:
    p = _require_file(path, "checkpoint")
    try:
        return pol.load_checkpoint(p.read_bytes())
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"{p}: {exc}")


def _run_analysis(model, traj) -> Analysis:
    try:
        an = analyze(model, traj)
    except FrameError as exc:
        raise NonConvergence(f"decomposition failed at frame {exc.frame}: {exc}")
    bad = an.nonconverged_frames
    if bad:
        raise NonConvergence(f"QP did not converge at frames {bad}")
    return an


def _report_text(report: EvalReport, fmt: str) -> str:
    return report.to_csv() if fmt == "csv" else report.to_json() + "\n"


# ---------------------------------------------------------------------------
# commands

def cmd_gen_motion(args) -> int:
    model = _load_model_arg(args.model)
    out = Path(args.out) if args.out else default_out_dir() / f"{args.kind}.json"
    _check_writable_dir(out.parent)
    params = MotionParams(duration=args.duration, peak_speed=args.peak_speed, dash_window=args.dash_window,
                          apex_height=args.apex_height, onset=args.onset, descent_acc=args.descent_acc,
                          boost_speed=args.boost_speed, joint_amplitude=args.joint_amplitude)
    try:
        traj = synthesize_exaggerated(args.kind, params, model, dt=args.dt)
    except ValueError as exc:
        raise UsageError(str(exc))
    atomic_write(out, dump_trajectory(traj))
    atomic_write(out.with_name(out.name + ".config.json"), _resolved(args, resolved_params=asdict(params)))
    peak = float(np.max(np.linalg.norm(traj.derived_acc[:, :3], axis=1)))
    print(f"wrote {out}: frames={traj.n_frames} dt={traj.dt:.6g} peak|acc|={peak:.6g} m/s^2")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model = _load_model_arg(args.model)
    traj = _load_traj_arg(args.traj, model)
    out = Path(args.out) if args.out else default_out_dir() / "profile.csv"
    _check_writable_dir(out.parent)
    an = _run_analysis(model, traj)
    atomic_write(out, profile_csv(model, an))
    atomic_write(out.with_name(out.name + ".config.json"), _resolved(args, backend=BACKEND))
    prof = an.profile
    W = np.linalg.norm(prof.W_assist[:, :3], axis=1)
    print(f"wrote {out}: frames={prof.n_frames} peak|W_lin|={W.max():.6g} N at t={W.argmax() * prof.dt:.6g} s")
    print("sum I_base: lin=[{:.6g} {:.6g} {:.6g}] N s, ang=[{:.6g} {:.6g} {:.6g}] N m s".format(
        *prof.I_base.sum(axis=0)))
    if traj.labels is not None:
        for label in sorted(set(traj.labels) - {""}):
            idx = traj.frames_labelled(label)
            print(f"  window {label}: sum I_lin=[{' '.join(f'{x:.6g}' for x in prof.I_base[idx, :3].sum(axis=0))}]")
    return EXIT_OK


def _controller_from_args(args, model, traj, baseline):
    """Returns (controller, decomposes)."""
    if args.mode == "open":
        return open_loop_controller, True
    if args.checkpoint is None and not args.builtin_feedback:
        raise UsageError(f"--mode {args.mode} needs --checkpoint or --builtin-feedback")
    if args.checkpoint is not None and args.builtin_feedback:
        raise UsageError("--checkpoint and --builtin-feedback are mutually exclusive")
    naive = args.mode == "naive"
    if args.builtin_feedback:
        fb = feedback_controller(FeedbackGains(beta=args.beta))
        if not naive:
            return fb, True

        def naive_fb(ep):
            c = fb(ep)
            return ControlOutput(c.joint_targets, c.I_res, 0.0, 0.0, I_total=c.I_res)

        return naive_fb, False
    params = _load_checkpoint_arg(args.checkpoint)
    if params.spec != pol.ObservationSpec.for_model(model, params.spec.history):
        raise UsageError("checkpoint observation layout does not match the model")
    task = Task("cli", model, traj, baseline, baseline.W_assist, default_gains(model))
    return policy_controller(params, task, naive=naive), not naive


def _simulation_inputs(args):
    if args.task is not None:
        if args.model is not None or args.traj is not None:
            raise UsageError("--task is exclusive with --model/--traj")
        if args.task not in TASKS:
            raise UsageError(f"unknown task {args.task!r}")
        task = make_task(args.task)
        return task.model, task.traj, task.baseline
    if args.model is None or args.traj is None:
        raise UsageError("give --task or both --model and --traj")
    model = _load_model_arg(args.model)
    traj = _load_traj_arg(args.traj, model)
    if args.profile is not None:
        baseline = _load_profile_arg(args.profile, traj)
    else:
        baseline = None
    return model, traj, baseline


def cmd_simulate(args) -> int:
    model, traj, baseline = _simulation_inputs(args)
    if args.mode != "open" and args.checkpoint is not None:
        _require_file(args.checkpoint, "checkpoint")
    out = Path(args.out_dir) if args.out_dir else default_out_dir() / "simulate"
    _check_writable_dir(out)
    if baseline is None:
        baseline = _run_analysis(model, traj).profile
    controller, decomposes = _controller_from_args(args, model, traj, baseline)
    config = SimConfig()
    horizon = (traj.n_frames - 1) * config.decimation
    pert = sample_perturbations(args.seed, horizon) if args.perturb else None
    ep = Episode(model, traj, baseline, default_gains(model), config, args.seed, pert)
    res = run_episode(ep, controller)
    report = summarize(model, traj, [res], config.decimation, decomposes)
    atomic_write(out / "telemetry.csv", res.telemetry_csv())
    atomic_write(out / f"report.{args.format}", _report_text(report, args.format))
    if pert is not None:
        atomic_write(out / "perturbations.json", pert.to_json())
    atomic_write(out / "config.json", _resolved(args, sim=asdict(config), backend=BACKEND))
    status = "completed" if res.success else f"terminated at sim step {res.terminated_at}"
    print(f"{args.mode}: {status}; final cumulative error {res.final_cumulative_error:.6g} m; "
          f"success {report.success_rate:g}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}")
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    out = Path(args.out_dir) if args.out_dir else default_out_dir() / "train"
    _check_writable_dir(out)
    overrides = dict(iterations=args.iters, seed=args.seed)
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.env_count is not None:
        overrides["env_count"] = args.env_count
    try:
        config = TrainConfig.ablation(None if args.ablate == "none" else args.ablate, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc))
    task = make_task(args.task)
    result = train_loop(task, config, early_stop=False)
    atomic_write(out / "checkpoint.npz", pol.save_checkpoint(result.params))
    atomic_write(out / "curves.csv", result.curves_csv())
    cfg = asdict(config)
    atomic_write(out / "config.json", _resolved(args, train=cfg, backend=BACKEND))
    if result.diverged:
        print(f"training diverged after {len(result.curves)} iterations: {result.message}; "
              f"last finite checkpoint written", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.curves[-1]
    print(f"{len(result.curves)} iterations; final success {last['success_rate']:g}; "
          f"reached 0.5 at {result.iterations_to(0.5)}, 0.9 at {result.iterations_to(0.9)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    chosen = [args.checkpoint is not None, args.builtin_feedback, args.beta_one, args.open_loop]
    if sum(chosen) != 1:
        raise UsageError("choose exactly one of --checkpoint, --builtin-feedback, --beta-one, --open-loop")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    model, traj, baseline = _simulation_inputs(args)
    if args.checkpoint is not None:
        _require_file(args.checkpoint, "checkpoint")
    out = Path(args.out) if args.out else default_out_dir() / f"eval.{args.format}"
    _check_writable_dir(out.parent)
    if baseline is None:
        baseline = _run_analysis(model, traj).profile
    if args.open_loop:
        controller, decomposes = open_loop_controller, True
    elif args.beta_one:
        controller, decomposes = beta_one_controller, True
    else:
        args.mode = "naive" if args.naive else "closed"
        controller, decomposes = _controller_from_args(args, model, traj, baseline)
    config = SimConfig()
    report = evaluate(model, traj, baseline, controller, default_gains(model), args.episodes, args.seed,
                      args.perturb, config, decomposes)
    atomic_write(out, _report_text(report, args.format))
    atomic_write(out.with_name(out.name + ".config.json"), _resolved(args, sim=asdict(config), backend=BACKEND))
    g = report.gate_stats or {}
    beta = g.get("beta_lin_mean")
    print(f"success {report.success_rate:g} over {report.episodes} episodes; "
          f"E_pose {report.e_pose_mean:.6g} m; jitter {report.jitter:.6g}"
          + (f"; mean beta_lin {beta:.4g}" if beta is not None else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_sim_inputs(p):
    p.add_argument("--task", help=f"toy task ({', '.join(TASKS)}); exclusive with --model/--traj")
    p.add_argument("--model", help="builtin model name or model JSON file")
    p.add_argument("--traj", help="trajectory JSON file")
    p.add_argument("--profile", help="impulse profile CSV from analyze (default: analyze on the fly)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", action="store_true", help="sample random root pushes")
    p.add_argument("--checkpoint", help="policy checkpoint from train")
    p.add_argument("--builtin-feedback", action="store_true", help="momentum-space PD residual controller")
    p.add_argument("--beta", type=float, default=FeedbackGains.beta, help="gate for --builtin-feedback")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="impulse-assist", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-motion", help="synthesize an exaggerated reference motion")
    g.add_argument("--kind", required=True, help=", ".join(k.replace("_", "-") for k in MOTION_KINDS))
    g.add_argument("--model", default="free-body")
    g.add_argument("--dt", type=float, default=1.0 / 30.0)
    d = MotionParams()
    for name in ("duration", "peak_speed", "dash_window", "apex_height", "onset", "descent_acc",
                 "boost_speed", "joint_amplitude"):
        g.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(d, name))
    g.add_argument("--out", help="output trajectory path")
    g.set_defaults(func=cmd_gen_motion)

    a = sub.add_parser("analyze", help="derive the analytical impulse baseline")
    a.add_argument("--model", required=True)
    a.add_argument("--traj", required=True)
    a.add_argument("--out", help="output CSV path")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run one tracking episode")
    _add_sim_inputs(s)
    s.add_argument("--mode", choices=("open", "closed", "naive"), default="open")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="PPO on a toy tracking task")
    t.add_argument("--task", default="free-body-dash")
    t.add_argument("--iters", type=int, default=500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablate", choices=("none", "compass", "sparsity", "both", "naive"), default="none")
    t.add_argument("--lr", type=float)
    t.add_argument("--env-count", type=int)
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="aggregate metrics over seeded episodes")
    _add_sim_inputs(e)
    e.add_argument("--episodes", type=int, default=8)
    e.add_argument("--naive", action="store_true", help="checkpoint emits the whole impulse")
    e.add_argument("--beta-one", action="store_true", help="baseline only (beta = 1)")
    e.add_argument("--open-loop", action="store_true")
    e.add_argument("--out", help="report path")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
