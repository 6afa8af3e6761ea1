"""Command-line interface: ``seqfit <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bodies import default_body_model
from .errors import InvalidInputError, MetricUnavailable, SeqfitError
from .metrics import TriMesh, jitter_statistic, mean_joint_error, mesh_volume, vertex_to_surface_error
from .model import skin_vertices
from .objectives import StageSchedule
from .optim import SolverSettings
from .pipeline import RunConfig, fit_sequence
from .synth import (
    IMAGE_SIZE, LEG_JOINTS, NoiseSpec, SyntheticTruth, constant_motion, crouch_motion, default_camera,
    make_subject, render_keypoints, wave_motion,
)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("seqfit")


def _model(args):
    return io.load_model(args.model) if getattr(args, "model", None) else default_body_model()


def _schedule(args) -> StageSchedule:
    schedule = io.load_schedule(args.weights) if getattr(args, "weights", None) else StageSchedule()
    return schedule


def _config(args) -> RunConfig:
    base = RunConfig()
    solver = SolverSettings(
        max_iterations=args.max_iters if args.max_iters is not None else base.solver.max_iterations,
        tolerance=args.tol if args.tol is not None else base.solver.tolerance,
        history=args.lbfgs_history if args.lbfgs_history is not None else base.solver.history,
    )
    return RunConfig(
        window=args.window,
        shape_samples=args.shape_samples,
        temporal_weight=args.wt,
        sampling=args.sampling,
        seed=args.seed,
        solver=solver,
        focal_length=args.focal,
        principal_point=None if args.principal_point is None else tuple(args.principal_point),
    )


# commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = _model(args)
    _, beta = make_subject(args.seed, spec)
    if args.motion == "wave":
        motion = wave_motion(args.frames)
    elif args.motion == "crouch":
        motion = crouch_motion(args.frames)
    else:
        motion = constant_motion(args.frames)
    dropout_joints = LEG_JOINTS if args.leg_dropout else None
    frames_range = motion.segments.get("hand_to_ground") if args.leg_dropout else None
    noise = NoiseSpec(args.noise, args.dropout, args.confidence, dropout_joints, frames_range)
    frames, truth = render_keypoints(spec, beta, motion, default_camera(), noise, args.seed)
    kf = io.keypoint_file_from_frames(frames, spec, *IMAGE_SIZE)
    io.save_keypoints(args.out, kf)
    if args.truth:
        io.write_json(args.truth, truth.to_dict())
    if args.truth_meshes:
        n = motion.frames
        for i in range(n):
            io.write_obj(Path(args.truth_meshes) / io.mesh_name(i, n), truth.vertices(spec, i), spec.faces)
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    spec = _model(args)
    schedule = _schedule(args)
    if args.wt is not None:
        schedule.temporal_weight = float(args.wt)
    config = _config(args)
    kf = io.load_keypoints(args.keypoints, spec)
    resume = None
    if args.resume:
        ff = io.import_fit(args.resume, spec)
        resume = (ff.fit, ff.report)

    def checkpoint(phase, fit, report):
        if args.checkpoint_dir:
            io.export_fit(Path(args.checkpoint_dir) / f"phase{phase}.json", fit, report, spec, config, schedule,
                          timings=not args.no_timings)

    fit, report = fit_sequence(
        kf.frames, spec, schedule, config, image_size=kf.image_size, until_phase=args.phase,
        resume=resume, on_phase=checkpoint,
    )
    io.export_fit(args.out, fit, report, spec, config, schedule, timings=not args.no_timings)
    for w in report.warnings:
        log.warning(w)
    print(f"fit of {len(fit.frames)} frames (phase {fit.phase}) written to {args.out}")
    return EXIT_OK


def _fit_meshes(ff, spec) -> list[TriMesh]:
    return [TriMesh(skin_vertices(spec, p.beta, p.pose), spec.faces, spec.watertight or None)
            for p in ff.fit.frames]


def cmd_eval(args) -> int:
    spec = _model(args)
    ff = io.import_fit(args.fit, spec)
    est = _fit_meshes(ff, spec)
    joints = ff.fit.joints(spec)
    n = len(est)
    rows = [{"frame": i} for i in range(n)]
    summary: dict = {"version": io.FORMAT_VERSION, "frames": n, "phases_completed": ff.phases_completed}
    for i, m in enumerate(est):
        try:
            rows[i]["volume_dm3"] = mesh_volume(m) * 1000.0
        except MetricUnavailable:
            rows[i]["volume_dm3"] = None
    if n >= 3:
        summary["jitter_m"] = jitter_statistic(joints)
        second = np.linalg.norm(joints[2:] - 2 * joints[1:-1] + joints[:-2], axis=-1).mean(axis=1)
        for i in range(1, n - 1):
            rows[i]["jitter_m"] = float(second[i - 1])
    if args.truth_meshes:
        truth = io.load_meshes(args.truth_meshes)
        if len(truth) != n:
            raise InvalidInputError(f"{len(truth)} ground-truth meshes for {n} fitted frames")
        v2s, vol_err = [], []
        for i, (e, t) in enumerate(zip(est, truth)):
            rows[i]["v2s_cm"] = vertex_to_surface_error(e, t)
            v2s.append(rows[i]["v2s_cm"])
            try:
                rows[i]["truth_volume_dm3"] = mesh_volume(t) * 1000.0
                if rows[i]["volume_dm3"] is not None:
                    vol_err.append(abs(rows[i]["volume_dm3"] - rows[i]["truth_volume_dm3"]))
            except MetricUnavailable:
                rows[i]["truth_volume_dm3"] = None
        summary["v2s_mean_cm"] = float(np.mean(v2s))
        summary["v2s_std_cm"] = float(np.std(v2s))
        if vol_err:
            summary["mean_volume_error_dm3"] = float(np.mean(vol_err))
    if args.truth:
        truth = SyntheticTruth.from_dict(io.read_json(args.truth))
        summary["mean_joint_error_m"] = mean_joint_error(joints, truth.joints)
        summary["truth_jitter_m"] = jitter_statistic(truth.joints) if n >= 3 else None
    summary["per_frame"] = rows
    io.write_json(args.out, summary)
    if args.emit_csv:
        io.atomic_write_text(args.emit_csv, _csv(rows, ["frame", "volume_dm3", "truth_volume_dm3", "v2s_cm", "jitter_m"]))
    print(f"evaluation written to {args.out}")
    return EXIT_OK


def _csv(rows, columns) -> str:
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: "" if r.get(c) is None else r.get(c) for c in columns})
    return buf.getvalue()


def cmd_export_meshes(args) -> int:
    spec = _model(args)
    ff = io.import_fit(args.fit, spec)
    paths = io.export_meshes(ff.fit, spec, args.out)
    print(f"wrote {len(paths)} meshes to {args.out}")
    return EXIT_OK


def cmd_convert_openpose(args) -> int:
    spec = _model(args)
    paths = []
    for p in args.inputs:
        p = Path(p)
        paths += sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not paths:
        raise InvalidInputError("no OpenPose JSON files given")
    kf = io.convert_openpose(paths, spec, args.width, args.height)
    io.save_keypoints(args.out, kf)
    print(f"converted {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    spec = _model(args)
    ff = io.import_fit(args.fit, spec)
    losses = ff.report.frame_losses
    if not losses:
        raise InvalidInputError("fit file carries no per-frame losses")
    columns = ["frame"] + sorted(losses[0].keys()) + ["provenance"]
    rows = [dict(frame=i, provenance=ff.fit.provenance[i], **l) for i, l in enumerate(losses)]
    text = _csv(rows, columns)
    if args.out:
        io.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqfit", description="Temporally consistent body model fitting to 2D keypoint sequences.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def model_arg(p):
        p.add_argument("--model", help="body model JSON (default: built-in humanoid)")

    p = sub.add_parser("synth", help="generate a synthetic keypoint sequence with ground truth")
    model_arg(p)
    p.add_argument("--motion", choices=["wave", "crouch", "constant"], default="wave")
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="keypoint noise sigma in pixels")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--leg-dropout", action="store_true",
                   help="restrict dropout to leg joints during the hand-to-ground segment")
    p.add_argument("--confidence", choices=["binary", "residual"], default="binary")
    p.add_argument("--out", required=True, help="keypoint JSON to write")
    p.add_argument("--truth", help="ground-truth parameters JSON to write")
    p.add_argument("--truth-meshes", help="directory for ground-truth OBJ meshes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit the body model to a keypoint sequence")
    model_arg(p)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="stage schedule JSON (default: built-in table)")
    p.add_argument("--focal", type=float, default=5000.0)
    p.add_argument("--principal-point", type=float, nargs=2, metavar=("X", "Y"))
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--lbfgs-history", type=int)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--shape-samples", type=int, default=15)
    p.add_argument("--sampling", choices=["random", "top-confidence"], default="random")
    p.add_argument("--wt", type=float, help="temporal weight (default: schedule value, 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase", type=int, choices=[1, 2, 3], default=3, help="stop after this phase")
    p.add_argument("--checkpoint-dir", help="write phaseN.json after each phase")
    p.add_argument("--resume", help="continue from a checkpoint fit JSON")
    p.add_argument("--no-timings", action="store_true", help="skip the timings sidecar")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a fit against ground truth")
    model_arg(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--truth-meshes")
    p.add_argument("--truth", help="synthetic ground-truth JSON (joint error)")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-meshes", help="write one OBJ per fitted frame")
    model_arg(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_meshes)

    p = sub.add_parser("convert-openpose", help="convert OpenPose JSON files to a keypoint file")
    model_arg(p)
    p.add_argument("inputs", nargs="+", help="OpenPose JSON files or directories, in frame order")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_openpose)

    p = sub.add_parser("report", help="CSV of per-frame losses of a fit")
    model_arg(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (io.FileFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SeqfitError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
