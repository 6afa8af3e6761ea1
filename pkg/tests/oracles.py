"""Shared, cached experiment runs used by several test modules."""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from seqfit.bodies import default_body_model, toy_model
from seqfit.objectives import StageSchedule
from seqfit.optim import SolverSettings
from seqfit.pipeline import RunConfig, SequenceFit, fit_sequence, sequence_problem
from seqfit.synth import (
    IMAGE_SIZE, LEG_JOINTS, NoiseSpec, crouch_motion, keyframe_motion, make_subject, render_keypoints, wave_motion,
)

TIGHT = SolverSettings(max_iterations=5000, tolerance=1e-9, ftol=1e-14)


@dataclass
class WindowOracle:
    window_objective: float
    direct_objective: float
    parameter_distance: float
    seconds: float


def _scipy_stages(prob, x0, schedule):
    x = x0.copy()
    free = prob.layout.free_mask()
    for stage in schedule.stages:
        def fun(z, stage=stage):
            full = x.copy()
            full[free] = z
            v, g = prob.evaluate(full, stage)
            return v, g[free]
        res = scipy_minimize(fun, x[free], jac=True, method="L-BFGS-B",
                             options=dict(maxiter=20000, maxfun=40000, ftol=1e-15, gtol=1e-12, maxcor=30))
        x[free] = res.x
    return x


@lru_cache(maxsize=None)
def full_window_oracle() -> WindowOracle:
    """Phase 3 with one window over a 5-frame sequence versus scipy on the whole-sequence objective.

    Both start from the same phase-2 result and anneal through the same five stages.
    """
    t0 = time.perf_counter()
    spec = toy_model()
    motion = keyframe_motion(5, [(0.0, {"left_shoulder": (0, 0, 0.3), "right_hip": (0.2, 0, 0)}),
                                 (1.0, {"left_shoulder": (0, 0, 1.0), "right_hip": (-0.3, 0, 0.1)})])
    _, beta = make_subject(3, spec)
    frames, _ = render_keypoints(spec, np.clip(beta, -1, 1), motion, noise=NoiseSpec(sigma=2.0), seed=1)
    schedule = StageSchedule()
    config = RunConfig(window=5, solver=TIGHT)
    fit2, report = fit_sequence(frames, spec, schedule, config, image_size=IMAGE_SIZE, until_phase=2)
    fit3, _ = fit_sequence(frames, spec, schedule, config, image_size=IMAGE_SIZE, resume=(fit2, report))
    prob = sequence_problem(fit2, frames, spec, schedule.temporal_weight)
    direct = _scipy_stages(prob, prob.pack(fit2.frames, shared_beta=fit2.shared_shape).x, schedule)
    windowed = prob.pack(fit3.frames, shared_beta=fit3.shared_shape).x
    last = schedule.stages[-1]
    return WindowOracle(
        prob.evaluate(windowed, last, with_grad=False)[0],
        prob.evaluate(direct, last, with_grad=False)[0],
        float(np.abs(windowed - direct).max()),
        time.perf_counter() - t0,
    )


@dataclass
class SequenceRun:
    beta: np.ndarray
    phase1: SequenceFit
    final: SequenceFit
    truth_joints: np.ndarray
    seconds: float


def motion_setup(kind: str, frames: int = 25):
    if kind == "wave":
        return wave_motion(frames), NoiseSpec(sigma=3.0)
    if kind == "crouch":
        motion = crouch_motion(frames)
        noise = NoiseSpec(sigma=3.0, dropout=0.2, dropout_joints=LEG_JOINTS,
                          dropout_frames=motion.segments["hand_to_ground"])
        return motion, noise
    if kind == "wave-clean":
        return wave_motion(frames), NoiseSpec()
    raise ValueError(kind)


@lru_cache(maxsize=None)
def sequence_run(kind: str, seed: int) -> SequenceRun:
    """Full three-phase fit of a synthetic subject; the phase-1 result is kept too."""
    t0 = time.perf_counter()
    spec = default_body_model()
    _, beta = make_subject(seed, spec)
    motion, noise = motion_setup(kind)
    frames, truth = render_keypoints(spec, beta, motion, noise=noise, seed=seed)
    kept = {}
    final, _ = fit_sequence(frames, spec, config=RunConfig(seed=seed), image_size=IMAGE_SIZE,
                            on_phase=lambda p, f, r: kept.setdefault(p, f.copy()))
    return SequenceRun(beta, kept[1], final, truth.joints, time.perf_counter() - t0)


@dataclass
class ShapeRecovery:
    truth: np.ndarray
    estimate: np.ndarray
    seconds: float


@lru_cache(maxsize=None)
def shape_recovery(seed: int, frames: int = 15) -> ShapeRecovery:
    """Phases 1 and 2 on noiseless wave keypoints of a random subject."""
    t0 = time.perf_counter()
    spec = default_body_model()
    _, beta = make_subject(seed, spec)
    kps, _ = render_keypoints(spec, beta, wave_motion(frames), seed=seed)
    fit, _ = fit_sequence(kps, spec, config=RunConfig(seed=seed), image_size=IMAGE_SIZE, until_phase=2)
    return ShapeRecovery(beta, fit.shared_shape.copy(), time.perf_counter() - t0)
