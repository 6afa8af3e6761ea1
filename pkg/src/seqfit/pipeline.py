"""Three-phase sequence fitting: per-frame init, shared shape, sliding-window temporal fit."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import DEFAULT_FOCAL, CameraParams, init_depth
from .energy import FitProblem, Temporal
from .errors import InitFailure, InvalidInputError
from .model import BodyModelSpec, PoseParams, batch_kinematics
from .objectives import DEFAULT_SIGMA, FrameParams, KeypointFrame, StageSchedule
from .optim import SolverSettings, run_stages
from .synth import _view_rotation

log = logging.getLogger(__name__)

PHASE1 = "phase1"
PHASE2 = "phase2"
PHASE3_FINAL = "phase3-final"
PHASE3_INTERMEDIATE = "phase3-intermediate"
FALLBACK_DEPTH = 3.0


@dataclass
class RunConfig:
    window: int = 7
    shape_samples: int = 15
    temporal_weight: float | None = None  # None: use the schedule's value
    sampling: str = "random"  # or "top-confidence"
    seed: int = 0
    solver: SolverSettings = field(default_factory=SolverSettings)
    focal_length: float = DEFAULT_FOCAL
    principal_point: tuple[float, float] | None = None
    sigma: float = DEFAULT_SIGMA
    threads: int | None = None

    def __post_init__(self):
        if self.window < 3:
            raise InvalidInputError("window size must be at least 3")
        if self.shape_samples < 1:
            raise InvalidInputError("shape sample size must be at least 1")
        if self.sampling not in ("random", "top-confidence"):
            raise InvalidInputError("sampling must be 'random' or 'top-confidence'")

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("SEQFIT_THREADS", "1")))

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "shape_samples": self.shape_samples,
            "temporal_weight": self.temporal_weight,
            "sampling": self.sampling,
            "seed": self.seed,
            "max_iterations": self.solver.max_iterations,
            "tolerance": self.solver.tolerance,
            "lbfgs_history": self.solver.history,
            "ftol": self.solver.ftol,
            "focal_length": self.focal_length,
            "principal_point": None if self.principal_point is None else list(self.principal_point),
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        solver = SolverSettings(
            max_iterations=int(data.get("max_iterations", 300)),
            tolerance=float(data.get("tolerance", 1e-6)),
            history=int(data.get("lbfgs_history", 10)),
            ftol=float(data.get("ftol", 1e-10)),
        )
        pp = data.get("principal_point")
        return cls(
            window=int(data.get("window", 7)),
            shape_samples=int(data.get("shape_samples", 15)),
            temporal_weight=data.get("temporal_weight"),
            sampling=data.get("sampling", "random"),
            seed=int(data.get("seed", 0)),
            solver=solver,
            focal_length=float(data.get("focal_length", DEFAULT_FOCAL)),
            principal_point=None if pp is None else (float(pp[0]), float(pp[1])),
            sigma=float(data.get("sigma", DEFAULT_SIGMA)),
        )


@dataclass
class SequenceFit:
    frames: list[FrameParams]
    provenance: list[str]
    failed: list[bool]
    focal_length: float
    principal_point: np.ndarray
    shared_shape: np.ndarray | None = None
    phase: int = 1  # last completed phase

    def copy(self) -> SequenceFit:
        return SequenceFit(
            [f.copy() for f in self.frames], list(self.provenance), list(self.failed),
            self.focal_length, self.principal_point.copy(),
            None if self.shared_shape is None else self.shared_shape.copy(), self.phase,
        )

    def joints(self, spec: BodyModelSpec) -> np.ndarray:
        """Model-space posed joints of every frame, (N, K, 3)."""
        betas = np.stack([f.beta for f in self.frames])
        rot = np.stack([f.pose.rotvecs() for f in self.frames])
        return batch_kinematics(spec, betas, rot).positions


@dataclass
class WindowState:
    start: int
    size: int
    reports: list = field(default_factory=list)
    finalized: list[int] = field(default_factory=list)


@dataclass
class FitReport:
    phases: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    frame_losses: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)  # wall clock; not part of exported fits


def _principal_point(config: RunConfig, image_size) -> np.ndarray:
    if config.principal_point is not None:
        return np.asarray(config.principal_point, dtype=float)
    if image_size is not None:
        return np.asarray(image_size, dtype=float) / 2.0
    return np.zeros(2)


def _temporal_weight(schedule: StageSchedule, config: RunConfig) -> float:
    return schedule.temporal_weight if config.temporal_weight is None else float(config.temporal_weight)


def _usable(frame: KeypointFrame | None) -> bool:
    return frame is not None and bool((frame.confidence > 0).any())


def rest_params(spec: BodyModelSpec, beta=None) -> FrameParams:
    beta = np.zeros(spec.shape_dim) if beta is None else np.asarray(beta, dtype=float)
    return FrameParams(beta, PoseParams.rest(spec, _view_rotation()), np.array([0.0, 0.0, FALLBACK_DEPTH]))


def _scaling(prob: FitProblem, schedule: StageSchedule):
    return lambda s, x: prob.curvature(x, schedule.stages[s])


def _fit_single(spec, frame, init: FrameParams, schedule, config, focal, pp, frame_id):
    prob = FitProblem(spec, [frame], focal, pp, sigma=config.sigma, frame_ids=[frame_id])
    res = run_stages(lambda s: prob.objective(schedule.stages[s]), prob.pack([init]), config.solver,
                     scaling_for_stage=_scaling(prob, schedule))
    return prob.unpack(res.block)[0], [r.to_dict() for r in res.reports]


def _phase1_job(args):
    spec, frame, init, schedule, config, focal, pp, i = args
    return _fit_single(spec, frame, init, schedule, config, focal, pp, i)


def phase1_fit(frames: list[KeypointFrame], spec: BodyModelSpec, schedule: StageSchedule,
               config: RunConfig | None = None, image_size=None, report: FitReport | None = None) -> SequenceFit:
    """Fit every frame on its own: depth init, then the five stages over all parameters."""
    config = config or RunConfig()
    report = report if report is not None else FitReport()
    if not frames:
        raise InvalidInputError("the keypoint sequence is empty")
    n = len(frames)
    focal = config.focal_length
    pp = _principal_point(config, image_size)
    camera = CameraParams(focal, pp)
    results: list[FrameParams | None] = [None] * n
    stage_reports: list = [None] * n
    usable = [_usable(f) for f in frames]

    independent, dependent = [], []
    inits = {}
    for i, fr in enumerate(frames):
        if not usable[i]:
            continue
        base = rest_params(spec)
        try:
            base.translation = init_depth(camera, spec, base.beta, fr, base.pose)
            inits[i] = base
            independent.append(i)
        except InitFailure:
            dependent.append(i)

    jobs = [(spec, frames[i], inits[i], schedule, config, focal, pp, i) for i in independent]
    workers = config.worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_phase1_job, jobs))
    else:
        outputs = [_phase1_job(job) for job in jobs]
    for i, (params, reps) in zip(independent, outputs):
        results[i], stage_reports[i] = params, reps

    for i in dependent:
        prev = next((results[j] for j in range(i - 1, -1, -1) if results[j] is not None), None)
        init = prev.copy() if prev is not None else rest_params(spec)
        report.warnings.append(f"frame {i}: depth initialization failed, starting from the previous frame")
        results[i], stage_reports[i] = _fit_single(spec, frames[i], init, schedule, config, focal, pp, i)

    failed = [not u for u in usable]
    fitted = [i for i in range(n) if results[i] is not None]
    for i in range(n):
        if results[i] is not None:
            continue
        if fitted:
            nearest = min(fitted, key=lambda j: (abs(j - i), j))
            results[i] = results[nearest].copy()
            report.warnings.append(f"frame {i}: no usable keypoints, copied frame {nearest}")
        else:
            results[i] = rest_params(spec)
            report.warnings.append(f"frame {i}: no usable keypoints, rest pose")
    report.phases["phase1"] = {"frames": stage_reports, "failed": [i for i in range(n) if failed[i]]}
    return SequenceFit(results, [PHASE1] * n, failed, focal, pp, None, 1)


def sample_subset(frames: list[KeypointFrame], size: int, strategy: str = "random", seed: int = 0,
                  candidates: list[int] | None = None) -> list[int]:
    """Frame indices for shape fitting, sorted ascending.

    "random" draws uniformly without replacement; "top-confidence" keeps the
    frames with the highest mean keypoint confidence (ties: lower index first).
    """
    pool = list(range(len(frames))) if candidates is None else list(candidates)
    if size < 1:
        raise InvalidInputError("subset size must be positive")
    if size > len(frames):
        raise InvalidInputError("subset size exceeds the sequence length")
    if size >= len(pool):
        return sorted(pool)
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(pool[i]) for i in rng.choice(len(pool), size=size, replace=False))
    if strategy == "top-confidence":
        ranked = sorted(pool, key=lambda i: (-frames[i].mean_confidence, i))
        return sorted(ranked[:size])
    raise InvalidInputError(f"unknown sampling strategy {strategy!r}")


def phase2_shape_fit(fit: SequenceFit, subset: list[int], frames: list[KeypointFrame], spec: BodyModelSpec,
                     schedule: StageSchedule, config: RunConfig | None = None,
                     report: FitReport | None = None) -> np.ndarray:
    """One shape vector for the whole sequence, fitted on a subset of frames.

    Starts from the mean of the subset's phase-1 shapes; poses, root rotations
    and cameras of the subset frames are free. Every frame of ``fit`` receives
    the result as its shape.
    """
    config = config or RunConfig()
    if not subset:
        raise InvalidInputError("the shape-fitting subset is empty")
    init_beta = np.mean([fit.frames[i].beta for i in subset], axis=0)
    prob = FitProblem(
        spec, [frames[i] for i in subset], fit.focal_length, fit.principal_point,
        shared_shape=True, shared_prior=True, sigma=config.sigma, frame_ids=list(subset),
    )
    block = prob.pack([fit.frames[i] for i in subset], shared_beta=init_beta)
    res = run_stages(lambda s: prob.objective(schedule.stages[s]), block, config.solver,
                         scaling_for_stage=_scaling(prob, schedule))
    shared = prob.unpack(res.block)[0].beta.copy()
    for f in fit.frames:
        f.beta = shared.copy()
    fit.shared_shape = shared
    fit.phase = 2
    fit.provenance = [PHASE2 if p == PHASE1 else p for p in fit.provenance]
    if report is not None:
        report.phases["phase2"] = {
            "subset": list(subset),
            "initial_shape": init_beta.tolist(),
            "stages": [r.to_dict() for r in res.reports],
        }
    return shared


def window_starts(num_frames: int, window: int) -> list[int]:
    if window >= num_frames:
        return [0]
    return list(range(num_frames - window + 1))


def window_temporal(start: int, size: int, num_frames: int, has_context: bool) -> np.ndarray:
    """(prev, current, next) rows for one window.

    Rows refer to window-local frames 0..size-1; index ``size`` is the fixed
    frame just left of the window. The window's last frame and the sequence's
    first and last frames get no temporal term.
    """
    rows = []
    for k in range(size - 1):
        g = start + k
        if g < 1 or g > num_frames - 2:
            continue
        prev = k - 1 if k >= 1 else (size if has_context else None)
        if prev is None:
            continue
        rows.append((prev, k, k + 1))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def phase3_temporal_fit(fit: SequenceFit, frames: list[KeypointFrame], spec: BodyModelSpec,
                        schedule: StageSchedule, config: RunConfig | None = None,
                        report: FitReport | None = None, on_window=None) -> list[WindowState]:
    """Sliding-window fit of poses and cameras with the temporal term; shape stays fixed."""
    config = config or RunConfig()
    if fit.shared_shape is None:
        raise InvalidInputError("phase 3 needs the shared shape from phase 2")
    n_frames = len(fit.frames)
    size = min(config.window, n_frames)
    weight = _temporal_weight(schedule, config)
    states = []
    starts = window_starts(n_frames, config.window)
    for w_i, start in enumerate(starts):
        idx = list(range(start, start + size))
        has_context = start > 0
        context = np.zeros((0, spec.num_joints, 3))
        if has_context:
            left = fit.frames[start - 1]
            context = batch_kinematics(spec, left.beta[None], left.pose.rotvecs()[None]).positions
        temporal = Temporal(window_temporal(start, size, n_frames, has_context), context, weight)
        prob = FitProblem(
            spec, [frames[i] for i in idx], fit.focal_length, fit.principal_point,
            shared_shape=True, freeze=("shape",), temporal=temporal, sigma=config.sigma, frame_ids=idx,
        )
        block = prob.pack([fit.frames[i] for i in idx], shared_beta=fit.shared_shape)
        res = run_stages(lambda s: prob.objective(schedule.stages[s]), block, config.solver,
                         scaling_for_stage=_scaling(prob, schedule))
        for i, params in zip(idx, prob.unpack(res.block)):
            params.beta = fit.shared_shape.copy()
            fit.frames[i] = params
        last = w_i == len(starts) - 1
        finalized = idx if last else [start]
        for i in idx:
            fit.provenance[i] = PHASE3_INTERMEDIATE
        for i in range(0, idx[-1] + 1 if last else start + 1):
            fit.provenance[i] = PHASE3_FINAL
        state = WindowState(start, size, [r.to_dict() for r in res.reports], finalized)
        states.append(state)
        if on_window is not None:
            on_window(state)
    fit.phase = 3
    if report is not None:
        report.phases["phase3"] = {
            "window": size,
            "temporal_weight": weight,
            "windows": [{"start": s.start, "finalized": s.finalized, "stages": s.reports} for s in states],
        }
    return states


def sequence_problem(fit: SequenceFit, frames: list[KeypointFrame], spec: BodyModelSpec,
                     temporal_weight: float, sigma: float = DEFAULT_SIGMA) -> FitProblem:
    """The full-sequence objective (mean of per-frame and temporal terms), shape shared."""
    n = len(fit.frames)
    rows = [(i - 1, i, i + 1) for i in range(1, n - 1)]
    temporal = Temporal(np.asarray(rows, dtype=np.int64).reshape(-1, 3), np.zeros((0, spec.num_joints, 3)),
                        temporal_weight)
    return FitProblem(spec, list(frames), fit.focal_length, fit.principal_point, shared_shape=True,
                      freeze=("shape",), temporal=temporal, sigma=sigma)


def frame_losses(fit: SequenceFit, frames, spec, schedule: StageSchedule, config: RunConfig) -> list[dict]:
    """Per-frame terms at the last stage's weights, temporal term over the whole sequence."""
    weight = _temporal_weight(schedule, config) if fit.phase >= 3 else 0.0
    stage = schedule.stages[-1]
    out = []
    if fit.shared_shape is not None:
        prob = sequence_problem(fit, frames, spec, weight, config.sigma)
        block = prob.pack(fit.frames, shared_beta=fit.shared_shape)
    else:
        prob = FitProblem(spec, list(frames), fit.focal_length, fit.principal_point, sigma=config.sigma)
        block = prob.pack(fit.frames)
    _, terms = prob.evaluate(block.x, stage, breakdown=True)
    for i in range(len(fit.frames)):
        out.append({k: float(v[i]) for k, v in terms.items()})
    return out


def fit_sequence(frames: list[KeypointFrame], spec: BodyModelSpec, schedule: StageSchedule | None = None,
                 config: RunConfig | None = None, *, image_size=None, until_phase: int = 3,
                 resume: tuple[SequenceFit, FitReport] | None = None,
                 on_phase=None) -> tuple[SequenceFit, FitReport]:
    """Run phase 1, subset sampling, phase 2 and phase 3 (or continue a checkpoint).

    ``on_phase(phase, fit, report)`` is called after each phase that runs, e.g.
    to write checkpoints.
    """
    schedule = schedule or StageSchedule()
    config = config or RunConfig()
    if not frames:
        raise InvalidInputError("the keypoint sequence is empty")
    if resume is not None:
        fit, report = resume[0].copy(), resume[1]
        if len(fit.frames) != len(frames):
            raise InvalidInputError("checkpoint frame count differs from the keypoint sequence")
    else:
        fit, report = None, FitReport()

    if fit is None:
        t0 = time.perf_counter()
        fit = phase1_fit(frames, spec, schedule, config, image_size, report)
        report.timings["phase1"] = time.perf_counter() - t0
        if on_phase is not None:
            on_phase(1, fit, report)
    if fit.phase < 2 and until_phase >= 2:
        t0 = time.perf_counter()
        candidates = [i for i in range(len(frames)) if not fit.failed[i]] or list(range(len(frames)))
        size = min(config.shape_samples, len(frames))
        subset = sample_subset(frames, size, config.sampling, config.seed, candidates)
        phase2_shape_fit(fit, subset, frames, spec, schedule, config, report)
        report.timings["phase2"] = time.perf_counter() - t0
        if on_phase is not None:
            on_phase(2, fit, report)
    if fit.phase < 3 and until_phase >= 3:
        t0 = time.perf_counter()
        phase3_temporal_fit(fit, frames, spec, schedule, config, report)
        report.timings["phase3"] = time.perf_counter() - t0
        if on_phase is not None:
            on_phase(3, fit, report)
    report.frame_losses = frame_losses(fit, frames, spec, schedule, config)
    return fit, report
