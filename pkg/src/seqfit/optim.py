"""Parameter packing and a bounded L-BFGS minimizer with strong-Wolfe line search."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateProjectionError, EvaluationError, InvalidInputError
from .rotation import canonicalize

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    frozen: bool = False
    rotation: bool = False  # axis-angle triples, canonicalized between stages
    bound: float | None = None  # symmetric box |x| <= bound

    @property
    def size(self) -> int:
        return self.stop - self.start


class ParamLayout:
    """Named, disjoint segments that tile a flat parameter vector."""

    def __init__(self):
        self.segments: list[Segment] = []
        self._by_name: dict[str, Segment] = {}

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def add(self, name: str, size: int, *, frozen=False, rotation=False, bound=None) -> Segment:
        if name in self._by_name:
            raise InvalidInputError(f"duplicate segment {name!r}")
        seg = Segment(name, self.size, self.size + size, frozen, rotation, bound)
        self.segments.append(seg)
        self._by_name[name] = seg
        return seg

    def __getitem__(self, name: str) -> Segment:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def freeze(self, *prefixes: str) -> ParamLayout:
        """Copy with every segment whose name starts with one of ``prefixes`` frozen."""
        out = ParamLayout()
        for s in self.segments:
            frozen = s.frozen or any(s.name == p or s.name.startswith(p + "/") for p in prefixes)
            out.add(s.name, s.size, frozen=frozen, rotation=s.rotation, bound=s.bound)
        return out

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        for s in self.segments:
            if s.frozen:
                mask[s.start:s.stop] = False
        return mask

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.size, -np.inf)
        hi = np.full(self.size, np.inf)
        for s in self.segments:
            if s.bound is not None:
                lo[s.start:s.stop] = -s.bound
                hi[s.start:s.stop] = s.bound
        return lo, hi


@dataclass
class ParamBlock:
    x: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (self.layout.size,):
            raise InvalidInputError("parameter vector does not match its layout")

    def get(self, name: str) -> np.ndarray:
        s = self.layout[name]
        return self.x[s.start:s.stop]

    def copy(self) -> ParamBlock:
        return ParamBlock(self.x.copy(), self.layout)

    def canonicalized(self) -> ParamBlock:
        x = self.x.copy()
        for s in self.layout.segments:
            if s.rotation and not s.frozen:
                x[s.start:s.stop] = canonicalize(x[s.start:s.stop].reshape(-1, 3)).reshape(-1)
        return ParamBlock(x, self.layout)


@dataclass
class SolveReport:
    initial_loss: float
    final_loss: float
    iterations: int
    grad_norm: float
    reason: str
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "reason": self.reason,
            "evaluations": self.evaluations,
        }


@dataclass
class SolverSettings:
    max_iterations: int = 300
    tolerance: float = 1e-6
    history: int = 10
    # stop when the relative decrease of one iteration falls below this
    ftol: float = 1e-10


def gradient(objective: Objective, at: ParamBlock) -> np.ndarray:
    """Gradient of ``objective`` at a block, zeroed on frozen segments."""
    value, grad = objective(at.x)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise EvaluationError("objective or gradient is not finite at the evaluation point")
    return np.where(at.layout.free_mask(), grad, 0.0)


class _Counted:
    """Wraps an objective: masks frozen entries, turns degenerate points into +inf."""

    def __init__(self, objective: Objective, mask: np.ndarray):
        self.objective = objective
        self.mask = mask
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        try:
            f, g = self.objective(x)
        except DegenerateProjectionError:
            return np.inf, np.zeros_like(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(x)
        return float(f), np.where(self.mask, g, 0.0)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points with slopes; None if ill-posed."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if np.isfinite(t) else None


def _strong_wolfe(phi, f0, g0, alpha1, c1=1e-4, c2=0.9, max_evals=40):
    """Line search for step length satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns (value, directional derivative, payload). Returns
    (alpha, value, payload) of the accepted point, or None if no point with
    sufficient decrease was found.
    """
    a_prev, f_prev, g_prev = 0.0, f0, g0
    alpha = alpha1
    best = None
    evals = 0

    def zoom(lo, flo, glo, hi, fhi, ghi):
        nonlocal evals, best
        while evals < max_evals:
            cand = None
            if np.isfinite(fhi):
                cand = _cubic_min(lo, flo, glo, hi, fhi, ghi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if cand is None or not (left + margin <= cand <= right - margin):
                cand = 0.5 * (lo + hi)
            fa, ga, pay = phi(cand)
            evals += 1
            if fa <= f0 + c1 * cand * g0 and (best is None or fa < best[1]):
                best = (cand, fa, pay)
            if not np.isfinite(fa) or fa > f0 + c1 * cand * g0 or fa >= flo:
                hi, fhi, ghi = cand, fa, ga
            else:
                if abs(ga) <= -c2 * g0:
                    return cand, fa, pay
                if ga * (hi - lo) >= 0:
                    hi, fhi, ghi = lo, flo, glo
                lo, flo, glo = cand, fa, ga
            if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
                break
        return best

    while evals < max_evals:
        fa, ga, pay = phi(alpha)
        evals += 1
        if np.isfinite(fa) and fa <= f0 + c1 * alpha * g0 and (best is None or fa < best[1]):
            best = (alpha, fa, pay)
        if not np.isfinite(fa) or fa > f0 + c1 * alpha * g0 or (evals > 1 and fa >= f_prev):
            return zoom(a_prev, f_prev, g_prev, alpha, fa, ga)
        if abs(ga) <= -c2 * g0:
            return alpha, fa, pay
        if ga >= 0:
            return zoom(alpha, fa, ga, a_prev, f_prev, g_prev)
        a_prev, f_prev, g_prev = alpha, fa, ga
        alpha = min(alpha * 4.0, 1e10)
    return best


def minimize(objective: Objective, init: ParamBlock, settings: SolverSettings | None = None,
             max_iterations: int | None = None, tolerance: float | None = None,
             scaling: np.ndarray | None = None):
    """L-BFGS over the free segments of ``init``.

    Stops when the gradient max-norm drops below ``tolerance * max(1, |f|)``, when
    an iteration no longer decreases the loss, or after ``max_iterations``. The
    returned point never has a higher loss than ``init``. Box-bounded segments are
    clipped after each step.

    ``scaling`` is an optional positive diagonal curvature estimate. The solver
    then runs on ``sqrt(scaling) * x``, which amounts to L-BFGS with a diagonal
    initial inverse Hessian.
    """
    settings = settings or SolverSettings()
    max_iterations = settings.max_iterations if max_iterations is None else max_iterations
    tol = settings.tolerance if tolerance is None else tolerance
    layout = init.layout
    mask = layout.free_mask()
    lo, hi = layout.bounds()
    fun = _Counted(objective, mask)
    if scaling is None:
        sq = np.ones(layout.size)
    else:
        d = np.asarray(scaling, dtype=float)
        if d.shape != (layout.size,) or not np.all(np.isfinite(d)):
            raise InvalidInputError("scaling must be a finite vector matching the layout")
        top = float(d.max()) if d.size else 1.0
        sq = np.sqrt(np.maximum(d, max(top * 1e-10, 1e-12)))

    x = np.clip(init.x, lo, hi)
    f, g = fun(x)
    if not np.isfinite(f):
        # identify the failing term for the caller
        try:
            f_raw, _ = objective(x)
        except DegenerateProjectionError as exc:
            raise EvaluationError(f"objective undefined at the initial point: {exc}") from exc
        raise EvaluationError(f"objective is not finite at the initial point ({f_raw})")
    f_init = f
    gu = g / sq
    s_hist: deque = deque(maxlen=settings.history)
    y_hist: deque = deque(maxlen=settings.history)
    reason = "max_iterations"
    it = 0
    for it in range(max_iterations + 1):
        gmax = float(np.abs(g).max()) if g.size else 0.0
        if gmax < tol * max(1.0, abs(f)):
            reason = "gradient"
            break
        if it == max_iterations:
            break
        du = _two_loop(gu, s_hist, y_hist)
        slope = float(gu @ du)
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            du = -gu
            slope = float(gu @ du)
        if s_hist:
            alpha1 = 1.0
        elif scaling is not None:
            alpha1 = 1.0  # diagonal Newton step
        else:
            alpha1 = min(1.0, 1.0 / max(np.abs(gu).sum(), 1e-12))
        dx = du / sq

        def phi(alpha, x=x, dx=dx):
            xa = x + alpha * dx
            fa, ga = fun(xa)
            return fa, float(ga @ dx), (xa, ga)

        found = _strong_wolfe(phi, f, slope, alpha1)
        if found is None:
            if s_hist:
                # stale curvature pairs; retry once along steepest descent
                s_hist.clear()
                y_hist.clear()
                continue
            reason = "line_search"
            break
        _, f_new, (x_new, g_new) = found
        clipped = np.clip(x_new, lo, hi)
        if not np.array_equal(clipped, x_new):
            f_c, g_c = fun(clipped)
            if not f_c < f:
                reason = "bounds"
                break
            x_new, f_new, g_new = clipped, f_c, g_c
        gu_new = g_new / sq
        su = (x_new - x) * sq
        yu = gu_new - gu
        if float(su @ yu) > 1e-12 * float(yu @ yu):
            s_hist.append(su)
            y_hist.append(yu)
        decrease = f - f_new
        x, f, g, gu = x_new, f_new, g_new, gu_new
        if decrease <= settings.ftol * max(1.0, abs(f)):
            reason = "ftol"
            it += 1
            break
    report = SolveReport(
        initial_loss=float(f_init),
        final_loss=float(f),
        iterations=it,
        grad_norm=float(np.abs(g).max()) if g.size else 0.0,
        reason=reason,
        evaluations=fun.calls,
    )
    return ParamBlock(x, layout), report


def _two_loop(g, s_hist, y_hist):
    q = -g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


@dataclass
class StagedResult:
    block: ParamBlock
    reports: list[SolveReport] = field(default_factory=list)


def run_stages(objective_for_stage: Callable[[int], Objective], init: ParamBlock,
               settings: SolverSettings | None = None, num_stages: int = 5,
               scaling_for_stage: Callable[[int, np.ndarray], np.ndarray] | None = None) -> StagedResult:
    """Minimize the stage objectives in turn, each warm-started from the previous result.

    ``objective_for_stage`` receives the 0-based stage index; ``scaling_for_stage``
    (stage index, current x) optionally supplies a diagonal preconditioner.
    Axis-angle segments are canonicalized between stages.
    """
    block = init
    reports = []
    for stage in range(num_stages):
        scaling = None if scaling_for_stage is None else scaling_for_stage(stage, block.x)
        block, rep = minimize(objective_for_stage(stage), block, settings, scaling=scaling)
        block = block.canonicalized()
        log.debug("stage %d: %.6g -> %.6g in %d iterations (%s)",
                  stage + 1, rep.initial_loss, rep.final_loss, rep.iterations, rep.reason)
        reports.append(rep)
    return StagedResult(block, reports)
