"""Annealed registration: geometric (h, kappa) schedule around a quasi-Newton inner solver.

Gradients are always central finite differences, whatever the cost family.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import correspond
from .costs import CostSpec, check_compatible, cost_value, transform_shape
from .errors import (
    MissingNormals,
    NonFiniteObjective,
    RegistrationError,
    ScheduleExhausted,
    SingularJacobian,
    ValidationError,
)
from .geometry import OrientedPointSet, bounding_box, subsample
from .kernels import KernelParams
from .transforms import Rotation2D, Rotation3D, Tps, control_grid, identity_like

log = logging.getLogger(__name__)

GTOL = 1e-8
FTOL = 1e-10
ARMIJO_C1 = 1e-4
MAX_HALVINGS = 40
MAX_STEP = 0.25
PROBE_STEP = 1e-2
MAX_ESCAPES = 3
DEFAULT_MAX_EVALS = 20_000
PAPER_TPS3D_MAX_EVALS = 50_000


@dataclass(frozen=True)
class AnnealingSchedule:
    """Geometric schedule ``h <- h_step * h``, ``kappa <- kappa_step * kappa`` over ``steps`` stages."""

    h_init: float
    h_final: float
    h_step: float
    kappa_init: float
    kappa_final: float
    kappa_step: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ScheduleExhausted("annealing schedule needs at least one step")
        if not (self.h_final > 0 and self.h_init >= self.h_final):
            raise ValidationError("need h_init >= h_final > 0")
        if not 0 < self.h_step <= 1:
            raise ValidationError("h_step must lie in (0, 1]")
        if not (self.kappa_init > 0 and self.kappa_init <= self.kappa_final):
            raise ValidationError("need 0 < kappa_init <= kappa_final")
        if self.kappa_step < 1:
            raise ValidationError("kappa_step must be >= 1")
        last_h = self.h_init * self.h_step ** (self.steps - 1)
        last_k = self.kappa_init * self.kappa_step ** (self.steps - 1)
        if not math.isclose(last_h, self.h_final, rel_tol=1e-6):
            raise ValidationError(f"h schedule ends at {last_h:.6g}, not h_final = {self.h_final:.6g}")
        if not math.isclose(last_k, self.kappa_final, rel_tol=1e-6):
            raise ValidationError(f"kappa schedule ends at {last_k:.6g}, not kappa_final = {self.kappa_final:.6g}")

    @classmethod
    def geometric(cls, h_init: float, kappa_init: float, steps: int,
                  h_step: float = 0.5, kappa_step: float = 2.0) -> "AnnealingSchedule":
        return cls(
            h_init, h_init * h_step ** (steps - 1), h_step,
            kappa_init, kappa_init * kappa_step ** (steps - 1), kappa_step, steps,
        )

    def levels(self) -> list:
        return [
            (self.h_init * self.h_step**s, self.kappa_init * self.kappa_step**s)
            for s in range(self.steps)
        ]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("h_init", "h_final", "h_step", "kappa_init", "kappa_final", "kappa_step", "steps")}


DEFAULT_STEPS = {"rot2": 6, "rot3": 8, "tps2": 5, "tps3": 8}


def default_schedule(family: str, dim: int, box_diagonal: float) -> AnnealingSchedule:
    """Our defaults: ``h_init = diag/2``, halve h and double kappa (from 1) each stage."""
    key = family if family != "tps" else f"tps{dim}"
    return AnnealingSchedule.geometric(0.5 * box_diagonal, 1.0, DEFAULT_STEPS[key])


def fd_gradient(f: Callable, theta, eps=None) -> np.ndarray:
    """Central-difference gradient with per-coordinate step ``max(1e-6, 1e-6 |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    steps = np.maximum(1e-6, 1e-6 * np.abs(theta)) if eps is None else np.broadcast_to(eps, theta.shape)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = steps[i]
        fp, fm = f(theta + e), f(theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteObjective(f"objective not finite near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * steps[i])
    return g


@dataclass
class InnerResult:
    x: np.ndarray
    fun: float
    entry_fun: float
    n_evals: int
    n_iter: int
    converged: bool
    stalled: bool
    trace: list


def minimize_inner(f: Callable, theta0, max_evals: int = DEFAULT_MAX_EVALS,
                   unit_block: Optional[slice] = None, gtol: float = GTOL,
                   ftol: float = FTOL, max_step: float = MAX_STEP) -> InnerResult:
    """BFGS with Armijo backtracking on finite-difference gradients.

    Stops when ``||g|| < gtol``, the relative cost change drops below ``ftol``,
    or ``max_evals`` objective evaluations have been spent. Search directions
    are shortened to a step radius that starts at ``max_step``, which keeps a
    poorly scaled inverse Hessian from throwing the iterate into a distant
    basin. The radius doubles after a shortened quasi-Newton step whose actual
    decrease agrees with the quadratic model, and halves (never below
    ``max_step``) after a step that needed backtracking. A ``unit_block``
    (a quaternion) is kept on the unit sphere: gradient and step are projected
    onto its tangent space and it is renormalised after every accepted step.
    A failed line search returns the best point with ``stalled=True``.

    If the start point is already stationary (for instance a maximum that is
    symmetric about the start), coordinate probes of size ``PROBE_STEP`` look
    for a lower neighbour and the descent restarts from there.
    """
    evals = 0

    def F(x):
        nonlocal evals
        evals += 1
        return f(x)

    def project(v, x):
        if unit_block is not None:
            q = x[unit_block]
            v = v.copy()
            v[unit_block] -= np.dot(v[unit_block], q) * q
        return v

    def renorm(x):
        if unit_block is not None:
            x = x.copy()
            x[unit_block] /= np.linalg.norm(x[unit_block])
        return x

    x = renorm(np.array(theta0, dtype=float))
    fx = F(x)
    if not np.isfinite(fx):
        raise NonFiniteObjective("objective is not finite at the starting point")
    entry = fx
    trace = [fx]
    g = project(fd_gradient(F, x), x)
    n = x.size
    H = None
    it = 0
    escapes = 0
    radius = max_step
    converged = stalled = False
    while True:
        if np.linalg.norm(g) < gtol:
            if it == 0 and escapes < MAX_ESCAPES and evals + 2 * n < max_evals:
                escapes += 1
                probe = _probe_lower(F, x, fx, renorm, project)
                if probe is not None:
                    x, fx = probe
                    trace.append(fx)
                    g = project(fd_gradient(F, x), x)
                    H = None
                    continue
            converged = True
            break
        if evals >= max_evals:
            break
        if H is None:
            # no curvature information yet: try a full-length step downhill
            p = -g * (radius / np.linalg.norm(g))
            shrink = None
        else:
            p = project(-H @ g, x)
            pn = np.linalg.norm(p)
            shrink = min(1.0, radius / pn)
            p = p * shrink
        slope = float(g @ p)
        if slope >= 0:
            H = None
            continue
        alpha = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            xn = renorm(x + alpha * p)
            fn = F(xn)
            if np.isfinite(fn) and fn <= fx + ARMIJO_C1 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
            if evals >= max_evals:
                break
        if not accepted:
            stalled = evals < max_evals
            break
        if alpha < 1.0:
            radius = max(max_step, 0.5 * radius)
        elif shrink is not None and shrink < 1.0:
            # model decrease along the shortened step c * (-H g): c gHg - c^2 gHg / 2
            gHg = -slope / shrink
            predicted = gHg * (shrink - 0.5 * shrink * shrink)
            if predicted > 0 and (fx - fn) > 0.75 * predicted:
                radius *= 2.0
        it += 1
        gn_vec = project(fd_gradient(F, xn), xn)
        s = xn - x
        y = gn_vec - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if H is None:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        # a heavily backtracked steepest-descent trial says little about convergence
        small_change = shrink is not None and abs(fx - fn) <= ftol * max(abs(fx), abs(fn), 1e-300)
        x, fx, g = xn, fn, gn_vec
        trace.append(fx)
        if small_change:
            converged = True
            break
    return InnerResult(x, fx, entry, evals, it, converged, stalled, trace)


def _probe_lower(F, x, fx, renorm, project):
    """Best of ``x +- PROBE_STEP * e_i`` if it improves on ``fx``, else ``None``."""
    best = None
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = PROBE_STEP
        e = project(e, x)
        if not np.any(e):
            continue
        for sgn in (1.0, -1.0):
            xn = renorm(x + sgn * e)
            fn = F(xn)
            if np.isfinite(fn) and fn < fx - FTOL * abs(fx) and (best is None or fn < best[1]):
                best = (xn, fn)
    return best


@dataclass
class StageTrace:
    h: float
    kappa: float
    alpha: Optional[float]
    entry_cost: float
    exit_cost: float
    n_evals: int
    n_iter: int
    stalled: bool
    costs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "h": self.h, "kappa": self.kappa, "alpha": self.alpha,
            "entry_cost": self.entry_cost, "exit_cost": self.exit_cost,
            "n_evals": self.n_evals, "n_iter": self.n_iter, "stalled": self.stalled,
            "costs": list(self.costs),
        }


@dataclass
class OptimizeReport:
    transform: object
    stages: list
    wall_time: float
    correspondences: object = None

    @property
    def n_evals(self) -> int:
        return sum(s.n_evals for s in self.stages)

    @property
    def n_iter(self) -> int:
        return sum(s.n_iter for s in self.stages)

    @property
    def monotone(self) -> bool:
        return all(s.exit_cost <= s.entry_cost for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
            "wall_time": self.wall_time,
            "n_evals": self.n_evals,
            "n_iter": self.n_iter,
        }


@dataclass(frozen=True)
class CorrespondenceOptions:
    """How correspondences are used during registration.

    The local/global mixing weight moves linearly from ``alpha_start`` at the
    first annealing stage to 0 at the last one. ``alpha_start = 0`` matches on
    the global (position) distance only at every stage.
    """

    enabled: bool = False
    k: int = correspond.DEFAULT_K
    freeze_after_first: bool = False
    alpha_start: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_start <= 1.0:
            raise ValidationError("alpha_start must lie in [0, 1]")

    def alpha(self, stage: int, steps: int) -> float:
        if steps <= 1:
            return 0.0
        return self.alpha_start * (1.0 - stage / (steps - 1))


def _initial_transform(family: str, model: OrientedPointSet, translation: bool, grid_shape):
    if family in ("rot2", "rot3"):
        return identity_like(family, translation=translation)
    return Tps.identity(control_grid(bounding_box(model), grid_shape))


def _start_points(t0, multi_start: int, seed: int) -> list:
    if multi_start <= 1:
        return [t0]
    if isinstance(t0, Rotation2D):
        return [t0.with_params(np.r_[2 * np.pi * i / multi_start, t0.params()[1:]]) for i in range(multi_start)]
    if isinstance(t0, Rotation3D):
        rng = np.random.default_rng(seed)
        qs = [np.array([1.0, 0, 0, 0])] + [q / np.linalg.norm(q) for q in rng.normal(size=(multi_start - 1, 4))]
        return [t0.with_params(np.r_[q, t0.params()[4:]]) for q in qs]
    return [t0]


def register(model: OrientedPointSet, target: OrientedPointSet, spec: CostSpec, family: str,
             sched: Optional[AnnealingSchedule] = None, m: Optional[int] = 1000, seed: int = 0,
             correspondences: CorrespondenceOptions = CorrespondenceOptions(),
             translation: bool = False, grid_shape=None, max_evals: int = DEFAULT_MAX_EVALS,
             multi_start: int = 1, normal_mode: str = "jacobian") -> OptimizeReport:
    """Estimate the transform taking ``model`` onto ``target``.

    Starting from the identity, each annealing stage minimises the cost at the
    current ``(h, kappa)`` and then shrinks ``h`` / grows ``kappa``; exactly
    ``sched.steps`` stages are run. ``spec.kernel`` is overridden per stage with
    ``h1 = h2 = h`` and ``kappa1 = kappa2 = kappa``. With correspondences
    enabled they are re-estimated every stage while the local/global mix moves
    linearly from ``correspondences.alpha_start`` (1 by default) to 0.
    """
    t_start = time.perf_counter()
    if model.dim != target.dim:
        raise ValidationError("model and target dimensions differ")
    if spec.uses_normals and (model.normals is None or target.normals is None):
        raise MissingNormals(f"cost {spec.family!r} needs normals on both shapes")
    if family not in ("rot2", "rot3", "tps"):
        raise ValidationError(f"unknown transform family {family!r}")
    if (family == "rot2") != (model.dim == 2) and family != "tps":
        raise ValidationError(f"{family} does not match {model.dim}D data")
    t = _initial_transform(family, model, translation, grid_shape)
    check_compatible(spec, t)
    if sched is None:
        sched = default_schedule(family, model.dim, bounding_box(model).diagonal)

    if m is not None:
        msub, _ = subsample(model, m, seed)
        tsub, _ = subsample(target, m, seed + 1)
    else:
        msub, tsub = model, target
    if not spec.uses_normals:
        msub = OrientedPointSet(msub.points)
        tsub = OrientedPointSet(tsub.points)

    corr = None
    stages = []
    starts = _start_points(t, multi_start, seed)
    for s, (h, kappa) in enumerate(sched.levels()):
        alpha = None
        if correspondences.enabled:
            alpha = correspondences.alpha(s, sched.steps)
            if corr is None or not correspondences.freeze_after_first:
                moved = transform_shape(OrientedPointSet(msub.points), t).points
                corr = correspond.estimate(moved, tsub.points, alpha, correspondences.k)
        stage_spec = replace(spec, kernel=KernelParams.shared(h, kappa),
                             correspondences=corr if correspondences.enabled else spec.correspondences)

        def objective(theta, _t=t, _spec=stage_spec):
            try:
                return cost_value(_spec, msub, tsub, _t.with_params(theta), normal_mode)
            except SingularJacobian:
                return math.inf

        best = None
        for t_init in (starts if s == 0 else [t]):
            theta0 = t_init.params()
            f0 = objective(theta0)
            if not np.isfinite(f0):
                raise NonFiniteObjective(f"cost not finite at stage {s} entry")
            scale = abs(f0) if abs(f0) > 1e-300 else 1.0
            res = minimize_inner(lambda th: objective(th) / scale, theta0, max_evals, t.unit_block)
            cand = (res.fun * scale, f0, res, scale)
            if best is None or cand[0] < best[0]:
                best = cand
        exit_cost, entry_cost, res, scale = best
        t = t.with_params(res.x)
        stages.append(StageTrace(h, kappa, alpha, entry_cost, exit_cost, res.n_evals, res.n_iter,
                                 res.stalled, [c * scale for c in res.trace]))
        log.debug("stage %d h=%.4g kappa=%.4g cost %.6g -> %.6g (%d evals)",
                  s, h, kappa, entry_cost, exit_cost, res.n_evals)
    return OptimizeReport(t, stages, time.perf_counter() - t_start, corr)
