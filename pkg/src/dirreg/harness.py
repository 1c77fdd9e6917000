"""Synthetic experiments: shape generators, perturbations, scoring and a batch runner."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import normals as nrm_mod
from .costs import CostSpec
from .errors import CountMismatch, InvalidFraction, ValidationError
from .geometry import OrientedPointSet, bounding_box, normalize_to_unit_box, rotation_matrix_2d
from .kernels import KernelParams
from .optimize import CorrespondenceOptions, register
from .transforms import Rotation2D, Rotation3D, apply_to_normals, apply_to_points, fit_tps

SCENARIOS = (
    "rigid2d", "rigid2d_missing", "nonrigid2d", "nonrigid2d_rot", "nonrigid2d_missing",
    "rigid3d_same", "rigid3d_resampled", "rigid3d_noise", "nonrigid3d",
)
# neighbour counts used when re-estimating normals of noisy targets
NOISE_KNN = {0.001: 40, 0.002: 60, 0.003: 120}


# ---------------------------------------------------------------------------
# generators


def gen_curve(kind: str = "fourier", n: int = 50, seed: int = 0) -> OrientedPointSet:
    """Closed star-shaped curve ``r(t) = 1 + sum_{k=2..5} a_k cos(k t + phi_k)`` with analytic normals.

    ``kind="circle"`` sets every ``a_k`` to zero. Points are ordered
    counter-clockwise, so the normals point outward.
    """
    if n < 8:
        raise ValidationError("curves need at least 8 samples")
    rng = np.random.default_rng(seed)
    ks = np.arange(2, 6)
    if kind == "circle":
        a = np.zeros(4)
        phi = np.zeros(4)
    elif kind == "fourier":
        a = rng.uniform(0.0, 0.15, size=4)
        phi = rng.uniform(0.0, 2 * np.pi, size=4)
    else:
        raise ValidationError(f"unknown curve kind {kind!r}")
    t = 2 * np.pi * np.arange(n) / n
    arg = np.outer(t, ks) + phi
    r = 1.0 + np.cos(arg) @ a
    dr = -np.sin(arg) @ (ks * a)
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    tan = np.column_stack([dr * np.cos(t) - r * np.sin(t), dr * np.sin(t) + r * np.cos(t)])
    normals = np.column_stack([tan[:, 1], -tan[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return OrientedPointSet(pts, normals, closed=True)


def centered_unit_box(shape: OrientedPointSet) -> OrientedPointSet:
    """Unit-box scaling with the box centred on the origin (rotations act about the centre)."""
    unit, _ = normalize_to_unit_box(shape)
    box = bounding_box(unit)
    return OrientedPointSet(unit.points - box.center, unit.normals, unit.faces, unit.closed)


def icosphere(subdivisions: int = 3):
    """Unit icosphere vertices and CCW (outward) faces."""
    p = (1 + 5**0.5) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                v = verts[i] + verts[j]
                verts.append(v / np.linalg.norm(v))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def bumpy_sphere(seed: int = 0, subdivisions: int = 3, n_bumps: int = 6, axes=(1.0, 1.0, 1.0),
                 cap: Optional[float] = None) -> OrientedPointSet:
    """Icosphere with random smooth radial bumps, scaled into the unit box.

    Parameters
    ----------
    seed : int
        Seeds bump directions, heights and widths.
    subdivisions : int
        Icosphere refinement level (642 vertices at 3, 2562 at 4).
    n_bumps : int
        Number of Gaussian-profile radial bumps.
    axes : sequence of 3 floats
        Per-axis stretch applied after the bumps.
    cap : float, optional
        When given, vertices whose sphere direction has ``z < cap`` are removed
        together with their faces, leaving an open surface like a range scan
        with an unscanned base.

    Returns
    -------
    OrientedPointSet
        Mesh with face-averaged vertex normals, scaled into ``[0, 1]^3``.
    """
    rng = np.random.default_rng(seed)
    v, f = icosphere(subdivisions)
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amp = rng.uniform(0.1, 0.35, size=n_bumps)
    width = rng.uniform(3.0, 8.0, size=n_bumps)
    r = 1.0 + np.exp(width * (v @ dirs.T - 1.0)) @ amp
    pts = v * r[:, None] * np.asarray(axes, dtype=float)
    if cap is not None:
        keep = v[:, 2] >= cap
        remap = np.full(len(v), -1)
        remap[keep] = np.arange(keep.sum())
        f = remap[f[np.all(keep[f], axis=1)]]
        pts = pts[keep]
    shape = OrientedPointSet(pts, nrm_mod.normals_mesh(pts, f), f)
    return normalize_to_unit_box(shape)[0]


SCAN_CAP = -0.7


def deformed_torus(seed: int = 0, nu: int = 32, nv: int = 16, R: float = 1.0, r: float = 0.35) -> OrientedPointSet:
    rng = np.random.default_rng(seed)
    u = 2 * np.pi * np.arange(nu) / nu
    w = 2 * np.pi * np.arange(nv) / nv
    U, W = np.meshgrid(u, w, indexing="ij")
    rr = r * (1 + 0.25 * rng.uniform() * np.cos(3 * U + rng.uniform(0, 2 * np.pi)))
    pts = np.stack([(R + rr * np.cos(W)) * np.cos(U), (R + rr * np.cos(W)) * np.sin(U), rr * np.sin(W)], -1)
    pts = pts.reshape(-1, 3)
    idx = np.arange(nu * nv).reshape(nu, nv)
    a, b = idx, np.roll(idx, -1, axis=0)
    c, d = np.roll(idx, -1, axis=1), np.roll(np.roll(idx, -1, axis=0), -1, axis=1)
    faces = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
    shape = OrientedPointSet(pts, nrm_mod.normals_mesh(pts, faces), faces)
    return centered_unit_box(shape)


def deformation_controls(box) -> np.ndarray:
    """Nine control points on a bounding box: 2D corners + edge midpoints + centre, 3D corners + centre."""
    lo, hi = box.lo, box.hi
    if lo.size == 2:
        xs, ys = (lo[0], 0.5 * (lo[0] + hi[0]), hi[0]), (lo[1], 0.5 * (lo[1] + hi[1]), hi[1])
        return np.array([(x, y) for x in xs for y in ys])
    corners = [(x, y, z) for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    return np.array(corners + [tuple(0.5 * (lo + hi))])


def deform_tps(shape: OrientedPointSet, degree: float, seed: int = 0, return_warp: bool = False):
    """Random TPS warp: control targets jittered with std ``0.02 * degree * diag(bbox)``."""
    if degree < 1:
        raise ValidationError("degree of deformation must be >= 1")
    box = bounding_box(shape)
    ctrl = deformation_controls(box)
    rng = np.random.default_rng(seed)
    disp = rng.normal(scale=0.02 * degree * box.diagonal, size=ctrl.shape)
    warp = fit_tps(ctrl, ctrl + disp)
    pts = apply_to_points(warp, shape.points)
    normals = None if shape.normals is None else apply_to_normals(warp, shape.points, shape.normals)
    out = OrientedPointSet(pts, normals, shape.faces, shape.closed)
    return (out, warp) if return_warp else out


def rotate_shape(shape: OrientedPointSet, rotation, center=None) -> OrientedPointSet:
    """Rigidly rotate points (about ``center``, default origin) and normals.

    ``rotation`` is an angle in radians (2D), a :class:`Rotation3D`, or an
    ``(axis, angle)`` pair (3D).
    """
    if shape.dim == 2:
        R = rotation_matrix_2d(float(rotation))
    elif isinstance(rotation, Rotation3D):
        R = rotation.matrix()
    else:
        axis, angle = rotation
        R = Rotation3D.from_axis_angle(axis, angle).matrix()
    c = np.zeros(shape.dim) if center is None else np.asarray(center, dtype=float)
    pts = (shape.points - c) @ R.T + c
    normals = None if shape.normals is None else shape.normals @ R.T
    if normals is not None:
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return OrientedPointSet(pts, normals, shape.faces, shape.closed)


def perturb_with_index(shape: OrientedPointSet, op: str, value, seed: int = 0):
    """Like :func:`perturb` but also returns the source index of every output row."""
    rng = np.random.default_rng(seed)
    n = len(shape)
    if op == "remove_fraction":
        f = float(value)
        if not 0.0 <= f < 1.0:
            raise InvalidFraction(f"fraction must lie in [0, 1), got {f}")
        drop = math.ceil(f * n)
        keep = np.sort(rng.choice(n, size=n - drop, replace=False))
        out = shape.take(keep)
        return OrientedPointSet(out.points, out.normals, None, shape.closed if drop == 0 else None), keep
    if op == "add_gauss_noise":
        sigma = float(value)
        if sigma < 0:
            raise ValidationError("noise sigma must be >= 0")
        # noisy points invalidate normals: re-estimate with normals_knn_pca
        pts = shape.points + rng.normal(scale=sigma, size=shape.points.shape)
        return OrientedPointSet(pts, None, shape.faces, shape.closed), np.arange(n)
    if op == "resample":
        m = int(value)
        if m < 1:
            raise ValidationError("resample count must be >= 1")
        idx = np.sort(rng.choice(n, size=min(m, n), replace=False))
        return shape.take(idx), idx
    if op == "rotate":
        return rotate_shape(shape, value), np.arange(n)
    raise ValidationError(f"unknown perturbation {op!r}")


def perturb(shape: OrientedPointSet, op: str, value, seed: int = 0) -> OrientedPointSet:
    """Apply one of ``remove_fraction``, ``add_gauss_noise``, ``resample`` or ``rotate``."""
    return perturb_with_index(shape, op, value, seed)[0]


def mse(transformed_model, target, squared: bool = False) -> float:
    """Mean Euclidean distance between index-aligned points (``squared`` for the squared variant)."""
    a = np.asarray(getattr(transformed_model, "points", transformed_model), dtype=float)
    b = np.asarray(getattr(target, "points", target), dtype=float)
    if a.shape != b.shape:
        raise CountMismatch(f"point counts differ: {a.shape} vs {b.shape}")
    d2 = np.sum((a - b) ** 2, axis=1)
    return float(np.mean(d2 if squared else np.sqrt(d2)))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentSpec:
    scenario: str
    sweep: list
    trials: int = 10
    families: list = field(default_factory=lambda: ["x", "u", "xu"])
    seed: int = 0
    n: Optional[int] = None
    m: Optional[int] = 1000
    correspondences: Optional[bool] = None
    alpha_start: float = 1.0
    degree: float = 4.0
    squared: bool = False
    max_evals: int = 20_000
    workers: int = 1
    multi_start: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if not self.sweep:
            raise ValidationError("sweep needs at least one value")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown experiment keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrialPair:
    model: OrientedPointSet
    target: OrientedPointSet
    eval_model: np.ndarray
    eval_target: np.ndarray
    family: str


DEFAULT_N = {"rigid2d": 100, "rigid2d_missing": 150, "nonrigid2d": 100, "nonrigid2d_rot": 100,
             "nonrigid2d_missing": 100, "rigid3d_same": 500, "rigid3d_resampled": 500,
             "rigid3d_noise": 500, "nonrigid3d": 500}


def _random_axis(rng):
    a = rng.normal(size=3)
    return a / np.linalg.norm(a)


def make_pair(scenario: str, value, seed: int, n: Optional[int] = None, degree: float = 4.0) -> TrialPair:
    """Build one model/target pair plus the full-resolution points used for scoring."""
    n = n or DEFAULT_N[scenario]
    rng = np.random.default_rng(seed + 7919)
    if scenario in ("rigid2d", "rigid2d_missing"):
        s1, _ = normalize_to_unit_box(gen_curve("fourier", n, seed))
        theta = math.radians(float(value) if scenario == "rigid2d" else 60.0)
        s2 = rotate_shape(s1, theta)
        if scenario == "rigid2d_missing":
            s2 = perturb(s2, "remove_fraction", value, seed + 1)
        return TrialPair(s1, s2, s1.points, rotate_shape(s1, theta).points, "rot2")
    if scenario.startswith("nonrigid2d"):
        s1, _ = normalize_to_unit_box(gen_curve("fourier", n, seed))
        deg = float(value) if scenario == "nonrigid2d" else degree
        s2 = deform_tps(s1, deg, seed + 1)
        if scenario == "nonrigid2d_rot":
            s2 = rotate_shape(s2, math.radians(float(value)), bounding_box(s2).center)
        model = s1
        if scenario == "nonrigid2d_missing":
            model = perturb(s1, "remove_fraction", value, seed + 2)
        return TrialPair(model, s2, s1.points, s2.points, "tps")
    if scenario.startswith("rigid3d"):
        sub = 3 if scenario == "rigid3d_same" else 4
        mesh = bumpy_sphere(seed, sub, cap=SCAN_CAP)
        if scenario == "rigid3d_same":
            angle = math.radians(float(value))
        else:
            angle = math.radians(60.0 if scenario == "rigid3d_resampled" else 30.0)
        rot = Rotation3D.from_axis_angle(_random_axis(rng), angle)
        full_target = rotate_shape(mesh, rot)
        if scenario == "rigid3d_same":
            idx = np.sort(rng.choice(len(mesh), size=min(n, len(mesh)), replace=False))
            return TrialPair(mesh.take(idx), full_target.take(idx), mesh.points, full_target.points, "rot3")
        target_src = full_target
        if scenario == "rigid3d_noise":
            sigma = float(value)
            noisy = perturb(full_target, "add_gauss_noise", sigma, seed + 3)
            k = NOISE_KNN.get(round(sigma, 6), 40)
            target_src = OrientedPointSet(noisy.points, nrm_mod.normals_knn_pca(noisy.points, k))
        i1 = np.sort(rng.choice(len(mesh), size=min(n, len(mesh)), replace=False))
        i2 = np.sort(rng.choice(len(mesh), size=min(n, len(mesh)), replace=False))
        return TrialPair(mesh.take(i1), target_src.take(i2), mesh.points, full_target.points, "rot3")
    if scenario == "nonrigid3d":
        mesh = bumpy_sphere(seed, 4)
        idx = np.sort(rng.choice(len(mesh), size=min(n, len(mesh)), replace=False))
        pts = mesh.points[idx]
        s2 = OrientedPointSet(pts, nrm_mod.normals_knn_pca(pts, 20))
        warped = deform_tps(OrientedPointSet(pts), float(value), seed + 1)
        s1 = OrientedPointSet(warped.points, nrm_mod.normals_knn_pca(warped.points, 20))
        return TrialPair(s1, s2, s1.points, s2.points, "tps")
    raise ValidationError(f"unknown scenario {scenario!r}")


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list

    @property
    def metric(self) -> str:
        return "mean_sq_error" if self.spec.squared else "mean_error"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["scenario", "sweep_value", "trial", "family", self.metric, "seconds", "iterations"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: r[c] for c in cols})
        return buf.getvalue()

    def errors(self, family: str, value=None) -> np.ndarray:
        return np.array([r[self.metric] for r in self.rows
                         if r["family"] == family and (value is None or r["sweep_value"] == value)])

    def summary(self) -> dict:
        out = []
        for value in self.spec.sweep:
            for fam in self.spec.families:
                e = self.errors(fam, value)
                good = e[np.isfinite(e)]
                out.append({
                    "sweep_value": value, "family": fam, "trials": int(e.size), "failed": int(e.size - good.size),
                    "mean": float(good.mean()) if good.size else float("nan"),
                    "median": float(np.median(good)) if good.size else float("nan"),
                    "stderr": float(good.std(ddof=1) / math.sqrt(good.size)) if good.size > 1 else 0.0,
                })
        return {"scenario": self.spec.scenario, "metric": self.metric, "values": out}


def _run_trial(spec: ExperimentSpec, value, trial: int) -> list:
    seed = spec.seed + trial
    rows = []
    try:
        pair = make_pair(spec.scenario, value, seed, spec.n, spec.degree)
    except Exception as exc:  # recorded, batch continues
        return [_failed_row(spec, value, trial, fam, exc) for fam in spec.families]
    rigid = pair.family in ("rot2", "rot3")
    use_corr = spec.correspondences if spec.correspondences is not None else not rigid
    for fam in spec.families:
        start = time.perf_counter()
        try:
            cost = CostSpec(fam, KernelParams.shared(1.0, 1.0), mode="rigid_scalar_product" if rigid else "full")
            rep = register(pair.model, pair.target, cost, pair.family, m=spec.m, seed=seed,
                           correspondences=CorrespondenceOptions(enabled=use_corr, alpha_start=spec.alpha_start),
                           max_evals=spec.max_evals, multi_start=spec.multi_start)
            err = mse(apply_to_points(rep.transform, pair.eval_model), pair.eval_target, spec.squared)
            iters = rep.n_iter
            monotone = rep.monotone
        except Exception as exc:  # recorded, batch continues
            rows.append(_failed_row(spec, value, trial, fam, exc))
            continue
        rows.append({
            "scenario": spec.scenario, "sweep_value": value, "trial": trial, "family": fam,
            ("mean_sq_error" if spec.squared else "mean_error"): err,
            "seconds": time.perf_counter() - start, "iterations": iters, "monotone": monotone,
            "report": rep,
        })
    return rows


def _failed_row(spec, value, trial, fam, exc):
    return {"scenario": spec.scenario, "sweep_value": value, "trial": trial, "family": fam,
            ("mean_sq_error" if spec.squared else "mean_error"): float("nan"),
            "seconds": float("nan"), "iterations": 0, "monotone": True, "report": None, "error": repr(exc)}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Register every (sweep value, trial, family) combination and score it.

    Trial ``t`` always uses seed ``spec.seed + t``, so results do not depend on
    ``spec.workers``.
    """
    jobs = [(v, t) for v in spec.sweep for t in range(spec.trials)]
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as ex:
            parts = list(ex.map(lambda j: _run_trial(spec, *j), jobs))
    else:
        parts = [_run_trial(spec, *j) for j in jobs]
    return ExperimentResult(spec, [r for p in parts for r in p])


def load_experiment_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        return ExperimentSpec.from_dict(json.load(fh))
