"""Command-line interface.

Exit codes: 0 on success, 2 for invalid input or usage, 3 for numerical
failures during registration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from . import correspond, harness
from . import io as dio
from . import normals as nrm_mod
from .costs import transform_shape
from .errors import RegistrationError, ValidationError
from .geometry import OrientedPointSet, bounding_box
from .optimize import register
from .transforms import interpolate

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("dirreg")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors raise instead of exiting."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _closed_flag(args):
    return True if args.closed else (False if args.open else None)


def _cmd_register(args) -> int:
    cfg = dio.load_run_config(args.config) if args.config else dio.RunConfig()
    overrides = {}
    if args.cost:
        overrides["cost"] = args.cost
    if args.transform:
        overrides["transform"] = args.transform
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.multi_start is not None:
        overrides["multi_start"] = args.multi_start
    if args.m is not None:
        overrides["m"] = args.m
    if overrides:
        cfg = dio.RunConfig.from_dict({**cfg.to_dict(), **overrides})

    closed = _closed_flag(args)
    model = dio.read_shape(args.model, closed=closed)
    target = dio.read_shape(args.target, closed=closed)
    spec = cfg.cost_spec()
    if spec.uses_normals:
        model, target = _ensure_normals(model, cfg), _ensure_normals(target, cfg)
    sched = cfg.schedule(model.dim, bounding_box(model).diagonal)
    rep = register(model, target, spec, cfg.transform, sched=sched, m=cfg.m, seed=cfg.seed,
                   correspondences=cfg.correspondence_options(), translation=cfg.translation,
                   grid_shape=cfg.grid_shape, max_evals=cfg.max_evals,
                   multi_start=cfg.multi_start, normal_mode=cfg.normal_mode)
    out = rep.to_dict()
    out["config"] = cfg.to_dict()
    if args.out_transform:
        dio.save_transform(rep.transform, args.out_transform)
    else:
        json.dump(rep.transform.to_dict(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    if args.out_report:
        with open(args.out_report, "w") as fh:
            json.dump(out, fh, indent=2)
    if args.out_points:
        dio.write_shape(transform_shape(model, rep.transform, cfg.normal_mode), args.out_points)
    if args.dump_correspondences:
        if rep.correspondences is None:
            raise ValidationError("no correspondences were estimated; enable them in the config")
        correspond.to_csv(rep.correspondences, args.dump_correspondences)
    log.info("registered in %.2fs, %d iterations", rep.wall_time, rep.n_iter)
    return EXIT_OK


def _ensure_normals(shape: OrientedPointSet, cfg) -> OrientedPointSet:
    if shape.normals is not None:
        return shape
    conf = cfg.normal_config() if cfg.normals else _default_normal_config(shape)
    return replace(shape, normals=nrm_mod.estimate(shape, conf))


def _default_normal_config(shape: OrientedPointSet):
    if shape.dim == 2:
        return nrm_mod.NormalEstimatorConfig("spline2d", closed=shape.closed is not False)
    if shape.faces is not None:
        return nrm_mod.NormalEstimatorConfig("mesh_face_avg")
    return nrm_mod.NormalEstimatorConfig("knn_pca")


def _cmd_normals(args) -> int:
    shape = dio.read_shape(args.input, closed=_closed_flag(args))
    if args.method:
        conf = nrm_mod.NormalEstimatorConfig(args.method, k_neighbors=args.k,
                                             closed=shape.closed is not False, flip=args.flip)
    else:
        conf = replace(_default_normal_config(shape), k_neighbors=args.k, flip=args.flip)
    shape = replace(shape, normals=nrm_mod.estimate(shape, conf))
    dio.write_shape(shape, args.output)
    return EXIT_OK


def _cmd_generate(args) -> int:
    pair = harness.make_pair(args.scenario, args.value, args.seed, args.n, args.degree)
    dio.write_shape(pair.model, args.model_out)
    dio.write_shape(pair.target, args.target_out)
    return EXIT_OK


def _cmd_experiment(args) -> int:
    spec = harness.load_experiment_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.squared:
        spec = replace(spec, squared=True)
    res = harness.run_experiment(spec)
    table = res.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    if args.summary:
        with open(args.summary, "w") as fh:
            json.dump(res.summary(), fh, indent=2)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    a = dio.read_shape(args.a)
    b = dio.read_shape(args.b)
    if args.transform:
        t = dio.load_transform(args.transform)
        a = OrientedPointSet(transform_shape(OrientedPointSet(a.points), t).points)
    print(f"{harness.mse(a.points, b.points, squared=args.squared):.9g}")
    return EXIT_OK


def _cmd_interpolate(args) -> int:
    if len(args.transforms) != len(args.alphas):
        raise ValidationError("need one alpha per transform")
    if bool(args.apply) != bool(args.apply_out):
        raise ValidationError("--apply and --apply-out go together")
    ts = [dio.load_transform(p) for p in args.transforms]
    blended = interpolate(ts, args.alphas)
    if args.out:
        dio.save_transform(blended, args.out)
    else:
        json.dump(blended.to_dict(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    if args.apply:
        shape = dio.read_shape(args.apply)
        moved = transform_shape(OrientedPointSet(shape.points), blended)
        dio.write_shape(moved, args.apply_out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dirreg", description="Register shapes described by points and normals.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="estimate the transform taking MODEL onto TARGET")
    r.add_argument("model")
    r.add_argument("target")
    r.add_argument("--cost", choices=["x", "x-delta", "u", "u-delta", "xu", "xu-delta"])
    r.add_argument("--transform", choices=["rot2", "rot3", "tps"])
    r.add_argument("--config", help="RunConfig JSON file")
    r.add_argument("--out-transform")
    r.add_argument("--out-points", help="write the transformed model (CSV or PLY)")
    r.add_argument("--out-report", help="write per-stage traces as JSON")
    r.add_argument("--dump-correspondences", help="write the final correspondences as CSV")
    r.add_argument("--seed", type=int)
    r.add_argument("--multi-start", type=int)
    r.add_argument("-m", type=int, help="subsample size per shape")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--closed", action="store_true", help="CSV rows form a closed curve")
    g.add_argument("--open", action="store_true", help="CSV rows form an open curve")
    r.set_defaults(func=_cmd_register)

    n = sub.add_parser("normals", help="estimate normals and write the shape back")
    n.add_argument("input")
    n.add_argument("output")
    n.add_argument("--method", choices=["spline2d", "mesh_face_avg", "knn_pca"])
    n.add_argument("-k", type=int, default=10)
    n.add_argument("--flip", action="store_true")
    g = n.add_mutually_exclusive_group()
    g.add_argument("--closed", action="store_true")
    g.add_argument("--open", action="store_true")
    n.set_defaults(func=_cmd_normals)

    gen = sub.add_parser("generate", help="write one synthetic model/target pair")
    gen.add_argument("scenario", choices=harness.SCENARIOS)
    gen.add_argument("value", type=float, help="sweep value (angle, degree, fraction or noise)")
    gen.add_argument("model_out")
    gen.add_argument("target_out")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-n", type=int)
    gen.add_argument("--degree", type=float, default=4.0)
    gen.set_defaults(func=_cmd_generate)

    e = sub.add_parser("experiment", help="run a batch experiment from a JSON spec")
    e.add_argument("spec")
    e.add_argument("--out", help="CSV output (default stdout)")
    e.add_argument("--summary", help="summary JSON output")
    e.add_argument("--seed", type=int)
    e.add_argument("--squared", action="store_true")
    e.set_defaults(func=_cmd_experiment)

    ev = sub.add_parser("evaluate", help="mean error between two index-aligned point sets")
    ev.add_argument("a")
    ev.add_argument("b")
    ev.add_argument("--transform", help="apply this transform JSON to A first")
    ev.add_argument("--squared", action="store_true")
    ev.set_defaults(func=_cmd_evaluate)

    it = sub.add_parser("interpolate", help="blend transforms with weights")
    it.add_argument("--transforms", nargs="+", required=True)
    it.add_argument("--alphas", nargs="+", type=float, required=True)
    it.add_argument("--out")
    it.add_argument("--apply", help="point set to warp with the blended transform")
    it.add_argument("--apply-out")
    it.set_defaults(func=_cmd_interpolate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RegistrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
