"""File formats: PLY meshes, CSV point sets, JSON transforms and run configurations."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .costs import FAMILIES, CostSpec
from .errors import DimensionError, ParseError, UnsupportedFormat, ValidationError
from .geometry import OrientedPointSet
from .kernels import KernelParams
from .normals import METHODS as NORMAL_METHODS
from .normals import NormalEstimatorConfig
from .optimize import AnnealingSchedule, CorrespondenceOptions, default_schedule
from .transforms import from_dict as transform_from_dict

NORMAL_RENORM_TOL = 1e-3

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


# ---------------------------------------------------------------------------
# PLY


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_dtype, item_dtype))
    line: int = 0


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError("line 1: missing 'ply' magic")
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError(f"line {lineno}: header ended without 'end_header'")
        words = raw.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) != 3:
                raise ParseError(f"line {lineno}: malformed format line")
            fmt = words[1]
            if fmt == "binary_big_endian":
                raise UnsupportedFormat("big-endian binary PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"line {lineno}: unknown format {fmt!r}")
        elif key == "element":
            if len(words) != 3:
                raise ParseError(f"line {lineno}: malformed element line")
            try:
                count = int(words[2])
            except ValueError:
                raise ParseError(f"line {lineno}: element count {words[2]!r} is not an integer") from None
            if count < 0:
                raise ParseError(f"line {lineno}: negative element count")
            elements.append(_Element(words[1], count, line=lineno))
        elif key == "property":
            if not elements:
                raise ParseError(f"line {lineno}: property before any element")
            try:
                if words[1] == "list":
                    elements[-1].props.append((words[4], (_PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            except (IndexError, KeyError):
                raise ParseError(f"line {lineno}: malformed property line {raw.strip()!r}") from None
        else:
            raise ParseError(f"line {lineno}: unexpected header keyword {key!r}")
    if fmt is None:
        raise ParseError("header has no format line")
    return fmt, elements, lineno


def _read_ascii(fh, elements, header_lines):
    data = {}
    lineno = header_lines
    for el in elements:
        rows = []
        for r in range(el.count):
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise ParseError(f"file ends in element {el.name!r} after {r} of {el.count} rows")
            vals = raw.split()
            pos = 0
            row = []
            try:
                for _, dt in el.props:
                    if isinstance(dt, tuple):
                        k = int(vals[pos])
                        row.append([float(v) for v in vals[pos + 1:pos + 1 + k]])
                        if len(row[-1]) != k:
                            raise IndexError
                        pos += 1 + k
                    else:
                        row.append(float(vals[pos]))
                        pos += 1
            except (IndexError, ValueError):
                raise ParseError(f"line {lineno}: malformed {el.name!r} row") from None
            rows.append(row)
        data[el.name] = rows
    return data


def _read_binary(fh, elements):
    data = {}
    for el in elements:
        if all(not isinstance(dt, tuple) for _, dt in el.props):
            dtype = np.dtype([(n, "<" + dt) for n, dt in el.props])
            buf = fh.read(dtype.itemsize * el.count)
            if len(buf) < dtype.itemsize * el.count:
                got = len(buf) // max(dtype.itemsize, 1)
                raise ParseError(f"file ends in element {el.name!r} after {got} of {el.count} rows")
            arr = np.frombuffer(buf, dtype=dtype, count=el.count)
            data[el.name] = [[float(v) for v in rec] for rec in arr]
            continue
        rows = []
        for r in range(el.count):
            row = []
            for _, dt in el.props:
                if isinstance(dt, tuple):
                    cdt, idt = np.dtype("<" + dt[0]), np.dtype("<" + dt[1])
                    b = fh.read(cdt.itemsize)
                    if len(b) < cdt.itemsize:
                        raise ParseError(f"file ends in element {el.name!r} after {r} of {el.count} rows")
                    k = int(np.frombuffer(b, cdt)[0])
                    b = fh.read(idt.itemsize * k)
                    if len(b) < idt.itemsize * k:
                        raise ParseError(f"file ends in element {el.name!r} after {r} of {el.count} rows")
                    row.append([float(v) for v in np.frombuffer(b, idt, count=k)])
                else:
                    t = np.dtype("<" + dt)
                    b = fh.read(t.itemsize)
                    if len(b) < t.itemsize:
                        raise ParseError(f"file ends in element {el.name!r} after {r} of {el.count} rows")
                    row.append(float(np.frombuffer(b, t)[0]))
            rows.append(row)
        data[el.name] = rows
    return data


def _fix_normals(nrm: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(nrm, axis=1)
    dev = np.abs(norms - 1.0)
    if len(dev) and dev.max() >= NORMAL_RENORM_TOL:
        bad = int(np.argmax(dev))
        raise ParseError(f"vertex {bad}: normal length {norms[bad]:.6g} is not close to 1")
    return nrm / norms[:, None]


def read_ply(path) -> OrientedPointSet:
    """Read an ASCII or little-endian binary PLY file.

    Vertex ``x, y, z`` are required; ``nx, ny, nz`` are used when all three
    are present (normals within 1e-3 of unit length are renormalised, others
    rejected). Polygonal faces are fan-triangulated. Unknown elements and
    properties are skipped.
    """
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_header(fh)
        names = [e.name for e in elements]
        if "vertex" not in names:
            raise ParseError("PLY has no vertex element")
        data = _read_ascii(fh, elements, header_lines) if fmt == "ascii" else _read_binary(fh, elements)

    vert_el = elements[names.index("vertex")]
    pnames = [p for p, _ in vert_el.props]
    for c in ("x", "y", "z"):
        if c not in pnames:
            raise ParseError(f"vertex element lacks property {c!r}")
    rows = data["vertex"]
    col = {p: i for i, p in enumerate(pnames)}
    pts = np.array([[r[col["x"]], r[col["y"]], r[col["z"]]] for r in rows], dtype=float).reshape(-1, 3)
    normals = None
    if all(c in col for c in ("nx", "ny", "nz")):
        normals = _fix_normals(
            np.array([[r[col["nx"]], r[col["ny"]], r[col["nz"]]] for r in rows], dtype=float).reshape(-1, 3))

    faces = None
    if "face" in names:
        face_el = elements[names.index("face")]
        fcol = next((i for i, (p, dt) in enumerate(face_el.props)
                     if isinstance(dt, tuple) and p in ("vertex_indices", "vertex_index")), None)
        if fcol is None:
            raise ParseError("face element lacks a vertex_indices list")
        tris = []
        for r in data["face"]:
            poly = [int(v) for v in r[fcol]]
            if len(poly) < 3:
                raise ParseError("face with fewer than 3 vertices")
            tris.extend((poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1))
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(pts)):
            raise ParseError("face index out of range")
    return OrientedPointSet(pts, normals, faces)


def write_ply(shape: OrientedPointSet, path, binary: bool = False) -> None:
    """Write a 3D shape as PLY (ASCII with 9 significant digits, or little-endian binary)."""
    if shape.dim != 3:
        raise DimensionError("PLY output needs 3D points; use CSV for 2D shapes")
    has_n = shape.normals is not None
    n_faces = 0 if shape.faces is None else len(shape.faces)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(shape)}", "property float64 x", "property float64 y", "property float64 z"]
    if has_n:
        head += ["property float64 nx", "property float64 ny", "property float64 nz"]
    if n_faces:
        head += [f"element face {n_faces}", "property list uchar int vertex_indices"]
    head.append("end_header")
    vert = shape.points if not has_n else np.hstack([shape.points, shape.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(vert, dtype="<f8").tobytes())
            if n_faces:
                rec = np.zeros(n_faces, dtype=[("k", "u1"), ("v", "<i4", (3,))])
                rec["k"] = 3
                rec["v"] = shape.faces
                fh.write(rec.tobytes())
            return
        lines = [" ".join(f"{v:.9g}" for v in row) for row in vert]
        if n_faces:
            lines += [f"3 {a} {b} {c}" for a, b, c in shape.faces]
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# CSV point sets

_CSV_HEADERS = {
    2: (["x", "y"], ["nx", "ny"]),
    3: (["x", "y", "z"], ["nx", "ny", "nz"]),
}


def read_points_csv(path, d: Optional[int] = None, closed: Optional[bool] = None) -> OrientedPointSet:
    """Read a point set with header ``x,y[,z][,nx,ny[,nz]]``.

    ``d`` is inferred from the header when omitted. ``closed`` marks the row
    order as a closed (``True``) or open (``False``) polyline.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("line 1: empty file, expected a header row")
    header = [h.strip().lower() for h in rows[0]]
    if d is None:
        d = 3 if "z" in header else 2
    if d not in _CSV_HEADERS:
        raise DimensionError(f"unsupported dimension {d}")
    pos, nrm = _CSV_HEADERS[d]
    if header not in (pos, pos + nrm):
        raise ParseError(f"line 1: header {','.join(header)!r} should be {','.join(pos)!r} "
                         f"or {','.join(pos + nrm)!r}")
    width = len(header)
    vals = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ParseError(f"line {lineno}: expected {width} columns, found {len(row)}")
        try:
            vals.append([float(c) for c in row])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric value") from None
    arr = np.array(vals, dtype=float).reshape(-1, width)
    normals = None
    if width == 2 * d:
        normals = arr[:, d:]
        if len(normals):
            normals = _fix_normals(normals)
    return OrientedPointSet(arr[:, :d], normals, closed=closed)


def write_points_csv(shape: OrientedPointSet, path) -> None:
    pos, nrm = _CSV_HEADERS[shape.dim]
    header = pos + (nrm if shape.normals is not None else [])
    data = shape.points if shape.normals is None else np.hstack([shape.points, shape.normals])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_shape(path, d: Optional[int] = None, closed: Optional[bool] = None) -> OrientedPointSet:
    """Dispatch on file extension (``.ply`` or ``.csv``)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".csv", ".txt"):
        return read_points_csv(path, d, closed)
    raise UnsupportedFormat(f"unknown point-set format {suffix!r}")


def write_shape(shape: OrientedPointSet, path) -> None:
    if Path(path).suffix.lower() == ".ply":
        write_ply(shape, path)
    else:
        write_points_csv(shape, path)


# ---------------------------------------------------------------------------
# JSON


def save_transform(t, path) -> None:
    with open(path, "w") as fh:
        json.dump(t.to_dict(), fh, indent=2)
        fh.write("\n")


def load_transform(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        return transform_from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: incomplete transform description ({exc})") from None


@dataclass(frozen=True)
class RunConfig:
    """Settings for one ``register`` run, loadable from JSON.

    Schedule fields left as ``None`` fall back to the defaults for the
    transform family.
    """

    cost: str = "xu"
    transform: str = "rot2"
    mode: Optional[str] = None
    h_init: Optional[float] = None
    h_step: float = 0.5
    kappa_init: Optional[float] = None
    kappa_step: float = 2.0
    steps: Optional[int] = None
    m: Optional[int] = 1000
    seed: int = 0
    correspondences: Optional[bool] = None
    corr_k: int = 5
    freeze_correspondences: bool = False
    corr_alpha_start: float = 1.0
    translation: bool = False
    grid_shape: Optional[tuple] = None
    max_evals: int = 20_000
    multi_start: int = 1
    bending: float = 0.0
    normal_mode: str = "jacobian"
    normals: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cost not in FAMILIES:
            raise ValidationError(f"unknown cost {self.cost!r}")
        if self.transform not in ("rot2", "rot3", "tps"):
            raise ValidationError(f"unknown transform {self.transform!r}")
        if self.transform == "tps" and self.cost in ("u", "u-delta"):
            raise ValidationError("normals-only costs cannot drive a TPS transform")
        if self.mode == "rigid_scalar_product" and self.transform == "tps":
            raise ValidationError("rigid_scalar_product mode needs a rotation transform")
        if self.m is not None and self.m < 1:
            raise ValidationError("m must be positive")
        if self.multi_start < 1:
            raise ValidationError("multi_start must be >= 1")
        if self.normal_mode not in ("jacobian", "recompute"):
            raise ValidationError(f"unknown normal mode {self.normal_mode!r}")
        if self.normals and self.normals.get("method", "knn_pca") not in NORMAL_METHODS:
            raise ValidationError(f"unknown normal method {self.normals.get('method')!r}")
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(g) for g in self.grid_shape))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["grid_shape"] is not None:
            d["grid_shape"] = list(d["grid_shape"])
        return d

    def cost_spec(self) -> CostSpec:
        mode = self.mode or ("full" if self.transform == "tps" else "rigid_scalar_product")
        return CostSpec(self.cost, KernelParams.shared(1.0, 1.0), mode=mode, bending=self.bending)

    def schedule(self, dim: int, box_diagonal: float) -> AnnealingSchedule:
        base = default_schedule(self.transform, dim, box_diagonal)
        return AnnealingSchedule.geometric(
            self.h_init if self.h_init is not None else base.h_init,
            self.kappa_init if self.kappa_init is not None else base.kappa_init,
            self.steps if self.steps is not None else base.steps,
            self.h_step, self.kappa_step,
        )

    def correspondence_options(self) -> CorrespondenceOptions:
        enabled = self.correspondences if self.correspondences is not None else self.transform == "tps"
        return CorrespondenceOptions(enabled, self.corr_k, self.freeze_correspondences,
                                     self.corr_alpha_start)

    def normal_config(self) -> NormalEstimatorConfig:
        return NormalEstimatorConfig(**self.normals)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ParseError(f"{path}: expected a JSON object")
    return RunConfig.from_dict(d)
