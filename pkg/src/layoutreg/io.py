"""Fragments, datasets and their plain-text file formats.

Point files are PLY (ascii or binary little-endian) with ``x y z nx ny nz``
vertex properties and an optional ``int surface`` label. The fragment's sensor
origin is stored as a header comment ``comment sensor_origin x y z``.

Trajectory files hold one pose per line, ``id r00 r01 r02 tx r10 ... tz``.
Layout files hold one plane per line, ``role nx ny nz offset``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, MissingNormals, ParseError
from .geometry import Plane, RigidTransform

logger = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass(frozen=True, eq=False)
class Fragment:
    """A rigid partial scan in its own local frame."""

    id: int
    points: np.ndarray
    normals: np.ndarray
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    surface_ids: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
        if len(pts) != len(nrm):
            raise ValueError("points and normals differ in length")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(lengths == 0.0):
            raise ValueError("zero-length normal")
        nrm = nrm / lengths[:, None]
        origin = np.array(self.sensor_origin, dtype=float).reshape(3)
        for a in (pts, nrm, origin):
            a.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "sensor_origin", origin)
        if self.surface_ids is not None:
            s = np.array(self.surface_ids, dtype=np.int64).reshape(-1)
            s.flags.writeable = False
            object.__setattr__(self, "surface_ids", s)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "Fragment":
        return Fragment(
            self.id,
            self.points[idx],
            self.normals[idx],
            self.sensor_origin,
            None if self.surface_ids is None else self.surface_ids[idx],
        )

    def transformed(self, T: RigidTransform) -> "Fragment":
        return Fragment(
            self.id, T.apply(self.points), T.rotate(self.normals), T.apply(self.sensor_origin),
            self.surface_ids,
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    poses: list
    cloud: np.ndarray | None = None
    # (role, Plane) pairs describing the generating room envelope, world frame.
    envelope: list | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    fragments: list
    odometry: list
    ground_truth: GroundTruth | None = None

    def __post_init__(self):
        if len(self.odometry) != len(self.fragments) - 1:
            raise ValueError(
                f"expected {len(self.fragments) - 1} odometry transforms, got {len(self.odometry)}"
            )
        ids = [f.id for f in self.fragments]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate fragment ids")
        if self.ground_truth is not None and len(self.ground_truth.poses) != len(self.fragments):
            raise ValueError("ground truth must have one pose per fragment")

    def chained_odometry(self) -> list:
        poses = [RigidTransform.identity()]
        for T in self.odometry:
            poses.append(poses[-1] @ T)
        return poses


# ---------------------------------------------------------------------------
# PLY point files
# ---------------------------------------------------------------------------


def _parse_header(raw: bytes, path):
    end = raw.find(b"end_header")
    if not raw.strip():
        raise ParseError("empty file", line=1, path=path)
    if not raw.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", line=1, path=path)
    if end < 0:
        raise ParseError("missing end_header", path=path)
    stop = raw.find(b"\n", end)
    stop = len(raw) if stop < 0 else stop + 1
    header_lines = raw[:stop].decode("ascii", errors="replace").splitlines()
    fmt = None
    count = None
    props = []
    comments = []
    element = None
    for lineno, line in enumerate(header_lines, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format {' '.join(tok[1:])!r}", line=lineno, path=path)
            fmt = tok[1]
        elif tok[0] == "comment":
            comments.append(tok[1:])
        elif tok[0] == "element":
            element = tok[1] if len(tok) > 1 else None
            if element == "vertex":
                try:
                    count = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError("bad vertex count", line=lineno, path=path) from None
        elif tok[0] == "property" and element == "vertex":
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property {line.strip()!r}", line=lineno, path=path)
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt is None:
        raise ParseError("missing format line", path=path)
    if count is None:
        raise ParseError("missing vertex element", path=path)
    return fmt, count, props, comments, stop, len(header_lines)


def read_points(path):
    """Read a PLY point file into a dict of column arrays plus header comments."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    fmt, count, props, comments, body_start, header_len = _parse_header(raw, path)
    names = [p[0] for p in props]
    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii", errors="replace").splitlines()
        rows = []
        for k, line in enumerate(lines):
            if len(rows) == count:
                break
            tok = line.split()
            if not tok:
                continue
            if len(tok) != len(props):
                raise ParseError(
                    f"expected {len(props)} values, got {len(tok)}", line=header_len + k + 1, path=path
                )
            try:
                rows.append([float(t) for t in tok])
            except ValueError:
                raise ParseError("non-numeric value", line=header_len + k + 1, path=path) from None
        if len(rows) != count:
            raise ParseError(f"expected {count} vertices, found {len(rows)}", path=path)
        table = np.array(rows, dtype=float).reshape(count, len(props))
        cols = {name: table[:, i] for i, name in enumerate(names)}
    else:
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        body = raw[body_start:]
        if len(body) < count * dtype.itemsize:
            raise ParseError("truncated binary body", path=path)
        rec = np.frombuffer(body, dtype=dtype, count=count)
        cols = {n: rec[n].astype(float) for n in names}
    return cols, comments


def read_fragment(path, fragment_id=None) -> Fragment:
    """Read a fragment PLY file; normals are normalised on load.

    Raises:
        ParseError: malformed or empty file (with line number where known).
        MissingNormals: the file has no ``nx ny nz`` properties.
    """
    path = Path(path)
    cols, comments = read_points(path)
    for c in ("x", "y", "z"):
        if c not in cols:
            raise ParseError(f"missing property {c!r}", path=path)
    if not all(c in cols for c in ("nx", "ny", "nz")):
        raise MissingNormals("file lacks normal properties nx ny nz", path=path)
    if len(cols["x"]) == 0:
        raise ParseError("fragment has no points", path=path)
    origin = np.zeros(3)
    fid = fragment_id
    for tok in comments:
        if tok and tok[0] == "sensor_origin" and len(tok) == 4:
            try:
                origin = np.array([float(t) for t in tok[1:]])
            except ValueError:
                raise ParseError("bad sensor_origin comment", path=path) from None
        if tok and tok[0] == "fragment_id" and len(tok) == 2 and fid is None:
            try:
                fid = int(tok[1])
            except ValueError:
                raise ParseError("bad fragment_id comment", path=path) from None
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]])
    nrm = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
    if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(nrm)):
        raise ParseError("non-finite coordinates", path=path)
    if np.any(np.linalg.norm(nrm, axis=1) == 0.0):
        raise ParseError("zero-length normal", path=path)
    surface = cols["surface"].astype(np.int64) if "surface" in cols else None
    return Fragment(0 if fid is None else fid, pts, nrm, origin, surface)


def write_points(path, columns: dict, comments=(), binary=False):
    """Write named float/int columns as a PLY vertex list."""
    path = Path(path)
    names = list(columns)
    n = len(columns[names[0]]) if names else 0
    types = {k: ("int" if np.issubdtype(np.asarray(v).dtype, np.integer) else "double") for k, v in columns.items()}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property {types[k]} {k}" for k in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            if binary:
                dtype = np.dtype([(k, "<i4" if types[k] == "int" else "<f8") for k in names])
                rec = np.empty(n, dtype=dtype)
                for k in names:
                    rec[k] = columns[k]
                fh.write(rec.tobytes())
            else:
                cols = [np.asarray(columns[k]) for k in names]
                fmts = ["{:d}" if types[k] == "int" else "{!r}" for k in names]
                lines = []
                for i in range(n):
                    lines.append(" ".join(f.format(c[i].item()) for f, c in zip(fmts, cols)))
                fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_fragment(fragment: Fragment, path, binary=False):
    cols = {
        "x": fragment.points[:, 0], "y": fragment.points[:, 1], "z": fragment.points[:, 2],
        "nx": fragment.normals[:, 0], "ny": fragment.normals[:, 1], "nz": fragment.normals[:, 2],
    }
    if fragment.surface_ids is not None:
        cols["surface"] = fragment.surface_ids
    o = fragment.sensor_origin
    comments = [f"fragment_id {fragment.id}", "sensor_origin " + " ".join(repr(float(v)) for v in o)]
    write_points(path, cols, comments=comments, binary=binary)


def write_cloud(points, path, normals=None, binary=True):
    points = np.asarray(points, dtype=float)
    cols = {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2]}
    if normals is not None:
        cols.update(nx=normals[:, 0], ny=normals[:, 1], nz=normals[:, 2])
    write_points(path, cols, binary=binary)


def read_cloud(path) -> np.ndarray:
    cols, _ = read_points(path)
    return np.column_stack([cols["x"], cols["y"], cols["z"]])


# ---------------------------------------------------------------------------
# Trajectories and layouts
# ---------------------------------------------------------------------------


def write_trajectory(poses, path, ids=None):
    ids = range(len(poses)) if ids is None else ids
    lines = []
    for i, T in zip(ids, poses):
        vals = T.as_3x4().reshape(-1)
        lines.append(f"{i} " + " ".join(repr(float(v)) for v in vals))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_trajectory(path) -> list:
    """Read ``id + 12 values`` lines; poses are returned in file order."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if len(tok) != 13:
            raise ParseError(f"expected 13 fields, got {len(tok)}", line=lineno, path=path)
        try:
            vals = np.array([float(t) for t in tok[1:]]).reshape(3, 4)
        except ValueError:
            raise ParseError("non-numeric value", line=lineno, path=path) from None
        poses.append(RigidTransform(vals[:, :3], vals[:, 3]))
    return poses


LAYOUT_ROLES = ("base", "wall")


def write_layout(layout, path):
    """Write a layout as ``role nx ny nz offset`` lines.

    ``layout`` is either a :class:`layoutreg.layout.Layout` or a sequence of
    ``(role, Plane)`` pairs. Base-parallel extra planes (e.g. the ceiling when
    the floor is the base) are written as additional ``base`` lines.
    """
    pairs = layout.role_planes() if hasattr(layout, "role_planes") else list(layout)
    lines = []
    for role, plane in pairs:
        if role not in LAYOUT_ROLES:
            raise ValueError(f"unknown layout role {role!r}")
        n = plane.normal
        lines.append(f"{role} " + " ".join(repr(float(v)) for v in (*n, plane.offset)))
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_layout(path) -> list:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 5 or tok[0] not in LAYOUT_ROLES:
            raise ParseError("expected 'role nx ny nz offset'", line=lineno, path=path)
        try:
            vals = [float(t) for t in tok[1:]]
        except ValueError:
            raise ParseError("non-numeric value", line=lineno, path=path) from None
        # bypass renormalisation so the round trip is bit-exact
        plane = Plane.__new__(Plane)
        n = np.array(vals[:3])
        n.flags.writeable = False
        object.__setattr__(plane, "normal", n)
        object.__setattr__(plane, "offset", vals[3])
        out.append((tok[0], plane))
    return out


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

FRAGMENT_PATTERN = "fragment_{:03d}.ply"


def save_dataset(dataset: Dataset, directory, binary=False):
    """Write fragments, odometry and (if present) ground truth to a directory."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {d}: {exc}") from exc
    for frag in dataset.fragments:
        write_fragment(frag, d / FRAGMENT_PATTERN.format(frag.id), binary=binary)
    write_trajectory(dataset.odometry, d / "odometry.txt")
    gt = dataset.ground_truth
    if gt is not None:
        write_trajectory(gt.poses, d / "groundtruth.txt")
        if gt.cloud is not None:
            write_cloud(gt.cloud, d / "gt_cloud.ply", binary=True)
        if gt.envelope is not None:
            write_layout(gt.envelope, d / "gt_layout.txt")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise IoError(f"dataset directory not found: {d}")
    files = sorted(d.glob("fragment_*.ply"))
    if not files:
        raise IoError(f"no fragment_*.ply files in {d}")
    fragments = [read_fragment(f, fragment_id=k) for k, f in enumerate(files)]
    fragments = [Fragment(k, f.points, f.normals, f.sensor_origin, f.surface_ids) for k, f in enumerate(fragments)]
    odometry = read_trajectory(d / "odometry.txt") if (d / "odometry.txt").exists() else None
    if odometry is None:
        raise IoError(f"missing odometry.txt in {d}")
    gt = None
    if (d / "groundtruth.txt").exists():
        cloud = read_cloud(d / "gt_cloud.ply") if (d / "gt_cloud.ply").exists() else None
        env = read_layout(d / "gt_layout.txt") if (d / "gt_layout.txt").exists() else None
        gt = GroundTruth(read_trajectory(d / "groundtruth.txt"), cloud, env)
    try:
        return Dataset(fragments, odometry, gt)
    except ValueError as exc:
        raise ParseError(str(exc), path=d) from exc
