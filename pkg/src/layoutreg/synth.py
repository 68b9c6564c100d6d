"""Synthetic indoor scans with ground truth.

A room is an extruded simple polygon (floor at z=0, ceiling at z=height) with
optional axis-aligned clutter boxes standing on the floor. A camera moves on a
horizontal circle at ``camera_height`` facing outward; each fragment is the set
of surface samples visible from its camera position inside an azimuth sweep.

Random streams are split so the point noise and the odometry drift can be
reproduced independently: ``default_rng([seed, 0])`` draws points and
``default_rng([seed, 1])`` draws the per-step drift twists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import shapely

from .errors import InvalidSpec
from .geometry import Plane, RigidTransform, se3_exp, so3_exp
from .io import Dataset, Fragment, GroundTruth

CLUTTER_ID = -1


@dataclass(frozen=True)
class Box:
    """Axis-aligned box resting on the floor."""

    xy_min: tuple
    xy_max: tuple
    height: float


@dataclass(frozen=True)
class SyntheticRoomSpec:
    floor_polygon: tuple
    height: float = 2.5
    clutter: tuple = ()
    points_per_m2: float = 1000.0
    noise_sigma: float = 0.0
    fragment_count: int = 8
    drift_rot_sigma: float = 0.0
    drift_trans_sigma: float = 0.0
    seed: int = 0
    camera_height: float = 1.5
    path_radius: float = 0.5
    sweep_deg: float | None = None
    vfov_deg: float = 180.0
    max_range: float = 10.0
    normal_noise_sigma: float | None = None
    gt_points_per_m2: float = 4000.0

    @classmethod
    def box(cls, width=4.0, depth=3.0, height=2.5, **kw) -> "SyntheticRoomSpec":
        poly = ((0.0, 0.0), (width, 0.0), (width, depth), (0.0, depth))
        return cls(floor_polygon=poly, height=height, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticRoomSpec":
        d = dict(d)
        if "drift_rot_deg" in d:
            if "drift_rot_sigma" in d:
                raise InvalidSpec("give either drift_rot_deg or drift_rot_sigma, not both")
            d["drift_rot_sigma"] = float(np.deg2rad(d.pop("drift_rot_deg")))
        if "width" in d or "depth" in d:
            if "floor_polygon" in d:
                raise InvalidSpec("give either width/depth or floor_polygon, not both")
            w, dp = float(d.pop("width", 4.0)), float(d.pop("depth", 3.0))
            d["floor_polygon"] = ((0.0, 0.0), (w, 0.0), (w, dp), (0.0, dp))
        if "floor_polygon" not in d:
            raise InvalidSpec("room needs floor_polygon or width/depth")
        d["floor_polygon"] = tuple(tuple(float(c) for c in v) for v in d["floor_polygon"])
        d["clutter"] = tuple(
            b if isinstance(b, Box) else Box(tuple(b["xy_min"]), tuple(b["xy_max"]), float(b["height"]))
            for b in d.get("clutter", ())
        )
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown room keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def sweep(self) -> float:
        """Horizontal azimuth coverage of one fragment, radians."""
        if self.sweep_deg is not None:
            return np.deg2rad(self.sweep_deg)
        step = 2.0 * np.pi / self.fragment_count
        return max(np.deg2rad(150.0), step / 0.55)

    def validate(self):
        poly = shapely.Polygon(self.floor_polygon)
        if len(self.floor_polygon) < 3 or not poly.is_valid or poly.area <= 0.0:
            raise InvalidSpec("floor_polygon must be a simple polygon with positive area")
        if not self.height > 0:
            raise InvalidSpec("height must be positive")
        if self.fragment_count < 2:
            raise InvalidSpec("fragment_count must be at least 2")
        if self.points_per_m2 <= 0:
            raise InvalidSpec("points_per_m2 must be positive")
        if min(self.noise_sigma, self.drift_rot_sigma, self.drift_trans_sigma) < 0:
            raise InvalidSpec("noise and drift sigmas must be non-negative")
        if not 0.0 < self.camera_height < self.height:
            raise InvalidSpec("camera must be inside the room")
        center = np.array(poly.centroid.coords[0])
        ang = 2.0 * np.pi * np.arange(self.fragment_count) / self.fragment_count
        cams = center + self.path_radius * np.column_stack([np.cos(ang), np.sin(ang)])
        inside = shapely.contains_xy(poly.buffer(-0.05), cams[:, 0], cams[:, 1])
        if not np.all(inside):
            raise InvalidSpec("camera path leaves the room; reduce path_radius")
        for b in self.clutter:
            if not (b.xy_max[0] > b.xy_min[0] and b.xy_max[1] > b.xy_min[1] and 0 < b.height < self.height):
                raise InvalidSpec(f"degenerate clutter box {b}")


@dataclass
class _Surface:
    sid: int
    normal: np.ndarray
    area: float
    sampler: object  # callable(rng, n) -> (n, 3)
    edge: int | None = None  # polygon edge index for walls
    box: int | None = None


def _ccw(poly):
    poly = np.asarray(poly, dtype=float)
    x, y = poly[:, 0], poly[:, 1]
    signed = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return poly if signed > 0 else poly[::-1]


def _polygon_sampler(poly_xy, z):
    shp = shapely.Polygon(poly_xy)
    lo = poly_xy.min(axis=0)
    hi = poly_xy.max(axis=0)
    frac = shp.area / np.prod(hi - lo)

    def sample(rng, n):
        out = np.zeros((0, 2))
        while len(out) < n:
            m = int((n - len(out)) / frac * 1.2) + 16
            cand = lo + rng.random((m, 2)) * (hi - lo)
            keep = shapely.contains_xy(shp, cand[:, 0], cand[:, 1])
            out = np.vstack([out, cand[keep]])
        out = out[:n]
        return np.column_stack([out, np.full(n, z)])

    return sample


def _rect_sampler(origin, u, v):
    origin, u, v = (np.asarray(a, dtype=float) for a in (origin, u, v))

    def sample(rng, n):
        s = rng.random((n, 2))
        return origin + np.outer(s[:, 0], u) + np.outer(s[:, 1], v)

    return sample


def room_surfaces(spec: SyntheticRoomSpec):
    poly = _ccw(spec.floor_polygon)
    shp = shapely.Polygon(poly)
    h = spec.height
    surfaces = [
        _Surface(0, np.array([0.0, 0.0, 1.0]), shp.area, _polygon_sampler(poly, 0.0)),
        _Surface(1, np.array([0.0, 0.0, -1.0]), shp.area, _polygon_sampler(poly, h)),
    ]
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        d = b - a
        length = np.linalg.norm(d)
        inward = np.array([-d[1], d[0], 0.0]) / length
        surfaces.append(
            _Surface(2 + k, inward, length * h,
                     _rect_sampler([a[0], a[1], 0.0], [d[0], d[1], 0.0], [0, 0, h]), edge=k)
        )
    for j, bx in enumerate(spec.clutter):
        x0, y0 = bx.xy_min
        x1, y1 = bx.xy_max
        z1 = bx.height
        faces = [
            ([x0, y0, 0], [x1 - x0, 0, 0], [0, 0, z1], [0, -1, 0]),
            ([x1, y0, 0], [0, y1 - y0, 0], [0, 0, z1], [1, 0, 0]),
            ([x0, y1, 0], [x1 - x0, 0, 0], [0, 0, z1], [0, 1, 0]),
            ([x0, y0, 0], [0, y1 - y0, 0], [0, 0, z1], [-1, 0, 0]),
            ([x0, y0, z1], [x1 - x0, 0, 0], [0, y1 - y0, 0], [0, 0, 1]),
        ]
        for o, u, v, n in faces:
            area = np.linalg.norm(np.cross(u, v))
            surfaces.append(_Surface(CLUTTER_ID, np.array(n, float), area, _rect_sampler(o, u, v), box=j))
    return poly, surfaces


def envelope_planes(spec: SyntheticRoomSpec):
    """Generating planes of floor, ceiling and walls as ``(role, Plane)`` pairs.

    Index ``k`` in the returned list equals the surface id used in fragments.
    """
    poly, surfaces = room_surfaces(spec)
    out = []
    for s in surfaces:
        if s.sid == CLUTTER_ID:
            continue
        p0 = s.sampler(np.random.default_rng(0), 1)[0]
        role = "base" if s.sid < 2 else "wall"
        out.append((role, Plane(s.normal, -s.normal @ p0)))
    return out


def camera_poses(spec: SyntheticRoomSpec):
    center = np.array(shapely.Polygon(spec.floor_polygon).centroid.coords[0])
    poses = []
    for i in range(spec.fragment_count):
        phi = 2.0 * np.pi * i / spec.fragment_count
        c = np.array([center[0] + spec.path_radius * np.cos(phi),
                      center[1] + spec.path_radius * np.sin(phi),
                      spec.camera_height])
        poses.append(RigidTransform(so3_exp([0.0, 0.0, phi]), c))
    return poses


def _segments_cross_edges(c_xy, pts_xy, poly, skip_edge):
    """True where the 2D segment camera->point crosses a polygon edge."""
    blocked = np.zeros(len(pts_xy), dtype=bool)
    d = pts_xy - c_xy
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        e = b - a
        denom = d[:, 0] * e[1] - d[:, 1] * e[0]
        ac = a - c_xy
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (ac[0] * e[1] - ac[1] * e[0]) / denom  # along camera->point
            s = (ac[0] * d[:, 1] - ac[1] * d[:, 0]) / denom  # along edge
        hit = (np.abs(denom) > 1e-12) & (u > 1e-9) & (u < 1.0 - 1e-6) & (s >= 0.0) & (s <= 1.0)
        hit &= skip_edge != k
        blocked |= hit
    return blocked


def _segments_hit_box(c, pts, bx: Box, own):
    lo = np.array([bx.xy_min[0], bx.xy_min[1], 0.0])
    hi = np.array([bx.xy_max[0], bx.xy_max[1], bx.height])
    d = pts - c
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - c) / d
        t2 = (hi - c) / d
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # parallel rays that lie outside the slab never enter
    outside = (d == 0.0) & ((c < lo) | (c > hi))
    t_enter = np.max(np.where(outside, np.inf, tmin), axis=1)
    t_exit = np.min(np.where(outside, -np.inf, tmax), axis=1)
    hit = (t_enter <= t_exit) & (t_exit > 1e-9) & (t_enter < 1.0 - 1e-7)
    return hit & ~own


def visible_mask(spec, poly, surface, pts, cam: RigidTransform):
    c = cam.translation
    rel = pts - c
    yaw = np.arctan2(cam.rotation[1, 0], cam.rotation[0, 0])
    az = np.angle(np.exp(1j * (np.arctan2(rel[:, 1], rel[:, 0]) - yaw)))
    horiz = np.hypot(rel[:, 0], rel[:, 1])
    el = np.arctan2(rel[:, 2], horiz)
    rng_ = np.linalg.norm(rel, axis=1)
    ok = np.abs(az) <= 0.5 * spec.sweep
    ok &= np.abs(el) <= 0.5 * np.deg2rad(spec.vfov_deg)
    ok &= rng_ <= spec.max_range
    ok &= (c - pts) @ surface.normal > 0.0
    if not ok.any():
        return ok
    idx = np.flatnonzero(ok)
    skip = -1 if surface.edge is None else surface.edge
    blocked = _segments_cross_edges(c[:2], pts[idx, :2], poly, skip)
    for j, bx in enumerate(spec.clutter):
        own = np.full(len(idx), surface.box == j)
        blocked |= _segments_hit_box(c, pts[idx], bx, own)
    ok[idx[blocked]] = False
    return ok


def synthesize_room(spec: SyntheticRoomSpec) -> Dataset:
    """Generate fragments, drifted odometry and ground truth for a room.

    Deterministic for a fixed ``spec.seed``.

    Raises:
        InvalidSpec: the spec violates its invariants.
    """
    spec.validate()
    poly, surfaces = room_surfaces(spec)
    cams = camera_poses(spec)
    rng = np.random.default_rng([spec.seed, 0])
    normal_sigma = spec.normal_noise_sigma
    if normal_sigma is None:
        normal_sigma = spec.noise_sigma / 0.1

    fragments = []
    for i, cam in enumerate(cams):
        pts_all, nrm_all, sid_all = [], [], []
        for s in surfaces:
            n = int(rng.poisson(s.area * spec.points_per_m2))
            pts = s.sampler(rng, n)
            vis = visible_mask(spec, poly, s, pts, cam)
            pts = pts[vis]
            pts_all.append(pts)
            nrm_all.append(np.tile(s.normal, (len(pts), 1)))
            sid_all.append(np.full(len(pts), s.sid))
        pts = np.vstack(pts_all)
        nrm = np.vstack(nrm_all)
        sid = np.concatenate(sid_all)
        if spec.noise_sigma > 0:
            pts = pts + _bounded_noise(rng, spec.noise_sigma, len(pts))
        if normal_sigma > 0:
            nrm = nrm + rng.normal(scale=normal_sigma, size=nrm.shape)
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        inv = cam.inverse()
        if len(pts) == 0:
            raise InvalidSpec(f"fragment {i} sees no surface")
        fragments.append(Fragment(i, inv.apply(pts), inv.rotate(nrm), np.zeros(3), sid))

    drift = drift_twists(spec)
    odometry = []
    for i in range(spec.fragment_count - 1):
        rel = cams[i].inverse() @ cams[i + 1]
        odometry.append(rel @ se3_exp(drift[i]))

    gt_rng = np.random.default_rng([spec.seed, 2])
    cloud = np.vstack([s.sampler(gt_rng, int(round(s.area * spec.gt_points_per_m2))) for s in surfaces])
    gt = GroundTruth(cams, cloud, envelope_planes(spec))
    return Dataset(fragments, odometry, gt)


def _bounded_noise(rng, sigma, n, radius=3.0):
    """Isotropic Gaussian offsets, redrawn while longer than ``radius * sigma``.

    Keeps every sample within ``radius * sigma`` of its generating surface.
    """
    noise = rng.normal(scale=sigma, size=(n, 3))
    bad = np.flatnonzero(np.linalg.norm(noise, axis=1) > radius * sigma)
    while len(bad):
        noise[bad] = rng.normal(scale=sigma, size=(len(bad), 3))
        bad = bad[np.linalg.norm(noise[bad], axis=1) > radius * sigma]
    return noise


def drift_twists(spec: SyntheticRoomSpec) -> np.ndarray:
    """The per-step drift twists ``[omega; v]`` applied to the odometry."""
    rng = np.random.default_rng([spec.seed, 1])
    out = np.zeros((spec.fragment_count - 1, 6))
    raw = rng.standard_normal((spec.fragment_count - 1, 6))
    out[:, :3] = raw[:, :3] * spec.drift_rot_sigma
    out[:, 3:] = raw[:, 3:] * spec.drift_trans_sigma
    return out
