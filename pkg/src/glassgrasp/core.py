"""Shared geometry: point clouds, planes, poses, procedural cup/mug SDFs and metrics.

Every shape lives in a canonical frame: the base rests on ``z = 0``, the body
axis is the ``z`` axis and a mug handle points along ``+x``.  Signed distances
are in meters and negative inside the material.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

CYLINDRICAL_CUP = "cylindrical_cup"
PRISMATIC_CUP = "prismatic_cup"
MUG = "mug"
BOX = "box"
SHAPE_KINDS = (CYLINDRICAL_CUP, PRISMATIC_CUP, MUG, BOX)


class GeometryError(ValueError):
    """Raised when an input has no well-defined geometric answer."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in meters, optionally with unit normals of the same length."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"{len(nrm)} normals for {len(pts)} points")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, index) -> "PointCloud":
        nrm = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], nrm)

    def transformed(self, rotation: np.ndarray, translation) -> "PointCloud":
        """Apply ``x -> R x + t``; normals are rotated."""
        rotation = np.asarray(rotation, dtype=np.float64)
        pts = self.points @ rotation.T + np.asarray(translation, dtype=np.float64)
        nrm = None if self.normals is None else self.normals @ rotation.T
        return PointCloud(pts, nrm)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.normals is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds]))
        return PointCloud(pts)


@dataclass(frozen=True)
class Plane:
    """The plane ``{x : normal . x = offset}``."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if n.shape != (3,) or not np.isfinite(norm) or norm == 0:
            raise ValueError(f"invalid plane normal {self.normal!r}")
        if abs(norm - 1.0) > 1e-9:
            n = n / norm
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.n - self.offset

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic in-plane orthonormal basis ``(e1, e2)`` with ``e1 x e2 = n``.

        ``e1`` is the projection of ``+x`` (``+y`` when the normal is within
        ~25 degrees of ``x``), so a ``z``-up plane gets ``e1 = x, e2 = y``.
        """
        n = self.n
        helper = np.array([1.0, 0.0, 0.0])
        if abs(n @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        e1 = helper - (helper @ n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2

    def origin(self) -> np.ndarray:
        return self.n * self.offset


def normalize_angle(angle):
    """Wrap angles to ``(-pi, pi]``."""
    a = np.mod(np.asarray(angle, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    a = np.where(a <= -math.pi, a + 2 * math.pi, a)
    return float(a) if np.ndim(a) == 0 else a


@dataclass(frozen=True)
class ObjectPose:
    """Plane-relative pose: footprint center (plane coords), yaw and scale factor."""

    center: tuple
    yaw: float
    alpha: float
    plane: Plane

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))
        object.__setattr__(self, "alpha", float(self.alpha))


@dataclass(frozen=True)
class ShapeSpec:
    """Procedural transparent-ware shape in its canonical frame.

    ``radius`` is the outer radius (circumradius for prisms), ``wall`` the side
    wall thickness and ``base`` the bottom thickness.  Mug handles are tori in
    the ``xz`` plane centered at ``(handle_offset, 0, handle_z)``.  Boxes use
    ``size = (sx, sy, sz)`` and ignore the cup fields.
    """

    kind: str
    radius: float = 0.04
    height: float = 0.10
    wall: float = 0.005
    base: float = 0.008
    sides: int = 0
    solid: bool = False
    handle_radius: float = 0.0
    handle_tube: float = 0.0
    handle_z: float = 0.0
    handle_offset: float = 0.0
    size: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == BOX:
            if len(self.size) != 3 or min(self.size) <= 0:
                raise ValueError("box needs three positive side lengths")
            object.__setattr__(self, "size", tuple(float(s) for s in self.size))
            return
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("radius and height must be positive")
        if not self.solid:
            if not 0 < self.wall < self.inner_apothem_limit():
                raise ValueError("wall thickness must be positive and smaller than the radius")
            if not 0 < self.base < self.height:
                raise ValueError("base thickness must be in (0, height)")
        if self.kind == PRISMATIC_CUP and self.sides < 3:
            raise ValueError("prismatic cup needs at least 3 sides")
        if self.kind == MUG:
            self._check_handle()

    def inner_apothem_limit(self) -> float:
        if self.kind == PRISMATIC_CUP:
            return self.radius * math.cos(math.pi / self.sides)
        return self.radius

    def _check_handle(self):
        R, a, c, zc = self.handle_radius, self.handle_tube, self.handle_offset, self.handle_z
        if min(R, a) <= 0 or a >= R:
            raise ValueError("mug handle needs 0 < tube < handle radius")
        inner = self.radius - (0.0 if self.solid else self.wall)
        if c - R >= self.radius:
            raise ValueError("handle does not reach the mug body")
        if not self.solid and c - R - a < inner - 1e-12:
            raise ValueError("handle intrudes into the mug cavity")
        if zc - R - a <= 0 or zc + R + a >= self.height:
            raise ValueError("handle must stay between the desk and the rim")

    @classmethod
    def cylindrical_cup(cls, radius=0.04, height=0.10, wall=0.005, base=0.008, solid=False):
        return cls(CYLINDRICAL_CUP, radius=radius, height=height, wall=wall, base=base, solid=solid)

    @classmethod
    def prismatic_cup(cls, radius=0.042, height=0.10, wall=0.005, base=0.008, sides=6, solid=False):
        return cls(PRISMATIC_CUP, radius=radius, height=height, wall=wall, base=base,
                   sides=sides, solid=solid)

    @classmethod
    def mug(cls, radius=0.04, height=0.095, wall=0.006, base=0.008, handle_radius=0.025,
            handle_tube=0.005, handle_z=0.048, attach=0.001):
        """Mug whose handle centerline sinks ``attach`` meters into the body wall."""
        return cls(MUG, radius=radius, height=height, wall=wall, base=base,
                   handle_radius=handle_radius, handle_tube=handle_tube, handle_z=handle_z,
                   handle_offset=radius - attach + handle_radius)

    @classmethod
    def box(cls, sx, sy, sz):
        return cls(BOX, size=(sx, sy, sz))

    @property
    def top(self) -> float:
        return self.size[2] if self.kind == BOX else self.height

    def scaled(self, s: float) -> "ShapeSpec":
        """Uniformly scaled copy (scales about the canonical origin)."""
        return replace(
            self, radius=self.radius * s, height=self.height * s, wall=self.wall * s,
            base=self.base * s, handle_radius=self.handle_radius * s,
            handle_tube=self.handle_tube * s, handle_z=self.handle_z * s,
            handle_offset=self.handle_offset * s, size=tuple(v * s for v in self.size))

    def footprint_radius(self) -> float:
        """Radius of a circle about the axis containing the top-down footprint."""
        if self.kind == BOX:
            return 0.5 * math.hypot(self.size[0], self.size[1])
        if self.kind == MUG:
            return max(self.radius, self.handle_offset + self.handle_radius + self.handle_tube)
        return self.radius

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == BOX:
            sx, sy, sz = self.size
            return np.array([-sx / 2, -sy / 2, 0.0]), np.array([sx / 2, sy / 2, sz])
        r = self.radius
        hi_x = self.handle_offset + self.handle_radius + self.handle_tube if self.kind == MUG else r
        return np.array([-r, -r, 0.0]), np.array([max(r, hi_x), r, self.height])

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == BOX:
            d["size"] = list(self.size)
            return d
        d.update(radius=self.radius, height=self.height, solid=self.solid)
        if not self.solid:
            d.update(wall=self.wall, base=self.base)
        if self.kind == PRISMATIC_CUP:
            d["sides"] = self.sides
        if self.kind == MUG:
            d.update(handle_radius=self.handle_radius, handle_tube=self.handle_tube,
                     handle_z=self.handle_z, handle_offset=self.handle_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        d = dict(d)
        if "size" in d:
            d["size"] = tuple(d["size"])
        return cls(**d)


@dataclass(frozen=True)
class SdfSample:
    position: tuple
    sdf: float


# ---------------------------------------------------------------------------
# 2D cross sections
# ---------------------------------------------------------------------------

class _Circle:
    def __init__(self, radius):
        self.radius = radius

    def sdf(self, xy):
        return np.hypot(xy[..., 0], xy[..., 1]) - self.radius

    @property
    def perimeter(self):
        return 2 * math.pi * self.radius

    @property
    def area(self):
        return math.pi * self.radius ** 2

    def sample_boundary(self, rng, n):
        t = rng.uniform(0.0, 2 * math.pi, n)
        nrm = np.stack([np.cos(t), np.sin(t)], axis=-1)
        return self.radius * nrm, nrm

    def sample_interior(self, rng, n):
        t = rng.uniform(0.0, 2 * math.pi, n)
        r = self.radius * np.sqrt(rng.uniform(0.0, 1.0, n))
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)


class _ConvexPolygon:
    """Counter-clockwise convex polygon with an exact signed distance."""

    def __init__(self, vertices):
        self.v = np.asarray(vertices, dtype=np.float64)
        self.e = np.roll(self.v, -1, axis=0) - self.v
        self.len = np.linalg.norm(self.e, axis=1)
        self.out = np.stack([self.e[:, 1], -self.e[:, 0]], axis=1) / self.len[:, None]

    @classmethod
    def regular(cls, circumradius, sides):
        t = 2 * math.pi * np.arange(sides) / sides
        return cls(circumradius * np.stack([np.cos(t), np.sin(t)], axis=1))

    @classmethod
    def rectangle(cls, hx, hy):
        return cls([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])

    def sdf(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        dist = np.full(xy.shape[:-1], np.inf)
        inside = np.ones(xy.shape[:-1], dtype=bool)
        for v, e, ln, o in zip(self.v, self.e, self.len, self.out):
            w = xy - v
            s = np.clip((w @ e) / (ln * ln), 0.0, 1.0)
            d = w - s[..., None] * e
            dist = np.minimum(dist, np.hypot(d[..., 0], d[..., 1]))
            inside &= (w @ o) < 0
        return np.where(inside, -dist, dist)

    @property
    def perimeter(self):
        return float(self.len.sum())

    @property
    def area(self):
        x, y = self.v[:, 0], self.v[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def sample_boundary(self, rng, n):
        k = rng.choice(len(self.v), size=n, p=self.len / self.len.sum())
        s = rng.uniform(0.0, 1.0, n)
        return self.v[k] + s[:, None] * self.e[k], self.out[k]

    def sample_interior(self, rng, n):
        # fan triangles from the centroid
        c = self.v.mean(axis=0)
        a, b = self.v - c, np.roll(self.v, -1, axis=0) - c
        tri_area = 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        k = rng.choice(len(self.v), size=n, p=tri_area / tri_area.sum())
        u, v = rng.uniform(0.0, 1.0, n), rng.uniform(0.0, 1.0, n)
        flip = u + v > 1
        u, v = np.where(flip, 1 - u, u), np.where(flip, 1 - v, v)
        return c + u[:, None] * a[k] + v[:, None] * b[k]


def _sections(spec: ShapeSpec):
    """Outer and inner (cavity) cross sections; inner is None for solids."""
    if spec.kind == BOX:
        return _ConvexPolygon.rectangle(spec.size[0] / 2, spec.size[1] / 2), None
    if spec.kind == PRISMATIC_CUP:
        outer = _ConvexPolygon.regular(spec.radius, spec.sides)
        if spec.solid:
            return outer, None
        # inset every face by the wall thickness
        inner_r = spec.radius - spec.wall / math.cos(math.pi / spec.sides)
        return outer, _ConvexPolygon.regular(inner_r, spec.sides)
    outer = _Circle(spec.radius)
    return outer, (None if spec.solid else _Circle(spec.radius - spec.wall))


def _height(spec):
    return spec.size[2] if spec.kind == BOX else spec.height


def _interval_gap(z, lo, hi):
    return np.maximum(np.maximum(lo - z, z - hi), 0.0)


def _body_sdf(spec: ShapeSpec, p: np.ndarray) -> np.ndarray:
    """Exact SDF of an extruded cup/box: min distance to its faces, signed by membership."""
    outer, inner = _sections(spec)
    h = _height(spec)
    z = p[..., 2]
    so = outer.sdf(p[..., :2])
    pos_o = np.maximum(so, 0.0)
    d = np.hypot(so, _interval_gap(z, 0.0, h))          # outer lateral
    d = np.minimum(d, np.hypot(pos_o, z))                # bottom
    inside = (so < 0) & (z > 0) & (z < h)
    if inner is None:
        d = np.minimum(d, np.hypot(pos_o, z - h))        # top
    else:
        si = inner.sdf(p[..., :2])
        ring = np.maximum(np.maximum(so, -si), 0.0)
        d = np.minimum(d, np.hypot(ring, z - h))                                  # rim
        d = np.minimum(d, np.hypot(si, _interval_gap(z, spec.base, h)))           # inner lateral
        d = np.minimum(d, np.hypot(np.maximum(si, 0.0), z - spec.base))           # cavity floor
        inside &= ~((si < 0) & (z > spec.base))
    return np.where(inside, -d, d)


def _torus_sdf(spec: ShapeSpec, p: np.ndarray) -> np.ndarray:
    q = np.hypot(p[..., 0] - spec.handle_offset, p[..., 2] - spec.handle_z) - spec.handle_radius
    return np.hypot(q, p[..., 1]) - spec.handle_tube


def sdf_eval(spec: ShapeSpec, p) -> np.ndarray:
    """Signed distance from point(s) ``p`` (shape ``(..., 3)``) to ``spec``.

    Exact for cups and boxes; for mugs the min-union of body and handle,
    which is exact away from the body-handle junction.
    """
    p = np.asarray(p, dtype=np.float64)
    d = _body_sdf(spec, p)
    if spec.kind == MUG:
        d = np.minimum(d, _torus_sdf(spec, p))
    return d


def sdf_gradient(spec: ShapeSpec, p, h: float = 1e-7) -> np.ndarray:
    """Central-difference SDF gradient."""
    p = np.asarray(p, dtype=np.float64)
    g = np.empty(p.shape)
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        g[..., k] = (sdf_eval(spec, p + dp) - sdf_eval(spec, p - dp)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def _faces(spec: ShapeSpec, skip_base: bool):
    """(area, sampler) per surface patch; samplers map (rng, n) -> (points, normals)."""
    outer, inner = _sections(spec)
    h = _height(spec)
    faces = []

    def lateral(section, z0, z1, sign):
        def draw(rng, n):
            xy, nrm = section.sample_boundary(rng, n)
            z = rng.uniform(z0, z1, n)
            return (np.column_stack([xy, z]),
                    sign * np.column_stack([nrm, np.zeros(n)]))
        return section.perimeter * (z1 - z0), draw

    def cap(section, z0, up, hole=None):
        def draw(rng, n):
            xy = np.zeros((0, 2))
            while len(xy) < n:
                cand = section.sample_interior(rng, 2 * (n - len(xy)) + 8)
                if hole is not None:
                    cand = cand[hole.sdf(cand) >= 0]
                xy = np.concatenate([xy, cand])
            xy = xy[:n]
            nrm = np.zeros((n, 3))
            nrm[:, 2] = 1.0 if up else -1.0
            return np.column_stack([xy, np.full(n, z0)]), nrm
        area = section.area - (hole.area if hole is not None else 0.0)
        return area, draw

    faces.append(lateral(outer, 0.0, h, 1.0))
    if not skip_base:
        faces.append(cap(outer, 0.0, up=False))
    if inner is None:
        faces.append(cap(outer, h, up=True))
    else:
        faces.append(cap(outer, h, up=True, hole=inner))
        faces.append(lateral(inner, spec.base, h, -1.0))
        faces.append(cap(inner, spec.base, up=True))
    if spec.kind == MUG:
        faces.append((4 * math.pi ** 2 * spec.handle_radius * spec.handle_tube,
                      lambda rng, n: _sample_torus(spec, rng, n)))
    return faces


def _sample_torus(spec, rng, n):
    R, a = spec.handle_radius, spec.handle_tube
    phi = np.zeros(0)
    theta = np.zeros(0)
    while len(phi) < n:
        m = 2 * (n - len(phi)) + 8
        t = rng.uniform(0.0, 2 * math.pi, m)
        keep = rng.uniform(0.0, R + a, m) < R + a * np.cos(t)
        phi = np.concatenate([phi, rng.uniform(0.0, 2 * math.pi, m)[keep]])
        theta = np.concatenate([theta, t[keep]])
    phi, theta = phi[:n], theta[:n]
    # ring lies in the xz plane around (handle_offset, 0, handle_z)
    ring_dir = np.column_stack([np.cos(phi), np.zeros(n), np.sin(phi)])
    nrm = np.cos(theta)[:, None] * ring_dir + np.sin(theta)[:, None] * np.array([0.0, 1.0, 0.0])
    center = np.array([spec.handle_offset, 0.0, spec.handle_z]) + R * ring_dir
    return center + a * nrm, nrm


def surface_area(spec: ShapeSpec, skip_base: bool = False) -> float:
    """Sum of patch areas (for mugs this counts the buried handle part too)."""
    return float(sum(a for a, _ in _faces(spec, skip_base)))


def sample_surface(spec: ShapeSpec, n: int, seed: int, skip_base: bool = False) -> PointCloud:
    """Area-uniform samples on the surface with outward unit normals.

    ``skip_base`` leaves out the bottom face that rests on the desk.  For mugs,
    patches buried inside the other component are rejected so samples cover
    the union surface only.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    faces = _faces(spec, skip_base)
    areas = np.array([a for a, _ in faces])
    pts, nrms = np.zeros((0, 3)), np.zeros((0, 3))
    while len(pts) < n:
        m = n - len(pts) + (n // 4 if spec.kind == MUG else 0) + 8
        which = rng.choice(len(faces), size=m, p=areas / areas.sum())
        batch_p, batch_n = np.empty((m, 3)), np.empty((m, 3))
        for k, (_, draw) in enumerate(faces):
            sel = np.flatnonzero(which == k)
            if len(sel):
                batch_p[sel], batch_n[sel] = draw(rng, len(sel))
        if spec.kind == MUG:
            is_torus = which == len(faces) - 1
            other = np.where(is_torus, _body_sdf(spec, batch_p), _torus_sdf(spec, batch_p))
            keep = other >= 0
            batch_p, batch_n = batch_p[keep], batch_n[keep]
        pts = np.concatenate([pts, batch_p])
        nrms = np.concatenate([nrms, batch_n])
    nrms = nrms[:n]
    return PointCloud(pts[:n], nrms / np.linalg.norm(nrms, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Metrics and small linear algebra
# ---------------------------------------------------------------------------

def _as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def chamfer(a, b) -> float:
    """Symmetric chamfer distance: the mean of both directed mean NN distances."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance of an empty cloud is undefined")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def pca_axes(points2d) -> tuple[np.ndarray, np.ndarray]:
    """Dominant axis of a 2D point set and the covariance eigenvalues (descending).

    The axis sign is fixed so its dot product with ``+x`` is nonnegative
    (``+y`` breaks ties).
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise GeometryError("need at least two points for an orientation")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-300:
        raise GeometryError("all points coincide; orientation undefined")
    axis = evecs[:, 1].copy()
    if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
        axis = -axis
    return axis, np.array([evals[1], max(evals[0], 0.0)])


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
