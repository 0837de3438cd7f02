"""Geometry-driven pose and scale estimation for upright tabletop objects.

A cluster is projected onto the desk plane.  The outer ring of the projection
gives the footprint center; an outward protrusion (a mug handle) is the key
region whose principal axis gives the yaw.  Revolute objects get yaw 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from .core import (CYLINDRICAL_CUP, MUG, PRISMATIC_CUP, GeometryError, ObjectPose, Plane,
                   PointCloud, normalize_angle, pca_axes)

# canonical heights of the prior shapes, per kind
H_STD = {MUG: 0.095, CYLINDRICAL_CUP: 0.10, PRISMATIC_CUP: 0.10}


@dataclass(frozen=True)
class KeyRegionConfig:
    min_points: int = 30
    min_residual: float = 0.005      # meters
    rms_factor: float = 2.0
    bins: int = 72
    min_key_points: int = 20
    link_radius: float = 0.008       # connectivity of key-region points
    max_rival_ratio: float = 0.5


@dataclass(frozen=True)
class KeyRegion:
    points2d: np.ndarray
    index: np.ndarray                # rows of the input holding key points
    ring_center: np.ndarray
    ring_radius: float
    direction: np.ndarray            # unit vector from ring center to key centroid


@dataclass(frozen=True)
class RingFit:
    center: np.ndarray
    radius: float
    rms: float
    envelope: np.ndarray             # outermost radius per bearing bin (nan if empty)


@dataclass(frozen=True)
class NormalizationParams:
    d_max: float
    h_std: float
    alpha: float


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_to_plane(cluster: PointCloud, plane: Plane) -> np.ndarray:
    """2D coordinates of the orthogonal projection in the plane's fixed basis."""
    e1, e2 = plane.basis()
    rel = cluster.points - plane.origin()
    return np.column_stack([rel @ e1, rel @ e2])


def plane_heights(cluster: PointCloud, plane: Plane) -> np.ndarray:
    return plane.signed_distance(cluster.points)


def lift_from_plane(points2d, heights, plane: Plane) -> np.ndarray:
    e1, e2 = plane.basis()
    p2 = np.asarray(points2d, dtype=np.float64)
    return (plane.origin() + p2[:, :1] * e1 + p2[:, 1:2] * e2
            + np.asarray(heights, dtype=np.float64)[:, None] * plane.n)


# ---------------------------------------------------------------------------
# Ring fit and key region
# ---------------------------------------------------------------------------

def _circle_lsq(pts: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
    """Weighted algebraic (Kasa) circle fit."""
    A = np.column_stack([pts, np.ones(len(pts))])
    b = (pts ** 2).sum(axis=1)
    sw = np.sqrt(w)
    sol, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    c = sol[:2] / 2
    r = math.sqrt(max(sol[2] + c @ c, 0.0))
    return c, r


def _envelope(pts: np.ndarray, center: np.ndarray, bins: int):
    d = pts - center
    rad = np.hypot(d[:, 0], d[:, 1])
    bearing = np.arctan2(d[:, 1], d[:, 0])
    k = np.minimum(((bearing + math.pi) / (2 * math.pi) * bins).astype(int), bins - 1)
    env = np.full(bins, np.nan)
    arg = np.full(bins, -1)
    order = np.lexsort((rad, k))
    last = np.r_[k[order][1:] != k[order][:-1], True]
    env[k[order][last]] = rad[order][last]
    arg[k[order][last]] = order[last]
    return env, arg


def fit_ring(points2d, bins: int = 72, iterations: int = 4) -> RingFit:
    """Robust fit of the outer ring of a projected cup.

    Uses the outermost point per bearing bin (inner walls and floors project
    inside the ring) and Tukey-reweighted circle fits, so protrusions and
    missing patches are down-weighted.
    """
    pts = np.asarray(points2d, dtype=np.float64)
    center = np.median(pts, axis=0)
    radius = rms = 0.0
    env = np.full(bins, np.nan)
    for _ in range(iterations):
        env, arg = _envelope(pts, center, bins)
        sel = arg[arg >= 0]
        ring_pts = pts[sel]
        w = np.ones(len(ring_pts))
        for _ in range(6):
            center, radius = _circle_lsq(ring_pts, w)
            res = np.hypot(*(ring_pts - center).T) - radius
            scale = max(1.4826 * np.median(np.abs(res)), 1e-4)
            u = res / (4.685 * scale)
            w = np.where(np.abs(u) < 1, (1 - u ** 2) ** 2, 0.0)
            if w.sum() < 3:
                w = np.ones(len(ring_pts))
        rms = float(np.sqrt(np.sum(w * res ** 2) / max(w.sum(), 1e-12)))
    env, _ = _envelope(pts, center, bins)
    return RingFit(center, radius, rms, env - radius)


def _components(pts: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """(largest component's rows, component sizes in descending order)."""
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(pts),) * 2)
    _, lab = connected_components(g, directed=False)
    counts = np.bincount(lab)
    # ties go to the lowest label, i.e. the component holding the earliest point
    return np.flatnonzero(lab == np.argmax(counts)), np.sort(counts)[::-1]


def detect_key_region(points2d, cfg: KeyRegionConfig = KeyRegionConfig(),
                      ring: Optional[RingFit] = None) -> Optional[KeyRegion]:
    """Key region (outward protrusion) of a projected cluster, or ``None`` if revolute.

    Points farther than ``max(min_residual, rms_factor * ring rms)`` outside the
    fitted ring are candidates; the largest connected group of them is kept.
    A handle is a single protrusion, so when the runner-up group reaches
    ``max_rival_ratio`` of the largest (the corners of a box footprint, say)
    there is no key region.
    """
    pts = np.asarray(points2d, dtype=np.float64)
    if len(pts) < cfg.min_points:
        raise GeometryError(f"need at least {cfg.min_points} points, got {len(pts)}")
    ring = fit_ring(pts, cfg.bins) if ring is None else ring
    res = np.hypot(*(pts - ring.center).T) - ring.radius
    threshold = max(cfg.min_residual, cfg.rms_factor * ring.rms)
    cand = np.flatnonzero(res > threshold)
    if len(cand) < cfg.min_key_points:
        return None
    rows, sizes = _components(pts[cand], cfg.link_radius)
    idx = cand[rows]
    if len(idx) < cfg.min_key_points:
        return None
    if len(sizes) > 1 and sizes[1] >= cfg.max_rival_ratio * sizes[0]:
        return None
    key = pts[idx]
    direction = key.mean(axis=0) - ring.center
    direction = direction / np.linalg.norm(direction)
    return KeyRegion(key, idx, ring.center, ring.radius, direction)


def estimate_yaw(key: KeyRegion) -> float:
    """Angle of the key region's principal axis, pointing away from the ring center."""
    try:
        axis, _ = pca_axes(key.points2d)
    except GeometryError:
        axis = key.direction
    if axis @ (key.points2d.mean(axis=0) - key.ring_center) < 0:
        axis = -axis
    return normalize_angle(math.atan2(axis[1], axis[0]))


# ---------------------------------------------------------------------------
# Scale and normalization
# ---------------------------------------------------------------------------

def estimate_scale(cluster: PointCloud, plane: Plane, h_std: float,
                   eps: float = 1e-6) -> NormalizationParams:
    """``alpha = h_std / d_max`` with ``d_max`` the top height above the plane."""
    d_max = float(np.max(plane.signed_distance(cluster.points)))
    if d_max <= eps:
        raise GeometryError("flat cluster: no point above the plane")
    return NormalizationParams(d_max, h_std, h_std / d_max)


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def to_canonical(points: np.ndarray, pose: ObjectPose) -> np.ndarray:
    cloud = PointCloud(points)
    uv = project_to_plane(cloud, pose.plane) - np.array(pose.center)
    uv = uv @ _yaw_rotation(pose.yaw)      # rotate by -yaw
    h = plane_heights(cloud, pose.plane)
    return np.column_stack([uv, h]) * pose.alpha


def from_canonical(points: np.ndarray, pose: ObjectPose) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64) / pose.alpha
    uv = p[:, :2] @ _yaw_rotation(pose.yaw).T + np.array(pose.center)
    return lift_from_plane(uv, p[:, 2], pose.plane)


def _frame_rotation(pose: ObjectPose) -> np.ndarray:
    """Rotation taking canonical directions to world directions."""
    e1, e2 = pose.plane.basis()
    R2 = _yaw_rotation(pose.yaw)
    return np.column_stack([R2[0, 0] * e1 + R2[1, 0] * e2,
                            R2[0, 1] * e1 + R2[1, 1] * e2, pose.plane.n])


def normalize_cloud(cluster: PointCloud, pose: ObjectPose) -> PointCloud:
    """Move a cluster to the canonical frame: center to origin, yaw to 0, scale by alpha."""
    nrm = None if cluster.normals is None else cluster.normals @ _frame_rotation(pose)
    return PointCloud(to_canonical(cluster.points, pose), nrm)


def denormalize_cloud(cloud: PointCloud, pose: ObjectPose) -> PointCloud:
    nrm = None if cloud.normals is None else cloud.normals @ _frame_rotation(pose).T
    return PointCloud(from_canonical(cloud.points, pose), nrm)


# ---------------------------------------------------------------------------
# Kind inference and the combined estimator
# ---------------------------------------------------------------------------

def polygon_order(ring: RingFit, orders=range(3, 9), min_amplitude: float = 0.0012
                  ) -> Optional[int]:
    """Dominant k-fold periodicity of the ring's radius-vs-bearing profile."""
    env = ring.envelope
    ok = np.isfinite(env)
    if ok.sum() < len(env) // 2:
        return None
    theta = (np.arange(len(env)) + 0.5) / len(env) * 2 * math.pi
    best, best_amp = None, min_amplitude
    for k in orders:
        c = np.mean(env[ok] * np.cos(k * theta[ok]))
        s = np.mean(env[ok] * np.sin(k * theta[ok]))
        amp = 2 * math.hypot(c, s)
        if amp > best_amp * (1.25 if best is not None else 1.0):
            best, best_amp = k, amp
    return best


@dataclass(frozen=True)
class PoseEstimate:
    kind: str
    pose: ObjectPose
    normalization: NormalizationParams
    key_region: Optional[KeyRegion]
    ring: RingFit
    sides: Optional[int] = None

    def report(self) -> dict:
        return {
            "kind": self.kind,
            "center": list(self.pose.center),
            "yaw_rad": self.pose.yaw,
            "yaw_deg": math.degrees(self.pose.yaw),
            "alpha": self.pose.alpha,
            "d_max": self.normalization.d_max,
            "ring_radius": self.ring.radius,
            "sides": self.sides,
            "key_region_points": 0 if self.key_region is None else len(self.key_region.index),
        }


def estimate_pose(cluster: PointCloud, plane: Plane, h_std: Optional[dict] = None,
                  cfg: KeyRegionConfig = KeyRegionConfig()) -> PoseEstimate:
    """Infer kind, footprint center, yaw and alpha for an upright object."""
    h_std = H_STD if h_std is None else h_std
    pts2d = project_to_plane(cluster, plane)
    ring = fit_ring(pts2d, cfg.bins)
    key = detect_key_region(pts2d, cfg, ring)
    sides = None
    if key is not None:
        kind, yaw = MUG, estimate_yaw(key)
    else:
        sides = polygon_order(ring)
        kind = PRISMATIC_CUP if sides else CYLINDRICAL_CUP
        yaw = 0.0
        if sides:
            # align a vertex with +x: the envelope peaks at the vertices
            theta = (np.arange(len(ring.envelope)) + 0.5) / len(ring.envelope) * 2 * math.pi - math.pi
            ok = np.isfinite(ring.envelope)
            c = np.sum(ring.envelope[ok] * np.cos(sides * theta[ok]))
            s = np.sum(ring.envelope[ok] * np.sin(sides * theta[ok]))
            yaw = normalize_angle(math.atan2(s, c) / sides)
    norm = estimate_scale(cluster, plane, h_std[kind])
    pose = ObjectPose(tuple(ring.center), yaw, norm.alpha, plane)
    return PoseEstimate(kind, pose, norm, key, ring, sides)
