"""Desk-plane extraction and instance segmentation of a tabletop cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import GeometryError, Plane, PointCloud

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    inlier_threshold: float = 0.003
    min_inlier_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass(frozen=True)
class SegmentConfig:
    radius: float = 0.008
    min_cluster_size: int = 60
    adjacency_band: float = 0.015
    plane_margin: float = 1.5 * 0.003


@dataclass(eq=False)
class Segmentation:
    plane: Plane
    clusters: list          # PointCloud per instance, canonical order
    cluster_indices: list   # indices into the input cloud
    rejected: PointCloud
    rejected_indices: np.ndarray
    plane_indices: np.ndarray

    def labels(self, n: int) -> np.ndarray:
        """Per-input-point labels: -1 plane, -2 rejected, k instance k."""
        out = np.full(n, -2)
        out[self.plane_indices] = -1
        for k, idx in enumerate(self.cluster_indices):
            out[idx] = k
        return out

    def report(self) -> dict:
        return {
            "plane": {"normal": list(self.plane.normal), "offset": self.plane.offset},
            "instances": [
                {"id": k, "points": len(c),
                 "bbox_min": c.points.min(axis=0).tolist(),
                 "bbox_max": c.points.max(axis=0).tolist()}
                for k, c in enumerate(self.clusters)],
            "rejected_points": len(self.rejected),
            "plane_points": int(len(self.plane_indices)),
        }


def _refine(points: np.ndarray) -> tuple[np.ndarray, float]:
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return n, float(n @ c)


def fit_plane_ransac(cloud: PointCloud, cfg: RansacConfig = RansacConfig(),
                     up=UP) -> Plane:
    """Dominant plane by seeded 3-point RANSAC, refined by least squares on inliers.

    The normal is oriented into the hemisphere of ``up``.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise GeometryError("need at least 3 points to fit a plane")
    rng = np.random.default_rng(cfg.seed)
    best_count, best = -1, None
    for _ in range(cfg.iterations):
        a, b, c = pts[rng.choice(len(pts), size=3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12 * max(np.linalg.norm(b - a) * np.linalg.norm(c - a), 1e-300) or norm == 0:
            continue
        n /= norm
        count = int(np.count_nonzero(np.abs(pts @ n - n @ a) < cfg.inlier_threshold))
        if count > best_count:
            best_count, best = count, (n, float(n @ a))
    if best is None:
        raise GeometryError("no dominant plane: every hypothesis was degenerate")
    if best_count < cfg.min_inlier_fraction * len(pts) or best_count < 3:
        raise GeometryError(
            f"no dominant plane: best inlier fraction {best_count / len(pts):.3f}")
    n, d = best
    for _ in range(2):
        inliers = pts[np.abs(pts @ n - d) < cfg.inlier_threshold]
        if len(inliers) < 3:
            break
        n, d = _refine(inliers)
    if n @ np.asarray(up, dtype=np.float64) < 0:
        n, d = -n, -d
    return Plane(tuple(n), d)


def connected_clusters(points: np.ndarray, radius: float) -> np.ndarray:
    """Component label per point of the graph linking points closer than ``radius``."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    n = len(points)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def segment_objects(cloud: PointCloud, plane: Plane, cfg: SegmentConfig = SegmentConfig()
                    ) -> Segmentation:
    """Remove the plane band, grow fixed-radius clusters, keep desk-adjacent ones.

    Clusters are ordered by centroid (lexicographic), so the output does not
    depend on input point order.
    """
    if cfg.radius <= 0:
        raise ValueError("radius must be positive")
    h = plane.signed_distance(cloud.points)
    on_plane = np.abs(h) < cfg.plane_margin
    rest = np.flatnonzero(~on_plane)
    labels = connected_clusters(cloud.points[rest], cfg.radius)
    kept, rejected = [], []
    for lab in np.unique(labels):
        idx = rest[labels == lab]
        hk = h[idx]
        touches = np.any((hk > 0) & (hk <= cfg.plane_margin + cfg.adjacency_band))
        if len(idx) >= cfg.min_cluster_size and touches:
            kept.append(idx)
        else:
            rejected.append(idx)
    kept.sort(key=lambda idx: tuple(cloud.points[idx].mean(axis=0)))
    rej = np.sort(np.concatenate(rejected)) if rejected else np.zeros(0, dtype=np.int64)
    return Segmentation(plane, [cloud.subset(np.sort(i)) for i in kept],
                        [np.sort(i) for i in kept], cloud.subset(rej), rej,
                        np.flatnonzero(on_plane))


def label_accuracy(seg: Segmentation, truth: np.ndarray, heights: np.ndarray,
                   margin: float) -> tuple[float, dict]:
    """Point-label accuracy against generator labels (-1 desk, k object).

    Instances are matched to truth objects by majority vote.  Points within
    ``margin`` of the desk are excluded: the plane band is removed by design.
    """
    n = len(truth)
    pred = seg.labels(n)
    mapping = {}
    for k, idx in enumerate(seg.cluster_indices):
        vals, counts = np.unique(truth[idx], return_counts=True)
        mapping[k] = int(vals[np.argmax(counts)])
    lut = np.array([mapping[k] for k in range(len(seg.cluster_indices))] + [-1, -3])
    mapped = lut[np.where(pred >= 0, pred, np.where(pred == -1, len(mapping), len(mapping) + 1))]
    evaluated = np.abs(heights) >= margin
    ok = mapped[evaluated] == truth[evaluated]
    return float(np.mean(ok)) if ok.size else 1.0, mapping
