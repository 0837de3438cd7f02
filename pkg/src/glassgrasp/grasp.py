"""Geometric parallel-jaw grasp proposals, collision checks and scoring.

Gripper frame of a candidate: ``closing`` runs from the first contact to the
second, ``approach`` is the direction the gripper travels toward the object,
``binormal = approach x closing``.  Positions along ``approach`` are measured
from the contact midpoint; fingertips reach ``grasp_depth`` past it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Plane, PointCloud

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class GripperModel:
    max_width: float = 0.085
    finger_length: float = 0.04
    finger_thickness: float = 0.01
    palm_depth: float = 0.02
    finger_width: float = 0.02
    grasp_depth: float = 0.012
    pregrasp_clearance: float = 0.01
    sweep: float = 0.08
    margin_cap: float = 0.01

    def __post_init__(self):
        if min(self.max_width, self.finger_length, self.finger_thickness, self.palm_depth,
               self.finger_width) <= 0:
            raise ValueError("gripper dimensions must be positive")
        if self.max_width <= 2 * self.finger_thickness:
            raise ValueError("max width must exceed twice the finger thickness")

    def opening(self, width: float) -> float:
        return min(width + 2 * self.pregrasp_clearance, self.max_width)


@dataclass(frozen=True)
class GraspConfig:
    friction_deg: float = 18.0
    pair_budget: int = 512
    min_width: float = 0.002
    line_tolerance: float = 0.002
    approach_angles_deg: tuple = (0.0, 45.0, -45.0, 90.0, -90.0)
    normal_neighbors: int = 16
    pad_cells: int = 5
    pad_cell: float = 0.003
    pad_tolerance: float = 0.003
    margin_ref: float = 0.004
    margin_floor: float = 0.05
    weight_antipodal: float = 1.0
    weight_coverage: float = 1.0
    weight_margin: float = 1.0
    margin_min: float = 0.002
    contact_tolerance: float = 0.003
    nms_distance: float = 0.01
    nms_angle_deg: float = 30.0
    seed: int = 0

    @property
    def friction(self) -> float:
        return math.radians(self.friction_deg)


@dataclass(frozen=True)
class GraspCandidate:
    id: int
    center: np.ndarray
    approach: np.ndarray
    closing: np.ndarray
    width: float
    contacts: np.ndarray          # (2, 3)
    contact_normals: np.ndarray   # (2, 3), unoriented
    score: float = float("nan")
    collision_margin: float = float("nan")

    @property
    def binormal(self) -> np.ndarray:
        return np.cross(self.approach, self.closing)

    def antipodal_angle(self, normals: Optional[np.ndarray] = None) -> float:
        """Largest angle between a contact normal line and the closing axis."""
        nrm = self.contact_normals if normals is None else normals
        cos = np.abs(nrm @ self.closing)
        return float(np.arccos(np.clip(cos.min(), -1.0, 1.0)))

    def row(self) -> dict:
        return {"id": self.id, **{f"c{a}": v for a, v in zip("xyz", self.center)},
                **{f"a{a}": v for a, v in zip("xyz", self.approach)},
                **{f"u{a}": v for a, v in zip("xyz", self.closing)},
                "width": self.width, "score": self.score, "margin": self.collision_margin}


# ---------------------------------------------------------------------------
# Normals and sampling
# ---------------------------------------------------------------------------

def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unoriented PCA normals from ``k`` nearest neighbors."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    flip = n[:, 2] < 0
    n[flip] *= -1
    return n


def _stratified_order(points: np.ndarray, rng: np.random.Generator, cells: int) -> np.ndarray:
    """Random permutation that visits one point per voxel before revisiting any voxel."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    vol = float(np.prod(np.maximum(hi - lo, 1e-6)))
    size = (vol / max(cells, 1)) ** (1.0 / 3.0)
    vox = np.floor((points - lo) / size).astype(np.int64)
    _, inv = np.unique(vox, axis=0, return_inverse=True)
    inv = inv.ravel()
    perm = rng.permutation(len(points))
    # rank of each point within its voxel, in permutation order
    order = perm[np.argsort(inv[perm], kind="stable")]
    starts = np.r_[0, np.flatnonzero(np.diff(inv[order])) + 1]
    rank = np.empty(len(points), dtype=np.int64)
    counts = np.diff(np.r_[starts, len(order)])
    rank[order] = np.arange(len(order)) - np.repeat(starts, counts)
    tiebreak = rng.permutation(len(points))
    return np.lexsort((tiebreak, rank))


def _approach_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (e1, e2) spanning the plane normal to ``u``; e1 points as far down as possible."""
    down = -UP
    e1 = down - (down @ u) * u
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.array([1.0, 0.0, 0.0]) - u[0] * u
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def sample_grasps(cloud: PointCloud, gripper: GripperModel = GripperModel(),
                  cfg: GraspConfig = GraspConfig(), id_offset: int = 0) -> list[GraspCandidate]:
    """Enumerate antipodal contact pairs and expand each into top/side approaches.

    Contact normals are treated as lines: a pair is antipodal when both normal
    lines lie within the friction cone of the closing axis.  Approaches are
    rotations about the closing axis starting from the most downward one, so
    the gripper comes from above or the side.
    """
    if cloud.normals is None:
        raise ValueError("sample_grasps needs a cloud with normals")
    pts, nrm = cloud.points, cloud.normals
    if len(pts) < 2:
        return []
    rng = np.random.default_rng(cfg.seed)
    tree = cKDTree(pts)
    cos_f = math.cos(cfg.friction)
    max_w = gripper.max_width
    order = _stratified_order(pts, rng, cfg.pair_budget)
    pairs = []
    seen = set()
    for i in order:
        if len(pairs) >= cfg.pair_budget:
            break
        p, n = pts[i], nrm[i]
        near = np.asarray(tree.query_ball_point(p, max_w), dtype=np.int64)
        d = pts[near] - p
        s = d @ n
        off = np.linalg.norm(d - s[:, None] * n, axis=1)
        ok = (off < cfg.line_tolerance) & (np.abs(s) >= cfg.min_width)
        if not ok.any():
            continue
        cand = near[ok]
        dist = np.linalg.norm(pts[cand] - p, axis=1)
        u = (pts[cand] - p) / dist[:, None]
        good = ((np.abs(u @ n) >= cos_f) & (np.abs(np.sum(u * nrm[cand], axis=1)) >= cos_f)
                & (dist <= max_w))
        # one partner per normal-line gap: keep the closest point of each distinct surface
        for j in cand[good][np.argsort(dist[good], kind="stable")]:
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            if any(abs(np.linalg.norm(pts[j] - p) - np.linalg.norm(pts[q] - p)) < 2 * cfg.line_tolerance
                   for a, q in pairs if a == i):
                continue
            seen.add(key)
            pairs.append((i, j))
            if len(pairs) >= cfg.pair_budget:
                break
    out = []
    angles = np.radians(cfg.approach_angles_deg)
    for i, j in pairs:
        c1, c2 = pts[i], pts[j]
        width = float(np.linalg.norm(c2 - c1))
        u = (c2 - c1) / width
        e1, e2 = _approach_basis(u)
        for phi in angles:
            a = math.cos(phi) * e1 + math.sin(phi) * e2
            out.append(GraspCandidate(
                id_offset + len(out), 0.5 * (c1 + c2), a, u, width,
                np.stack([c1, c2]), np.stack([nrm[i], nrm[j]])))
    return out


# ---------------------------------------------------------------------------
# Collision and scoring
# ---------------------------------------------------------------------------

def gripper_boxes(candidate: GraspCandidate, gripper: GripperModel, swept: bool = True):
    """(center_local, half_extent) of the two fingers and the palm in (u, a, b) coordinates."""
    W = gripper.opening(candidate.width)
    t, L, D = gripper.finger_thickness, gripper.finger_length, gripper.grasp_depth
    hb = gripper.finger_width / 2
    back = gripper.sweep if swept else 0.0
    boxes = []
    a_hi, a_lo = D, D - L - back
    for sgn in (-1.0, 1.0):
        boxes.append((np.array([sgn * (W / 2 + t / 2), 0.5 * (a_hi + a_lo), 0.0]),
                      np.array([t / 2, 0.5 * (a_hi - a_lo), hb])))
    p_hi, p_lo = D - L, D - L - gripper.palm_depth - back
    boxes.append((np.array([0.0, 0.5 * (p_hi + p_lo), 0.0]),
                  np.array([W / 2 + t, 0.5 * (p_hi - p_lo), hb])))
    return boxes


def _frame(candidate: GraspCandidate) -> np.ndarray:
    return np.stack([candidate.closing, candidate.approach, candidate.binormal])


def box_signed_distance(local: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(local - center) - half
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


def _box_corners(center, half):
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return center + signs * half


def check_collision(candidate: GraspCandidate, scene, gripper: GripperModel = GripperModel(),
                    plane: Optional[Plane] = None, tree: Optional[cKDTree] = None) -> float:
    """Signed clearance between the swept gripper and the scene (negative = penetration).

    ``scene`` is a PointCloud or an (N, 3) array.  With ``plane`` the desk is
    also treated analytically: every gripper corner must stay above it.
    Clearances beyond ``gripper.margin_cap`` are reported as the cap.
    """
    pts = scene.points if isinstance(scene, PointCloud) else np.asarray(scene, dtype=np.float64)
    R = _frame(candidate)
    boxes = gripper_boxes(candidate, gripper)
    lo = np.min([c - h for c, h in boxes], axis=0)
    hi = np.max([c + h for c, h in boxes], axis=0)
    mid = 0.5 * (lo + hi)
    reach = 0.5 * float(np.linalg.norm(hi - lo)) + gripper.margin_cap
    margin = gripper.margin_cap
    if len(pts):
        tree = cKDTree(pts) if tree is None else tree
        near = tree.query_ball_point(candidate.center + mid @ R, reach)
        if near:
            local = (pts[near] - candidate.center) @ R.T
            for c, h in boxes:
                margin = min(margin, float(box_signed_distance(local, c, h).min()))
    if plane is not None:
        corners = np.concatenate([_box_corners(c, h) for c, h in gripper_boxes(candidate, gripper, False)])
        world = candidate.center + corners @ R
        margin = min(margin, float(plane.signed_distance(world).min()))
    return float(margin)


def contact_coverage(candidate: GraspCandidate, object_points: np.ndarray,
                     cfg: GraspConfig = GraspConfig(), tree: Optional[cKDTree] = None) -> float:
    """Mean fraction of finger-pad cells that hold an object point near each contact."""
    n, cell = cfg.pad_cells, cfg.pad_cell
    half = 0.5 * n * cell
    fractions = []
    for k, c in enumerate(candidate.contacts):
        if tree is not None:
            idx = tree.query_ball_point(c, math.sqrt(2) * half + cfg.pad_tolerance)
            local = object_points[idx] - c
        else:
            local = object_points - c
        du = local @ candidate.closing
        da = local @ candidate.approach
        db = local @ candidate.binormal
        inside = (np.abs(du) <= cfg.pad_tolerance) & (np.abs(da) < half) & (np.abs(db) < half)
        ia = np.floor((da[inside] + half) / cell).astype(int)
        ib = np.floor((db[inside] + half) / cell).astype(int)
        cells = np.unique(np.clip(ia, 0, n - 1) * n + np.clip(ib, 0, n - 1))
        fractions.append(len(cells) / (n * n))
    return float(np.mean(fractions))


def antipodal_quality(angle: float, friction: float) -> float:
    if angle > friction:
        return 0.0
    return 1.0 - 0.5 * (angle / friction) ** 2


def margin_factor(margin: float, cfg: GraspConfig = GraspConfig()) -> float:
    if margin < 0:
        return 0.0
    return float(min(1.0, max(cfg.margin_floor, margin / cfg.margin_ref)))


def score_grasp(candidate: GraspCandidate, object_cloud, scene=None,
                gripper: GripperModel = GripperModel(), cfg: GraspConfig = GraspConfig(),
                plane: Optional[Plane] = None, object_tree: Optional[cKDTree] = None,
                scene_tree: Optional[cKDTree] = None) -> GraspCandidate:
    """Composite score: antipodal quality x pad coverage x clamped margin factor.

    Returns a copy of the candidate with ``score`` and ``collision_margin``
    set.  The margin is computed here unless the candidate already has one.
    """
    margin = candidate.collision_margin
    if not np.isfinite(margin):
        scene = object_cloud if scene is None else scene
        margin = check_collision(candidate, scene, gripper, plane, scene_tree)
    obj = object_cloud.points if isinstance(object_cloud, PointCloud) else np.asarray(object_cloud)
    qa = antipodal_quality(candidate.antipodal_angle(), cfg.friction)
    cov = contact_coverage(candidate, obj, cfg, object_tree)
    fm = margin_factor(margin, cfg)
    score = (qa ** cfg.weight_antipodal) * (cov ** cfg.weight_coverage) * (fm ** cfg.weight_margin)
    return replace(candidate, score=float(score), collision_margin=float(margin))


def rank(candidates: Sequence[GraspCandidate]) -> list[GraspCandidate]:
    """Stable order by descending score, ties by candidate id."""
    return sorted(candidates, key=lambda c: (-c.score, c.id))


def suppress_duplicates(ranked: Sequence[GraspCandidate], distance: float = 0.02,
                        angle_deg: float = 30.0, limit: Optional[int] = None
                        ) -> list[GraspCandidate]:
    """Greedy pose non-maximum suppression over a ranked list.

    A candidate is dropped when a better kept one has its center within
    ``distance`` and both its approach and closing lines within ``angle_deg``.
    Zero-score candidates are never kept.
    """
    cos_t = math.cos(math.radians(angle_deg))
    kept: list[GraspCandidate] = []
    for c in ranked:
        if not c.score > 0:
            continue
        if any(np.linalg.norm(c.center - k.center) < distance
               and c.approach @ k.approach >= cos_t
               and abs(c.closing @ k.closing) >= cos_t for k in kept):
            continue
        kept.append(c)
        if limit is not None and len(kept) >= limit:
            break
    return kept


def score_stats(candidates) -> dict:
    """Best score plus mean and variance of the top 5 and top 10 (population variances)."""
    scores = np.array([c.score if isinstance(c, GraspCandidate) else c for c in candidates],
                      dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scored candidates")
    s = np.sort(scores)[::-1]
    top5, top10 = s[:5], s[:10]
    return {"max": float(s[0]), "mean_top5": float(top5.mean()),
            "mean_top10": float(top10.mean()), "var_top5": float(top5.var()),
            "var_top10": float(top10.var())}


def execution_validity(candidate: GraspCandidate, truth: PointCloud,
                       gripper: GripperModel = GripperModel(), cfg: GraspConfig = GraspConfig(),
                       plane: Optional[Plane] = None, tree: Optional[cKDTree] = None) -> bool:
    """Physical-feasibility proxy evaluated against reference geometry.

    ``truth`` is a dense cloud with normals of the real surfaces.  Valid iff
    both contacts lie on a real surface, the real normals are within the
    friction cone, the width fits the gripper, and the swept gripper keeps
    ``margin_min`` clearance from the real scene and stays above the desk.
    """
    if not 0 < candidate.width <= gripper.max_width:
        return False
    tree = cKDTree(truth.points) if tree is None else tree
    dist, idx = tree.query(candidate.contacts)
    if np.any(dist > cfg.contact_tolerance):
        return False
    if candidate.antipodal_angle(truth.normals[idx]) > cfg.friction:
        return False
    margin = check_collision(replace(candidate, collision_margin=float("nan")), truth, gripper,
                             plane, tree)
    return margin >= cfg.margin_min
