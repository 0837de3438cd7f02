import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glassgrasp.core import Plane, PointCloud, ShapeSpec, sample_surface, surface_area
from glassgrasp.grasp import (GraspCandidate, GraspConfig, GripperModel, check_collision,
                              contact_coverage, execution_validity, gripper_boxes, rank,
                              sample_grasps, score_grasp, score_stats, suppress_duplicates)

Z_UP = Plane((0.0, 0.0, 1.0), 0.0)
CFG = GraspConfig()
GRIPPER = GripperModel()


def _dense(spec, density=1_000_000.0, seed=0, skip_base=True):
    return sample_surface(spec, int(density * surface_area(spec, skip_base=skip_base)), seed,
                          skip_base=skip_base)


def _candidate(c1, c2, approach, n1=None, n2=None, cid=0):
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    u = (c2 - c1) / np.linalg.norm(c2 - c1)
    n1 = u if n1 is None else np.asarray(n1, float)
    n2 = u if n2 is None else np.asarray(n2, float)
    return GraspCandidate(cid, 0.5 * (c1 + c2), np.asarray(approach, float), u,
                          float(np.linalg.norm(c2 - c1)), np.stack([c1, c2]), np.stack([n1, n2]))


def _top_pinch(radius, z):
    """Top-down grasp across a cup's outer diameter, closing along x."""
    return _candidate([-radius, 0, z], [radius, 0, z], [0, 0, -1])


# -- sampling ----------------------------------------------------------------------

def test_cylinder_widths_match_diameter():
    cands = sample_grasps(_dense(ShapeSpec.cylindrical_cup(radius=0.04, solid=True), 250_000))
    assert cands
    w = np.array([c.width for c in cands])
    # chords inside the friction cone are at least 2 R cos(theta_f) long; pairs may
    # tilt by up to the line tolerance at each end
    assert w.min() >= 0.08 * math.cos(CFG.friction) - 1e-9
    assert w.max() <= math.hypot(0.08, 2 * CFG.line_tolerance)
    assert np.median(w) == pytest.approx(0.08, abs=0.001)


def test_object_wider_than_gripper_has_no_candidates():
    glass = ShapeSpec.cylindrical_cup(radius=0.045, solid=True)
    assert sample_grasps(_dense(glass, 250_000)) == []


def test_candidates_are_antipodal_and_well_formed():
    cands = sample_grasps(_dense(ShapeSpec.mug(), 250_000))
    assert len(cands) > 100
    for c in cands:
        assert c.antipodal_angle() <= CFG.friction + 1e-12
        assert abs(np.linalg.norm(c.approach) - 1) < 1e-12
        assert abs(np.linalg.norm(c.closing) - 1) < 1e-12
        assert abs(c.approach @ c.closing) < 1e-9
        assert 0 < c.width <= GRIPPER.max_width


def test_sampling_needs_normals():
    with pytest.raises(ValueError):
        sample_grasps(PointCloud(np.zeros((5, 3))))


def test_sampling_is_deterministic():
    cloud = _dense(ShapeSpec.mug(), 250_000)
    a, b = sample_grasps(cloud), sample_grasps(cloud)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.id == y.id and x.center.tobytes() == y.center.tobytes()
        assert x.approach.tobytes() == y.approach.tobytes()


def test_gripper_validation():
    with pytest.raises(ValueError):
        GripperModel(max_width=0.015)
    with pytest.raises(ValueError):
        GripperModel(finger_length=0.0)


# -- collision ---------------------------------------------------------------------

def _oracle_margin(cand, pts, gripper=GRIPPER):
    """Clearance by explicit point-in-box tests and clamped projections."""
    R = np.stack([cand.closing, cand.approach, cand.binormal])
    local = (np.asarray(pts) - cand.center) @ R.T
    best = gripper.margin_cap
    for c, h in gripper_boxes(cand, gripper):
        lo, hi = c - h, c + h
        for p in local:
            if np.all((p >= lo) & (p <= hi)):
                d = -min(np.min(p - lo), np.min(hi - p))
            else:
                d = float(np.linalg.norm(p - np.clip(p, lo, hi)))
            best = min(best, d)
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_collision_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cand = _top_pinch(0.03, 0.08)
    pts = cand.center + rng.uniform(-0.12, 0.12, (300, 3))
    assert check_collision(cand, pts) == pytest.approx(_oracle_margin(cand, pts), abs=1e-12)


def test_empty_space_margin_is_the_cap():
    assert check_collision(_top_pinch(0.03, 0.08), np.zeros((0, 3))) == GRIPPER.margin_cap


def test_point_inside_finger_is_penetration():
    cand = _top_pinch(0.03, 0.08)
    c, _ = gripper_boxes(cand, GRIPPER)[1]
    R = np.stack([cand.closing, cand.approach, cand.binormal])
    inside = cand.center + c @ R
    assert check_collision(cand, inside[None]) < 0


def test_desk_plane_is_an_obstacle():
    cand = _top_pinch(0.03, 0.005)       # fingertips reach below the desk
    assert check_collision(cand, np.zeros((0, 3)), plane=Z_UP) < 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_removing_points_never_decreases_margin(seed):
    rng = np.random.default_rng(seed)
    cand = _top_pinch(0.03, 0.08)
    pts = cand.center + rng.uniform(-0.08, 0.08, (200, 3))
    keep = rng.uniform(size=len(pts)) < 0.5
    assert check_collision(cand, pts[keep]) >= check_collision(cand, pts)


# -- scoring -----------------------------------------------------------------------

def test_ideal_grasp_on_cylinder_scores_high():
    cup = _dense(ShapeSpec.cylindrical_cup(radius=0.03))
    scored = score_grasp(_top_pinch(0.03, 0.085), cup)
    assert scored.collision_margin >= CFG.margin_ref
    assert scored.score >= 0.9


def test_penetrating_grasp_scores_zero():
    cup = _dense(ShapeSpec.cylindrical_cup(radius=0.03))
    scored = score_grasp(_top_pinch(0.03, 0.04), cup)     # palm sinks into the rim
    assert scored.collision_margin < 0 and scored.score == 0.0


def test_score_gating_on_sampled_candidates():
    cloud = _dense(ShapeSpec.mug(), 250_000)
    scored = [score_grasp(c, cloud, plane=Z_UP) for c in sample_grasps(cloud)]
    assert any(s.collision_margin < 0 for s in scored)
    for s in scored:
        assert 0.0 <= s.score <= 1.0
        if s.collision_margin < 0:
            assert s.score == 0.0


def test_coverage_loss_lowers_score():
    cup = _dense(ShapeSpec.cylindrical_cup(radius=0.03))
    cand = _top_pinch(0.03, 0.085)
    # strip growing bands of the pad area around the first contact
    prev_cov, prev_score = 2.0, 2.0
    for cut in (0.0, 0.003, 0.006, 0.009, 0.012):
        d = cup.points - cand.contacts[0]
        drop = (np.abs(d[:, 2]) < cut) & (np.abs(d @ cand.closing) < 0.01)
        pts = cup.points[~drop]
        cov = contact_coverage(cand, pts)
        score = score_grasp(cand, PointCloud(pts)).score
        assert cov <= prev_cov and score <= prev_score
        prev_cov, prev_score = cov, score
    assert prev_cov < 1.0


# -- statistics, ranking, suppression ---------------------------------------------------

def test_stats_single_score():
    s = score_stats([0.9])
    assert s == {"max": 0.9, "mean_top5": 0.9, "mean_top10": 0.9, "var_top5": 0.0,
                 "var_top10": 0.0}


def test_stats_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = list(rng.uniform(size=int(rng.integers(1, 40))))
        desc = sorted(scores, reverse=True)
        got = score_stats(scores)
        assert got["max"] == desc[0]
        for k in (5, 10):
            top = desc[:k]
            assert got[f"mean_top{k}"] == pytest.approx(statistics.fmean(top), rel=1e-15)
            assert got[f"var_top{k}"] == pytest.approx(statistics.pvariance(top), rel=1e-12,
                                                       abs=1e-18)


def test_stats_empty_is_error():
    with pytest.raises(ValueError):
        score_stats([])


def test_rank_breaks_ties_by_id():
    base = _top_pinch(0.03, 0.085)
    cands = [GraspCandidate(i, base.center, base.approach, base.closing, base.width,
                            base.contacts, base.contact_normals, s)
             for i, s in [(3, 0.5), (1, 0.5), (2, 0.9), (0, 0.1)]]
    assert [c.id for c in rank(cands)] == [2, 1, 3, 0]


def test_suppression_keeps_distinct_poses():
    a = GraspCandidate(0, np.zeros(3), np.array([0, 0, -1.0]), np.array([1.0, 0, 0]), 0.05,
                       np.zeros((2, 3)), np.zeros((2, 3)), 0.9)
    near = GraspCandidate(1, np.array([0.005, 0, 0]), a.approach, a.closing, 0.05,
                          a.contacts, a.contact_normals, 0.8)
    turned = GraspCandidate(2, np.zeros(3), a.approach, np.array([0, 1.0, 0]), 0.05,
                            a.contacts, a.contact_normals, 0.7)
    zero = GraspCandidate(3, np.array([1.0, 0, 0]), a.approach, a.closing, 0.05,
                          a.contacts, a.contact_normals, 0.0)
    kept = suppress_duplicates([a, near, turned, zero], 0.01, 30.0)
    assert [c.id for c in kept] == [0, 2]


# -- execution validity ------------------------------------------------------------------

@pytest.fixture(scope="module")
def mug_truth():
    return _dense(ShapeSpec.mug())


def _mug_body_grasp(z):
    r = ShapeSpec.mug().radius
    # closing across the body, perpendicular to the handle (which points along +x)
    return _candidate([0, -r, z], [0, r, z], [0, 0, -1], [0, -1, 0], [0, 1, 0])


def test_body_grasp_on_mug_is_valid(mug_truth):
    cand = _mug_body_grasp(0.08)
    assert execution_validity(cand, mug_truth, plane=Z_UP)


def test_penetrating_grasp_on_mug_is_invalid(mug_truth):
    assert not execution_validity(_mug_body_grasp(0.04), mug_truth, plane=Z_UP)


def test_contacts_off_the_real_surface_are_invalid(mug_truth):
    r = ShapeSpec.mug().radius
    cand = _candidate([0, -r - 0.01, 0.08], [0, r + 0.01, 0.08], [0, 0, -1])
    assert not execution_validity(cand, mug_truth, plane=Z_UP)
