import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from glassgrasp.core import MUG, PointCloud, ShapeSpec, sample_surface, sdf_eval, surface_area
from glassgrasp.scenegen import (DegradeConfig, Desk, SceneDescription, SceneError, SceneObject,
                                 _child_seeds, degrade_cloud, degrade_scene, make_scene,
                                 mug_benchmark_degrade, placement, single_object_scene,
                                 standard_scene)


def _cloud(n=4000, seed=0):
    return sample_surface(ShapeSpec.mug(), n, seed)


def test_single_cylinder_matches_transformed_samples():
    spec = ShapeSpec.cylindrical_cup()
    desc = single_object_scene(spec)
    scene = make_scene(desc)
    R, t = placement(desc.objects[0])
    n = int(round(desc.point_density * surface_area(spec, skip_base=True)))
    seed = _child_seeds(desc.seed, 2)[0]
    ref = sample_surface(spec, n, seed, skip_base=True).transformed(R, t)
    assert np.array_equal(scene.object_clouds[0].points, ref.points)


def test_scene_sdf_above_empty_desk():
    scene = make_scene(SceneDescription((), Desk()))
    assert scene.sdf(np.array([[0.2, 0.2, 0.05]]))[0] == pytest.approx(0.05, abs=1e-6)


def test_scene_sdf_is_min_of_parts():
    a = SceneObject(ShapeSpec.cylindrical_cup(), (-0.1, 0.0), 0.3)
    b = SceneObject(ShapeSpec.mug(), (0.1, 0.05), -1.2)
    scene = make_scene(SceneDescription((a, b), Desk()))
    p = np.random.default_rng(0).uniform([-0.3, -0.25, -0.03], [0.3, 0.25, 0.15], (10_000, 3))
    oracle = np.minimum.reduce([scene.description.desk.sdf(p), scene.object_sdf(0, p),
                                scene.object_sdf(1, p)])
    assert np.array_equal(scene.sdf(p), oracle)
    R, t = scene.transforms[1]
    assert np.array_equal(scene.object_sdf(1, p), sdf_eval(b.spec, (p - t) @ R))


def test_object_clouds_lie_on_surfaces():
    scene = make_scene(standard_scene(3))
    for i, c in enumerate(scene.object_clouds):
        assert np.max(np.abs(scene.object_sdf(i, c.points))) < 1e-6


def test_make_scene_deterministic():
    a, b = make_scene(standard_scene(5)), make_scene(standard_scene(5))
    for x, y in zip(a.object_clouds + [a.desk_cloud], b.object_clouds + [b.desk_cloud]):
        assert x.points.tobytes() == y.points.tobytes()


def test_invalid_placements_rejected():
    cup = ShapeSpec.cylindrical_cup()
    with pytest.raises(SceneError):
        SceneDescription((SceneObject(cup, (0.29, 0.0)),), Desk())
    with pytest.raises(SceneError):
        SceneDescription((SceneObject(cup, (0.0, 0.0)), SceneObject(cup, (0.09, 0.0))), Desk())


def test_scene_document_round_trip():
    desc = standard_scene(7)
    doc = json.loads(json.dumps(desc.to_dict()))
    assert SceneDescription.from_dict(doc) == desc


def test_scene_document_schema_errors():
    doc = standard_scene(0).to_dict()
    with pytest.raises(SceneError):
        SceneDescription.from_dict({**doc, "version": 99})
    bad = json.loads(json.dumps(doc))
    del bad["objects"][1]["shape"]
    with pytest.raises(SceneError, match=r"objects\[1\]"):
        SceneDescription.from_dict(bad)


@pytest.mark.parametrize("seed", range(20))
def test_standard_scene_content(seed):
    desc = standard_scene(seed)
    kinds = sorted(o.spec.kind for o in desc.objects)
    assert kinds == ["box", "box", "cylindrical_cup", "mug", "prismatic_cup"]
    mug = next(o.spec for o in desc.objects if o.spec.kind == MUG)
    # handle clear of the desk
    assert mug.handle_z - mug.handle_radius - mug.handle_tube > 0


# -- degradation -------------------------------------------------------------------

def test_degrade_identity():
    pc = _cloud()
    out = degrade_cloud(pc, DegradeConfig())
    assert np.array_equal(out.points, pc.points)


def test_dropout_binomial_interval():
    pc = _cloud(10_000)
    out = degrade_cloud(pc, DegradeConfig(dropout_fraction=0.5, seed=3))
    lo, hi = binom.interval(0.99, len(pc), 0.5)
    assert lo <= len(out) <= hi


def test_patch_removal_postcondition():
    pc = _cloud()
    cfg = DegradeConfig(patch_count=3, patch_radius=0.02, seed=4)
    out = degrade_cloud(pc, cfg)
    rng = np.random.default_rng(cfg.seed)
    centers = pc.points[rng.choice(len(pc), size=3, replace=False)]
    d = np.linalg.norm(out.points[:, None] - centers[None], axis=2)
    assert d.min() >= 0.02 - 1e-9
    assert len(out) < len(pc)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.01), st.integers(0, 10_000))
def test_noise_bounded_by_six_sigma(sigma, seed):
    pc = _cloud(2000)
    out, idx = degrade_cloud(pc, DegradeConfig(noise_sigma=sigma, seed=seed), return_index=True)
    moved = np.linalg.norm(out.points - pc.points[idx], axis=1)
    assert moved.max() <= 6 * sigma * (1 + 1e-12)


def test_degrade_removing_everything_is_error():
    pc = PointCloud(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        degrade_cloud(pc, DegradeConfig(patch_centers=((0.0, 0.0, 0.0),), patch_radius=0.1))


def test_degrade_config_validation():
    with pytest.raises(ValueError):
        DegradeConfig(dropout_fraction=1.0)
    with pytest.raises(ValueError):
        DegradeConfig(noise_sigma=-1.0)


def test_degrade_deterministic():
    cfg = DegradeConfig(dropout_fraction=0.3, patch_count=2, patch_radius=0.01, noise_sigma=1e-3,
                        seed=9)
    a, b = degrade_cloud(_cloud(), cfg), degrade_cloud(_cloud(), cfg)
    assert a.points.tobytes() == b.points.tobytes()


def test_mug_benchmark_patch_faces_away_from_handle():
    scene = make_scene(standard_scene(2))
    mi = next(i for i, o in enumerate(scene.description.objects) if o.spec.kind == MUG)
    cfg = mug_benchmark_degrade(scene, 0, mi)
    ob = scene.description.objects[mi]
    c = np.array(cfg.patch_centers[0])
    bearing = math.atan2(c[1] - ob.position[1], c[0] - ob.position[0])
    assert abs(math.remainder(bearing - (ob.yaw + math.pi), 2 * math.pi)) < 1e-9
    out = degrade_scene(scene, {mi: cfg})
    assert len(out.object_clouds[mi]) < 0.6 * len(scene.object_clouds[mi])
    # other objects untouched
    others = [i for i in range(5) if i != mi]
    assert all(out.object_clouds[i] is scene.object_clouds[i] for i in others)
