import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glassgrasp.core import ShapeSpec
from glassgrasp.field import (PRIMES, DensityField, FieldError, FitConfig, HashEncoding, Ray,
                              RayBatch, analytic_targets, clip_to_box, extract_points, fit_field,
                              generate_rays, hash_encode, loss_and_table_grad, render_ray,
                              scene_bbox)
from glassgrasp.scenegen import Desk, SceneDescription, single_object_scene

BOX = (np.array([-0.1, -0.1, 0.0]), np.array([0.1, 0.1, 0.15]))


def _encoding(seed=0, levels=4, log2_table=10):
    enc = HashEncoding.create(BOX, levels=levels, features=2, log2_table=log2_table, min_res=4,
                              max_res=32, init_scale=1.0, seed=seed)
    enc.level_weights = np.linspace(0.5, 2.0, levels)
    return enc


def _reference_encode(enc, x):
    """Loop-per-corner reference of the hashed trilinear encoding."""
    lo, hi = enc.bbox
    T = enc.table_size
    out = []
    for level, res in enumerate(enc.resolutions):
        pos = (np.asarray(x) - lo) / (hi - lo) * res
        base = [min(int(math.floor(p)), int(res) - 1) for p in pos]
        acc = np.zeros(enc.features)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = (base[0] + dx, base[1] + dy, base[2] + dz)
                    h = (c[0] * PRIMES[0]) ^ (c[1] * PRIMES[1]) ^ (c[2] * PRIMES[2])
                    w = 1.0
                    for k, d in enumerate((dx, dy, dz)):
                        f = pos[k] - base[k]
                        w *= f if d else 1.0 - f
                    acc += w * enc.tables[level, h % T]
        out.append(enc.level_weights[level] * acc)
    return np.concatenate(out)


# -- hash encoding ------------------------------------------------------------------

def test_encoding_validation():
    t = np.zeros((2, 100, 2))
    with pytest.raises(FieldError):
        HashEncoding(t, [4, 8], [1, 1], BOX)
    with pytest.raises(FieldError):
        HashEncoding(np.zeros((2, 64, 2)), [8, 8], [1, 1], BOX)


def test_grid_corner_selects_one_row():
    enc = _encoding()
    level, res = 2, int(enc.resolutions[2])
    ijk = np.array([3, 5, 2])
    x = BOX[0] + ijk / res * (BOX[1] - BOX[0])
    feats = hash_encode(enc, x).reshape(enc.levels, enc.features)
    h = (3 * PRIMES[0]) ^ (5 * PRIMES[1]) ^ (2 * PRIMES[2])
    row = enc.tables[level, h & (enc.table_size - 1)]
    assert np.allclose(feats[level], enc.level_weights[level] * row, atol=1e-12)


def test_cell_center_is_corner_mean():
    enc = _encoding(seed=1)
    level, res = 1, int(enc.resolutions[1])
    base = np.array([1, 2, 3])
    x = BOX[0] + (base + 0.5) / res * (BOX[1] - BOX[0])
    rows = []
    for d in np.ndindex(2, 2, 2):
        c = base + d
        h = (int(c[0]) * PRIMES[0]) ^ (int(c[1]) * PRIMES[1]) ^ (int(c[2]) * PRIMES[2])
        rows.append(enc.tables[level, h & (enc.table_size - 1)])
    feats = hash_encode(enc, x).reshape(enc.levels, enc.features)
    assert np.allclose(feats[level], enc.level_weights[level] * np.mean(rows, axis=0), atol=1e-12)


def test_matches_reference_implementation():
    enc = _encoding(seed=2)
    xs = np.random.default_rng(3).uniform(BOX[0], BOX[1], (200, 3))
    got = hash_encode(enc, xs)
    ref = np.array([_reference_encode(enc, x) for x in xs])
    assert np.max(np.abs(got - ref)) < 1e-12


def test_outside_box_is_error():
    with pytest.raises(FieldError):
        hash_encode(_encoding(), [0.0, 0.0, 0.2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2), st.integers(1, 31), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_encoding_continuous_across_faces(axis, cell, u, v):
    enc = _encoding(seed=4)
    x = np.empty(3)
    others = [k for k in range(3) if k != axis]
    x[others[0]] = BOX[0][others[0]] + u * (BOX[1] - BOX[0])[others[0]]
    x[others[1]] = BOX[0][others[1]] + v * (BOX[1] - BOX[0])[others[1]]
    x[axis] = BOX[0][axis] + cell / 32 * (BOX[1] - BOX[0])[axis]
    e = np.zeros(3)
    e[axis] = 1e-7
    diff = hash_encode(enc, x + e) - hash_encode(enc, x - e)
    assert np.max(np.abs(diff)) < 1e-4


def test_encoding_deterministic():
    xs = np.random.default_rng(0).uniform(BOX[0], BOX[1], (50, 3))
    assert hash_encode(_encoding(seed=5), xs).tobytes() == hash_encode(_encoding(seed=5), xs).tobytes()


# -- rays and rendering ------------------------------------------------------------

def test_ray_validation():
    with pytest.raises(FieldError):
        Ray([0, 0, 0], [1, 1, 0], 0.0, 1.0)
    with pytest.raises(FieldError):
        Ray([0, 0, 0], [1, 0, 0], 1.0, 1.0)


def _ray(length=0.5):
    return Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0, length)


def test_empty_space_renders_transparent():
    r = render_ray(lambda p: np.zeros(len(p)), _ray(), 64)
    assert r.alpha == 0.0
    assert np.all(r.transmittance_profile == 1.0)


def test_constant_density_closed_form():
    r = render_ray(lambda p: np.full(len(p), 2.0), _ray(0.5), 1024)
    assert abs(r.alpha - (1 - math.exp(-1))) < 1e-6


def _piecewise(breaks, values):
    breaks, values = np.asarray(breaks), np.asarray(values)

    def sigma(p):
        return values[np.searchsorted(breaks, p[:, 0], side="right")]
    return sigma


def _fine_oracle(sigma, length, n=1_000_000):
    dt = length / n
    t = (np.arange(n) + 0.5) * dt
    pts = np.c_[t, np.zeros(n), np.zeros(n)]
    return 1.0 - math.exp(-float(np.sum(sigma(pts))) * dt)


def test_piecewise_profile_matches_fine_oracle():
    # breakpoints on quadrature cell boundaries of the coarse render
    length, n = 0.5, 1024
    breaks = np.array([100, 400, 700]) * length / n
    sigma = _piecewise(breaks, [0.0, 3.0, 0.5, 6.0])
    oracle = _fine_oracle(sigma, length)
    exact = 1 - math.exp(-(3.0 * 300 + 0.5 * 300 + 6.0 * 324) * length / n)
    assert abs(oracle - exact) < 1e-5
    assert abs(render_ray(sigma, _ray(length), n).alpha - oracle) < 1e-5


def test_unaligned_piecewise_profile_matches_fine_oracle():
    # the midpoint rule errs by at most |jump| * dt / 2 per discontinuity
    length, n = 0.5, 2 ** 18
    sigma = _piecewise([0.0731, 0.2113, 0.3877], [0.0, 2.5, 0.7, 4.0])
    assert abs(render_ray(sigma, _ray(length), n).alpha - _fine_oracle(sigma, length)) < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=6), st.integers(2, 300))
def test_transmittance_profile_monotone_and_bounded(values, n):
    breaks = np.linspace(0, 0.5, len(values) + 1)[1:-1]
    r = render_ray(_piecewise(breaks, values), _ray(), n)
    T = r.transmittance_profile
    assert T[0] == 1.0 and len(T) == n + 1
    assert np.all(np.diff(T) <= 0) and np.all((T >= 0) & (T <= 1))
    assert 0.0 <= r.alpha <= 1.0


@pytest.mark.parametrize("seed", range(4))
def test_render_converges_on_random_fields(seed):
    f = DensityField.create(BOX, hidden=16, seed=seed, levels=4, log2_table=10, min_res=4,
                            max_res=32)
    f.encoding.tables *= 5e3
    f.b2 = 0.0
    rays = generate_rays(BOX, 20, seed=seed).rays()
    for ray in rays:
        a = render_ray(f, ray, 512).alpha
        b = render_ray(f, ray, 1024).alpha
        assert abs(a - b) < 1e-4


def test_clip_to_box_slab():
    near, far, hit = clip_to_box([[0, 0, 1.0], [5, 5, 5]], [[0, 0, -1.0], [0, 0, -1.0]],
                                 *BOX)
    assert hit.tolist() == [True, False]
    assert near[0] == pytest.approx(0.85) and far[0] == pytest.approx(1.0)


# -- checkpoint ----------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    f = DensityField.create(BOX, seed=3, levels=3, log2_table=8, min_res=4, max_res=16)
    f.save(tmp_path / "f.npz")
    g = DensityField.load(tmp_path / "f.npz")
    for a, b in [(f.encoding.tables, g.encoding.tables), (f.w1, g.w1), (f.b1, g.b1),
                 (f.w2, g.w2), (f.encoding.resolutions, g.encoding.resolutions)]:
        assert a.tobytes() == b.tobytes()
    assert f.b2 == g.b2 and f.sigma_scale == g.sigma_scale
    xs = np.random.default_rng(0).uniform(*BOX, (100, 3))
    assert f.sigma(xs).tobytes() == g.sigma(xs).tobytes()


# -- analytic supervision ----------------------------------------------------------

def test_analytic_alpha_through_cylinder_walls():
    spec = ShapeSpec.cylindrical_cup(radius=0.04, height=0.10, wall=0.005)
    desc = single_object_scene(spec, opacity=80.0)
    o = np.array([[-0.3, 0.0, 0.05]])
    rays = RayBatch(o, np.array([[1.0, 0.0, 0.0]]), np.array([0.0]), np.array([0.6]))
    alpha, depth = analytic_targets(desc, rays)
    assert alpha[0] == pytest.approx(1 - math.exp(-80.0 * 0.010), abs=1e-9)
    # depth lies between the two wall crossings, pulled toward the first
    assert 0.26 < depth[0] < 0.30


def test_analytic_alpha_through_desk():
    desc = SceneDescription((), Desk((0.1, 0.1)))
    rays = RayBatch(np.array([[0.0, 0.0, 0.5]]), np.array([[0.0, 0.0, -1.0]]),
                    np.array([0.0]), np.array([1.0]))
    alpha, depth = analytic_targets(desc, rays)
    s, w = desc.desk.opacity, desc.desk.thickness
    assert alpha[0] == pytest.approx(1 - math.exp(-s * w), abs=1e-12)
    exact = (0.5 + 1 / s - math.exp(-s * w) * (0.5 + w + 1 / s)) / alpha[0]
    assert depth[0] == pytest.approx(exact, rel=1e-12)


def test_empty_scene_needs_a_box():
    with pytest.raises(FieldError):
        scene_bbox(SceneDescription((), None))


# -- gradients --------------------------------------------------------------------------

def test_table_gradient_matches_finite_differences():
    desc = single_object_scene(ShapeSpec.cylindrical_cup(), opacity=80.0)
    bbox = scene_bbox(desc)
    f = DensityField.create(bbox, hidden=8, seed=0, levels=3, log2_table=8, min_res=4,
                            max_res=16, init_scale=0.5)
    f.b2 = -1.0
    rays = generate_rays(bbox, 24, seed=1)
    alpha, depth = analytic_targets(desc, rays)
    cfg = FitConfig(dtype="float64", n_samples=32)
    depth = np.where(alpha > 0, depth - rays.near, 0.0)
    _, grad = loss_and_table_grad(f, rays, alpha, depth, cfg)
    used = np.argwhere(np.abs(grad) > 1e-8)
    pick = used[np.random.default_rng(0).choice(len(used), 40, replace=False)]
    h = 1e-6
    for l, t, c in pick:
        g = f.copy()
        g.encoding.tables[l, t, c] += h
        lp, _ = loss_and_table_grad(g, rays, alpha, depth, cfg)
        g.encoding.tables[l, t, c] -= 2 * h
        lm, _ = loss_and_table_grad(g, rays, alpha, depth, cfg)
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grad[l, t, c]) / max(abs(fd), abs(grad[l, t, c])) < 1e-4


# -- fitting and extraction -----------------------------------------------------------

FAST = FitConfig(iterations=300, n_rays=4000, levels=4, log2_table=12, max_res=64)


@pytest.fixture(scope="module")
def empty_fit():
    box = (np.array([-0.1, -0.1, -0.01]), np.array([0.1, 0.1, 0.12]))
    return fit_field(SceneDescription((), None), cfg=FAST, bbox=box), box


def test_empty_scene_fit_is_transparent(empty_fit):
    fit, box = empty_fit
    held = generate_rays(box, 300, seed=99)
    alpha = np.array([render_ray(fit.field, r, 96).alpha for r in held.rays()])
    assert alpha.max() < 0.01


def test_empty_scene_extracts_no_band_points(empty_fit):
    fit, _ = empty_fit
    ex = extract_points(fit.field, (40.0, 160.0), 32)
    assert len(ex.transparent) == 0


def test_band_widening_never_removes_points():
    box = (np.array([-0.1, -0.1, -0.01]), np.array([0.1, 0.1, 0.12]))
    f = DensityField.create(box, hidden=16, seed=5, levels=4, log2_table=10, min_res=4,
                            max_res=32, init_scale=1.0)
    f.b2 = 0.0     # densities straddle the upper band edge
    inner = extract_points(f, (40.0, 160.0), 24, opaque_skin=0)
    outer = extract_points(f, (20.0, 300.0), 24, opaque_skin=0, opaque_surface=False)
    a = {tuple(p) for p in inner.transparent.points}
    b = {tuple(p) for p in outer.transparent.points}
    assert len(a) > 0 and len(inner.opaque) > 0
    assert a < b


def test_extract_rejects_bad_band(empty_fit):
    with pytest.raises(FieldError):
        extract_points(empty_fit[0].field, (5.0, 1.0), 8)


@pytest.mark.slow
def test_opaque_slab_fit_matches_held_out_alpha():
    desc = SceneDescription((), Desk((0.1, 0.1)))
    fit = fit_field(desc)
    assert fit.final_loss < 0.5 * fit.initial_loss
    held = generate_rays(scene_bbox(desc), 400, seed=12345)
    truth, _ = analytic_targets(desc, held)
    alpha = np.array([render_ray(fit.field, r, 96).alpha for r in held.rays()])
    assert np.mean(np.abs(alpha - truth)) < 0.05
