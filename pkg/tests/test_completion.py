import numpy as np
import pytest
import torch

from glassgrasp.core import MUG, GeometryError, PointCloud, ShapeSpec, chamfer, sample_surface, sdf_eval
from glassgrasp.completion import (InferConfig, PriorMismatchError, SdfDecoder, TrainConfig, _Net,
                                   build_prior_dataset, family_bounds, infer_latent,
                                   load_default_decoder, reconstruct_surface, shape_family,
                                   train_autodecoder, training_loss)
from glassgrasp.scenegen import DegradeConfig, degrade_cloud

CYL = ShapeSpec.cylindrical_cup()
CYL_BOUNDS = family_bounds("cylindrical_cup")
SMALL = TrainConfig(latent_dim=8, hidden=(128, 128, 128), epochs=120, steps_per_epoch=20,
                    shapes_per_batch=2, points_per_shape=1024)


@pytest.fixture(scope="module")
def cyl_decoder():
    """Decoder trained on a single cylinder (listed twice to form a family)."""
    data = build_prior_dataset([CYL, CYL], 8000, 1, bounds=CYL_BOUNDS)
    return train_autodecoder(data, SMALL, kind="cylindrical_cup", bounds=CYL_BOUNDS)


@pytest.fixture(scope="module")
def mug_decoder():
    return load_default_decoder(MUG)


def _cell(decoder, res):
    lo, hi = decoder.bounds
    return float(np.max((np.asarray(hi) - np.asarray(lo)) / (res - 1)))


# -- dataset -----------------------------------------------------------------------

def test_dataset_labels_are_exact():
    fam = shape_family(MUG, 3, 0)
    for sid, pts, sdf in build_prior_dataset(fam, 2000, 4):
        assert np.max(np.abs(sdf - sdf_eval(fam[sid], pts))) <= 1e-12


def test_dataset_near_fraction_and_determinism():
    fam = shape_family("prismatic_cup", 2, 1)
    a = build_prior_dataset(fam, 5000, 9)
    b = build_prior_dataset(fam, 5000, 9)
    for (_, pa, sa), (_, pb, sb) in zip(a, b):
        assert pa.tobytes() == pb.tobytes() and sa.tobytes() == sb.tobytes()
        # near-surface samples come first; the rest are uniform in the box
        near = np.abs(sa[:4500]) < 0.05
        assert near.mean() > 0.99
    assert sum(len(p) for _, p, _ in a) == 10_000


# -- training ----------------------------------------------------------------------

def test_training_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cfg = TrainConfig()
    net = _Net(cfg.latent_dim, cfg.hidden).double()
    data = build_prior_dataset(shape_family(MUG, 2, 0), 64, 0)
    pts = torch.as_tensor(np.concatenate([d[1] for d in data]))
    sdf = torch.as_tensor(np.concatenate([d[2] for d in data]))
    ids = torch.as_tensor(np.repeat([0, 1], 64))
    latents = torch.randn(2, cfg.latent_dim, dtype=torch.float64) * 0.1
    params = list(net.parameters())
    loss = training_loss(net, latents, ids, pts, sdf, cfg)
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(32):
        k = int(rng.integers(len(params)))
        flat = params[k].data.view(-1)
        j = int(rng.integers(flat.numel()))
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = training_loss(net, latents, ids, pts, sdf, cfg).item()
            flat[j] = old - h
            down = training_loss(net, latents, ids, pts, sdf, cfg).item()
            flat[j] = old
        fd = (up - down) / (2 * h)
        g = grads[k].view(-1)[j].item()
        assert abs(fd - g) <= 1e-4 * max(abs(g), abs(fd), 1e-8), (k, j, g, fd)


def test_training_needs_two_shapes():
    with pytest.raises(ValueError):
        train_autodecoder(build_prior_dataset([CYL], 100, 0), SMALL)


def test_nonfinite_loss_aborts():
    data = build_prior_dataset([CYL, CYL], 200, 0, bounds=CYL_BOUNDS)
    data[0][2][:] = np.nan
    with pytest.raises(FloatingPointError, match="diverged"):
        train_autodecoder(data, TrainConfig(hidden=(16,), latent_dim=4, epochs=1, steps_per_epoch=1))


def test_training_reduces_loss(cyl_decoder):
    h = np.asarray(cyl_decoder.meta["loss_history"])
    assert h[-1] < 0.25 * h[0]
    blocks = h.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_latents_do_not_collapse(cyl_decoder):
    z = cyl_decoder.latents
    assert np.linalg.norm(z[0] - z[1]) > 0


def test_single_shape_sdf_accuracy(cyl_decoder):
    rng = np.random.default_rng(0)
    p = sample_surface(CYL, 4000, 3).points + rng.normal(size=(4000, 3)) * 0.005
    err = np.abs(cyl_decoder.sdf(cyl_decoder.latents[0], p) - sdf_eval(CYL, p))
    assert err.mean() < 0.002


def test_checkpoint_round_trip(cyl_decoder, tmp_path):
    cyl_decoder.save(tmp_path / "d.npz")
    back = SdfDecoder.load(tmp_path / "d.npz")
    assert back.hidden == cyl_decoder.hidden and back.kind == cyl_decoder.kind
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, cyl_decoder.weights))
    assert np.array_equal(back.latents, cyl_decoder.latents)
    assert back.meta["config_hash"] == SMALL.digest()


# -- reconstruction ------------------------------------------------------------------

def test_reconstruction_matches_analytic_surface(cyl_decoder):
    cloud, mesh = reconstruct_surface(cyl_decoder, cyl_decoder.latents[0])
    err = np.abs(sdf_eval(CYL, cloud.points))
    assert np.mean(err < 0.002) >= 0.98
    # vertices sit on the decoded zero level
    assert np.max(np.abs(cyl_decoder.sdf(cyl_decoder.latents[0], cloud.points))) < \
        1.5 * _cell(cyl_decoder, 96)
    assert mesh.is_closed() and mesh.euler_characteristic() == 2


def test_reconstruction_converges_with_resolution(cyl_decoder):
    z = cyl_decoder.latents[0]
    coarse, _ = reconstruct_surface(cyl_decoder, z, 48)
    fine, _ = reconstruct_surface(cyl_decoder, z, 96)
    assert chamfer(coarse.points, fine.points) < _cell(cyl_decoder, 48)


def test_degenerate_latent_is_error(cyl_decoder):
    w = [a.copy() for a in cyl_decoder.weights]
    w[-1] += 10.0    # output bias: positive everywhere
    dec = SdfDecoder(cyl_decoder.kind, cyl_decoder.latent_dim, cyl_decoder.hidden, w,
                     cyl_decoder.latents, cyl_decoder.bounds)
    with pytest.raises(GeometryError, match="degenerate latent"):
        reconstruct_surface(dec, dec.latents[0], 32)


@pytest.mark.parametrize("kind", ["cylindrical_cup", "prismatic_cup"])
def test_packaged_convex_cups_are_watertight(kind):
    dec = load_default_decoder(kind)
    _, mesh = reconstruct_surface(dec, dec.latents[0])
    assert mesh.is_closed() and mesh.euler_characteristic() == 2


# -- inference -----------------------------------------------------------------------

def test_training_shape_recovers_its_latent(mug_decoder):
    spec = shape_family(MUG, 60, mug_decoder.meta["family_seed"])[3]
    z = infer_latent(mug_decoder, sample_surface(spec, 2000, 5))
    d = np.linalg.norm(mug_decoder.latents - z.z, axis=1)
    assert int(np.argmin(d)) == 3
    _, mesh = reconstruct_surface(mug_decoder, z)
    assert chamfer(mesh.sample(20_000, 0).points, sample_surface(spec, 20_000, 1).points) < 0.002


def test_held_out_mug_reconstructs(mug_decoder):
    spec = shape_family(MUG, 1, 4242)[0]
    z = infer_latent(mug_decoder, sample_surface(spec, 2000, 2))
    _, mesh = reconstruct_surface(mug_decoder, z)
    assert chamfer(mesh.sample(20_000, 0).points, sample_surface(spec, 20_000, 1).points) < 0.003


def test_inference_is_deterministic(mug_decoder):
    pc = sample_surface(ShapeSpec.mug(), 800, 3)
    a, b = infer_latent(mug_decoder, pc), infer_latent(mug_decoder, pc)
    assert a.z.tobytes() == b.z.tobytes()


def test_empty_partial_is_error(mug_decoder):
    with pytest.raises(GeometryError):
        infer_latent(mug_decoder, PointCloud(np.zeros((0, 3))))


def test_out_of_family_object_is_prior_mismatch(mug_decoder):
    pc = sample_surface(ShapeSpec.box(0.4, 0.4, 0.4), 2000, 1)
    with pytest.raises(PriorMismatchError, match="prior mismatch"):
        infer_latent(mug_decoder, pc)


def test_heavily_degraded_mug_is_completed(mug_decoder):
    spec = ShapeSpec.mug()
    truth = sample_surface(spec, 20_000, 0, skip_base=True).points
    full = sample_surface(spec, 4000, 1, skip_base=True)
    cfg = DegradeConfig(dropout_fraction=0.6, patch_centers=((-spec.radius, 0.0, spec.height / 2),),
                        patch_radius=0.05, seed=2)
    partial = degrade_cloud(full, cfg)
    z = infer_latent(mug_decoder, partial, InferConfig())
    _, mesh = reconstruct_surface(mug_decoder, z)
    done = mesh.sample(20_000, 3).points
    done = done[done[:, 2] > 0.001]
    c_done, c_part = chamfer(done, truth), chamfer(partial.points, truth)
    print(f"chamfer partial {c_part * 1e3:.2f} mm, completed {c_done * 1e3:.2f} mm")
    assert c_done <= 0.5 * c_part
