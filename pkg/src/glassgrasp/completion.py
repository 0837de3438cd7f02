"""Shape-prior auto-decoder: per-kind latent-conditioned SDF decoders.

Training jointly optimizes decoder weights and one latent code per training
shape.  Completion freezes the weights, fits a latent code to a normalized
partial cloud whose points are all labeled SDF = 0, and extracts the zero
level set of the decoded field.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from importlib import resources
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.interpolate import RegularGridInterpolator
from skimage import measure

from .core import (CYLINDRICAL_CUP, MUG, PRISMATIC_CUP, GeometryError, PointCloud, ShapeSpec,
                   sample_surface, sdf_eval)
from .pose import H_STD

CHECKPOINT_VERSION = 1
COORD_SCALE = 0.1   # meters per network input unit


class PriorMismatchError(GeometryError):
    """The partial cloud cannot be explained by the decoder's shape family."""


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 64
    hidden: tuple = (256, 256, 256, 256)
    epochs: int = 100
    steps_per_epoch: int = 25
    shapes_per_batch: int = 12
    points_per_shape: int = 512
    lr_net: float = 1e-3
    lr_latent: float = 2e-3
    lr_decay: float = 0.1          # total decay factor over the run
    clamp: float = 0.02
    latent_reg: float = 1e-4
    latent_init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")
        if self.latent_reg < 0:
            raise ValueError("latent_reg must be nonnegative")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class InferConfig:
    iterations: int = 300
    lr: float = 5e-3
    clamp: float = 0.02
    latent_reg: float = 1e-4
    max_points: int = 2000
    fit_tolerance: float = 0.008
    seed: int = 0


@dataclass(frozen=True)
class LatentCode:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).ravel()
        if not np.all(np.isfinite(z)):
            raise ValueError("latent code must be finite")
        object.__setattr__(self, "z", z)


# ---------------------------------------------------------------------------
# Prior dataset
# ---------------------------------------------------------------------------

def _jitter(rng, value, frac=0.2):
    return value * rng.uniform(1 - frac, 1 + frac)


def random_shape(kind: str, rng: np.random.Generator, h_std: Optional[float] = None) -> ShapeSpec:
    """One jittered member of a kind's family, scaled to the canonical height."""
    h_std = H_STD[kind] if h_std is None else h_std
    if kind == MUG:
        while True:
            radius = _jitter(rng, 0.04)
            height = _jitter(rng, 0.095)
            tube = _jitter(rng, 0.005)
            attach = rng.uniform(0.0005, 0.0015)
            wall = max(_jitter(rng, 0.006), tube + attach + 1e-4)
            hr = _jitter(rng, 0.025)
            hz = height * rng.uniform(0.42, 0.58)
            try:
                spec = ShapeSpec.mug(radius, height, wall, _jitter(rng, 0.008), hr, tube, hz,
                                     attach)
                break
            except ValueError:
                continue
    elif kind == CYLINDRICAL_CUP:
        spec = ShapeSpec.cylindrical_cup(_jitter(rng, 0.04), _jitter(rng, 0.10),
                                         _jitter(rng, 0.005), _jitter(rng, 0.008))
    elif kind == PRISMATIC_CUP:
        spec = ShapeSpec.prismatic_cup(_jitter(rng, 0.042), _jitter(rng, 0.10),
                                       _jitter(rng, 0.005), _jitter(rng, 0.008),
                                       sides=int(rng.choice([4, 6, 8])))
    else:
        raise ValueError(f"no shape family for kind {kind!r}")
    return spec.scaled(h_std / spec.height)


def shape_family(kind: str, count: int, seed: int) -> list[ShapeSpec]:
    rng = np.random.default_rng(seed)
    return [random_shape(kind, rng) for _ in range(count)]


def family_bounds(kind: str, margin: float = 0.012) -> tuple[np.ndarray, np.ndarray]:
    """Canonical-frame box enclosing the kind's family (2000 fixed draws) plus a margin."""
    rng = np.random.default_rng(12345)
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for _ in range(2000):
        blo, bhi = random_shape(kind, rng).bounding_box()
        lo, hi = np.minimum(lo, blo), np.maximum(hi, bhi)
    return lo - margin, hi + margin


def build_prior_dataset(family: Sequence[ShapeSpec], samples_per_shape: int, seed: int,
                        near_fraction: float = 0.9, near_sigmas=(0.001, 0.005, 0.01),
                        bounds: Optional[tuple] = None):
    """Exact-SDF training samples per shape: near-surface jitter plus uniform box points."""
    out = []
    seq = np.random.SeedSequence(seed).spawn(len(family))
    for sid, (spec, ss) in enumerate(zip(family, seq)):
        rng = np.random.default_rng(ss)
        n_near = int(round(near_fraction * samples_per_shape))
        n_box = samples_per_shape - n_near
        surf = sample_surface(spec, n_near, int(rng.integers(2 ** 63)))
        sig = np.asarray(near_sigmas)[rng.integers(len(near_sigmas), size=n_near)]
        near = surf.points + rng.normal(size=(n_near, 3)) * sig[:, None]
        lo, hi = bounds if bounds is not None else family_bounds(spec.kind)
        box = rng.uniform(lo, hi, size=(n_box, 3))
        pts = np.concatenate([near, box])
        out.append((sid, pts, sdf_eval(spec, pts)))
    return out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class _Net(torch.nn.Module):
    def __init__(self, latent_dim: int, hidden: Sequence[int]):
        super().__init__()
        dims = [latent_dim + 3, *hidden, 1]
        self.layers = torch.nn.ModuleList(torch.nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, z, x):
        h = torch.cat([z, x / COORD_SCALE], dim=-1)
        for layer in self.layers[:-1]:
            h = torch.nn.functional.softplus(layer(h), beta=50.0)
        return self.layers[-1](h)[..., 0] * COORD_SCALE


@dataclass(eq=False)
class SdfDecoder:
    kind: str
    latent_dim: int
    hidden: tuple
    weights: list                      # alternating (W, b) float64 arrays
    latents: np.ndarray                # (n_shapes, latent_dim)
    bounds: tuple
    meta: dict = field(default_factory=dict)

    def module(self, dtype=torch.float64) -> _Net:
        net = _Net(self.latent_dim, self.hidden).to(dtype)
        with torch.no_grad():
            for k, layer in enumerate(net.layers):
                layer.weight.copy_(torch.as_tensor(self.weights[2 * k]))
                layer.bias.copy_(torch.as_tensor(self.weights[2 * k + 1]))
        net.requires_grad_(False)
        return net

    def sdf(self, z, points, chunk: int = 65536) -> np.ndarray:
        """Decoded SDF (meters) at ``points`` for latent ``z``."""
        net = self.module(torch.float32)
        zt = torch.as_tensor(np.asarray(getattr(z, "z", z)), dtype=torch.float32)
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        with torch.no_grad():
            for s in range(0, len(pts), chunk):
                x = torch.as_tensor(pts[s:s + chunk], dtype=torch.float32)
                out[s:s + chunk] = net(zt.expand(len(x), -1), x).double().numpy()
        return out

    @property
    def latent_bound(self) -> float:
        return 10.0 * float(np.max(np.linalg.norm(self.latents, axis=1)))

    def save(self, path) -> None:
        arrays = {f"w{k}": w for k, w in enumerate(self.weights)}
        meta = dict(self.meta, version=CHECKPOINT_VERSION, kind=self.kind,
                    latent_dim=self.latent_dim, hidden=list(self.hidden),
                    bounds=[list(map(float, b)) for b in self.bounds])
        np.savez(path, latents=self.latents, meta=np.array(json.dumps(meta, sort_keys=True)),
                 **arrays)

    @classmethod
    def load(cls, path) -> "SdfDecoder":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported decoder checkpoint version")
            n = 2 * (len(meta["hidden"]) + 1)
            weights = [data[f"w{k}"] for k in range(n)]
            latents = data["latents"]
        bounds = tuple(np.array(b) for b in meta["bounds"])
        extra = {k: v for k, v in meta.items()
                 if k not in ("version", "kind", "latent_dim", "hidden", "bounds")}
        return cls(meta["kind"], meta["latent_dim"], tuple(meta["hidden"]), weights, latents,
                   bounds, extra)


def _clamped_l1(pred, target, clamp):
    return torch.abs(torch.clamp(pred, -clamp, clamp) - torch.clamp(target, -clamp, clamp))


def training_loss(net: _Net, latents: torch.Tensor, shape_ids, points, sdf, cfg: TrainConfig):
    """Clamped L1 SDF loss plus ``latent_reg * |z|^2`` averaged over the batch shapes."""
    z = latents[shape_ids]
    data = _clamped_l1(net(z, points), sdf, cfg.clamp).mean()
    uniq = torch.unique(shape_ids)
    reg = (latents[uniq] ** 2).sum(dim=1).mean()
    return data + cfg.latent_reg * reg


def train_autodecoder(dataset, cfg: TrainConfig = TrainConfig(), kind: Optional[str] = None,
                      bounds: Optional[tuple] = None, log=None) -> SdfDecoder:
    """Jointly fit decoder weights and per-shape latents (Adam, float32, one thread)."""
    if len(dataset) < 2:
        raise ValueError("train_autodecoder needs at least two training shapes")
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = _Net(cfg.latent_dim, cfg.hidden)
    n_shapes = len(dataset)
    latents = torch.nn.Parameter(torch.randn(n_shapes, cfg.latent_dim, generator=gen)
                                 * cfg.latent_init_std)
    pts = torch.as_tensor(np.stack([d[1] for d in dataset]), dtype=torch.float32)
    sdf = torch.as_tensor(np.stack([d[2] for d in dataset]), dtype=torch.float32)
    n_samples = pts.shape[1]
    opt = torch.optim.Adam([{"params": net.parameters(), "lr": cfg.lr_net},
                            {"params": [latents], "lr": cfg.lr_latent}])
    total = cfg.epochs * cfg.steps_per_epoch
    gamma = cfg.lr_decay ** (1.0 / max(total, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
    history = []
    spb = min(cfg.shapes_per_batch, n_shapes)
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(cfg.steps_per_epoch):
            sid = torch.randperm(n_shapes, generator=gen)[:spb]
            col = torch.randint(n_samples, (spb, cfg.points_per_shape), generator=gen)
            p = pts[sid[:, None], col].reshape(-1, 3)
            s = sdf[sid[:, None], col].reshape(-1)
            ids = sid.repeat_interleave(cfg.points_per_shape)
            loss = training_loss(net, latents, ids, p, s, cfg)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            acc += loss.item()
        history.append(acc / cfg.steps_per_epoch)
        if log is not None:
            log(f"epoch {epoch:4d}  loss {history[-1]:.6f}")
    weights = []
    for layer in net.layers:
        weights += [layer.weight.detach().double().numpy().copy(),
                    layer.bias.detach().double().numpy().copy()]
    kind = kind or "unknown"
    bounds = bounds if bounds is not None else (family_bounds(kind) if kind in H_STD
                                                else (np.full(3, -0.1), np.full(3, 0.1)))
    return SdfDecoder(kind, cfg.latent_dim, tuple(cfg.hidden), weights,
                      latents.detach().double().numpy().copy(), tuple(bounds),
                      {"train_config": asdict(cfg), "config_hash": cfg.digest(),
                       "loss_history": history, "train_seconds": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# Inference and reconstruction
# ---------------------------------------------------------------------------

def infer_latent(decoder: SdfDecoder, partial: PointCloud, cfg: InferConfig = InferConfig(),
                 return_residual: bool = False):
    """Fit a latent code to canonical-frame points labeled SDF = 0 (weights frozen)."""
    pts = partial.points
    if len(pts) == 0:
        raise GeometryError("cannot infer a latent code from an empty cloud")
    if len(pts) > cfg.max_points:
        rng = np.random.default_rng(cfg.seed)
        pts = pts[np.sort(rng.choice(len(pts), cfg.max_points, replace=False))]
    net = decoder.module(torch.float32)
    x = torch.as_tensor(pts, dtype=torch.float32)
    z = torch.zeros(decoder.latent_dim, requires_grad=True)
    opt = torch.optim.Adam([z], lr=cfg.lr)
    for _ in range(cfg.iterations):
        pred = net(z.expand(len(x), -1), x)
        loss = torch.clamp(pred, -cfg.clamp, cfg.clamp).abs().mean() + cfg.latent_reg * (z ** 2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        bound = decoder.latent_bound
        norm = float(z.norm())
        if norm > bound:
            z *= bound / norm
        residual = float(net(z.expand(len(x), -1), x).abs().mean())
    if residual > cfg.fit_tolerance:
        raise PriorMismatchError(
            f"prior mismatch: mean |sdf| {residual * 1e3:.2f} mm exceeds "
            f"{cfg.fit_tolerance * 1e3:.2f} mm")
    code = LatentCode(z.detach().double().numpy())
    return (code, residual) if return_residual else code


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray

    def euler_characteristic(self) -> int:
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                        self.faces[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.faces)

    def is_closed(self) -> bool:
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                        self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def sample(self, n: int, seed: int) -> PointCloud:
        """Area-uniform surface samples with face normals."""
        v, f = self.vertices, self.faces
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        cross = np.cross(b - a, c - a)
        area = np.linalg.norm(cross, axis=1)
        keep = area > 0
        rng = np.random.default_rng(seed)
        k = rng.choice(np.flatnonzero(keep), size=n, p=area[keep] / area[keep].sum())
        u, w = rng.uniform(size=n), rng.uniform(size=n)
        flip = u + w > 1
        u, w = np.where(flip, 1 - u, u), np.where(flip, 1 - w, w)
        pts = a[k] + u[:, None] * (b[k] - a[k]) + w[:, None] * (c[k] - a[k])
        return PointCloud(pts, cross[k] / area[k][:, None])

    @property
    def area(self) -> float:
        v, f = self.vertices, self.faces
        return 0.5 * float(np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]],
                                                   v[f[:, 2]] - v[f[:, 0]]), axis=1).sum())


def _decoded_grid(decoder: SdfDecoder, z, axes, coarse: int) -> np.ndarray:
    """Decoded SDF on the grid spanned by ``axes``.

    A grid ``coarse`` times sparser is decoded first and trilinearly
    upsampled; only fine nodes whose upsampled value lies within two coarse
    cells of zero are decoded exactly.  Far nodes keep the upsampled value,
    which has the right sign and never feeds the isosurface.
    """
    shape = tuple(len(a) for a in axes)
    if coarse <= 1:
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return decoder.sdf(z, grid).reshape(shape)
    sub = [a[::coarse] if (len(a) - 1) % coarse == 0 else np.r_[a[::coarse], a[-1]] for a in axes]
    cgrid = np.stack(np.meshgrid(*sub, indexing="ij"), axis=-1).reshape(-1, 3)
    cvals = decoder.sdf(z, cgrid).reshape(tuple(len(a) for a in sub))
    interp = RegularGridInterpolator(sub, cvals)
    fine = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = interp(fine)
    step = max(float(np.max(np.diff(a))) for a in sub)
    near = np.abs(vals) < 2.0 * math.sqrt(3.0) * step
    vals[near] = decoder.sdf(z, fine[near])
    return vals.reshape(shape)


def reconstruct_surface(decoder: SdfDecoder, z, grid_res: int = 96, coarse: int = 4
                        ) -> tuple[PointCloud, Mesh]:
    """Zero level set of the decoded SDF on a regular grid over the decoder's bounds."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in decoder.bounds)
    axes = [np.linspace(lo[k], hi[k], grid_res) for k in range(3)]
    vals = _decoded_grid(decoder, z, axes, coarse)
    if not (vals.min() < 0 < vals.max()):
        raise GeometryError("degenerate latent: decoded SDF has no zero crossing")
    spacing = tuple((hi - lo) / (grid_res - 1))
    verts, faces, _, _ = measure.marching_cubes(vals, 0.0, spacing=spacing)
    verts = verts + lo
    # orient faces outward (toward increasing SDF) and take normals from the decoder gradient
    net = decoder.module(torch.float64)
    zt = torch.as_tensor(np.asarray(getattr(z, "z", z)), dtype=torch.float64)
    x = torch.as_tensor(verts, dtype=torch.float64).requires_grad_(True)
    net(zt.expand(len(x), -1), x).sum().backward()
    grad = x.grad.numpy()
    normals = grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)
    f = faces.astype(np.int64)
    fn = np.cross(verts[f[:, 1]] - verts[f[:, 0]], verts[f[:, 2]] - verts[f[:, 0]])
    if np.sum(fn * normals[f].mean(axis=1)) < 0:
        f = f[:, [0, 2, 1]]
    mesh = Mesh(verts, f, normals)
    return PointCloud(verts, normals), mesh


def shape_kind_decoders(paths: dict) -> dict:
    return {kind: SdfDecoder.load(p) for kind, p in paths.items()}


PRIOR_KINDS = (MUG, CYLINDRICAL_CUP, PRISMATIC_CUP)


def train_prior(kind: str, cfg: TrainConfig = TrainConfig(), shapes: int = 60,
                samples_per_shape: int = 20000, seed: int = 0, log=None) -> SdfDecoder:
    """Sample a kind's family, build its SDF dataset and train a decoder on it."""
    family = shape_family(kind, shapes, seed)
    bounds = family_bounds(kind)
    t0 = time.perf_counter()
    data = build_prior_dataset(family, samples_per_shape, seed + 1, bounds=bounds)
    dec = train_autodecoder(data, cfg, kind=kind, bounds=bounds, log=log)
    dec.meta.update(family_size=shapes, samples_per_shape=samples_per_shape, family_seed=seed,
                    dataset_seconds=time.perf_counter() - t0 - dec.meta["train_seconds"])
    return dec


def default_decoder_path(kind: str):
    return resources.files("glassgrasp") / "data" / f"prior_{kind}.npz"


def load_default_decoder(kind: str) -> SdfDecoder:
    """Decoder shipped with the package for ``kind``."""
    path = default_decoder_path(kind)
    if not path.is_file():
        raise FileNotFoundError(f"no packaged decoder for kind {kind!r}")
    with resources.as_file(path) as p:
        return SdfDecoder.load(p)
