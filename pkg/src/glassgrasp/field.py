"""Hash-encoded density field, volume rendering and density-band extraction.

Evaluation is plain numpy.  Fitting runs the same arithmetic through torch:
hash indices and trilinear weights depend only on sample positions, so they
are computed in numpy and torch only sees the table gathers and the decoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from scipy import ndimage

from .core import PointCloud, sdf_eval
from .scenegen import SceneDescription, placement

PRIMES = (1, 2654435761, 805459861)
CHECKPOINT_VERSION = 1
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


class FieldError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Encoding and field
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class HashEncoding:
    tables: np.ndarray          # (L, T, F)
    resolutions: np.ndarray     # (L,) grid cells per axis
    level_weights: np.ndarray   # (L,) or (L, F)
    bbox: tuple                 # (lo, hi)

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float64)
        self.resolutions = np.asarray(self.resolutions, dtype=np.int64)
        self.level_weights = np.asarray(self.level_weights, dtype=np.float64)
        self.bbox = tuple(np.asarray(b, dtype=np.float64) for b in self.bbox)
        L, T, _ = self.tables.shape
        if L < 1 or len(self.resolutions) != L:
            raise FieldError("need one resolution per level and at least one level")
        if T & (T - 1):
            raise FieldError("table size must be a power of two")
        if np.any(np.diff(self.resolutions) <= 0):
            raise FieldError("level resolutions must be strictly increasing")
        if not (np.all(np.isfinite(self.tables)) and np.all(np.isfinite(self.level_weights))):
            raise FieldError("encoding parameters must be finite")
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise FieldError("degenerate bounding box")

    @classmethod
    def create(cls, bbox, levels: int = 8, features: int = 2, log2_table: int = 14,
               min_res: int = 8, max_res: int = 128, init_scale: float = 1e-4,
               seed: int = 0) -> "HashEncoding":
        if levels == 1:
            res = np.array([min_res])
        else:
            growth = (max_res / min_res) ** (1.0 / (levels - 1))
            res = np.floor(min_res * growth ** np.arange(levels) + 1e-9).astype(np.int64)
        rng = np.random.default_rng(seed)
        tables = rng.uniform(-init_scale, init_scale, (levels, 2 ** log2_table, features))
        return cls(tables, res, np.ones(levels), bbox)

    @property
    def levels(self) -> int:
        return self.tables.shape[0]

    @property
    def table_size(self) -> int:
        return self.tables.shape[1]

    @property
    def features(self) -> int:
        return self.tables.shape[2]

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lo, hi = self.bbox
        return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)

    def lookup(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hashed corner rows (n, L, 8) and trilinear weights (n, L, 8) for points (n, 3)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if not np.all(self.contains(x)):
            raise FieldError("point outside the encoding bounding box")
        lo, hi = self.bbox
        u = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        n = len(x)
        idx = np.empty((n, self.levels, 8), dtype=np.int64)
        wts = np.empty((n, self.levels, 8))
        mask = self.table_size - 1
        primes = np.array(PRIMES, dtype=np.int64)
        for level, res in enumerate(self.resolutions):
            pos = u * res
            base = np.minimum(np.floor(pos), res - 1).astype(np.int64)
            frac = pos - base
            # per-axis hashed terms and weights for offsets 0 and 1; coordinates stay
            # below 2**8 so the products cannot overflow int64
            hx, hy, hz = ((base[:, k, None] + np.array([0, 1])) * primes[k] for k in range(3))
            wx, wy, wz = (np.stack([1.0 - frac[:, k], frac[:, k]], axis=1) for k in range(3))
            h = hx[:, :, None, None] ^ hy[:, None, :, None] ^ hz[:, None, None, :]
            idx[:, level] = (h & mask).reshape(n, 8)
            wts[:, level] = (wx[:, :, None, None] * wy[:, None, :, None]
                             * wz[:, None, None, :]).reshape(n, 8)
        return idx, wts


def hash_encode(enc: HashEncoding, x) -> np.ndarray:
    """Concatenated per-level features, shape (..., L*F)."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape[:-1]
    idx, w = enc.lookup(x)
    level = np.arange(enc.levels)[None, :, None]
    rows = enc.tables[level, idx]                         # (n, L, 8, F)
    feats = np.einsum("nlc,nlcf->nlf", w, rows)
    lw = enc.level_weights
    feats = feats * (lw[None, :, None] if lw.ndim == 1 else lw[None])
    return feats.reshape(*shape, enc.out_dim)


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(eq=False)
class DensityField:
    encoding: HashEncoding
    w1: np.ndarray       # (L*F, H)
    b1: np.ndarray       # (H,)
    w2: np.ndarray       # (H,)
    b2: float
    sigma_scale: float = 100.0

    @classmethod
    def create(cls, bbox, hidden: int = 32, sigma_scale: float = 100.0, seed: int = 0,
               init_bias: float = -6.0, **encoding_kw) -> "DensityField":
        enc = HashEncoding.create(bbox, seed=seed, **encoding_kw)
        rng = np.random.default_rng([seed, 1])
        d = enc.out_dim
        w1 = rng.normal(0.0, 1.0 / math.sqrt(d), (d, hidden))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden)
        # start nearly empty: softplus(-6) * 100 is about 0.25 per meter
        return cls(enc, w1, np.zeros(hidden), w2, float(init_bias), sigma_scale)

    @property
    def bbox(self):
        return self.encoding.bbox

    def sigma(self, x) -> np.ndarray:
        """Density (1/m) at points; shape (...,)."""
        x = np.asarray(x, dtype=np.float64)
        f = hash_encode(self.encoding, x.reshape(-1, 3))
        h = _softplus(f @ self.w1 + self.b1)
        return (self.sigma_scale * _softplus(h @ self.w2 + self.b2)).reshape(x.shape[:-1])

    __call__ = sigma

    def copy(self) -> "DensityField":
        e = self.encoding
        enc = HashEncoding(e.tables.copy(), e.resolutions.copy(), e.level_weights.copy(), e.bbox)
        return DensityField(enc, self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2),
                            self.sigma_scale)

    def save(self, path) -> None:
        e = self.encoding
        meta = {"version": CHECKPOINT_VERSION, "sigma_scale": self.sigma_scale, "b2": self.b2}
        np.savez(path, tables=e.tables, resolutions=e.resolutions, level_weights=e.level_weights,
                 bbox_lo=e.bbox[0], bbox_hi=e.bbox[1], w1=self.w1, b1=self.b1, w2=self.w2,
                 meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "DensityField":
        with np.load(path, allow_pickle=False) as d:
            meta = json.loads(str(d["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FieldError(f"{path}: unsupported field checkpoint version")
            enc = HashEncoding(d["tables"], d["resolutions"], d["level_weights"],
                               (d["bbox_lo"], d["bbox_hi"]))
            return cls(enc, d["w1"], d["b1"], d["w2"], float(meta["b2"]),
                       float(meta["sigma_scale"]))


# ---------------------------------------------------------------------------
# Rays and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise FieldError("ray direction must be unit length")
        if not self.near < self.far:
            raise FieldError("ray needs near < far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.asarray(t, dtype=np.float64)[..., None] * self.direction


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    def rays(self) -> list[Ray]:
        return [Ray(o, d, float(a), float(b)) for o, d, a, b in
                zip(self.origins, self.directions, self.near, self.far)]

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBatch":
        return cls(np.array([r.origin for r in rays]), np.array([r.direction for r in rays]),
                   np.array([r.near for r in rays]), np.array([r.far for r in rays]))

    def nodes(self, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
        """Midpoint sample positions (n, S, 3) and per-ray step (n,)."""
        dt = (self.far - self.near) / n_samples
        t = self.near[:, None] + (np.arange(n_samples) + 0.5)[None] * dt[:, None]
        return self.origins[:, None] + t[..., None] * self.directions[:, None], dt


@dataclass(frozen=True)
class RenderResult:
    alpha: float
    transmittance_profile: np.ndarray
    expected_depth: float


def render_ray(field: Union[DensityField, Callable], ray: Ray, n_samples: int = 128,
               eps: float = 1e-10) -> RenderResult:
    """Midpoint-rule volume rendering with unit color.

    ``field`` is a DensityField or any callable mapping (n, 3) points to
    densities.  The profile holds T before each node plus the final value.
    """
    if n_samples < 2:
        raise FieldError("n_samples must be >= 2")
    dt = (ray.far - ray.near) / n_samples
    t = ray.near + (np.arange(n_samples) + 0.5) * dt
    sigma = np.asarray(field(ray.at(t)), dtype=np.float64)
    optical = np.concatenate([[0.0], np.cumsum(sigma * dt)])
    trans = np.exp(-optical)
    weights = trans[:-1] * -np.expm1(-sigma * dt)
    alpha = float(-np.expm1(-optical[-1]))
    depth = float(np.sum(weights * t) / max(alpha, eps))
    return RenderResult(alpha, trans, depth)


def clip_to_box(origins, directions, lo, hi):
    """Slab intersection: (near, far, hit) for rays against an axis-aligned box."""
    o, d = np.atleast_2d(origins), np.atleast_2d(directions)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0, t1 = (lo - o) * inv, (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    # rays parallel to a slab and outside it miss
    outside = (d == 0) & ((o < lo) | (o > hi))
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    hit = (far > near + 1e-9) & ~outside.any(axis=1)
    return near, far, hit


def scene_bbox(desc: SceneDescription, pad: float = 0.02, below: float = 0.01):
    """Field box: the desk top area, from just below its surface to above the tallest object."""
    top = 0.0 if desc.desk is None else desc.desk.top
    if desc.desk is not None:
        c, h = np.array(desc.desk.center), np.array(desc.desk.half_extent)
        lo_xy, hi_xy = c - h, c + h
    else:
        lo_xy, hi_xy = np.full(2, np.inf), np.full(2, -np.inf)
    z_hi = top + pad
    for ob in desc.objects:
        r = ob.spec.footprint_radius()
        p = np.array(ob.position)
        lo_xy, hi_xy = np.minimum(lo_xy, p - r - pad), np.maximum(hi_xy, p + r + pad)
        z_hi = max(z_hi, top + ob.spec.top + pad)
    if not np.all(hi_xy > lo_xy):
        raise FieldError("scene has neither desk nor objects; pass an explicit box")
    return np.array([*lo_xy, top - below]), np.array([*hi_xy, z_hi])


def generate_rays(bbox, n: int, seed: int = 0, elevation_deg=(15.0, 75.0),
                  distance: float = 0.6) -> RayBatch:
    """Rays from cameras on an upper hemisphere toward uniform targets in the box."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    rng = np.random.default_rng(seed)
    center = 0.5 * (lo + hi)
    az = rng.uniform(0.0, 2 * math.pi, n)
    el = np.radians(rng.uniform(*elevation_deg, n))
    origins = center + distance * np.column_stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    targets = rng.uniform(lo, hi, (n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near, far, hit = clip_to_box(origins, dirs, lo, hi)
    return RayBatch(origins[hit], dirs[hit], near[hit], far[hit])


# ---------------------------------------------------------------------------
# Analytic supervision
# ---------------------------------------------------------------------------

def _solid_intervals(sdf, rays: RayBatch, t0, t1, step: float, iters: int = 40):
    """Inside intervals of a solid along each ray between t0 and t1 (per ray)."""
    out = [[] for _ in range(len(rays))]
    todo = np.flatnonzero(t1 > t0)
    if todo.size == 0:
        return out
    span = (t1 - t0)[todo]
    m = int(np.ceil(span.max() / step)) + 1
    s = np.linspace(0.0, 1.0, m)
    t = t0[todo, None] + s[None] * span[:, None]
    pts = rays.origins[todo, None] + t[..., None] * rays.directions[todo, None]
    inside = sdf(pts.reshape(-1, 3)).reshape(len(todo), m) < 0
    rr, cc = np.nonzero(inside[:, 1:] != inside[:, :-1])
    a, b = t[rr, cc], t[rr, cc + 1]
    o, d = rays.origins[todo[rr]], rays.directions[todo[rr]]
    ina = inside[rr, cc]
    for _ in range(iters):
        mid = 0.5 * (a + b)
        same = (sdf(o + mid[:, None] * d) < 0) == ina
        a, b = np.where(same, mid, a), np.where(same, b, mid)
    cross = 0.5 * (a + b)
    for k in range(len(todo)):
        sel = rr == k
        ts = list(cross[sel])
        if inside[k, 0]:
            ts.insert(0, t[k, 0])
        if inside[k, -1]:
            ts.append(t[k, -1])
        out[todo[k]] = list(zip(ts[0::2], ts[1::2]))
    return out


def _ray_sphere(rays: RayBatch, c, r):
    oc = rays.origins - c
    b = np.sum(oc * rays.directions, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - root, rays.near)
    t1 = np.minimum(-b + root, rays.far)
    return np.where(disc > 0, t0, 0.0), np.where(disc > 0, t1, 0.0)


def analytic_targets(desc: SceneDescription, rays: RayBatch, step: float = 5e-4,
                     eps: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Exact alpha and expected depth of each ray through the piecewise-constant scene."""
    intervals = [[] for _ in range(len(rays))]
    top = 0.0 if desc.desk is None else desc.desk.top
    if desc.desk is not None:
        d = desc.desk
        c = np.array([d.center[0], d.center[1], d.top - d.thickness / 2])
        h = np.array([d.half_extent[0], d.half_extent[1], d.thickness / 2])
        n0, f0, hit = clip_to_box(rays.origins, rays.directions, c - h, c + h)
        n0, f0 = np.maximum(n0, rays.near), np.minimum(f0, rays.far)
        for k in np.flatnonzero(hit & (f0 > n0)):
            intervals[k].append((n0[k], f0[k], d.opacity))
    for ob in desc.objects:
        R, t = placement(ob, top)
        blo, bhi = ob.spec.bounding_box()
        c = R @ (0.5 * (blo + bhi)) + t
        r = 0.5 * float(np.linalg.norm(bhi - blo)) + 1e-3

        def sdf(p, spec=ob.spec, R=R, t=t):
            return sdf_eval(spec, (p - t) @ R)

        t0, t1 = _ray_sphere(rays, c, r)
        for k, ivs in enumerate(_solid_intervals(sdf, rays, t0, t1, step)):
            intervals[k].extend((a, b, ob.opacity) for a, b in ivs)
    alpha = np.empty(len(rays))
    depth = np.empty(len(rays))
    for k, ivs in enumerate(intervals):
        T, acc = 1.0, 0.0
        for a, b, s in sorted(ivs):
            e = math.exp(-s * (b - a))
            acc += T * ((a + 1.0 / s) - e * (b + 1.0 / s))
            T *= e
        alpha[k] = 1.0 - T
        depth[k] = acc / max(alpha[k], eps) if alpha[k] > 0 else 0.0
    return alpha, depth


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    iterations: int = 1000
    batch_rays: int = 256
    n_samples: int = 96
    optimizer: str = "sgd"        # hash tables: "sgd" (momentum) or "adam"
    mlp_optimizer: str = "adam"   # MLP weights; adam keeps moving where softplus saturates
    lr: float = 0.01
    lr_table_factor: float = 3000.0   # table entries see tiny, sparse gradients
    momentum: float = 0.9
    depth_weight: float = 1.0
    n_rays: int = 20000
    hidden: int = 32
    sigma_scale: float = 100.0
    init_bias: float = -6.0
    levels: int = 8
    features: int = 2
    log2_table: int = 14
    min_res: int = 8
    max_res: int = 128
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam") or self.mlp_optimizer not in ("sgd", "adam"):
            raise ValueError("optimizers must be 'sgd' or 'adam'")
        if self.n_samples < 2 or self.batch_rays < 1 or self.iterations < 0:
            raise ValueError("invalid fit sizes")


class _TorchField(torch.nn.Module):
    def __init__(self, f: DensityField, dtype):
        super().__init__()
        e = f.encoding
        self.tables = torch.nn.Parameter(torch.as_tensor(e.tables, dtype=dtype).clone())
        self.w1 = torch.nn.Parameter(torch.as_tensor(f.w1, dtype=dtype).clone())
        self.b1 = torch.nn.Parameter(torch.as_tensor(f.b1, dtype=dtype).clone())
        self.w2 = torch.nn.Parameter(torch.as_tensor(f.w2, dtype=dtype).clone())
        self.b2 = torch.nn.Parameter(torch.tensor(float(f.b2), dtype=dtype))
        lw = torch.as_tensor(e.level_weights, dtype=dtype)
        self.register_buffer("lw", lw[:, None] if lw.ndim == 1 else lw)
        self.scale = f.sigma_scale

    def forward(self, idx, w):
        L, T, F = self.tables.shape
        flat = (idx + T * torch.arange(L)[None, :, None]).reshape(-1)
        rows = self.tables.reshape(L * T, F).index_select(0, flat).reshape(*idx.shape, F)
        feats = (w[..., None] * rows).sum(dim=2) * self.lw   # (n, L, F)
        h = torch.nn.functional.softplus(feats.reshape(len(idx), -1) @ self.w1 + self.b1)
        return self.scale * torch.nn.functional.softplus(h @ self.w2 + self.b2)

    def export(self, template: DensityField) -> DensityField:
        e = template.encoding
        enc = HashEncoding(self.tables.detach().double().numpy().copy(), e.resolutions,
                           e.level_weights, e.bbox)
        return DensityField(enc, self.w1.detach().double().numpy().copy(),
                            self.b1.detach().double().numpy().copy(),
                            self.w2.detach().double().numpy().copy(),
                            float(self.b2.detach()), template.sigma_scale)


def _render_batch(model: _TorchField, enc: HashEncoding, rays: RayBatch, n_samples: int, dtype):
    pts, dt = rays.nodes(n_samples)
    idx, w = enc.lookup(pts.reshape(-1, 3))
    sigma = model(torch.as_tensor(idx), torch.as_tensor(w, dtype=dtype)).reshape(len(rays), -1)
    dt_t = torch.as_tensor(dt, dtype=dtype)[:, None]
    tau = sigma * dt_t
    optical = torch.cumsum(tau, dim=1)
    trans_before = torch.exp(-(optical - tau))
    weights = trans_before * -torch.expm1(-tau)
    alpha = -torch.expm1(-optical[:, -1])
    t = torch.as_tensor((np.arange(n_samples) + 0.5) * dt[:, None], dtype=dtype)
    return alpha, (weights * t).sum(dim=1)


def ray_loss(model: _TorchField, enc: HashEncoding, rays: RayBatch, alpha_gt, depth_gt,
             cfg: FitConfig, dtype):
    """Alpha MSE plus alpha-weighted depth MSE.

    Depth is measured from the ray's entry into the box, in box-diagonal units.
    Rendered depth enters as alpha * depth so empty rays carry no depth signal.
    """
    alpha, adepth = _render_batch(model, enc, rays, cfg.n_samples, dtype)
    a_gt = torch.as_tensor(alpha_gt, dtype=dtype)
    scale = float(np.linalg.norm(enc.bbox[1] - enc.bbox[0]))
    ad_gt = a_gt * torch.as_tensor(depth_gt, dtype=dtype)
    return ((alpha - a_gt) ** 2).mean() + cfg.depth_weight * (((adepth - ad_gt) / scale) ** 2).mean()


@dataclass
class FitResult:
    field: DensityField
    loss_history: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def _set_threads(n):
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    return old


def fit_field(scene: SceneDescription, rays: Optional[Union[RayBatch, Sequence[Ray]]] = None,
              cfg: FitConfig = FitConfig(), init: Optional[DensityField] = None,
              log=None, bbox=None) -> FitResult:
    """Fit a density field to analytic ray opacity and depth.

    Runs single-threaded so the result is bit-stable.  The loss reported as
    initial/final is the full-ray-set loss before and after optimization.
    ``bbox`` defaults to :func:`scene_bbox` (or the box of ``init``).
    """
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    if bbox is None:
        bbox = init.bbox if init is not None else scene_bbox(scene)
    if rays is None:
        rays = generate_rays(bbox, cfg.n_rays, cfg.seed)
    elif not isinstance(rays, RayBatch):
        rays = RayBatch.from_rays(list(rays))
    if len(rays) == 0:
        raise FieldError("no rays intersect the field box")
    if init is None:
        init = DensityField.create(bbox, cfg.hidden, cfg.sigma_scale, cfg.seed, cfg.init_bias,
                                   levels=cfg.levels,
                                   features=cfg.features, log2_table=cfg.log2_table,
                                   min_res=cfg.min_res, max_res=cfg.max_res)
    enc = init.encoding
    near, far, hit = clip_to_box(rays.origins, rays.directions, *enc.bbox)
    if not hit.all():
        raise FieldError("every ray must intersect the field box")
    rays = RayBatch(rays.origins, rays.directions, np.maximum(rays.near, near),
                    np.minimum(rays.far, far))
    alpha_gt, depth_gt = analytic_targets(scene, rays)
    depth_gt = np.where(alpha_gt > 0, depth_gt - rays.near, 0.0)
    old = _set_threads(1)
    try:
        model = _TorchField(init, dtype)
        def make(kind, params, lr):
            if kind == "sgd":
                return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)
            return torch.optim.Adam(params, lr=lr)

        opts = [make(cfg.optimizer, [model.tables], cfg.lr * cfg.lr_table_factor),
                make(cfg.mlp_optimizer, [model.w1, model.b1, model.w2, model.b2], cfg.lr)]
        rng = np.random.default_rng([cfg.seed, 2])

        def full_loss():
            with torch.no_grad():
                total = 0.0
                for s in range(0, len(rays), 4096):
                    sl = slice(s, s + 4096)
                    part = ray_loss(model, enc, rays.subset(sl), alpha_gt[sl], depth_gt[sl], cfg,
                                    dtype)
                    total += float(part) * len(alpha_gt[sl])
                return total / len(rays)

        initial = full_loss()
        history = []
        for it in range(cfg.iterations):
            sel = np.sort(rng.choice(len(rays), min(cfg.batch_rays, len(rays)), replace=False))
            loss = ray_loss(model, enc, rays.subset(sel), alpha_gt[sel], depth_gt[sel], cfg, dtype)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"field fit diverged at iteration {it}: loss={float(loss)}")
            for opt in opts:
                opt.zero_grad()
            loss.backward()
            for opt in opts:
                opt.step()
            history.append(loss.item())
            if log is not None and it % 100 == 0:
                log(f"iter {it:5d}  loss {history[-1]:.6f}")
        final = full_loss()
        out = model.export(init)
    finally:
        torch.set_num_threads(old)
    return FitResult(out, history, initial, final)


def loss_and_table_grad(f: DensityField, rays: RayBatch, alpha_gt, depth_gt,
                        cfg: FitConfig = FitConfig(dtype="float64")):
    """Loss and its gradient w.r.t. the hash tables, in float64."""
    model = _TorchField(f, torch.float64)
    loss = ray_loss(model, f.encoding, rays, alpha_gt, depth_gt, cfg, torch.float64)
    loss.backward()
    return loss.item(), model.tables.grad.numpy().copy()


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Extraction:
    transparent: PointCloud
    opaque: PointCloud
    cell: np.ndarray          # grid spacing per axis
    skin_dropped: int = 0

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.cell))


def sigma_grid(f: DensityField, grid_res: int, bbox=None, chunk: int = 65536):
    lo, hi = f.bbox if bbox is None else tuple(np.asarray(b, dtype=np.float64) for b in bbox)
    res = np.broadcast_to(np.asarray(grid_res), (3,))
    cell = (hi - lo) / res
    axes = [lo[k] + (np.arange(res[k]) + 0.5) * cell[k] for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sig = np.concatenate([f.sigma(pts[s:s + chunk]) for s in range(0, len(pts), chunk)])
    return pts, sig.reshape(tuple(res)), cell


def extract_points(f: DensityField, band: tuple, grid_res: int = 64, bbox=None,
                   opaque_skin: float = 0.006, opaque_surface: bool = True) -> Extraction:
    """Grid cells with density inside ``band`` (transparent) and above it (opaque).

    Band cells within ``opaque_skin`` meters (rounded up to whole cells of the
    finest axis) of an opaque cell are dropped: a fitted field ramps up to
    opaque material over a few cells, and that ramp is not a transparent
    surface.  With ``opaque_surface`` only opaque cells that border a
    non-opaque cell are returned.
    """
    lo_s, hi_s = band
    if not 0 <= lo_s < hi_s:
        raise FieldError("band needs 0 <= sigma_lo < sigma_hi")
    pts, sig, cell = sigma_grid(f, grid_res, bbox)
    opaque = sig >= hi_s
    inband = (sig > lo_s) & (sig < hi_s)
    dropped = 0
    if opaque_skin > 0 and opaque.any():
        steps = int(math.ceil(opaque_skin / float(cell.min()) - 1e-9))
        near = ndimage.binary_dilation(opaque, np.ones((3, 3, 3), bool), iterations=steps)
        dropped = int(np.count_nonzero(inband & near))
        inband &= ~near
    shown = opaque
    if opaque_surface and opaque.any():
        shown = opaque & ~ndimage.binary_erosion(opaque, np.ones((3, 3, 3), bool),
                                                 border_value=1)
    flat = pts.reshape(-1, 3)
    return Extraction(PointCloud(flat[inband.ravel()]), PointCloud(flat[shown.ravel()]), cell,
                      dropped)


def fit_config_dict(cfg: FitConfig) -> dict:
    return asdict(cfg)
