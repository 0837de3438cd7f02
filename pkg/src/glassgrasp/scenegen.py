"""Procedural tabletop scenes and a point-cloud degradation simulator.

The desk top is the plane ``z = desk.top`` with normal ``+z``; objects stand
on it at a 2D position with a yaw about ``+z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (BOX, MUG, Plane, PointCloud, ShapeSpec, rotation_z, sample_surface,
                   sdf_eval, surface_area)

SCENE_SCHEMA = "glassgrasp.scene"
SCENE_VERSION = 1

TRANSPARENT_OPACITY = 80.0   # 1/m, shells of glassware
OPAQUE_OPACITY = 200.0       # 1/m, desk and distractors


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Desk:
    half_extent: tuple = (0.30, 0.25)
    center: tuple = (0.0, 0.0)
    top: float = 0.0
    thickness: float = 0.02
    opacity: float = OPAQUE_OPACITY

    @property
    def plane(self) -> Plane:
        return Plane((0.0, 0.0, 1.0), self.top)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        c = np.array([self.center[0], self.center[1], self.top - self.thickness / 2])
        h = np.array([self.half_extent[0], self.half_extent[1], self.thickness / 2])
        q = np.abs(p - c) - h
        out = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return out + np.minimum(q.max(axis=-1), 0.0)


@dataclass(frozen=True)
class SceneObject:
    spec: ShapeSpec
    position: tuple
    yaw: float = 0.0
    opacity: float = TRANSPARENT_OPACITY
    transparent: bool = True
    name: str = ""


@dataclass(frozen=True)
class SceneDescription:
    objects: tuple
    desk: Optional[Desk] = Desk()
    seed: int = 0
    clearance: float = 0.03
    point_density: float = 250_000.0      # object surface samples per m^2
    desk_point_density: float = 60_000.0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        self.validate()

    def validate(self):
        for i, ob in enumerate(self.objects):
            r = ob.spec.footprint_radius()
            if self.desk is not None:
                dx = abs(ob.position[0] - self.desk.center[0])
                dy = abs(ob.position[1] - self.desk.center[1])
                if dx + r > self.desk.half_extent[0] or dy + r > self.desk.half_extent[1]:
                    raise SceneError(f"objects[{i}] footprint leaves the desk")
            if ob.opacity <= 0:
                raise SceneError(f"objects[{i}].opacity must be positive")
            for j in range(i):
                other = self.objects[j]
                gap = math.dist(ob.position, other.position) - r - other.spec.footprint_radius()
                if gap < self.clearance:
                    raise SceneError(
                        f"objects[{i}] and objects[{j}] closer than clearance ({gap:.4f} m)")

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        desk = None if self.desk is None else {
            "half_extent": list(self.desk.half_extent), "center": list(self.desk.center),
            "top": self.desk.top, "thickness": self.desk.thickness,
            "opacity": self.desk.opacity}
        return {
            "schema": SCENE_SCHEMA, "version": SCENE_VERSION, "seed": self.seed,
            "clearance": self.clearance, "point_density": self.point_density,
            "desk_point_density": self.desk_point_density, "desk": desk,
            "objects": [{"name": o.name, "shape": o.spec.to_dict(),
                         "position": list(o.position), "yaw": o.yaw,
                         "opacity": o.opacity, "transparent": o.transparent}
                        for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDescription":
        if d.get("schema") != SCENE_SCHEMA:
            raise SceneError(f"schema: expected {SCENE_SCHEMA!r}, got {d.get('schema')!r}")
        if d.get("version") != SCENE_VERSION:
            raise SceneError(f"version: unsupported scene version {d.get('version')!r}")
        objects = []
        for i, o in enumerate(d.get("objects", [])):
            try:
                spec = ShapeSpec.from_dict(o["shape"])
                objects.append(SceneObject(spec, tuple(o["position"]), float(o.get("yaw", 0.0)),
                                           float(o.get("opacity", TRANSPARENT_OPACITY)),
                                           bool(o.get("transparent", True)), o.get("name", "")))
            except KeyError as exc:
                raise SceneError(f"objects[{i}].{exc.args[0]}: missing field") from None
            except (TypeError, ValueError) as exc:
                raise SceneError(f"objects[{i}].shape: {exc}") from None
        desk = d.get("desk")
        if desk is not None:
            desk = Desk(tuple(desk["half_extent"]), tuple(desk["center"]), desk["top"],
                        desk["thickness"], desk.get("opacity", OPAQUE_OPACITY))
        return cls(tuple(objects), desk, int(d.get("seed", 0)), d.get("clearance", 0.03),
                   d.get("point_density", 250_000.0), d.get("desk_point_density", 60_000.0))


@dataclass(frozen=True)
class DegradeConfig:
    dropout_fraction: float = 0.0
    patch_count: int = 0
    patch_radius: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    patch_centers: Optional[tuple] = None   # explicit centers override random ones

    def __post_init__(self):
        if not 0 <= self.dropout_fraction < 1:
            raise ValueError("dropout_fraction must be in [0, 1)")
        if min(self.patch_count, self.patch_radius, self.noise_sigma) < 0:
            raise ValueError("degradation parameters must be nonnegative")


@dataclass(eq=False)
class Scene:
    """Ground truth of a generated scene."""

    description: SceneDescription
    object_clouds: list
    desk_cloud: PointCloud
    transforms: list = field(default_factory=list)   # (R, t) per object, canonical -> world

    @property
    def plane(self) -> Optional[Plane]:
        d = self.description.desk
        return None if d is None else d.plane

    def object_sdf(self, i: int, p) -> np.ndarray:
        R, t = self.transforms[i]
        local = (np.asarray(p, dtype=np.float64) - t) @ R
        return sdf_eval(self.description.objects[i].spec, local)

    def sdf(self, p) -> np.ndarray:
        """Scene SDF: min over the desk slab and every object."""
        p = np.asarray(p, dtype=np.float64)
        d = np.full(p.shape[:-1], np.inf)
        if self.description.desk is not None:
            d = self.description.desk.sdf(p)
        for i in range(len(self.object_clouds)):
            d = np.minimum(d, self.object_sdf(i, p))
        return d

    def cloud(self) -> tuple[PointCloud, np.ndarray]:
        """Panoramic cloud and per-point labels (-1 desk, k object k)."""
        parts = [self.desk_cloud] + list(self.object_clouds)
        labels = np.concatenate([np.full(len(self.desk_cloud), -1)] +
                                [np.full(len(c), k) for k, c in enumerate(self.object_clouds)])
        return PointCloud.concatenate(parts), labels

    def dense_object_cloud(self, i: int, density: float = 1_000_000.0, seed: int = 0,
                           skip_base: bool = False) -> PointCloud:
        """Dense world-frame surface samples of object ``i`` (reference geometry)."""
        spec = self.description.objects[i].spec
        n = max(int(round(density * surface_area(spec, skip_base))), 16)
        R, t = self.transforms[i]
        return sample_surface(spec, n, seed, skip_base=skip_base).transformed(R, t)


def _child_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def placement(ob: SceneObject, desk_top: float = 0.0):
    R = rotation_z(ob.yaw)
    t = np.array([ob.position[0], ob.position[1], desk_top])
    return R, t


def make_scene(desc: SceneDescription) -> Scene:
    """Sample ground-truth clouds for the desk and every object.

    Object clouds skip the base face (it rests on the desk and is never
    observed); desk samples hidden under an object footprint are dropped.
    """
    desc.validate()
    seeds = _child_seeds(desc.seed, len(desc.objects) + 1)
    top = 0.0 if desc.desk is None else desc.desk.top
    clouds, transforms = [], []
    for ob, s in zip(desc.objects, seeds):
        n = max(int(round(desc.point_density * surface_area(ob.spec, skip_base=True))), 16)
        R, t = placement(ob, top)
        clouds.append(sample_surface(ob.spec, n, s, skip_base=True).transformed(R, t))
        transforms.append((R, t))
    scene = Scene(desc, clouds, PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), transforms)
    if desc.desk is not None:
        d = desc.desk
        rng = np.random.default_rng(seeds[-1])
        area = 4 * d.half_extent[0] * d.half_extent[1]
        n = int(round(desc.desk_point_density * area))
        xy = rng.uniform(-1.0, 1.0, (n, 2)) * np.array(d.half_extent) + np.array(d.center)
        pts = np.column_stack([xy, np.full(n, d.top)])
        visible = np.ones(n, dtype=bool)
        for i in range(len(clouds)):
            visible &= scene.object_sdf(i, pts) > 1e-9
        pts = pts[visible]
        nrm = np.zeros_like(pts)
        nrm[:, 2] = 1.0
        scene.desk_cloud = PointCloud(pts, nrm)
    return scene


def degrade_cloud(cloud: PointCloud, cfg: DegradeConfig, return_index: bool = False):
    """Remove spherical patches, drop points uniformly, then jitter.

    Jitter is Gaussian truncated at ``6 * noise_sigma`` per point.  Normals of
    surviving points are kept as-is.
    """
    if len(cloud) == 0:
        raise ValueError("cannot degrade an empty cloud")
    rng = np.random.default_rng(cfg.seed)
    keep = np.ones(len(cloud), dtype=bool)
    if cfg.patch_centers is not None:
        centers = np.asarray(cfg.patch_centers, dtype=np.float64).reshape(-1, 3)
    elif cfg.patch_count:
        centers = cloud.points[rng.choice(len(cloud), size=cfg.patch_count, replace=False)]
    else:
        centers = np.zeros((0, 3))
    if cfg.patch_radius > 0:
        for c in centers:
            keep &= np.linalg.norm(cloud.points - c, axis=1) >= cfg.patch_radius
    if cfg.dropout_fraction > 0:
        keep &= rng.random(len(cloud)) >= cfg.dropout_fraction
    index = np.flatnonzero(keep)
    if len(index) == 0:
        raise ValueError("degradation removed every point; lower the severity")
    out = cloud.subset(index)
    if cfg.noise_sigma > 0:
        jitter = rng.normal(0.0, cfg.noise_sigma, (len(index), 3))
        norm = np.linalg.norm(jitter, axis=1, keepdims=True)
        cap = 6.0 * cfg.noise_sigma
        jitter = np.where(norm > cap, jitter * (cap / np.maximum(norm, 1e-300)), jitter)
        out = PointCloud(out.points + jitter, out.normals)
    return (out, index) if return_index else out


# ---------------------------------------------------------------------------
# Standard scenes
# ---------------------------------------------------------------------------

def standard_objects() -> list[tuple[str, ShapeSpec, bool]]:
    """S1 content: three glassware items and two opaque distractor boxes."""
    return [
        ("cylindrical_cup", ShapeSpec.cylindrical_cup(radius=0.038, height=0.10), True),
        ("prismatic_cup", ShapeSpec.prismatic_cup(radius=0.042, height=0.10, sides=6), True),
        ("mug", ShapeSpec.mug(), True),
        ("box_a", ShapeSpec.box(0.10, 0.06, 0.08), False),
        ("box_b", ShapeSpec.box(0.07, 0.07, 0.12), False),
    ]


def random_layout(items: Sequence[tuple[str, ShapeSpec, bool]], seed: int, desk: Desk = Desk(),
                  clearance: float = 0.03, max_tries: int = 10_000, **kwargs) -> SceneDescription:
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        objects = []
        for name, spec, transparent in items:
            r = spec.footprint_radius()
            lo = np.array(desk.center) - np.array(desk.half_extent) + r
            hi = np.array(desk.center) + np.array(desk.half_extent) - r
            pos = rng.uniform(lo, hi)
            yaw = rng.uniform(-math.pi, math.pi)
            objects.append(SceneObject(
                spec, (float(pos[0]), float(pos[1])), float(yaw),
                TRANSPARENT_OPACITY if transparent else OPAQUE_OPACITY, transparent, name))
        try:
            return SceneDescription(tuple(objects), desk, seed, clearance, **kwargs)
        except SceneError:
            continue
    raise SceneError("could not place objects without overlap")


def standard_scene(seed: int) -> SceneDescription:
    """Seeded placement of the S1 object set."""
    return random_layout(standard_objects(), seed)


MUG_BENCHMARK_PATCH_RADIUS = 0.05
MUG_BENCHMARK_DROPOUT = 0.4


def mug_benchmark_degrade(scene: Scene, seed: int, mug_index: Optional[int] = None,
                          patch_radius: float = MUG_BENCHMARK_PATCH_RADIUS,
                          dropout: float = MUG_BENCHMARK_DROPOUT,
                          noise_sigma: float = 0.0) -> DegradeConfig:
    """One large patch on the body opposite the handle (mid height) plus dropout."""
    desc = scene.description
    if mug_index is None:
        mug_index = next(i for i, o in enumerate(desc.objects) if o.spec.kind == MUG)
    spec = desc.objects[mug_index].spec
    R, t = scene.transforms[mug_index]
    center = R @ np.array([-spec.radius, 0.0, 0.5 * spec.height]) + t
    return DegradeConfig(dropout_fraction=dropout, patch_radius=patch_radius,
                         noise_sigma=noise_sigma, seed=seed, patch_centers=(tuple(center),))


def degrade_scene(scene: Scene, configs: dict) -> Scene:
    """Copy of ``scene`` with object clouds degraded per ``{index: DegradeConfig}``."""
    clouds = list(scene.object_clouds)
    for i, cfg in configs.items():
        clouds[i] = degrade_cloud(clouds[i], cfg)
    return Scene(scene.description, clouds, scene.desk_cloud, scene.transforms)


def single_object_scene(spec: ShapeSpec, opacity: float = TRANSPARENT_OPACITY,
                        desk: Optional[Desk] = Desk((0.10, 0.10)), seed: int = 0,
                        **kwargs) -> SceneDescription:
    return SceneDescription((SceneObject(spec, (0.0, 0.0), 0.0, opacity,
                                         opacity < OPAQUE_OPACITY, spec.kind),),
                            desk, seed, **kwargs)


def is_box(ob: SceneObject) -> bool:
    return ob.spec.kind == BOX
