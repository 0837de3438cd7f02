"""End-to-end runs: scene -> cloud -> instances -> poses -> completion -> grasps.

Every stage is seeded.  Per-object work can fan out over a process pool; each
worker pins torch to one thread and results are gathered in cluster order, so
reports do not depend on the worker count.
"""

from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .completion import (InferConfig, PriorMismatchError, SdfDecoder, infer_latent,
                         load_default_decoder, reconstruct_surface)
from .core import (BOX, CYLINDRICAL_CUP, MUG, PRISMATIC_CUP, GeometryError, Plane, PointCloud,
                   chamfer)
from .field import FitConfig, extract_points, fit_field
from .grasp import (GraspConfig, GripperModel, estimate_normals, execution_validity, rank,
                    sample_grasps, score_grasp, score_stats, suppress_duplicates)
from .pose import denormalize_cloud, estimate_pose, normalize_cloud
from .scenegen import (DegradeConfig, Scene, SceneDescription, degrade_scene, make_scene,
                       mug_benchmark_degrade, standard_scene)
from .segmentation import (RansacConfig, SegmentConfig, fit_plane_ransac, label_accuracy,
                           segment_objects)

PIPELINE_SCHEMA = "glassgrasp.pipeline"
PIPELINE_VERSION = 1
REPORT_SCHEMA = "glassgrasp.report"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    scene: Optional[dict] = None            # scene document; None -> seeded standard scene
    skip_field: bool = False
    complete: bool = True
    complete_kinds: tuple = (MUG,)
    mug_benchmark: bool = True              # degrade the mug like the completion benchmark
    mug_noise: float = 0.0
    degrade: dict = dataclasses.field(default_factory=dict)   # object index -> DegradeConfig fields
    field: FitConfig = FitConfig()
    band: tuple = (40.0, 160.0)
    grid_res: int = 128
    ransac: RansacConfig = RansacConfig()
    segment: SegmentConfig = SegmentConfig()
    infer: InferConfig = InferConfig()
    recon_grid: int = 96
    decoders: dict = dataclasses.field(default_factory=dict)  # kind -> checkpoint path
    gripper: GripperModel = GripperModel()
    grasp: GraspConfig = GraspConfig()
    top_k: int = 20
    truth_density: float = 1_000_000.0
    completion_density: float = 1_000_000.0   # samples per m^2 of the decoded surface
    workers: int = 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["complete_kinds"] = list(self.complete_kinds)
        d["band"] = list(self.band)
        return {"schema": PIPELINE_SCHEMA, "version": PIPELINE_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if d.pop("schema", PIPELINE_SCHEMA) != PIPELINE_SCHEMA:
            raise ConfigError(f"schema: expected {PIPELINE_SCHEMA!r}")
        version = d.pop("version", PIPELINE_VERSION)
        if version != PIPELINE_VERSION:
            raise ConfigError(f"version: unsupported pipeline config version {version!r}")
        return _build(cls, d, "")


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"{where}: unknown field")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}: expected a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected true/false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number")
            if isinstance(default, int) and not isinstance(default, bool) and value != int(value):
                raise ConfigError(f"{where}: expected an integer")
            value = type(default)(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


# ---------------------------------------------------------------------------
# Per-object stages
# ---------------------------------------------------------------------------

@dataclass
class Completion:
    cloud: PointCloud           # world frame, with normals
    mesh_vertices: np.ndarray   # world frame
    mesh_faces: np.ndarray
    residual: float


def complete_object(cluster: PointCloud, plane: Plane, decoder: SdfDecoder, estimate,
                    infer_cfg: InferConfig = InferConfig(), density: float = 1_000_000.0,
                    grid_res: int = 96, seed: int = 0, base_clearance: float = 0.001
                    ) -> Completion:
    """Complete one cluster with a shape prior and map the result back to the scene.

    The decoded mesh is sampled at ``density`` points per square meter.  Samples
    within ``base_clearance`` of the desk are dropped: the underside rests on
    the desk and is never observed.
    """
    canon = normalize_cloud(cluster, estimate.pose)
    z, residual = infer_latent(decoder, canon, infer_cfg, return_residual=True)
    _, mesh = reconstruct_surface(decoder, z, grid_res)
    world_v = denormalize_cloud(PointCloud(mesh.vertices, mesh.normals), estimate.pose)
    scale = 1.0 / estimate.pose.alpha
    n = max(int(round(density * mesh.area * scale * scale)), 16)
    canon_samples = mesh.sample(n, seed)
    world = denormalize_cloud(canon_samples, estimate.pose)
    keep = plane.signed_distance(world.points) > base_clearance
    return Completion(world.subset(np.flatnonzero(keep)), world_v.points, mesh.faces, residual)


def with_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    return PointCloud(cloud.points, estimate_normals(cloud.points, k))


def plan_grasps(obj: PointCloud, scene_points: np.ndarray, plane: Optional[Plane],
                gripper: GripperModel = GripperModel(), cfg: GraspConfig = GraspConfig()):
    """Sample, collision-check and score grasps on one object; ranked best first.

    Object normals are re-estimated from positions so observed and completed
    clouds are treated alike.  Near-duplicate poses and zero-score candidates
    are suppressed, so the list holds distinct proposals.
    """
    pc = PointCloud(obj.points, estimate_normals(obj.points, cfg.normal_neighbors))
    cands = sample_grasps(pc, gripper, cfg)
    otree = cKDTree(pc.points)
    stree = cKDTree(scene_points) if len(scene_points) else None
    scored = [score_grasp(c, pc.points, scene_points, gripper, cfg, plane, otree, stree)
              for c in cands]
    return suppress_duplicates(rank(scored), cfg.nms_distance, cfg.nms_angle_deg)


def validity_rate(ranked, truth: PointCloud, plane: Optional[Plane], top_k: Optional[int],
                  gripper: GripperModel = GripperModel(), cfg: GraspConfig = GraspConfig()):
    """Fraction of the top-k candidates that are executable on the reference geometry.

    Returns (rate, flags); ``top_k=None`` evaluates every candidate while the
    rate still refers to the whole list.
    """
    top = list(ranked if top_k is None else ranked[:top_k])
    if not top:
        return None, []
    tree = cKDTree(truth.points)
    flags = [execution_validity(c, truth, gripper, cfg, plane, tree) for c in top]
    return float(np.mean(flags)), flags


def _grasp_summary(ranked, truth, plane, cfg: PipelineConfig) -> tuple[dict, list]:
    if not ranked:
        return {"candidates": 0, "stats": None, "validity": None}, []
    _, flags = validity_rate(ranked, truth, plane, None, cfg.gripper, cfg.grasp)
    rows = [{**c.row(), "valid": bool(f)} for c, f in zip(ranked, flags)]
    return {"candidates": len(ranked), "stats": score_stats(ranked),
            "validity": float(np.mean(flags[:cfg.top_k]))}, rows


# ---------------------------------------------------------------------------
# Pool helpers
# ---------------------------------------------------------------------------

def _init_worker():
    torch.set_num_threads(1)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        old = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            return [fn(*it) for it in items]
        finally:
            torch.set_num_threads(old)
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        return list(pool.map(_star, [(fn, it) for it in items]))


def _star(job):
    fn, args = job
    return fn(*args)


def _decoder_for(kind: str, paths: dict) -> SdfDecoder:
    if kind in paths:
        return SdfDecoder.load(paths[kind])
    return load_default_decoder(kind)


def _pose_and_complete(k, cluster, plane, cfg: PipelineConfig):
    out = {"pose": None, "completion": None, "error": None}
    try:
        est = estimate_pose(cluster, plane)
    except GeometryError as exc:
        out["error"] = f"pose: {exc}"
        return out, None
    out["pose"] = est.report()
    if not (cfg.complete and est.kind in cfg.complete_kinds):
        return out, None
    try:
        comp = complete_object(cluster, plane, _decoder_for(est.kind, cfg.decoders), est,
                               cfg.infer, cfg.completion_density, cfg.recon_grid,
                               cfg.seed + k)
    except (PriorMismatchError, GeometryError) as exc:
        out["error"] = f"completion: {exc}"
        return out, None
    out["completion"] = {"residual": comp.residual, "points": len(comp.cloud)}
    return out, comp


def _grasp_job(obj_points, scene_points, plane, truth, cfg: PipelineConfig):
    ranked = plan_grasps(PointCloud(obj_points), scene_points, plane, cfg.gripper, cfg.grasp)
    return _grasp_summary(ranked, truth, plane, cfg)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def build_scene(cfg: PipelineConfig) -> tuple[Scene, Scene, dict]:
    """(ground truth, observed, degradations) for a pipeline config."""
    desc = (SceneDescription.from_dict(cfg.scene) if cfg.scene is not None
            else standard_scene(cfg.seed))
    truth = make_scene(desc)
    configs = {}
    if cfg.mug_benchmark:
        for i, ob in enumerate(desc.objects):
            if ob.spec.kind == MUG:
                configs[i] = mug_benchmark_degrade(truth, cfg.seed + i, i, noise_sigma=cfg.mug_noise)
    for key, value in cfg.degrade.items():
        configs[int(key)] = DegradeConfig(**value) if isinstance(value, dict) else value
    observed = degrade_scene(truth, configs) if configs else truth
    return truth, observed, configs


def _match_truth(cluster: PointCloud, desc: SceneDescription) -> int:
    c = cluster.points[:, :2].mean(axis=0)
    d = [math.dist(c, ob.position) for ob in desc.objects]
    return int(np.argmin(d))


def run_pipeline(cfg: PipelineConfig, log=None) -> tuple[dict, dict]:
    """Run every stage; returns (report, artifacts).

    Artifacts hold the clouds of each stage for writing to disk; the report is
    plain JSON-ready data.
    """
    say = log or (lambda m: None)
    truth_scene, observed, degradations = build_scene(cfg)
    desc = truth_scene.description
    if cfg.skip_field:
        cloud, truth_labels = observed.cloud()
        provenance = "ground-truth degraded clouds (field fitting skipped)"
        field_info = None
    else:
        say("fitting density field")
        fit = fit_field(desc, cfg=cfg.field)
        ex = extract_points(fit.field, cfg.band, cfg.grid_res)
        cloud = PointCloud.concatenate([ex.transparent, ex.opaque])
        truth_labels = None
        provenance = "density-field extraction"
        field_info = {"initial_loss": fit.initial_loss, "final_loss": fit.final_loss,
                      "transparent_points": len(ex.transparent), "opaque_points": len(ex.opaque)}
    say("segmenting")
    plane = fit_plane_ransac(cloud, dataclasses.replace(cfg.ransac, seed=cfg.ransac.seed + cfg.seed))
    seg = segment_objects(cloud, plane, cfg.segment)
    seg_report = seg.report()
    if truth_labels is not None:
        acc, _ = label_accuracy(seg, truth_labels, plane.signed_distance(cloud.points),
                                cfg.segment.plane_margin)
        seg_report["label_accuracy"] = acc
    clusters = seg.clusters
    say(f"pose and completion for {len(clusters)} instances")
    phase_a = _map(_pose_and_complete,
                   [(k, c, plane, cfg) for k, c in enumerate(clusters)], cfg.workers)
    completions = [comp for _, comp in phase_a]
    matches = [_match_truth(c, desc) for c in clusters]
    others_truth = [truth_scene.object_clouds[i] for i in range(len(desc.objects))]
    incomplete_pts = np.concatenate([c.points for c in clusters]) if clusters else np.zeros((0, 3))
    completed_objs = [comp.cloud if comp is not None else c for c, comp in zip(clusters, completions)]
    completed_pts = (np.concatenate([c.points for c in completed_objs]) if clusters
                     else np.zeros((0, 3)))
    say("planning grasps")
    jobs, owners = [], []
    truths = []
    for k, c in enumerate(clusters):
        m = matches[k]
        dense = truth_scene.dense_object_cloud(m, cfg.truth_density, seed=cfg.seed)
        truth = PointCloud.concatenate([dense] + [others_truth[i] for i in range(len(desc.objects))
                                                  if i != m])
        truths.append(truth)
        jobs.append((c.points, incomplete_pts, plane, truth, cfg))
        owners.append((k, "incomplete"))
        if completions[k] is not None:
            jobs.append((completions[k].cloud.points, completed_pts, plane, truth, cfg))
            owners.append((k, "completed"))
    results = _map(_grasp_job, jobs, cfg.workers)
    grasp_by = {key: res[0] for key, res in zip(owners, results)}
    grasp_rows = [{"object": k, "scene": mode, **row}
                  for (k, mode), res in zip(owners, results) for row in res[1]]
    objects, score_table, validity_table = [], [], []
    for k, c in enumerate(clusters):
        m = matches[k]
        ob = desc.objects[m]
        info, comp = phase_a[k]
        entry = {"id": k, "points": len(c), "truth_index": m, "truth_name": ob.name,
                 "truth_kind": ob.spec.kind, **info,
                 "grasps": {"incomplete": grasp_by[(k, "incomplete")]}}
        if comp is not None:
            dense = truth_scene.dense_object_cloud(m, cfg.truth_density, seed=cfg.seed,
                                                   skip_base=True)
            entry["completion"].update(chamfer_partial=chamfer(c.points, dense.points),
                                       chamfer_completed=chamfer(comp.cloud.points, dense.points))
            entry["grasps"]["completed"] = grasp_by[(k, "completed")]
        objects.append(entry)
        for mode in ("incomplete", "completed"):
            g = entry["grasps"].get(mode)
            if g is None:
                continue
            label = "No" if mode == "incomplete" else "Yes"
            if comp is not None and g["stats"] is not None:
                score_table.append({"object": ob.name, "completion": label, **g["stats"]})
            if ob.spec.kind != BOX:
                validity_table.append({"object": ob.name, "kind": ob.spec.kind, "completion": label,
                                 "top_k": cfg.top_k, "validity": g["validity"]})
    report = {
        "schema": REPORT_SCHEMA, "version": PIPELINE_VERSION, "seed": cfg.seed,
        "provenance": provenance,
        # the worker count changes scheduling only, so it stays out of the report
        "config": {k: v for k, v in cfg.to_dict().items() if k != "workers"},
        "degradations": {str(i): dataclasses.asdict(d) for i, d in sorted(degradations.items())},
        "field": field_info,
        "segmentation": seg_report,
        "objects": objects,
        "score_table": score_table,
        "validity_table": validity_table,
    }
    artifacts = {"cloud": cloud, "clusters": clusters, "completions": completions,
                 "plane": plane, "grasps": grasp_rows}
    return _jsonable(report), artifacts


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


# ---------------------------------------------------------------------------
# Degraded-mug benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MugCase:
    seed: int
    chamfer_partial: float
    chamfer_completed: float
    stats_incomplete: Optional[dict]
    stats_completed: Optional[dict]
    validity_incomplete: Optional[float]
    validity_completed: Optional[float]
    seconds_completion: float
    validity_cups: dict = dataclasses.field(default_factory=dict)   # kind -> top-k validity


def mug_benchmark_case(seed: int, decoder: Optional[SdfDecoder] = None,
                       cfg: PipelineConfig = PipelineConfig(), with_cups: bool = False) -> MugCase:
    """One seed of the degraded-mug benchmark: completion and grasps before/after.

    The mug's observed cloud is its ground-truth cloud after the benchmark
    degradation; the desk plane is estimated from the observed scene.  With
    ``with_cups`` the undegraded cups of the same scene are planned as well.
    """
    cfg = dataclasses.replace(cfg, seed=seed, mug_benchmark=True, skip_field=True)
    truth_scene, observed, _ = build_scene(cfg)
    desc = truth_scene.description
    mi = next(i for i, o in enumerate(desc.objects) if o.spec.kind == MUG)
    cloud, _ = observed.cloud()
    plane = fit_plane_ransac(cloud, dataclasses.replace(cfg.ransac, seed=cfg.ransac.seed + seed))
    partial = observed.object_clouds[mi]
    decoder = decoder if decoder is not None else _decoder_for(MUG, cfg.decoders)
    t0 = time.perf_counter()
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        est = estimate_pose(partial, plane)
        comp = complete_object(partial, plane, decoder, est, cfg.infer, cfg.completion_density,
                               cfg.recon_grid, seed)
    finally:
        torch.set_num_threads(old)
    t_comp = time.perf_counter() - t0
    dense = truth_scene.dense_object_cloud(mi, cfg.truth_density, seed=seed, skip_base=True)
    others = [observed.object_clouds[i] for i in range(len(desc.objects)) if i != mi]
    rest = np.concatenate([o.points for o in others]) if others else np.zeros((0, 3))
    truth = PointCloud.concatenate(
        [truth_scene.dense_object_cloud(mi, cfg.truth_density, seed=seed)]
        + [truth_scene.object_clouds[i] for i in range(len(desc.objects)) if i != mi])
    inc = plan_grasps(partial, np.concatenate([partial.points, rest]), plane, cfg.gripper,
                      cfg.grasp)
    com = plan_grasps(comp.cloud, np.concatenate([comp.cloud.points, rest]), plane, cfg.gripper,
                      cfg.grasp)
    vi, _ = validity_rate(inc, truth, plane, cfg.top_k, cfg.gripper, cfg.grasp)
    vc, _ = validity_rate(com, truth, plane, cfg.top_k, cfg.gripper, cfg.grasp)
    cups = {}
    if with_cups:
        scene_pts = np.concatenate([o.points for o in observed.object_clouds])
        for i, ob in enumerate(desc.objects):
            if ob.spec.kind not in (CYLINDRICAL_CUP, PRISMATIC_CUP):
                continue
            ranked = plan_grasps(observed.object_clouds[i], scene_pts, plane, cfg.gripper,
                                 cfg.grasp)
            ref = PointCloud.concatenate(
                [truth_scene.dense_object_cloud(i, cfg.truth_density, seed=seed)]
                + [truth_scene.object_clouds[j] for j in range(len(desc.objects)) if j != i])
            cups[ob.spec.kind], _ = validity_rate(ranked, ref, plane, cfg.top_k, cfg.gripper,
                                                  cfg.grasp)
    return MugCase(seed, chamfer(partial.points, dense.points),
                   chamfer(comp.cloud.points, dense.points),
                   score_stats(inc) if inc else None, score_stats(com) if com else None,
                   vi, vc, t_comp, cups)
