"""Command-line driver: one subcommand per stage plus the end-to-end pipeline.

Every command reads only the files named on its command line and writes into
``--out``.  On failure a JSON error object goes to stderr and the exit code
is nonzero (2 for configuration problems, 1 for everything else).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .completion import (PRIOR_KINDS, PriorMismatchError, SdfDecoder, TrainConfig,
                         load_default_decoder, train_prior)
from .core import GeometryError, Plane, PointCloud
from .field import DensityField, FieldError, extract_points, fit_field
from .grasp import score_stats
from .pipeline import (ConfigError, PipelineConfig, _build, complete_object, plan_grasps,
                       run_pipeline, validity_rate)
from .pose import estimate_pose
from .scenegen import (SceneDescription, SceneError, degrade_scene, make_scene,
                       mug_benchmark_degrade, standard_scene)
from .segmentation import fit_plane_ransac, segment_objects

GRASP_COLUMNS = ("object", "scene", "id", "cx", "cy", "cz", "ax", "ay", "az", "ux", "uy", "uz",
                 "width", "score", "margin", "valid")


class UsageError(Exception):
    """Bad command-line arguments (reported as JSON like every other failure)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        try:
            doc = io.load_json(args.config)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        cfg = PipelineConfig.from_dict(doc)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _plane_dict(plane: Plane) -> dict:
    return {"normal": list(plane.normal), "offset": plane.offset}


def _load_plane(path) -> Plane:
    d = io.load_json(path)
    d = d.get("plane", d)
    try:
        return Plane(tuple(d["normal"]), float(d["offset"]))
    except KeyError as exc:
        raise ConfigError(f"{path}: plane.{exc.args[0]}: missing field") from None


def _load_scene(path) -> SceneDescription:
    return SceneDescription.from_dict(io.load_json(path))


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRASP_COLUMNS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> dict:
    seed = 0 if args.seed is None else args.seed
    desc = _load_scene(args.spec) if args.spec else standard_scene(seed)
    truth = make_scene(desc)
    observed, degradations = truth, {}
    if args.mug_benchmark:
        for i, ob in enumerate(desc.objects):
            if ob.spec.kind == "mug":
                degradations[i] = mug_benchmark_degrade(truth, seed + i, i)
        observed = degrade_scene(truth, degradations) if degradations else truth
    out = _out_dir(args)
    io.dump_json(desc.to_dict(), out / "scene.json")
    cloud, labels = observed.cloud()
    io.write_ply(out / "cloud.ply", cloud)
    io.dump_json({"labels": labels.tolist(),
                  "degradations": {str(i): dataclasses.asdict(d)
                                   for i, d in sorted(degradations.items())}},
                 out / "labels.json")
    return {"scene": str(out / "scene.json"), "cloud": str(out / "cloud.ply"),
            "points": len(cloud), "objects": len(desc.objects)}


def cmd_fit_field(args) -> dict:
    cfg = _load_config(args)
    fit_cfg = cfg.field
    if args.seed is not None:
        fit_cfg = dataclasses.replace(fit_cfg, seed=args.seed)
    if args.iterations is not None:
        fit_cfg = dataclasses.replace(fit_cfg, iterations=args.iterations)
    desc = _load_scene(args.scene)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    result = fit_field(desc, cfg=fit_cfg, log=log)
    out = _out_dir(args)
    result.field.save(out / "field.npz")
    summary = {"checkpoint": str(out / "field.npz"), "initial_loss": result.initial_loss,
               "final_loss": result.final_loss, "loss_history": result.loss_history,
               "config": dataclasses.asdict(fit_cfg)}
    io.dump_json(summary, out / "fit.json")
    return {k: summary[k] for k in ("checkpoint", "initial_loss", "final_loss")}


def cmd_extract(args) -> dict:
    f = DensityField.load(args.checkpoint)
    ex = extract_points(f, tuple(args.band), args.grid_res)
    out = _out_dir(args)
    io.write_ply(out / "transparent.ply", ex.transparent)
    io.write_ply(out / "opaque.ply", ex.opaque)
    io.write_ply(out / "panoramic.ply", PointCloud.concatenate([ex.transparent, ex.opaque]))
    summary = {"panoramic": str(out / "panoramic.ply"), "transparent_points": len(ex.transparent),
               "opaque_points": len(ex.opaque), "band": list(args.band),
               "grid_res": args.grid_res, "skin_dropped": ex.skin_dropped}
    io.dump_json(summary, out / "extract.json")
    return summary


def cmd_segment(args) -> dict:
    cfg = _load_config(args)
    cloud = io.read_ply(args.cloud)
    plane = fit_plane_ransac(cloud, dataclasses.replace(cfg.ransac, seed=cfg.ransac.seed + cfg.seed))
    seg = segment_objects(cloud, plane, cfg.segment)
    out = _out_dir(args)
    io.dump_json({"plane": _plane_dict(plane)}, out / "plane.json")
    paths = []
    for k, c in enumerate(seg.clusters):
        p = out / f"instance_{k}.ply"
        io.write_ply(p, c)
        paths.append(str(p))
    report = seg.report()
    report["instance_files"] = paths
    io.dump_json(report, out / "segmentation.json")
    return {"plane": str(out / "plane.json"), "instances": paths}


def cmd_pose(args) -> dict:
    plane = _load_plane(args.plane)
    poses = []
    for path in args.instances:
        cluster = io.read_ply(path)
        try:
            poses.append({"instance": str(path), **estimate_pose(cluster, plane).report()})
        except GeometryError as exc:
            poses.append({"instance": str(path), "error": str(exc)})
    out = _out_dir(args)
    io.dump_json({"poses": poses}, out / "poses.json")
    return {"poses": str(out / "poses.json"), "count": len(poses)}


def cmd_complete(args) -> dict:
    cfg = _load_config(args)
    plane = _load_plane(args.plane)
    cluster = io.read_ply(args.instance)
    est = estimate_pose(cluster, plane)
    decoder = SdfDecoder.load(args.decoder) if args.decoder else load_default_decoder(est.kind)
    comp = complete_object(cluster, plane, decoder, est, cfg.infer, cfg.completion_density,
                           cfg.recon_grid, cfg.seed)
    out = _out_dir(args)
    io.write_ply(out / "completed.ply", comp.cloud)
    io.write_ply(out / "mesh.ply", PointCloud(comp.mesh_vertices), faces=comp.mesh_faces)
    summary = {"completed": str(out / "completed.ply"), "mesh": str(out / "mesh.ply"),
               "kind": est.kind, "residual": comp.residual, "points": len(comp.cloud),
               "pose": est.report()}
    io.dump_json(summary, out / "completion.json")
    return {k: summary[k] for k in ("completed", "mesh", "kind", "points")}


def cmd_train_prior(args) -> dict:
    tcfg = TrainConfig()
    if args.config:
        tcfg = _build(TrainConfig, io.load_json(args.config), "")
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    out = _out_dir(args)
    written = {}
    for kind in args.kind or PRIOR_KINDS:
        dec = train_prior(kind, tcfg, shapes=args.shapes, samples_per_shape=args.samples,
                          seed=tcfg.seed, log=log)
        path = out / f"prior_{kind}.npz"
        dec.save(path)
        written[kind] = str(path)
    return {"checkpoints": written}


def cmd_grasp(args) -> dict:
    cfg = _load_config(args)
    cloud = io.read_ply(args.cloud)
    plane = (_load_plane(args.plane) if args.plane else
             fit_plane_ransac(cloud, dataclasses.replace(cfg.ransac,
                                                         seed=cfg.ransac.seed + cfg.seed)))
    if args.objects:
        objects = [io.read_ply(p) for p in args.objects]
        scene_pts = cloud.points
    else:
        objects = segment_objects(cloud, plane, cfg.segment).clusters
        scene_pts = (np.concatenate([o.points for o in objects]) if objects
                     else np.zeros((0, 3)))
    truth = make_scene(_load_scene(args.truth)) if args.truth else None
    rows, summaries = [], []
    for k, obj in enumerate(objects):
        ranked = plan_grasps(obj, scene_pts, plane, cfg.gripper, cfg.grasp)
        flags = [None] * len(ranked)
        rate = None
        if truth is not None and ranked:
            c = obj.points.mean(axis=0)[:2]
            m = int(np.argmin([np.linalg.norm(c - np.asarray(o.position)) for o in
                               truth.description.objects]))
            ref = PointCloud.concatenate(
                [truth.dense_object_cloud(m, cfg.truth_density, seed=cfg.seed)]
                + [oc for i, oc in enumerate(truth.object_clouds) if i != m])
            _, flags = validity_rate(ranked, ref, plane, None, cfg.gripper, cfg.grasp)
            rate = float(np.mean(flags[:cfg.top_k]))
        rows += [{"object": k, "scene": "input", **g.row(),
                  "valid": "" if f is None else bool(f)} for g, f in zip(ranked, flags)]
        summaries.append({"object": k, "candidates": len(ranked),
                          "stats": score_stats(ranked) if ranked else None,
                          "validity_top_k": rate, "top_k": cfg.top_k})
    out = _out_dir(args)
    summary = {"plane": _plane_dict(plane), "objects": summaries}
    written = {}
    if "csv" in args.format:
        _write_csv(out / "grasps.csv", rows)
        written["csv"] = str(out / "grasps.csv")
    if "json" in args.format:
        io.dump_json(summary, out / "grasp_summary.json")
        written["json"] = str(out / "grasp_summary.json")
    return {"files": written, "candidates": len(rows)}


def cmd_pipeline(args) -> dict:
    cfg = _load_config(args)
    if args.skip_field:
        cfg = dataclasses.replace(cfg, skip_field=True)
    if args.no_complete:
        cfg = dataclasses.replace(cfg, complete=False)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    if args.scene:
        cfg = dataclasses.replace(cfg, scene=io.load_json(args.scene))
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    report, art = run_pipeline(cfg, log=log)
    out = _out_dir(args)
    io.dump_json(report, out / "report.json")
    written = {"json": str(out / "report.json")}
    if "csv" in args.format:
        _write_csv(out / "grasps.csv", art["grasps"])
        written["csv"] = str(out / "grasps.csv")
    if "ply" in args.format:
        io.write_ply(out / "panoramic.ply", art["cloud"])
        for k, c in enumerate(art["clusters"]):
            io.write_ply(out / f"instance_{k}.ply", c)
        for k, comp in enumerate(art["completions"]):
            if comp is not None:
                io.write_ply(out / f"completed_{k}.ply", comp.cloud)
        written["ply"] = str(out)
    return {"files": written, "score_table": report["score_table"],
            "validity_table": report["validity_table"]}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glassgrasp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, config=True, seed=True):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=fn)
        s.add_argument("--out", required=True, help="output directory")
        if config:
            s.add_argument("--config", help="pipeline config JSON")
        if seed:
            s.add_argument("--seed", type=int, help="seed override")
        return s

    s = add("gen-scene", cmd_gen_scene, "generate a scene and its observed cloud", config=False)
    s.add_argument("--spec", help="scene JSON; default is the seeded standard scene")
    s.add_argument("--mug-benchmark", action="store_true",
                   help="degrade mugs as in the completion benchmark")

    s = add("fit-field", cmd_fit_field, "fit a density field to a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--iterations", type=int)
    s.add_argument("--verbose", action="store_true")

    s = add("extract", cmd_extract, "extract a panoramic cloud from a field", config=False,
            seed=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--band", type=float, nargs=2, default=(40.0, 160.0), metavar=("LO", "HI"))
    s.add_argument("--grid-res", type=int, default=128)

    s = add("segment", cmd_segment, "desk plane and object instances")
    s.add_argument("--cloud", required=True)

    s = add("pose", cmd_pose, "kind, yaw and scale per instance", config=False, seed=False)
    s.add_argument("--instances", nargs="+", required=True)
    s.add_argument("--plane", required=True)

    s = add("complete", cmd_complete, "complete one instance with a shape prior")
    s.add_argument("--instance", required=True)
    s.add_argument("--plane", required=True)
    s.add_argument("--decoder", help="decoder checkpoint; default is the packaged prior")

    s = add("train-prior", cmd_train_prior, "train shape-prior decoders")
    s.add_argument("--kind", action="append", choices=PRIOR_KINDS)
    s.add_argument("--shapes", type=int, default=60)
    s.add_argument("--samples", type=int, default=20000)
    s.add_argument("--epochs", type=int)
    s.add_argument("--verbose", action="store_true")

    s = add("grasp", cmd_grasp, "plan grasps on a scene cloud")
    s.add_argument("--cloud", required=True)
    s.add_argument("--objects", nargs="+", help="object PLYs; default segments the cloud")
    s.add_argument("--plane", help="plane JSON; default fits one")
    s.add_argument("--truth", help="scene JSON used to flag executable grasps")
    s.add_argument("--format", nargs="+", choices=("csv", "json"), default=["csv", "json"])

    s = add("pipeline", cmd_pipeline, "end-to-end run with a consolidated report")
    s.add_argument("--scene", help="scene JSON; default is the seeded standard scene")
    s.add_argument("--skip-field", action="store_true",
                   help="use the generator's degraded clouds instead of a fitted field")
    s.add_argument("--no-complete", action="store_true", help="skip shape completion")
    s.add_argument("--workers", type=int)
    s.add_argument("--format", nargs="+", choices=("json", "csv", "ply"), default=["json", "csv"])
    s.add_argument("--verbose", action="store_true")
    return p


_CONFIG_ERRORS = (ConfigError, SceneError, UsageError)
_RUN_ERRORS = (GeometryError, PriorMismatchError, FieldError, FileNotFoundError, ValueError,
               KeyError, OSError)


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        _emit(args.func(args))
        return 0
    except _CONFIG_ERRORS as exc:
        err, code = exc, 2
    except _RUN_ERRORS as exc:
        err, code = exc, 1
    print(json.dumps({"error": type(err).__name__, "message": str(err), "command": command},
                     sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
