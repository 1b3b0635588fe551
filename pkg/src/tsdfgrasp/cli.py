"""Command-line front end tying the pipeline stages together.

Eight subcommands cover the workflow end to end: gen-scenes writes
seeded clutter descriptions, render turns a scene into depth frames,
fuse builds a truncated signed-distance volume, plan ranks grasp poses,
eval scores whole scene batches, dataset emits labeled training
records, replay steps the incremental-fusion loop, and export-mesh
extracts the isosurface. Every subcommand takes the shared flags
--seed (reproducibility), --config (pipeline settings JSON matching
PipelineConfig.to_json_dict), --jobs (worker count where a stage
parallelizes), and --out (output path; a directory or a file depending
on the subcommand).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
from pathlib import Path

import numpy as np

from .dataset import (DEFAULT_SURFACE_SAMPLES, DEFAULT_VIEW_COUNTS,
                      LABEL_POSITIVE, build_scene_labels, emit_dataset,
                      grasp_analysis_shape, shape_key)
from .errors import EmptyVolume
from .geom import CameraIntrinsics, RigidTransform
from .harness import (PipelineConfig, closed_loop_replay, eval_batch,
                      save_report)
from .isosurface import marching_cubes, save_obj, save_ply
from .planner import GripperModel, PlannerParams, plan
from .scene import generate_scene, load_scene, render_depth, save_scene
from .tsdf import integrate_depth, load_volume, read_pfm, save_volume, \
    write_pfm

VIEW_MANIFEST = "views.json"
DATASET_INDEX = "index.json"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(
            f"expected a positive integer, got {text!r}")
    return value


def _int_list(text: str) -> list:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, "r", encoding="utf-8") as f:
        return PipelineConfig.from_json_dict(json.load(f))


def _with_views(config: PipelineConfig, views) -> PipelineConfig:
    if views is None:
        return config
    return dataclasses.replace(config, n_views=int(views))


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _dump_json(payload, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _fuse_scene(scene, config: PipelineConfig):
    """Render the configured viewpoint spiral and fuse it into a volume."""
    vol = config.new_volume()
    for cam in config.viewpoints():
        depth = render_depth(scene, config.intrinsics, cam)
        integrate_depth(vol, depth, config.intrinsics, cam)
    return vol


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skipped = 0
    for i in range(args.count):
        seed = args.seed + i
        scene = generate_scene(seed, args.objects)
        skipped += scene.skipped
        save_scene(scene, out / f"scene_{seed:05d}.json")
    note = f" ({skipped} placements skipped)" if skipped else ""
    print(f"wrote {args.count} scenes with {args.objects} objects "
          f"each to {out}{note}")
    return 0


def cmd_render(args) -> int:
    config = _with_views(_load_config(args.config), args.views)
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cam in enumerate(config.viewpoints()):
        name = f"view_{i:03d}.pfm"
        write_pfm(render_depth(scene, config.intrinsics, cam), out / name)
        rows.append({"pfm": name, "T": cam.matrix().tolist()})
    _dump_json({"scene": Path(args.scene).name,
                "intrinsics": config.intrinsics.to_json_dict(),
                "views": rows}, out / VIEW_MANIFEST)
    print(f"rendered {len(rows)} views of {args.scene} to {out}")
    return 0


def cmd_fuse(args) -> int:
    config = _with_views(_load_config(args.config), args.views)
    if args.depth is not None:
        if args.views is not None:
            args.parser.error("--views only applies with --scene")
        manifest = _load_json(Path(args.depth) / VIEW_MANIFEST)
        intr = CameraIntrinsics.from_json_dict(manifest["intrinsics"])
        vol = config.new_volume()
        for row in manifest["views"]:
            cam = RigidTransform.from_matrix(
                np.asarray(row["T"], dtype=np.float64))
            integrate_depth(vol, read_pfm(Path(args.depth) / row["pfm"]),
                            intr, cam)
        n_views = len(manifest["views"])
    else:
        vol = _fuse_scene(load_scene(args.scene), config)
        n_views = config.n_views
    save_volume(vol, args.out)
    observed = int(np.count_nonzero(vol.weights))
    print(f"fused {n_views} views into {args.out} "
          f"({observed} observed voxels)")
    return 0


def cmd_plan(args) -> int:
    """Rank grasp poses for a fused volume (or a scene fused on the fly).

    Writes a JSON array ordered best first; each entry carries the pose
    matrix T, the grasp width, the pair score, and the index of the
    contact pair the pose came from.
    """
    config = _with_views(_load_config(args.config), args.views)
    if args.volume is not None and args.views is not None:
        args.parser.error("--views only applies with --scene")
    gripper = config.gripper
    if args.gripper is not None:
        gripper = GripperModel.from_json_dict(_load_json(args.gripper))
    params = config.planner_params
    if args.params is not None:
        params = PlannerParams.from_json_dict(_load_json(args.params))
    if args.volume is not None:
        vol = load_volume(args.volume)
    else:
        vol = _fuse_scene(load_scene(args.scene), config)
    try:
        result = plan(vol, gripper=gripper, params=params,
                      contact_params=config.antipodal_params, jobs=args.jobs)
    except EmptyVolume as exc:
        args.parser.exit(1, f"plan: {exc}\n")
    rows = [g.to_json_dict() for g in result.grasps]
    _dump_json(rows, args.out)
    stages = ", ".join(f"{k}={v}" for k, v in result.counts.items())
    print(f"{len(rows)} poses -> {args.out}")
    print(f"counts: {stages}")
    print(f"total {result.timings['total'] * 1e3:.1f} ms")
    return 0


def cmd_eval(args) -> int:
    config = _with_views(_load_config(args.config), args.views)
    scenes = []
    seed = args.seed
    for level in args.levels:
        for _ in range(args.scenes_per_level):
            scenes.append(generate_scene(seed, level))
            seed += 1
    report = eval_batch(scenes, config, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.json", out / "report.txt")
    print(report.table())
    print(f"report -> {out}")
    return 0


def cmd_dataset(args) -> int:
    """Generate scenes, label their grasps, and write volume snapshots.

    Shape-frame grasp analysis is cached by shape identity (kind and
    size), seeded by --seed; the rematch shuffle inside each scene uses
    the scene's own seed so any scene regenerates identically alone.
    """
    config = _load_config(args.config)
    gripper = config.gripper
    antipodal = config.antipodal_params
    n_approach = config.planner_params.n_approach
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scenes = [generate_scene(args.seed + i, args.objects)
              for i in range(args.scenes)]
    per_shape = {}
    for scene in scenes:
        for shape in scene.shapes:
            key = shape_key(shape)
            if key not in per_shape:
                per_shape[key] = grasp_analysis_shape(
                    shape, gripper, antipodal,
                    n_surface_samples=args.samples,
                    n_approach=n_approach, seed=args.seed)

    def emit_one(scene):
        labels = build_scene_labels(scene, per_shape, gripper, antipodal,
                                    n_approach=n_approach, seed=scene.seed)
        records = emit_dataset(scene, labels, args.view_counts, out,
                               intr=config.intrinsics)
        return {"seed": scene.seed,
                "dir": f"scene_{scene.seed}",
                "n_labels": len(labels),
                "n_positive": sum(lp.label == LABEL_POSITIVE
                                  for lp in labels),
                "n_records": len(records)}

    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(args.jobs) as pool:
            index_rows = list(pool.map(emit_one, scenes))
    else:
        index_rows = [emit_one(scene) for scene in scenes]

    _dump_json({"scenes": index_rows,
                "view_counts": list(args.view_counts),
                "surface_samples": args.samples,
                "analysis_seed": args.seed,
                "n_approach": n_approach,
                "gripper": gripper.to_json_dict(),
                "antipodal_params": antipodal.to_json_dict()},
               out / DATASET_INDEX)
    n_labels = sum(row["n_labels"] for row in index_rows)
    print(f"wrote {len(scenes)} scene datasets ({n_labels} labeled pairs) "
          f"to {out}")
    return 0


def cmd_replay(args) -> int:
    config = _with_views(_load_config(args.config), args.views)
    scene = load_scene(args.scene)
    steps = closed_loop_replay(scene, config=config)
    _dump_json({"scene": Path(args.scene).name,
                "config": config.to_json_dict(),
                "steps": [s.to_json_dict() for s in steps]}, args.out)
    for s in steps:
        if s.no_pose:
            print(f"step {s.n_fused_frames:3d}: no pose")
        else:
            free = "yes" if s.collision_free else "no"
            print(f"step {s.n_fused_frames:3d}: antipodal {s.antipodal:.4f}"
                  f"  collision-free {free}")
    print(f"replay -> {args.out}")
    return 0


def cmd_export_mesh(args) -> int:
    suffix = Path(args.out).suffix.lower()
    if suffix not in (".obj", ".ply"):
        args.parser.error("--out must end in .obj or .ply")
    mesh = marching_cubes(load_volume(args.volume))
    if suffix == ".obj":
        save_obj(mesh, args.out)
    else:
        save_ply(mesh, args.out)
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles "
          f"-> {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="base random seed (default 0)")
    common.add_argument("--config", metavar="JSON", default=None,
                        help="pipeline settings file")
    common.add_argument("--jobs", type=_positive_int, default=1, metavar="N",
                        help="worker count where a stage parallelizes")
    common.add_argument("--out", required=True, metavar="PATH",
                        help="output directory or file")

    parser = argparse.ArgumentParser(
        prog="tsdfgrasp",
        description="Volumetric grasp planning on synthetic clutter.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("gen-scenes", parents=[common],
                       help="write seeded clutter scene JSONs")
    p.add_argument("--count", type=_positive_int, default=10,
                   help="number of scenes (default 10)")
    p.add_argument("--objects", type=_positive_int, default=5,
                   help="objects per scene (default 5)")
    p.set_defaults(func=cmd_gen_scenes, parser=p)

    p = sub.add_parser("render", parents=[common],
                       help="render depth frames of a scene as PFM files")
    p.add_argument("--scene", required=True, metavar="JSON")
    p.add_argument("--views", type=_positive_int, default=None, metavar="N",
                   help="viewpoint count (default from config)")
    p.set_defaults(func=cmd_render, parser=p)

    p = sub.add_parser("fuse", parents=[common],
                       help="fuse depth frames into a TSDF volume file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--depth", metavar="DIR",
                     help="directory written by the render subcommand")
    src.add_argument("--scene", metavar="JSON",
                     help="scene file to render and fuse directly")
    p.add_argument("--views", type=_positive_int, default=None, metavar="N",
                   help="viewpoint count with --scene (default from config)")
    p.set_defaults(func=cmd_fuse, parser=p)

    p = sub.add_parser("plan", parents=[common],
                       help="rank grasp poses from a volume or a scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", metavar="FILE", help="fused TSDF volume")
    src.add_argument("--scene", metavar="JSON",
                     help="scene file to render and fuse directly")
    p.add_argument("--views", type=_positive_int, default=None, metavar="N",
                   help="viewpoint count with --scene (default from config)")
    p.add_argument("--gripper", metavar="JSON", default=None,
                   help="gripper geometry file (overrides config)")
    p.add_argument("--params", metavar="JSON", default=None,
                   help="planner parameter file (overrides config)")
    p.set_defaults(func=cmd_plan, parser=p)

    p = sub.add_parser("eval", parents=[common],
                       help="score generated scene batches per clutter level")
    p.add_argument("--levels", type=_int_list, default=[5, 10, 15, 20],
                   metavar="N,N,...",
                   help="object counts per level (default 5,10,15,20)")
    p.add_argument("--scenes-per-level", type=_positive_int, default=50,
                   metavar="N", help="scenes per clutter level (default 50)")
    p.add_argument("--views", type=_positive_int, default=None, metavar="N",
                   help="views fused per scene (default from config)")
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("dataset", parents=[common],
                       help="emit labeled grasp records with volume snapshots")
    p.add_argument("--scenes", type=_positive_int, default=10,
                   help="number of scenes (default 10)")
    p.add_argument("--objects", type=_positive_int, default=5,
                   help="objects per scene (default 5)")
    p.add_argument("--view-counts", type=_int_list,
                   default=list(DEFAULT_VIEW_COUNTS), metavar="N,N,...",
                   help="fused-frame snapshot counts (default 5,10,14,19)")
    p.add_argument("--samples", type=_positive_int,
                   default=DEFAULT_SURFACE_SAMPLES, metavar="N",
                   help="surface samples per shape "
                        f"(default {DEFAULT_SURFACE_SAMPLES})")
    p.set_defaults(func=cmd_dataset, parser=p)

    p = sub.add_parser("replay", parents=[common],
                       help="fuse one view at a time, planning after each")
    p.add_argument("--scene", required=True, metavar="JSON")
    p.add_argument("--views", type=_positive_int, default=None, metavar="N",
                   help="viewpoint count (default from config)")
    p.set_defaults(func=cmd_replay, parser=p)

    p = sub.add_parser("export-mesh", parents=[common],
                       help="extract the isosurface as an OBJ or PLY mesh")
    p.add_argument("--volume", required=True, metavar="FILE",
                   help="fused TSDF volume")
    p.set_defaults(func=cmd_export_mesh, parser=p)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
