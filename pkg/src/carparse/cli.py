"""Command-line entry point: ``carparse <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig, load_config, manifest, substream_seed
from .errors import CarParseError, FormatError

log = logging.getLogger("carparse")

LOG_ENV = "CARPARSE_LOG_LEVEL"


class UsageError(CarParseError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# Artifact I/O
# --------------------------------------------------------------------------

def save_cloud(cloud, path) -> None:
    arrays = {"points": cloud.points}
    if cloud.labels is not None:
        arrays["labels"] = cloud.labels
    if cloud.normals is not None:
        arrays["normals"] = cloud.normals
    np.savez(path, **arrays)


def load_cloud(path, spacing: float = 0.01, seed: int = 0):
    """A labeled point cloud from ``.npz`` or, re-sampled uniformly, from a labeled ``.obj``."""
    from .geometry import PointCloud, load_obj, remesh_uniform

    path = Path(path)
    if path.suffix == ".obj":
        return remesh_uniform(load_obj(path), spacing, seed)
    try:
        with np.load(path) as z:
            return PointCloud(z["points"], z["labels"] if "labels" in z else None,
                              z["normals"] if "normals" in z else None)
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a point cloud archive ({exc})") from exc


def _space(args, cfg: PipelineConfig):
    from .shape_space import family_shape_space, load_shape_space

    if getattr(args, "space", None):
        return load_shape_space(args.space)
    return family_shape_space(cfg.space.family_models, seed=substream_seed(cfg.seed, "space"))


def _scene_config(cfg: PipelineConfig):
    return replace(cfg.scene, rng_seed=substream_seed(cfg.seed, "scenes"))


def _scene_stems(directory) -> List[str]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    return sorted(p.name[:-len("_gt.json")] for p in d.glob("*_gt.json"))


def _write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)


# --------------------------------------------------------------------------
# Subcommands: each returns (report, output paths)
# --------------------------------------------------------------------------

def cmd_remesh(args, cfg, out: Path):
    from .geometry import load_obj, remesh_uniform

    cloud = remesh_uniform(load_obj(args.mesh), args.spacing or cfg.remesh_spacing,
                           substream_seed(cfg.seed, "remesh"))
    path = out / "remeshed.npz"
    save_cloud(cloud, path)
    return {"points": len(cloud)}, [path]


def cmd_align(args, cfg, out: Path):
    from .registration import icp_align, initial_alignment

    seed = substream_seed(cfg.seed, "remesh")
    src = load_cloud(args.source, cfg.remesh_spacing, seed)
    tgt = load_cloud(args.target, cfg.remesh_spacing, seed)
    res = icp_align(src, tgt, initial_alignment(src, tgt))
    t = res.transform
    report = {"rotation": t.rotation.tolist(), "translation": t.translation.tolist(),
              "scale": t.scale, "final_rms": res.final_rms, "iterations": res.iterations,
              "converged": res.converged, "coverage": res.coverage}
    path = out / "alignment.json"
    _write_json(path, report)
    return report, [path]


def cmd_correspond(args, cfg, out: Path):
    from .registration import dense_correspond, save_correspondences

    seed = substream_seed(cfg.seed, "remesh")
    cmap = dense_correspond(load_cloud(args.template, cfg.remesh_spacing, seed),
                            load_cloud(args.model, cfg.remesh_spacing, seed))
    table, meta = out / "correspondence.bin", out / "correspondence.json"
    save_correspondences(cmap, table)
    report = {"points": len(cmap.indices), "coverage": cmap.coverage, "threshold": cmap.threshold,
              "median_residual": float(np.median(cmap.residuals))}
    _write_json(meta, report)
    return report, [table, meta]


def cmd_transfer_labels(args, cfg, out: Path):
    from .geometry import PointCloud
    from .registration import CorrespondenceMap, load_correspondences, median_spacing, transfer_labels

    seed = substream_seed(cfg.seed, "remesh")
    template = load_cloud(args.template, cfg.remesh_spacing, seed)
    model = load_cloud(args.model, cfg.remesh_spacing, seed)
    if template.labels is None:
        raise FormatError("template cloud carries no labels")
    idx, res = load_correspondences(args.correspondence)
    if len(idx) != len(template):
        raise FormatError(f"correspondence has {len(idx)} rows, template has {len(template)} points")
    thr = args.threshold
    meta = Path(args.correspondence).with_suffix(".json")
    if thr is None and meta.exists():
        thr = float(json.loads(meta.read_text())["threshold"])
    if thr is None:
        thr = 2.0 * median_spacing(model)
    cmap = CorrespondenceMap(idx, res, float(np.mean(res <= thr)), thr, model.points)
    labels = transfer_labels(cmap, template.labels)
    path = out / "labeled_model.npz"
    save_cloud(PointCloud(model.points, labels, model.normals), path)
    return {"points": len(labels), "labels": int(len(np.unique(labels))), "threshold": thr}, [path]


def cmd_build_space(args, cfg, out: Path):
    from .shape_space import build_shape_space, save_shape_space

    if args.models:
        clouds = [load_cloud(p) for p in args.models]
        space = build_shape_space(clouds, cfg.space.dim, point_labels=clouds[0].labels)
    else:
        space = _space(argparse.Namespace(space=None), cfg)
    path = out / "space.cpss"
    save_shape_space(space, path)
    return {"points": int(space.N), "dim": int(space.dim), "n_effective": int(space.n_effective),
            "models": len(args.models) if args.models else cfg.space.family_models}, [path]


def cmd_sample_shape(args, cfg, out: Path):
    space = _space(args, cfg)
    rng = np.random.default_rng(substream_seed(cfg.seed, "sample-shape"))
    params = np.clip(rng.standard_normal((args.count, space.dim)), -args.clip, args.clip)
    points = np.stack([space.vertices(p) for p in params]) if args.count else np.zeros((0, space.N, 3))
    path = out / "shapes.npz"
    np.savez(path, params=params, points=points)
    return {"count": args.count, "dim": int(space.dim)}, [path]


def cmd_synth_scenes(args, cfg, out: Path):
    from .scene import place_scene, rasterize, save_label_maps

    scene_dir = out / "scenes"
    outputs: List[Path] = []
    warnings: List[str] = []
    n_cars = 0
    if args.count > 0:
        space = _space(args, cfg)
        scfg = _scene_config(cfg)
        for k in range(args.start, args.start + args.count):
            scene = place_scene(scfg, space, k)
            maps = rasterize(scene, space)
            maps.check()
            paths = save_label_maps(maps, scene, scene_dir, f"scene_{k:05d}")
            outputs += [Path(p) for p in paths.values()]
            warnings += [f"scene {k}: {w}" for w in scene.warnings]
            n_cars += len(scene.instances)
    return {"scenes": args.count, "cars": n_cars, "warnings": warnings}, outputs


def _ground(gt: dict):
    from .scene import ground_plane

    return ground_plane(float(gt["camera_height"]), float(gt["camera_pitch"]))


def cmd_solve_pose(args, cfg, out: Path):
    from .scene import load_label_maps
    from .solver import CentroidModel, solve_scene

    space = _space(args, cfg)
    results: Dict[str, dict] = {}
    counts = {"solved": 0, "skipped": 0, "failed": 0, "uncertain": 0}
    model = None
    for stem in _scene_stems(args.scenes):
        maps, gt = load_label_maps(args.scenes, stem)
        if model is None or model.camera != maps.camera:
            model = CentroidModel(space, maps.camera)
        ests, diags = solve_scene(maps.part_map, maps.instance_map, space, maps.camera,
                                  maps.depth_map, _ground(gt), cfg.refine, model=model)
        for d in diags:
            counts[d["status"]] += 1
        results[stem] = {"estimates": [e.to_dict() | {"score": e.score} for e in ests],
                         "diagnostics": diags}
    path = out / "poses.json"
    _write_json(path, results)
    return {"scenes": len(results), **counts}, [path]


def _a3dp_records(scenes_dir, poses_path):
    from .metrics import Car3D, EvalRecord
    from .pose import Camera, CarPose

    try:
        poses = json.loads(Path(poses_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{poses_path}: unreadable pose file ({exc})") from exc
    records = []
    for stem in _scene_stems(scenes_dir):
        gt = json.loads((Path(scenes_dir) / f"{stem}_gt.json").read_text())
        cam = Camera.from_dict(gt["render_camera"])
        gts = [Car3D(CarPose.from_dict(r["pose"]), np.array(r["shape"])) for r in gt["records"]]
        preds = [Car3D(CarPose.from_dict(e["pose"]), np.array(e["shape"]), float(e.get("score", 1.0)))
                 for e in poses.get(stem, {}).get("estimates", [])]
        records.append(EvalRecord(cam, preds, gts))
    return records


def _boxes(path) -> List[list]:
    from .metrics import Box2D

    try:
        data = json.loads(Path(path).read_text())
        return [[Box2D(tuple(b["box"]), float(b["azimuth"]), float(b.get("score", 1.0))) for b in img]
                for img in data["images"]]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: expected {{'images': [[{{box, azimuth, score}}]]}} ({exc})") from exc


def _label_png(path) -> np.ndarray:
    from PIL import Image

    try:
        return np.array(Image.open(path)).astype(np.int64)
    except OSError as exc:
        raise FormatError(f"{path}: unreadable label map ({exc})") from exc


def cmd_eval(args, cfg, out: Path):
    from . import metrics

    if args.metric == "a3dp":
        space = _space(args, cfg)
        records = _a3dp_records(args.scenes, args.poses)
        table = []
        for mode in ("abs", "rel"):
            r = metrics.a3dp(records, space, cfg.a3dp, mode)
            table.append({"mode": mode, "mean": r.mean, "c-l": r.c_l, "c-s": r.c_s,
                          "predictions": r.n_preds, "ground_truth": r.n_gts})
        report = {"metric": "a3dp", "table": table}
    elif args.metric == "aos":
        ap, aos, os_ = metrics.aos_os(_boxes(args.pred), _boxes(args.gt), args.iou)
        report = {"metric": "aos", "table": [{"AP": ap, "AOS": aos, "OS": os_}]}
    else:
        from .taxonomy import full_taxonomy

        pred, gt = _label_png(args.pred), _label_png(args.gt)
        tax = full_taxonomy()
        if args.reduced:
            pred, gt = tax.reduce_label_map(pred), tax.reduce_label_map(gt)
            tax = tax.reduced
        iou, miou = metrics.part_iou(pred, gt, tax)
        rows = [{"class": tax.name_of(i), "iou": None if np.isnan(v) else float(v)}
                for i, v in enumerate(iou)]
        report = {"metric": "iou", "mIoU": miou, "table": rows}
    path = out / f"eval_{args.metric}.json"
    _write_json(path, report)
    return report, [path]


def cmd_gradcheck(args, cfg, out: Path):
    from .losses import run_gradcheck

    report = run_gradcheck(args.points, seed=substream_seed(cfg.seed, "gradcheck"))
    report = {"tolerance": args.tolerance,
              "passed": all(v["max_relative_error"] < args.tolerance for v in report.values()),
              "table": [{"loss": k, **v} for k, v in report.items()]}
    path = out / "gradcheck.json"
    _write_json(path, report)
    return report, [path]


def cmd_stats(args, cfg, out: Path):
    from .scene import format_stats, place_scene, pose_stats

    if args.scenes:
        az, dist = [], []
        for stem in _scene_stems(args.scenes):
            gt = json.loads((Path(args.scenes) / f"{stem}_gt.json").read_text())
            for r in gt["records"]:
                az.append(r["pose"]["theta"][0])
                dist.append(r["pose"]["distance"])
    else:
        space, scfg = _space(args, cfg), _scene_config(cfg)
        scenes = [place_scene(scfg, space, k) for k in range(args.count)]
        az = [i.pose.theta[0] for s in scenes for i in s.instances]
        dist = [i.pose.distance for s in scenes for i in s.instances]
    stats = pose_stats(np.array(az), np.array(dist))
    path = out / "stats.json"
    _write_json(path, stats)
    if args.format == "csv":
        return {"text": format_stats(stats)}, [path]
    return stats, [path]


# --------------------------------------------------------------------------
# Parser and driver
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON (or a run manifest)")
    common.add_argument("--seed", type=int, help="master seed; overrides the configuration")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for compiled kernels")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="report format")

    p = _Parser(prog="carparse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("remesh", parents=[common], help="uniformly re-sample a labeled mesh")
    s.add_argument("mesh")
    s.add_argument("--spacing", type=float)

    s = sub.add_parser("align", parents=[common], help="similarity ICP of source onto target")
    s.add_argument("source")
    s.add_argument("target")

    s = sub.add_parser("correspond", parents=[common], help="dense template-to-model correspondence")
    s.add_argument("template")
    s.add_argument("model")

    s = sub.add_parser("transfer-labels", parents=[common], help="copy template part labels to a model")
    s.add_argument("template")
    s.add_argument("model")
    s.add_argument("correspondence")
    s.add_argument("--threshold", type=float)

    s = sub.add_parser("build-space", parents=[common], help="PCA shape space")
    s.add_argument("--models", nargs="*", help="corresponded model clouds; default: procedural family")

    for name, text in (("sample-shape", "draw random shapes"), ("synth-scenes", "render synthetic scenes"),
                       ("solve-pose", "estimate poses from label maps"), ("stats", "pose statistics")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--space", help="shape-space file; default: built from the configuration")
        if name == "sample-shape":
            s.add_argument("--count", type=int, default=10)
            s.add_argument("--clip", type=float, default=2.0)
        if name == "synth-scenes":
            s.add_argument("--count", type=int, default=10)
            s.add_argument("--start", type=int, default=0)
        if name == "solve-pose":
            s.add_argument("--scenes", required=True)
        if name == "stats":
            s.add_argument("--scenes")
            s.add_argument("--count", type=int, default=100)

    s = sub.add_parser("eval", parents=[common], help="evaluation metrics")
    s.add_argument("metric", choices=("a3dp", "aos", "iou"))
    s.add_argument("--space")
    s.add_argument("--scenes", help="a3dp: directory of rendered scenes")
    s.add_argument("--poses", help="a3dp: output of solve-pose")
    s.add_argument("--pred", help="aos: boxes JSON; iou: label PNG")
    s.add_argument("--gt", help="aos: boxes JSON; iou: label PNG")
    s.add_argument("--iou", type=float, default=0.7, help="aos: box overlap threshold")
    s.add_argument("--reduced", action="store_true", help="iou: score on the reduced taxonomy")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of loss gradients")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=1e-4)
    return p


COMMANDS = {"remesh": cmd_remesh, "align": cmd_align, "correspond": cmd_correspond,
            "transfer-labels": cmd_transfer_labels, "build-space": cmd_build_space,
            "sample-shape": cmd_sample_shape, "synth-scenes": cmd_synth_scenes,
            "solve-pose": cmd_solve_pose, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "stats": cmd_stats}

_REQUIRED = {("eval", "a3dp"): ("scenes", "poses"), ("eval", "aos"): ("pred", "gt"),
             ("eval", "iou"): ("pred", "gt")}


def format_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=1, sort_keys=True)
    if "text" in report:
        return report["text"]
    buf = io.StringIO()
    rows = report.get("table")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for k in sorted(report):
            w.writerow([k, json.dumps(report[k]) if isinstance(report[k], (list, dict)) else report[k]])
    return buf.getvalue().rstrip("\n")


def run(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        for key in _REQUIRED.get((command, getattr(args, "metric", None)), ()):
            if getattr(args, key) is None:
                raise UsageError(f"{command} {args.metric} needs --{key}")
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads:
            import numba

            numba.set_num_threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report, outputs = COMMANDS[command](args, cfg, out)
        _write_json(out / "manifest.json", manifest(command, argv, cfg, outputs))
        print(format_report(report, args.format), file=stdout)
        if command == "gradcheck" and not report["passed"]:
            return 1
        return 0
    except CarParseError as exc:
        err = {"error": exc.code, "message": str(exc), "command": command}
    except (ValueError, OSError) as exc:
        err = {"error": "invalid_input" if isinstance(exc, ValueError) else "io_error",
               "message": str(exc), "command": command}
    print(json.dumps(err), file=stderr)
    return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
