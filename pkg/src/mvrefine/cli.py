"""Command-line frontend: ``mvrefine {synth,refine,sweep,export-labels,gradcheck}``.

Exit codes: 0 success, 1 trial-level degradations (``sweep``) or a failed
gradient check, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash
from .experiment import ManifestMismatch, derived_seed, run_trend_experiment
from .geom import RigidTransform, compose
from .mesh import MeshError
from .metrics import evaluate_pose
from .pnp import NoPoseError, PnPError, RansacConfig, correspondences_from_maps, ransac_pnp
from .refine import FrameSet, RefineError, refine, relative_transform
from .synth import (SynthError, ViewSampling, camera_center, load_bundle_mesh, make_observation,
                    perturb_relative_pose, read_scene_bundle, sample_cameras, sample_view_sets,
                    view_intrinsics, write_bundle_mesh, write_scene_bundle)

log = logging.getLogger("mvrefine")

EXIT_OK, EXIT_DEGRADED, EXIT_INVALID = 0, 1, 2
REFINE_FILE = "refine.json"


class UsageError(Exception):
    """Invalid input; reported and mapped to exit code 2."""


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, check_paths=False)
    cfg = cfg.with_overrides(seed=args.seed, views=getattr(args, "views", None),
                             strategy=getattr(args, "strategy", None), out=args.out,
                             jobs=args.jobs, scene_dir=getattr(args, "scene", None))
    cfg.check_paths()
    level = "debug" if args.verbose else cfg.doc["verbosity"]
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")
    return cfg


def _content_hash(cfg: RunConfig) -> str:
    """Config hash without the output location, so moving a run keeps its hash."""
    doc = dict(cfg.doc, paths=dict(cfg.doc["paths"], output_dir=None))
    return config_hash(doc)


# --- synth -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.doc["paths"]["scene_dir"] or cfg.output_dir / "scene")
    mesh = cfg.load_mesh()
    spec = cfg.scene_spec(mesh, cfg.seed)
    noise = cfg.noise()
    cams = sample_cameras(spec)
    observations = []
    for i, cam in enumerate(cams):
        K = view_intrinsics(spec, cam)
        observations.append(make_observation(spec, cam, K, noise, [spec.seed, 1, i]))
    reported = None
    if noise.relpose_rot_sigma_deg > 0 or noise.relpose_trans_sigma > 0:
        # every camera's stored extrinsics carry independent relative-pose noise
        reported = [perturb_relative_pose(cam, noise, [spec.seed, 2, i], center=spec.centroid_world)
                    for i, cam in enumerate(cams)]
    out.mkdir(parents=True, exist_ok=True)
    mesh_file = write_bundle_mesh(out, mesh)
    source = cfg.doc["paths"]["mesh"] or f"builtin:{cfg.doc['mesh']['builtin']}"
    write_scene_bundle(out, spec, noise, observations,
                       mesh_info={"file": mesh_file, "source": source, "faces": mesh.face_count},
                       extra={"config_hash": _content_hash(cfg)})
    if reported is not None:
        doc = json.loads((out / "scene.json").read_text())
        for entry, cam in zip(doc["views"], reported):
            entry["gt_cam_from_world"] = entry["cam_from_world"]
            entry["cam_from_world"] = cam.to_list()
        _dump(out / "scene.json", doc)
    print(f"scene {out}: {len(observations)} views, {mesh.face_count} faces, "
          f"diameter {mesh.diameter:.4f} m")
    for i, (obs, cam) in enumerate(zip(observations, cams)):
        dist = np.linalg.norm(camera_center(cam) - spec.centroid_world)
        print(f"  view {i:3d}  distance {dist:.3f} m  mask {int(obs.view.pred_mask.sum()):5d} px  "
              f"outliers {int(obs.outlier_mask.sum()):5d}")
    return EXIT_OK


# --- refine ----------------------------------------------------------------------

def _scene_dir(cfg: RunConfig, args) -> Path:
    d = getattr(args, "scene", None) or cfg.doc["paths"]["scene_dir"]
    if d is None:
        raise UsageError("no scene directory given (use --scene or paths.scene_dir)")
    return Path(d)


def _hypothesis(view, mesh, ransac: RansacConfig, seed: int, i: int):
    corrs = correspondences_from_maps(view.pred_nocs, view.pred_mask, mesh.bounds)
    cfg = RansacConfig(**dict(ransac.to_dict(), seed=derived_seed(seed, 4, i)))
    try:
        res = ransac_pnp(corrs, view.intrinsics, cfg)
    except (NoPoseError, PnPError) as exc:
        log.info("view %d: no PnP pose (%s)", i, exc)
        return None, 0
    return res.pose, len(res.inlier_indices)


def cmd_refine(args) -> int:
    cfg = _config(args)
    scene = _scene_dir(cfg, args)
    bundle = read_scene_bundle(scene)
    mesh = load_bundle_mesh(bundle)
    sampling = ViewSampling(cfg.doc["sampling"]["strategy"], cfg.doc["sampling"]["set_size"])
    cams = [v.cam_from_world for v in bundle.views]
    sets = sample_view_sets(cams, sampling, [cfg.seed, 3])
    rcfg = cfg.refine()
    ransac = cfg.ransac()
    hyps = {}
    records = []
    for idx in sets:
        for i in idx:
            if i not in hyps:
                hyps[i] = _hypothesis(bundle.views[i], mesh, ransac, cfg.seed, i)
        rec = {"views": idx, "hypotheses": [None if hyps[i][0] is None else hyps[i][0].to_list()
                                            for i in idx],
               "pnp_inliers": [hyps[i][1] for i in idx], "status": "ok"}
        fs = FrameSet([bundle.views[i] for i in idx], [hyps[i][0] for i in idx])
        try:
            res = refine(fs, mesh, rcfg)
        except RefineError as exc:
            rec.update(status="failed", message=str(exc))
            records.append(rec)
            continue
        r = res.ref_index
        rec.update(ref_view=idx[r], pose_ref=res.pose_ref.to_list(),
                   view_poses={str(i): T.to_list() for i, T in zip(idx, res.per_frame_poses)},
                   iou=res.per_frame_iou, loss_trace=res.loss_trace,
                   best_iteration=res.best_iteration, degenerate=res.degenerate,
                   timings={k: round(v * 1000.0, 3) for k, v in res.timings.items()})
        if res.degenerate:
            rec["status"] = "degraded"
        gt = bundle.gt_poses[idx[r]]
        if gt is not None:
            pre = evaluate_pose(mesh, gt, fs.hypotheses[r])
            post = evaluate_pose(mesh, gt, res.pose_ref)
            rec.update(add_pre=pre.add_error if np.isfinite(pre.add_error) else None,
                       add_post=post.add_error, correct_pre=pre.correct_at_10pct,
                       correct_post=post.correct_at_10pct)
        records.append(rec)
    out = cfg.output_dir
    doc = {"format": "mvrefine-refine/1", "scene": str(scene), "config": cfg.doc,
           "config_hash": _content_hash(cfg), "diameter": mesh.diameter, "sets": records}
    _dump(out / REFINE_FILE, doc)
    traces = [(rec["loss_trace"], f"views {rec['views']}") for rec in records if "loss_trace" in rec]
    if traces:
        from .plotting import plot_loss_trace
        plot_loss_trace(traces[0][0], out / "loss_trace.png", traces[0][1])
    bad = sum(rec["status"] != "ok" for rec in records)
    print(f"refined {len(records)} sets of {sampling.set_size} views ({sampling.strategy}); "
          f"{bad} degraded; wrote {out / REFINE_FILE}")
    for rec in records:
        line = f"  views {rec['views']}  {rec['status']}"
        if "ref_view" in rec:
            line += f"  ref {rec['ref_view']}"
        if rec.get("add_post") is not None:
            pre = rec["add_pre"]
            line += (f"  ADD pre {'none' if pre is None else f'{100 * pre / mesh.diameter:.3f}%'}"
                     f"  post {100 * rec['add_post'] / mesh.diameter:.3f}% of diameter")
        print(line)
    # degraded sets are flagged in the output; the command itself succeeded
    return EXIT_OK


# --- export-labels ---------------------------------------------------------------

def cmd_export_labels(args) -> int:
    cfg = _config(args)
    scene = _scene_dir(cfg, args)
    refined = Path(args.refined) if args.refined else cfg.output_dir / REFINE_FILE
    if not refined.is_file():
        raise UsageError(f"refinement output {refined} not found (run `mvrefine refine` first)")
    try:
        doc = json.loads(refined.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{refined} is not valid JSON: {exc}") from exc
    bundle = read_scene_bundle(scene)
    views = bundle.views
    out = Path(args.out) if args.out else scene
    written = 0
    for rec in doc.get("sets", []):
        if "pose_ref" not in rec:
            continue
        ref = rec["ref_view"]
        pose_ref = RigidTransform.from_list(rec["pose_ref"])
        for f in rec["views"]:
            label = pose_ref if f == ref else compose(relative_transform(views, ref, f), pose_ref)
            _dump(out / f"view_{f:04d}_label.json",
                  {"view": f, "cam_from_model": label.to_list(), "ref_view": ref,
                   "set": rec["views"], "source": str(refined)})
            written += 1
    print(f"wrote {written} labels to {out}")
    return EXIT_OK


# --- sweep -----------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = cfg.output_dir
    report = run_trend_experiment(cfg, out_dir=out)
    print(f"{len(report.trials)} trials in {len(report.cells)} cells; report in {out}")
    print(f"  {'cell':32s} {'n':>4s} {'acc pre':>8s} {'acc post':>8s} {'ADD post %diam':>14s}")
    for s in report.summaries():
        mean = s["mean_add_post"]
        mean = "-" if mean is None else f"{100 * mean / report.diameter:.2f}"
        print(f"  {s['cell']:32s} {s['trials']:4d} {100 * s['accuracy_pre']:7.1f}% "
              f"{100 * s['accuracy_post']:7.1f}% {mean:>14s}")
    if report.degraded_count:
        print(f"{report.degraded_count} trials degraded or failed", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


# --- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import DEFAULT_STEP, run_gradcheck

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    seed = 0 if args.seed is None else args.seed
    res = run_gradcheck(args.instances, seed, args.step or DEFAULT_STEP)
    for r in res["results"]:
        print(f"  instance seed {r.seed:4d}: max relative error {r.max_rel_error:.3e} "
              f"over {r.checked} components")
    print(f"max relative error {res['max_rel_error']:.3e} ({res['faces']} faces, "
          f"step {res['step']:g}, {res['seconds']:.1f} s)")
    if args.out:
        _dump(Path(args.out) / "gradcheck.json",
              {"max_rel_error": res["max_rel_error"], "step": res["step"],
               "results": [r.to_dict() for r in res["results"]]})
    return EXIT_OK if res["max_rel_error"] < args.tolerance else EXIT_DEGRADED


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvrefine", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    views = argparse.ArgumentParser(add_help=False)
    views.add_argument("--views", type=int, choices=(1, 2, 4), help="views per set")
    views.add_argument("--strategy", choices=("closest", "random", "farthest"),
                       help="view sampling strategy")
    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scene", help="scene bundle directory (overrides paths.scene_dir)")

    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene bundle")
    s.set_defaults(func=cmd_synth)
    s = sub.add_parser("refine", parents=[common, views, scene],
                       help="PnP + multi-view refinement of every view set in a bundle")
    s.set_defaults(func=cmd_refine)
    s = sub.add_parser("sweep", parents=[common, views], help="run the trend experiment grid")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("export-labels", parents=[common, scene],
                       help="write refined per-view pose labels")
    s.add_argument("--refined", help=f"refinement output (default OUT/{REFINE_FILE})")
    s.set_defaults(func=cmd_export_labels)
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=10)
    s.add_argument("--step", type=float, default=None)
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SynthError, MeshError, ManifestMismatch) as exc:
        print(f"mvrefine {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"mvrefine {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
