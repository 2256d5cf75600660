"""Seeded trend experiments: view counts, sampling strategies, relative-pose noise.

One trial is one scene seed evaluated in one cell of the grid.  All cells of
a trial share the scene, the per-camera observations and the PnP hypotheses,
and relative-pose perturbations are standard-normal draws scaled by the cell's
noise level, so cells differ only in what the grid changes.

Within a view set the first camera is the anchor: its extrinsics are exact and
every other camera is displaced around the object by the relative-pose noise.
Pre-refinement error is that of the PnP hypothesis of the frame refinement
picks as reference; post-refinement error is that of the refined pose, both
expressed in the reference camera.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .config import RunConfig, config_hash
from .geom import RigidTransform
from .metrics import accuracy, evaluate_pose
from .pnp import NoPoseError, PnPError, RansacConfig, correspondences_from_maps, ransac_pnp
from .refine import FrameSet, RefineConfig, RefineError, ViewObservation, refine
from .synth import (NoiseSpec, SceneSpec, SynthError, ViewSampling, make_observation,
                    perturb_relative_pose, sample_cameras, sample_view_sets, view_intrinsics)

log = logging.getLogger(__name__)

REPORT_FORMAT = "mvrefine-report/1"
TIMING_KEYS = ("timings", "ms")
AXES = ("views", "strategy", "rot_deg", "trans_level")
CSV_FIELDS = ("scene", "seed", "views", "strategy", "noise", "rot_deg", "trans_level",
              "add_pre", "add_post", "correct_pre", "correct_post", "status", "ms")


def derived_seed(*parts) -> int:
    """A 64-bit seed derived from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Cell:
    views: int
    strategy: str = "farthest"
    rot_deg: float = 0.0
    trans_level: float = 0.0    # translation sigma = trans_level * diameter / 3

    @property
    def key(self) -> str:
        return f"v{self.views}-{self.strategy}-r{self.rot_deg:g}-t{self.trans_level:g}"

    @property
    def noise_label(self) -> str:
        return f"rot={self.rot_deg:g}deg;trans={self.trans_level:g}diam"

    def to_dict(self) -> dict:
        return {"views": self.views, "strategy": self.strategy, "rot_deg": self.rot_deg,
                "trans_level": self.trans_level}


def grid_cells(views, strategies, relpose) -> list:
    """Full factorial grid; ``relpose`` holds (rotation deg, translation level) pairs."""
    return [Cell(int(v), s, float(r), float(t)) for v, s, (r, t) in product(views, strategies, relpose)]


# --- one scene seed -----------------------------------------------------------------

class _Scene:
    """Lazily built observations and hypotheses for one scene seed."""

    def __init__(self, mesh, spec: SceneSpec, noise: NoiseSpec, ransac: RansacConfig):
        self.mesh = mesh
        self.spec = spec
        self.noise = noise
        self.ransac = ransac
        self.cams = sample_cameras(spec)
        self._obs = {}
        self._hyp = {}

    def observation(self, i: int):
        if i not in self._obs:
            K = view_intrinsics(self.spec, self.cams[i])
            self._obs[i] = make_observation(self.spec, self.cams[i], K, self.noise,
                                            [self.spec.seed, 1, i])
        return self._obs[i]

    def hypothesis(self, i: int):
        """PnP pose for camera ``i`` (or None) and the time it took."""
        if i not in self._hyp:
            obs = self.observation(i)
            t0 = time.perf_counter()
            try:
                corrs = correspondences_from_maps(obs.view.pred_nocs, obs.view.pred_mask,
                                                  self.mesh.bounds)
                cfg = RansacConfig(**dict(self.ransac.to_dict(),
                                          seed=derived_seed(self.spec.seed, 4, i)))
                pose = ransac_pnp(corrs, obs.view.intrinsics, cfg).pose
            except (NoPoseError, PnPError):
                pose = None
            self._hyp[i] = (pose, time.perf_counter() - t0)
        return self._hyp[i]

    def camera(self, i: int, cell: Cell, anchor: bool) -> RigidTransform:
        if anchor or (cell.rot_deg == 0 and cell.trans_level == 0):
            return self.cams[i]
        noise = NoiseSpec(0.0, 0.0, 0, cell.rot_deg,
                          NoiseSpec.trans_sigma_for(self.mesh.diameter, cell.trans_level))
        return perturb_relative_pose(self.cams[i], noise, [self.spec.seed, 2, i],
                                     center=self.spec.centroid_world)


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


def run_trial(scene: _Scene, cell: Cell, trial: int, refine_cfg: RefineConfig) -> dict:
    """Evaluate one cell on one scene; failures are recorded, not raised."""
    mesh = scene.mesh
    rec = dict(cell.to_dict(), cell=cell.key, trial=trial, seed=scene.spec.seed, status="ok",
               message="", cameras=None, ref_camera=None, pnp_add=None, add_pre=None,
               adds_pre=None, add_post=None, adds_post=None, correct_pre=False,
               correct_post=False, iterations=0, best_iteration=None)
    t_start = time.perf_counter()
    timings = {"pnp": 0.0, "select": 0.0, "render": 0.0, "backward": 0.0, "step": 0.0}
    try:
        sets = sample_view_sets(scene.cams, ViewSampling(cell.strategy, cell.views),
                                [scene.spec.seed, 3])
        idx = sets[0]
        rec["cameras"] = idx
        views, hyps, pnp_add = [], [], []
        for k, i in enumerate(idx):
            obs = scene.observation(i)
            pose, dt = scene.hypothesis(i)
            timings["pnp"] += dt
            hyps.append(pose)
            pnp_add.append(_finite(evaluate_pose(mesh, obs.gt_pose, pose).error))
            views.append(ViewObservation(obs.view.pred_mask, obs.view.pred_nocs,
                                         obs.view.intrinsics, scene.camera(i, cell, k == 0)))
        rec["pnp_add"] = pnp_add
        res = refine(FrameSet(views, hyps), mesh, refine_cfg)
        for k in ("select", "render", "backward", "step"):
            timings[k] += res.timings.get(k, 0.0)
        r = res.ref_index
        gt = scene.observation(idx[r]).gt_pose
        pre = evaluate_pose(mesh, gt, hyps[r])
        post = evaluate_pose(mesh, gt, res.pose_ref)
        rec.update(ref_camera=idx[r], add_pre=_finite(pre.add_error), adds_pre=_finite(pre.adds_error),
                   add_post=_finite(post.add_error), adds_post=_finite(post.adds_error),
                   correct_pre=pre.correct_at_10pct, correct_post=post.correct_at_10pct,
                   iterations=len(res.loss_trace), best_iteration=res.best_iteration)
        if res.degenerate:
            rec.update(status="degraded", message="no overlap between rendered and predicted masks")
    except (RefineError, SynthError, ValueError) as exc:
        rec.update(status="failed", message=str(exc))
    timings = {k: round(v * 1000.0, 3) for k, v in timings.items()}
    rec["timings"] = timings
    rec["ms"] = round((time.perf_counter() - t_start) * 1000.0, 3)
    return rec


def _run_unit(args) -> list:
    doc, mesh, cells, trial = args
    cfg = RunConfig(doc)
    seed = derived_seed(cfg.seed, trial)
    scene = _Scene(mesh, cfg.scene_spec(mesh, seed), cfg.noise(), cfg.ransac())
    rcfg = cfg.refine()
    return [run_trial(scene, cell, trial, rcfg) for cell in cells]


# --- report ----------------------------------------------------------------------

def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def summarize(cell: Cell, trials: list, diameter: float) -> dict:
    rows = [t for t in trials if t["cell"] == cell.key]
    n = len(rows)
    pnp = [a for t in rows for a in (t["pnp_add"] or [])]
    return dict(
        cell.to_dict(), cell=cell.key, trials=n,
        degraded=sum(t["status"] != "ok" for t in rows),
        accuracy_pre=float(np.mean([t["correct_pre"] for t in rows])) if n else None,
        accuracy_post=float(np.mean([t["correct_post"] for t in rows])) if n else None,
        accuracy_pnp_frames=(accuracy([np.inf if a is None else a for a in pnp], diameter)
                             if pnp else None),
        mean_add_pre=_mean(t["add_pre"] for t in rows),
        mean_add_post=_mean(t["add_post"] for t in rows),
        median_add_post=(float(np.median([t["add_post"] for t in rows if t["add_post"] is not None]))
                         if any(t["add_post"] is not None for t in rows) else None),
    )


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    cells: list
    trials: list
    diameter: float
    timings: dict = field(default_factory=dict)

    def cell(self, views=None, strategy=None, rot_deg=None, trans_level=None) -> dict:
        """Summary of the single cell matching the given coordinates."""
        want = {"views": views, "strategy": strategy, "rot_deg": rot_deg, "trans_level": trans_level}
        hits = [c for c in self.cells
                if all(v is None or getattr(c, k) == v for k, v in want.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} cells match {want}")
        return summarize(hits[0], self.trials, self.diameter)

    def summaries(self) -> list:
        return [summarize(c, self.trials, self.diameter) for c in self.cells]

    @property
    def degraded_count(self) -> int:
        return sum(t["status"] != "ok" for t in self.trials)

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "config": self.config, "config_hash": self.config_hash,
                "diameter": self.diameter, "cells": self.summaries(), "trials": self.trials,
                "timings": self.timings}

    def write(self, out_dir, figures: bool = True) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "csv": out / "trials.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for t in self.trials:
                w.writerow([t["trial"], t["seed"], t["views"], t["strategy"],
                            Cell(t["views"], t["strategy"], t["rot_deg"], t["trans_level"]).noise_label,
                            t["rot_deg"], t["trans_level"], _fmt(t["add_pre"]), _fmt(t["add_post"]),
                            int(t["correct_pre"]), int(t["correct_post"]), t["status"], t["ms"]])
        for axis in self.swept_axes():
            p = out / f"accuracy_by_{axis}.tsv"
            p.write_text(self.axis_tsv(axis))
            paths[f"tsv_{axis}"] = p
        if figures:
            from .plotting import plot_report
            paths.update(plot_report(self, out))
        return paths

    def swept_axes(self) -> list:
        axes = [a for a in AXES if len({getattr(c, a) for c in self.cells}) > 1]
        return axes or ["views"]

    def axis_tsv(self, axis: str) -> str:
        """Blocks (one per setting of the other axes) separated by two blank lines."""
        others = [a for a in AXES if a != axis]
        groups = {}
        for s in self.summaries():
            groups.setdefault(tuple(s[a] for a in others), []).append(s)
        blocks = []
        for key in sorted(groups, key=str):
            rows = sorted(groups[key], key=lambda s: s[axis])
            lines = ["# " + " ".join(f"{a}={v}" for a, v in zip(others, key)),
                     "\t".join([axis, "trials", "accuracy_pre", "accuracy_post",
                                "mean_add_pre", "mean_add_post"])]
            for s in rows:
                lines.append("\t".join(str(x) for x in (
                    s[axis], s["trials"], _fmt(s["accuracy_pre"]), _fmt(s["accuracy_post"]),
                    _fmt(s["mean_add_pre"]), _fmt(s["mean_add_post"]))))
            blocks.append("\n".join(lines))
        return "\n\n\n".join(blocks) + "\n"


def _fmt(x) -> str:
    return "nan" if x is None else repr(float(x))


def strip_timings(obj):
    """Copy of a report document without timing fields."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


# --- driver ----------------------------------------------------------------------

class ManifestMismatch(ValueError):
    pass


def _load_manifest(out: Path, chash: str) -> dict:
    """Completed trial records keyed by (cell, trial) from an earlier run."""
    man = out / "manifest.json"
    done = {}
    if not man.exists():
        return done
    meta = json.loads(man.read_text())
    if meta.get("config_hash") != chash:
        raise ManifestMismatch(f"{out} holds results for a different config "
                               f"({meta.get('config_hash', '?')[:12]})")
    path = out / "trials.jsonl"
    if path.exists():
        for line in path.read_text().splitlines():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue    # torn write from an interrupted run
            done[rec["cell"], rec["trial"]] = rec
    return done


def run_trend_experiment(cfg: RunConfig, cells=None, trials: int | None = None, out_dir=None,
                         jobs: int | None = None, mesh=None, write: bool = True,
                         figures: bool | None = None) -> ExperimentReport:
    """Run every cell on ``trials`` seeded scenes and assemble the report.

    With ``out_dir`` set, finished trials are appended to ``trials.jsonl``
    under a manifest keyed by the config hash, and a rerun with the same
    config resumes from them.
    """
    sweep = cfg.doc["sweep"]
    if cells is None:
        cells = grid_cells(sweep["views"], sweep["strategies"], sweep["relpose"])
    trials = int(trials or sweep["trials"])
    jobs = int(jobs or sweep["jobs"])
    figures = sweep["figures"] if figures is None else figures
    mesh = mesh if mesh is not None else cfg.load_mesh()
    echo = dict(cfg.doc, sweep=dict(sweep, trials=trials, jobs=1,
                                    cells=[c.to_dict() for c in cells]))
    echo["paths"] = dict(echo["paths"], output_dir=None)
    chash = config_hash(echo)
    t0 = time.perf_counter()

    done = {}
    sink = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        done = _load_manifest(out, chash)
        (out / "manifest.json").write_text(json.dumps(
            {"format": REPORT_FORMAT, "config_hash": chash, "trials": trials,
             "cells": [c.key for c in cells]}, indent=1, sort_keys=True) + "\n")
        sink = open(out / "trials.jsonl", "a")
    pending = [k for k in range(trials) if any((c.key, k) not in done for c in cells)]
    if done:
        log.info("resuming: %d of %d scenes already complete", trials - len(pending), trials)
    units = [(cfg.doc, mesh, cells, k) for k in pending]

    def collect(recs):
        for r in recs:
            done[r["cell"], r["trial"]] = r
            if sink is not None:
                sink.write(json.dumps(r, sort_keys=True) + "\n")
        if sink is not None:
            sink.flush()

    try:
        if jobs > 1 and len(units) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for recs in pool.map(_run_unit, units):
                    collect(recs)
        else:
            for u in units:
                collect(_run_unit(u))
    finally:
        if sink is not None:
            sink.close()

    order = {c.key: i for i, c in enumerate(cells)}
    recs = sorted((r for (ck, k), r in done.items() if ck in order and k < trials),
                  key=lambda r: (order[r["cell"]], r["trial"]))
    stage = {k: round(sum(r["timings"][k] for r in recs), 3)
             for k in ("pnp", "select", "render", "backward", "step")}
    report = ExperimentReport(echo, chash, list(cells), recs, mesh.diameter,
                              {"wall_clock_s": round(time.perf_counter() - t0, 3), "stage_ms": stage})
    if write and out_dir is not None:
        report.write(out_dir, figures=figures)
    return report
