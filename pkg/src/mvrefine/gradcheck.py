"""Finite-difference check of the refinement objective's analytic gradient.

Each instance is a random two-view scene of a 500-face object rendered at
64x64, with noisy hard-rendered observations and a perturbed hypothesis.
The gradient of the joint loss (at a fixed robust scale) w.r.t. the nine
update parameters is compared with central differences.

The soft renderer is stiff (a ``gamma = 1e-4`` depth softmax, and sliver
triangles on the silhouette whose barycentrics move fast), so the difference
step must be small: ``1e-4`` mostly measures truncation error.  Each
component is differenced at ``h`` and ``h / 10`` and the closer estimate is
kept; a wrong analytic value will not match either.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .geom import CameraIntrinsics, RigidTransform, axis_angle_to_matrix, compose, look_at, random_rotation
from .mesh import NocsMesh, asymmetric_blob
from .refine import (IDENTITY_PARAMS, FrameSet, RefineConfig, ViewObservation, adaptive_scale,
                     objective)
from .render import render_hard

DEFAULT_STEP = 1e-7
MAGNITUDE_FLOOR = 1e-8


def central_differences(f, x, h: float = DEFAULT_STEP, refinements: int = 1) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for steps ``h, h/10, ...``; shape (steps, n)."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for k in range(refinements + 1):
        s = h / 10 ** k
        out.append([(f(x + s * e) - f(x - s * e)) / (2.0 * s) for e in np.eye(len(x))])
    return np.array(out)


def relative_errors(analytic, numeric, floor: float = MAGNITUDE_FLOOR):
    """Per-component relative error of ``analytic`` against the best of the ``numeric`` rows.

    Returns ``(errors, best_numeric)``; components with ``|analytic| <= floor``
    report zero.
    """
    g = np.asarray(analytic, dtype=np.float64)
    fd = np.atleast_2d(numeric)
    rel = np.abs(fd - g) / np.abs(fd).clip(min=1e-300)
    pick = rel.argmin(axis=0)
    best = fd[pick, np.arange(len(g))]
    err = rel[pick, np.arange(len(g))]
    return np.where(np.abs(g) > floor, err, 0.0), best


@dataclass(frozen=True)
class GradCheckResult:
    seed: int
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    checked: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "max_rel_error": self.max_rel_error, "checked": self.checked,
                "analytic": self.analytic.tolist(), "numeric": self.numeric.tolist()}


def gradcheck_mesh() -> NocsMesh:
    return NocsMesh.from_arrays(*asymmetric_blob(0.2, rings=11, segments=25))


def gradcheck_instance(mesh: NocsMesh, seed: int, size: int = 64):
    """A two-view frame set with a perturbed hypothesis in view 0, plus start parameters."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(1.25 * size, 1.25 * size, size / 2, size / 2, size, size)
    obj = RigidTransform(random_rotation(rng), np.zeros(3))
    views = []
    for _ in range(2):
        az = rng.uniform(0.0, 2.0 * np.pi)
        el = rng.uniform(0.3, 1.2)
        eye = 0.6 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cam = look_at(eye, np.zeros(3))
        out = render_hard(mesh, compose(cam, obj), K)
        nocs = out.nocs + rng.normal(0.0, 0.01, out.nocs.shape)
        views.append(ViewObservation(out.mask > 0.5, nocs, K, cam))
    pert = RigidTransform(axis_angle_to_matrix(rng.normal(size=3) * 0.08), rng.normal(size=3) * 0.01)
    hyp = compose(views[0].cam_from_world, compose(pert, obj))
    params = IDENTITY_PARAMS + rng.normal(size=9) * np.r_[[0.02] * 6, [0.005] * 3]
    return FrameSet(views, [hyp, None]), params


def check_instance(mesh: NocsMesh, seed: int, h: float = DEFAULT_STEP, size: int = 64,
                   cfg: RefineConfig | None = None) -> GradCheckResult:
    fs, p0 = gradcheck_instance(mesh, seed, size)
    obj = objective(fs, mesh, 0, fs.hypotheses[0], cfg)
    c = adaptive_scale(np.concatenate(obj.residuals(obj.forward(p0))), obj.cfg)
    _, g = obj.loss_and_grad(p0, c)
    rel, fd = relative_errors(g, central_differences(lambda p: obj.loss(p, c), p0, h))
    return GradCheckResult(seed, g, fd, float(rel.max()), int((np.abs(g) > MAGNITUDE_FLOOR).sum()))


def run_gradcheck(instances: int = 10, seed: int = 0, h: float = DEFAULT_STEP) -> dict:
    """Check ``instances`` seeded scenes; returns per-instance results and the worst error."""
    mesh = gradcheck_mesh()
    t0 = time.perf_counter()
    results = [check_instance(mesh, seed + k, h) for k in range(instances)]
    return {"faces": mesh.face_count, "step": h, "results": results,
            "max_rel_error": max(r.max_rel_error for r in results),
            "seconds": time.perf_counter() - t0}
