"""Multi-view pose refinement through the soft NOCS renderer.

A pose update ``T_delta`` is applied on the left of the reference-frame
hypothesis ``T_pr``; every view renders the object at
``Xi_{ref->f} @ T_delta @ T_pr`` and compares rendered against predicted NOCS
in model space with a bounded Gaussian-shaped robust kernel.  The update
rotates about the object's initial center (in the reference camera), which
decouples rotation steps from translation steps; it is still a left-applied
SE(3) element and is the identity at zero parameters.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (CameraIntrinsics, RigidTransform, compose, invert, rotation_from_6d, rotation_from_6d_backward)
from .mesh import NocsMesh
from .render import SoftRenderConfig, SoftRenderContext, iou, render_hard

log = logging.getLogger(__name__)

STEP_RULES = ("gd", "momentum", "adam")


class RefineError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ViewObservation:
    """One frame: predicted mask and NOCS map, intrinsics, camera-from-world."""

    pred_mask: np.ndarray
    pred_nocs: np.ndarray
    intrinsics: CameraIntrinsics
    cam_from_world: RigidTransform

    def __post_init__(self):
        mask = np.asarray(self.pred_mask).astype(bool)
        nocs = np.array(self.pred_nocs, dtype=np.float64)
        K = self.intrinsics
        if mask.shape != (K.height, K.width) or nocs.shape != (K.height, K.width, 3):
            raise RefineError("observation maps do not match the intrinsics' image size")
        nocs[~mask] = 0.0
        mask.setflags(write=False)
        nocs.setflags(write=False)
        object.__setattr__(self, "pred_mask", mask)
        object.__setattr__(self, "pred_nocs", nocs)

    def digest(self) -> str:
        h = hashlib.sha1()
        h.update(self.pred_mask.tobytes())
        h.update(self.pred_nocs.tobytes())
        h.update(self.cam_from_world.matrix().tobytes())
        h.update(json.dumps(self.intrinsics.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class FrameSet:
    views: tuple
    hypotheses: tuple

    def __post_init__(self):
        views = tuple(self.views)
        hyps = tuple(self.hypotheses)
        if len(views) == 0:
            raise RefineError("a frame set needs at least one view")
        if len(hyps) != len(views):
            raise RefineError("need one (possibly missing) hypothesis per view")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "hypotheses", hyps)

    def __len__(self):
        return len(self.views)

    @property
    def has_hypothesis(self) -> bool:
        return any(h is not None for h in self.hypotheses)

    def subset(self, indices) -> "FrameSet":
        return FrameSet([self.views[i] for i in indices], [self.hypotheses[i] for i in indices])


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 50
    step_rule: str = "adam"
    lr_rot: float = 0.02
    lr_trans: float = 0.005
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    robust_scale_factor: float = 2.0
    scale_floor: float = 1e-4
    soft: SoftRenderConfig = field(default_factory=SoftRenderConfig)
    render_size: tuple = (128, 128)
    early_stop: bool = False
    early_stop_rel_tol: float = 1e-6
    early_stop_patience: int = 5
    normalize: bool = True      # divide by the total overlap pixel count
    lr_decay: float = 0.95      # per-iteration multiplicative learning-rate decay

    def __post_init__(self):
        if self.iterations < 1:
            raise RefineError("iterations must be >= 1")
        if self.step_rule not in STEP_RULES:
            raise RefineError(f"step_rule must be one of {STEP_RULES}")
        if self.lr_rot <= 0 or self.lr_trans <= 0:
            raise RefineError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise RefineError("lr_decay must be in (0, 1]")
        if self.scale_floor <= 0 or self.robust_scale_factor <= 0:
            raise RefineError("scale parameters must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "soft"}
        d["render_size"] = list(self.render_size)
        d["soft"] = self.soft.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "RefineConfig":
        d = dict(d)
        if "soft" in d:
            d["soft"] = SoftRenderConfig.from_dict(d["soft"])
        if "render_size" in d:
            d["render_size"] = tuple(d["render_size"])
        return replace(cls(), **d)


@dataclass
class RefineResult:
    ref_index: int
    pose_ref: RigidTransform
    per_frame_poses: list
    loss_trace: list
    per_frame_iou: list
    scale_trace: list = field(default_factory=list)
    pixel_count_trace: list = field(default_factory=list)
    param_trace: list = field(default_factory=list)
    best_iteration: int = 0
    degenerate: bool = False
    initial_pose_ref: RigidTransform | None = None
    timings: dict = field(default_factory=dict)

    def trace_dict(self) -> dict:
        """Per-iteration trace for JSON export."""
        return {
            "ref_index": self.ref_index,
            "best_iteration": self.best_iteration,
            "degenerate": self.degenerate,
            "iterations": [
                {"iteration": i, "loss": self.loss_trace[i], "scale": self.scale_trace[i],
                 "pixel_counts": self.pixel_count_trace[i], "params": self.param_trace[i]}
                for i in range(len(self.loss_trace))
            ],
        }


# --- building blocks --------------------------------------------------------

def relative_transform(views, ref_index: int, f: int) -> RigidTransform:
    """``Xi_{ref->f}``: maps reference-camera coordinates into camera ``f``."""
    if f == ref_index:
        return RigidTransform.identity()
    return compose(views[f].cam_from_world, invert(views[ref_index].cam_from_world))


def robust_kernel(e, c):
    """Bounded loss ``1 - exp(-(e/c)**2 / 2)``."""
    if np.any(np.asarray(c) <= 0):
        raise RefineError("robust scale must be positive")
    e = np.asarray(e, dtype=np.float64)
    return -np.expm1(-0.5 * (e / c) ** 2)


def adaptive_scale(residuals, cfg: RefineConfig | None = None) -> float:
    """``max(factor * median(|e|), floor)``."""
    cfg = cfg or RefineConfig()
    r = np.abs(np.asarray(residuals, dtype=np.float64)).ravel()
    if r.size == 0:
        raise RefineError("no residuals to estimate the scale from")
    return max(cfg.robust_scale_factor * float(np.median(r)), cfg.scale_floor)


@dataclass
class ViewTerms:
    loss: float
    pixel_count: int
    residuals: np.ndarray       # model-space distances on confidently overlapping pixels
    overlap: float = 0.0        # sum of the pixel weights
    d_mask: np.ndarray | None = None
    d_face_nocs: np.ndarray | None = None
    weight_grad: np.ndarray | None = None   # d overlap / d mask


def _view_terms(view: ViewObservation, mask, nocs, bounds, c, want_grad: bool,
                residual_mask) -> ViewTerms:
    weight = view.pred_mask * mask
    overlap = weight > 0
    diff = (nocs - view.pred_nocs) * bounds.extent
    e = np.sqrt((diff * diff).sum(axis=-1))
    residuals = e[residual_mask & view.pred_mask]
    if c is None:
        return ViewTerms(0.0, int(np.count_nonzero(overlap)), residuals)
    g = np.exp(-0.5 * (e / c) ** 2)
    rho = 1.0 - g
    loss = float((weight * rho).sum())
    terms = ViewTerms(loss, int(np.count_nonzero(overlap)), residuals, float(weight.sum()))
    if want_grad:
        terms.d_mask = view.pred_mask * rho
        terms.d_face_nocs = (weight * g / (c * c))[..., None] * diff * bounds.extent
        terms.weight_grad = view.pred_mask.astype(np.float64)
    return terms


def per_view_loss(view: ViewObservation, xi: RigidTransform, pose: RigidTransform,
                  mesh: NocsMesh, cfg: RefineConfig | None = None, c: float | None = None,
                  hard: bool = False):
    """Masked robust NOCS loss of one view.

    ``pose`` is the object pose in the reference camera; the view renders it
    at ``xi @ pose``.  Residuals are model-space distances (meters) between
    predicted and rendered correspondences on pixels that are foreground in
    the prediction and (confidently) in the render.  When ``c`` is ``None``
    it is estimated from this view's residuals.

    Returns ``(loss, pixel_count, residuals)``.
    """
    cfg = cfg or RefineConfig()
    T = compose(xi, pose)
    K = view.intrinsics
    if hard:
        out = render_hard(mesh, T, K)
        mask, nocs = out.mask, out.nocs
    else:
        ctx = SoftRenderContext(mesh, T, K, cfg.soft)
        mask, nocs = ctx.output.mask, ctx.face_nocs
    terms = _view_terms(view, mask, nocs, mesh.bounds, None, False, mask > 0.5)
    if c is None:
        c = adaptive_scale(terms.residuals, cfg) if terms.residuals.size else cfg.scale_floor
    terms = _view_terms(view, mask, nocs, mesh.bounds, c, False, mask > 0.5)
    return terms.loss, terms.pixel_count, terms.residuals


# --- reference selection -----------------------------------------------------

def _canonical_order(frame_set: FrameSet):
    keys = []
    for v, h in zip(frame_set.views, frame_set.hypotheses):
        d = hashlib.sha1(v.digest().encode())
        d.update(b"none" if h is None else h.matrix().tobytes())
        keys.append(d.hexdigest())
    return sorted(range(len(keys)), key=lambda i: (keys[i], i))


def reference_scores(frame_set: FrameSet, mesh: NocsMesh, cfg: RefineConfig | None = None):
    """Score of each candidate reference frame (``nan`` for frames without a
    hypothesis) and the summed IOU of each candidate.

    A candidate's score is the mean, over views with non-zero loss, of the
    view's masked robust loss divided by its mask IOU, evaluated with hard
    renders of the candidate's hypothesis carried into each view.  One
    robust scale, estimated from all candidates' residuals, is shared so the
    scores are comparable.
    """
    cfg = cfg or RefineConfig()
    n = len(frame_set)
    renders = {}
    pooled = []
    for ref, T_ref in enumerate(frame_set.hypotheses):
        if T_ref is None:
            continue
        for f in range(n):
            out = render_hard(mesh, compose(relative_transform(frame_set.views, ref, f), T_ref),
                              frame_set.views[f].intrinsics)
            renders[ref, f] = out
            view = frame_set.views[f]
            pooled.append(_view_terms(view, out.mask, out.nocs, mesh.bounds, None, False,
                                      out.mask > 0.5).residuals)
    if not renders:
        raise RefineError("no frame carries a pose hypothesis")
    pooled = np.concatenate(pooled)
    c = adaptive_scale(pooled, cfg) if pooled.size else cfg.scale_floor
    scores = np.full(n, np.nan)
    iou_sums = np.full(n, np.nan)
    for ref, T_ref in enumerate(frame_set.hypotheses):
        if T_ref is None:
            continue
        ratios = []
        iou_sum = 0.0
        for f in range(n):
            out = renders[ref, f]
            view = frame_set.views[f]
            terms = _view_terms(view, out.mask, out.nocs, mesh.bounds, c, False, out.mask > 0.5)
            j = iou(view.pred_mask, out.mask > 0.5)
            iou_sum += j
            if terms.loss > 0 and j > 0:
                ratios.append(terms.loss / j)
        scores[ref] = float(np.mean(ratios)) if ratios else 0.0
        iou_sums[ref] = iou_sum
    return scores, iou_sums


def select_reference(frame_set: FrameSet, mesh: NocsMesh, cfg: RefineConfig | None = None) -> int:
    """Index of the reference frame.

    Candidates without a hypothesis are skipped; zero scores mark degenerate
    candidates and are ignored; if every candidate is degenerate the one
    with the largest summed IOU wins.  Ties go to the lower index.
    """
    if not frame_set.has_hypothesis:
        raise RefineError("no frame carries a pose hypothesis")
    order = _canonical_order(frame_set)
    canon = frame_set.subset(order)
    scores, iou_sums = reference_scores(canon, mesh, cfg)
    valid = [i for i in range(len(canon)) if canon.hypotheses[i] is not None]
    live = [i for i in valid if scores[i] > 0]
    if live:
        best = min(live, key=lambda i: (scores[i], order[i]))
    else:
        best = min(valid, key=lambda i: (-iou_sums[i], order[i]))
    return order[best]


# --- optimization -------------------------------------------------------------

IDENTITY_PARAMS = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])


def update_transform(params, center) -> RigidTransform:
    """``T_delta``: rotate by the 6D rotation about ``center``, then translate."""
    R = rotation_from_6d(params[:6])
    return RigidTransform(R, center + params[6:9] - R @ center)


class _Objective:
    """Loss and gradient of the joint objective over ``T_delta`` parameters."""

    def __init__(self, frame_set: FrameSet, mesh: NocsMesh, ref: int, T_pr: RigidTransform,
                 cfg: RefineConfig):
        self.views = frame_set.views
        self.mesh = mesh
        self.cfg = cfg
        self.T_pr = T_pr
        self.xis = [relative_transform(self.views, ref, f) for f in range(len(self.views))]
        self.center = T_pr.apply(mesh.bounds.center)
        self.y = T_pr.apply(mesh.vertices)
        self.timings = {"render": 0.0, "backward": 0.0}

    def pose(self, params) -> RigidTransform:
        return compose(update_transform(params, self.center), self.T_pr)

    def forward(self, params):
        pose = self.pose(params)
        ctxs = []
        t0 = time.perf_counter()
        for view, xi in zip(self.views, self.xis):
            ctxs.append(SoftRenderContext(self.mesh, compose(xi, pose), view.intrinsics, self.cfg.soft))
        self.timings["render"] += time.perf_counter() - t0
        return ctxs

    def residuals(self, ctxs):
        return [_view_terms(v, ctx.output.mask, ctx.face_nocs, self.mesh.bounds, None, False,
                            ctx.output.mask > 0.5).residuals
                for v, ctx in zip(self.views, ctxs)]

    def terms(self, ctxs, c, want_grad=True):
        return [_view_terms(v, ctx.output.mask, ctx.face_nocs, self.mesh.bounds, c, want_grad,
                            ctx.output.mask > 0.5)
                for v, ctx in zip(self.views, ctxs)]

    def total(self, terms) -> float:
        loss = sum(t.loss for t in terms)
        if self.cfg.normalize:
            area = sum(t.overlap for t in terms)
            return loss / area if area > 0 else 0.0
        return loss

    def _upstream(self, terms):
        """Per-view upstream gradients of :meth:`total`."""
        if not self.cfg.normalize:
            return [(t.d_mask, t.d_face_nocs) for t in terms]
        area = sum(t.overlap for t in terms)
        if area <= 0:
            return [(t.d_mask, t.d_face_nocs) for t in terms]
        mean = sum(t.loss for t in terms) / area
        return [((t.d_mask - mean * t.weight_grad) / area, t.d_face_nocs / area) for t in terms]

    def gradient(self, params, ctxs, terms) -> np.ndarray:
        t0 = time.perf_counter()
        g_rot = np.zeros((3, 3))
        g_t = np.zeros(3)
        yc = self.y - self.center
        for xi, ctx, term, (d_mask, d_face) in zip(self.xis, ctxs, terms, self._upstream(terms)):
            if term.pixel_count == 0:
                continue
            gX = ctx.vertex_gradient(d_mask=d_mask, d_face_nocs=d_face)
            # X = R_xi (R (y - o) + o + t) + t_xi
            gY = gX @ xi.rotation
            g_t += gY.sum(axis=0)
            g_rot += gY.T @ yc
        self.timings["backward"] += time.perf_counter() - t0
        return np.concatenate([rotation_from_6d_backward(params[:6], g_rot), g_t])

    def loss_and_grad(self, params, c):
        """Total loss at fixed scale ``c`` and its gradient (for checks)."""
        ctxs = self.forward(params)
        terms = self.terms(ctxs, c)
        return self.total(terms), self.gradient(params, ctxs, terms)

    def loss(self, params, c) -> float:
        ctxs = self.forward(params)
        return self.total(self.terms(ctxs, c, want_grad=False))


def objective(frame_set: FrameSet, mesh: NocsMesh, ref: int, T_pr: RigidTransform,
              cfg: RefineConfig | None = None) -> _Objective:
    """The joint multi-view objective as a callable object (used by gradient checks)."""
    return _Objective(frame_set, mesh, ref, T_pr, cfg or RefineConfig())


class _Stepper:
    def __init__(self, cfg: RefineConfig):
        self.cfg = cfg
        self.lr = np.array([cfg.lr_rot] * 6 + [cfg.lr_trans] * 3)
        self.m = np.zeros(9)
        self.v = np.zeros(9)
        self.k = 0

    def step(self, params, grad):
        cfg = self.cfg
        lr = self.lr * cfg.lr_decay ** self.k
        self.k += 1
        if cfg.step_rule == "gd":
            return params - lr * grad
        if cfg.step_rule == "momentum":
            self.m = cfg.momentum * self.m + grad
            return params - lr * self.m
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
        mh = self.m / (1 - cfg.beta1 ** self.k)
        vh = self.v / (1 - cfg.beta2 ** self.k)
        return params - lr * mh / (np.sqrt(vh) + 1e-12)


def _final_ious(frame_set, mesh, pose_ref, ref):
    ious = []
    poses = []
    for f, view in enumerate(frame_set.views):
        T = pose_ref if f == ref else compose(relative_transform(frame_set.views, ref, f), pose_ref)
        poses.append(T)
        ious.append(iou(view.pred_mask, render_hard(mesh, T, view.intrinsics).mask > 0.5))
    return poses, ious


def refine(frame_set: FrameSet, mesh: NocsMesh, cfg: RefineConfig | None = None,
           ref_index: int | None = None) -> RefineResult:
    """Jointly refine the object pose over all views of ``frame_set``.

    Returns the best iterate, judged by the loss at the first iteration's
    robust scale so that iterates are compared on one scale.
    """
    cfg = cfg or RefineConfig()
    t_start = time.perf_counter()
    order = _canonical_order(frame_set)
    canon = frame_set.subset(order)
    inv_order = {orig: k for k, orig in enumerate(order)}
    if ref_index is None:
        t0 = time.perf_counter()
        ref = inv_order[select_reference(frame_set, mesh, cfg)]
        t_select = time.perf_counter() - t0
    else:
        ref = inv_order[ref_index]
        t_select = 0.0
        if canon.hypotheses[ref] is None:
            raise RefineError("the chosen reference frame has no hypothesis")
    T_pr = canon.hypotheses[ref]
    obj = _Objective(canon, mesh, ref, T_pr, cfg)
    stepper = _Stepper(cfg)
    params = IDENTITY_PARAMS.copy()

    losses, scales, counts, param_trace = [], [], [], []
    best_params, best_loss, best_iter = params.copy(), np.inf, 0
    c0 = None
    degenerate = False
    stall = 0
    t_step = 0.0
    for it in range(cfg.iterations):
        ctxs = obj.forward(params)
        res = obj.residuals(ctxs)
        pooled = np.concatenate(res) if res else np.zeros(0)
        if pooled.size == 0:
            if it == 0:
                degenerate = True
                log.warning("no overlap between rendered and predicted masks; keeping the initial pose")
            break
        c = adaptive_scale(pooled, cfg)
        if c0 is None:
            c0 = c
        terms = obj.terms(ctxs, c)
        loss = obj.total(terms)
        if c0 == c:
            comparable = loss
        else:
            comparable = obj.total(obj.terms(ctxs, c0, want_grad=False))
        losses.append(float(loss))
        scales.append(float(c))
        counts.append([t.pixel_count for t in terms])
        param_trace.append(params.tolist())
        # the raw loss moves with c, so progress is judged on the c0 loss
        if comparable < best_loss - cfg.early_stop_rel_tol * abs(best_loss):
            stall = 0
        else:
            stall += 1
        if comparable < best_loss:
            best_loss, best_params, best_iter = comparable, params.copy(), it
        if it == cfg.iterations - 1:
            break
        if cfg.early_stop and stall >= cfg.early_stop_patience:
            break
        grad = obj.gradient(params, ctxs, terms)
        t0 = time.perf_counter()
        params = stepper.step(params, grad)
        t_step += time.perf_counter() - t0

    pose_ref = obj.pose(best_params) if not degenerate else T_pr
    poses, ious = _final_ious(canon, mesh, pose_ref, ref)
    # back to the caller's view order
    per_frame_poses = [None] * len(order)
    per_frame_iou = [None] * len(order)
    for k, orig in enumerate(order):
        per_frame_poses[orig] = poses[k]
        per_frame_iou[orig] = ious[k]
    counts = [[row[inv_order[i]] for i in range(len(order))] for row in counts]
    timings = {"select": t_select, "render": obj.timings["render"],
               "backward": obj.timings["backward"], "step": t_step,
               "total": time.perf_counter() - t_start}
    return RefineResult(ref_index=order[ref], pose_ref=pose_ref, per_frame_poses=per_frame_poses,
                        loss_trace=losses, per_frame_iou=per_frame_iou, scale_trace=scales,
                        pixel_count_trace=counts, param_trace=param_trace, best_iteration=best_iter,
                        degenerate=degenerate, initial_pose_ref=T_pr, timings=timings)
