"""Hard z-buffer and soft (differentiable) rendering of NOCS maps.

The hard renderer produces binary masks, perspective-correct NOCS maps and
depth; it generates ground truth and drives IOU bookkeeping.  The soft
renderer blurs triangle coverage with a sigmoid of the signed screen-space
distance and blends overlapping faces with a depth softmax, so its output is
continuous in the object pose.  :func:`render_soft_backward` returns exact
gradients of any linear functional of the soft mask and NOCS map.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _raster
from .geom import CameraIntrinsics, RigidTransform, rotation_from_6d_backward, rotation_to_6d
from .mesh import NocsMesh

HARD_NEAR = 1e-6


@dataclass(frozen=True)
class RenderOutput:
    mask: np.ndarray    # (H, W)
    nocs: np.ndarray    # (H, W, 3)
    depth: np.ndarray   # (H, W), +inf on background

    @property
    def binary_mask(self) -> np.ndarray:
        return self.mask > 0.5


@dataclass(frozen=True)
class SoftRenderConfig:
    """Soft rasterizer temperatures.

    ``sigma`` is in squared pixels; ``None`` selects ``1e-5 * (W**2 + H**2)``
    for the raster being rendered.  Depth enters the softmax normalized by
    ``far - near``, so ``gamma * (far - near)`` is the depth scale (in meters)
    over which overlapping surfaces blend; the defaults give about 7 mm.
    """

    sigma: float | None = None
    gamma: float = 1e-4
    background_weight: float = 1e-3
    near: float = 0.01
    far: float = 70.0

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.gamma <= 0 or self.background_weight <= 0:
            raise ValueError("gamma and background_weight must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    def resolved_sigma(self, K: CameraIntrinsics) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return 1e-5 * (K.width ** 2 + K.height ** 2)

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "gamma": self.gamma,
                "background_weight": self.background_weight,
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d) -> "SoftRenderConfig":
        return replace(cls(), **d)


@dataclass(frozen=True)
class PoseGradient:
    d_rot6: np.ndarray   # (6,)
    d_trans: np.ndarray  # (3,)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.d_rot6, self.d_trans])


def _project(mesh: NocsMesh, pose: RigidTransform, K: CameraIntrinsics):
    X = pose.apply(mesh.vertices)
    z = X[:, 2].copy()
    zs = np.where(z > 0, z, 1.0)
    u = K.fx * X[:, 0] / zs + K.cx
    v = K.fy * X[:, 1] / zs + K.cy
    return X, u, v, z


def render_hard(mesh: NocsMesh, pose: RigidTransform, K: CameraIntrinsics,
                return_faces: bool = False):
    """Binary mask, NOCS and depth of ``mesh`` at camera-from-model ``pose``."""
    _, u, v, z = _project(mesh, pose, K)
    depth, nocs, face_id = _raster.rasterize_hard(
        u, v, z, mesh.faces, mesh.vertex_nocs, K.width, K.height, HARD_NEAR)
    out = RenderOutput((face_id >= 0).astype(np.float64), nocs, depth)
    if return_faces:
        return out, face_id
    return out


class SoftRenderContext:
    """Forward intermediates kept for :meth:`backward`."""

    def __init__(self, mesh, pose, K, cfg):
        self.mesh, self.pose, self.K, self.cfg = mesh, pose, K, cfg
        self.sigma = cfg.resolved_sigma(K)
        self.X, self.u, self.v, self.z = _project(mesh, pose, K)
        (mask, face_nocs, depth, self.zmax, self.asum,
         self.prod, self.nsat, self.frags) = _raster.soft_forward(
            self.u, self.v, self.z, mesh.faces, mesh.vertex_nocs, K.width, K.height,
            self.sigma, cfg.gamma, cfg.background_weight, cfg.near, cfg.far)
        #: depth-softmax blend of the faces and the black background; away from
        #: the silhouette the faces win, so it is not darkened along interior
        #: edges where the soft coverage dips to about 0.75
        self.face_nocs = face_nocs
        self.output = RenderOutput(mask, face_nocs, depth)

    def vertex_gradient(self, d_nocs=None, d_mask=None, d_face_nocs=None) -> np.ndarray:
        """Gradient w.r.t. the camera-space vertex positions, ``(V, 3)``.

        ``d_nocs`` and ``d_mask`` are upstream gradients of the output;
        ``d_face_nocs`` is an alias of ``d_nocs`` and the two are summed.
        """
        K, cfg = self.K, self.cfg
        H, W = K.height, K.width
        g_face = np.zeros((H, W, 3)) if d_face_nocs is None else np.array(d_face_nocs, dtype=np.float64)
        g_mask = np.zeros((H, W)) if d_mask is None else np.array(d_mask, dtype=np.float64)
        if g_face.shape != (H, W, 3) or g_mask.shape != (H, W):
            raise ValueError("upstream gradient does not match the render size")
        if d_nocs is not None:
            d_nocs = np.asarray(d_nocs, dtype=np.float64)
            if d_nocs.shape != (H, W, 3):
                raise ValueError("upstream gradient does not match the render size")
            g_face += d_nocs
        gu, gv, gz = _raster.soft_backward(
            self.u, self.v, self.z, self.mesh.faces, self.mesh.vertex_nocs, W, H,
            self.sigma, cfg.gamma, cfg.background_weight, cfg.near, cfg.far,
            self.face_nocs, self.zmax, self.asum, self.prod, self.nsat, self.frags,
            g_face, g_mask)
        X = self.X
        z = np.where(X[:, 2] > 0, X[:, 2], 1.0)
        gX = np.empty_like(X)
        gX[:, 0] = gu * K.fx / z
        gX[:, 1] = gv * K.fy / z
        gX[:, 2] = gz - (gu * K.fx * X[:, 0] + gv * K.fy * X[:, 1]) / (z * z)
        return gX

    def backward(self, d_nocs=None, d_mask=None, d_face_nocs=None) -> PoseGradient:
        gX = self.vertex_gradient(d_nocs, d_mask, d_face_nocs)
        # X = R v + t
        gR = gX.T @ self.mesh.vertices
        d_rot6 = rotation_from_6d_backward(rotation_to_6d(self.pose.rotation), gR)
        return PoseGradient(d_rot6, gX.sum(axis=0))


def render_soft(mesh: NocsMesh, pose: RigidTransform, K: CameraIntrinsics,
                cfg: SoftRenderConfig | None = None) -> RenderOutput:
    return SoftRenderContext(mesh, pose, K, cfg or SoftRenderConfig()).output


def render_soft_backward(mesh: NocsMesh, pose: RigidTransform, K: CameraIntrinsics,
                         cfg: SoftRenderConfig | None, d_nocs, d_mask) -> PoseGradient:
    """Gradient of ``sum(d_nocs * nocs) + sum(d_mask * mask)`` w.r.t. the pose.

    The rotation gradient is taken w.r.t. the 6D parameters
    ``(R[:, 0], R[:, 1])`` of ``pose.rotation``; the translation gradient is
    per meter in the camera frame.
    """
    ctx = SoftRenderContext(mesh, pose, K, cfg or SoftRenderConfig())
    return ctx.backward(d_nocs, d_mask)


def iou(mask_a, mask_b) -> float:
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union
