"""Rigid-body math, 6D rotations, the pinhole camera and NOCS coordinate operators.

Conventions
-----------
* Points are ``(3,)`` or ``(N, 3)`` float64 arrays.
* A :class:`RigidTransform` maps points from a source frame into a target
  frame, ``x_target = R @ x_source + t``.  ``compose(A, B)`` applies ``B``
  first and then ``A``.
* Pixel centers sit at integer + 0.5; the image origin is the top-left
  corner, ``u`` grows rightward and ``v`` downward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6
DEGENERATE_TOL = 1e-9


class GeometryError(ValueError):
    """Raised on degenerate geometric input."""


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An SE(3) element stored as a 3x3 rotation and a translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("non-finite transform")
        if (np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL
                or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL):
            raise GeometryError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise GeometryError(f"expected a 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def to_list(self) -> list:
        """4x4 row-major nested list for JSON."""
        return self.matrix().tolist()

    @classmethod
    def from_list(cls, rows) -> "RigidTransform":
        return cls.from_matrix(np.array(rows, dtype=np.float64))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def apply(self, points) -> np.ndarray:
        return transform_point(self, points)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
                    and np.allclose(self.translation, other.translation, atol=atol, rtol=0))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """Return ``A o B`` (``B`` applied first)."""
    R = A.rotation @ B.rotation
    # re-orthonormalize to stop drift over long composition chains
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return RigidTransform(R, A.rotation @ B.translation + A.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def transform_point(T: RigidTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ T.rotation.T + T.translation


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula; ``rotvec`` is axis * angle (radians)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-15:
        return np.eye(3)
    K = skew(rotvec / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * K @ K


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
        return axis / np.linalg.norm(axis) * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(theta)) * theta


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def rotation_geodesic_distance(R1, R2) -> float:
    return rotation_angle(np.asarray(R1).T @ np.asarray(R2))


def euler_xyz_to_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """``R_x(ax) @ R_y(ay) @ R_z(az)``, radians."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (via a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-from-world transform for a camera at ``eye`` looking at ``target``.

    The camera's +z axis points at the target, +y points down in the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, z)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows are camera axes expressed in world
    return RigidTransform(R, -R @ eye)


# --- 6D rotation parameterization -----------------------------------------

@dataclass(frozen=True, eq=False)
class Rotation6D:
    a1: np.ndarray
    a2: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.a1, float), np.asarray(self.a2, float)])

    @classmethod
    def from_array(cls, x) -> "Rotation6D":
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:3].copy(), x[3:6].copy())


def _gram_schmidt(a1, a2):
    n1 = np.linalg.norm(a1)
    if n1 < DEGENERATE_TOL:
        raise GeometryError("a1 is (numerically) zero")
    b1 = a1 / n1
    u2 = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < DEGENERATE_TOL * max(1.0, np.linalg.norm(a2)):
        raise GeometryError("a2 is parallel to a1")
    b2 = u2 / n2
    return b1, b2, n1, n2


def rotation_from_6d(r) -> np.ndarray:
    """Map two 3-vectors to a rotation matrix whose columns are the
    Gram-Schmidt basis ``b1, b2, b1 x b2``."""
    x = r.as_array() if isinstance(r, Rotation6D) else np.asarray(r, dtype=np.float64)
    b1, b2, _, _ = _gram_schmidt(x[:3], x[3:6])
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def rotation_from_6d_backward(r, grad_R) -> np.ndarray:
    """Vector-Jacobian product of :func:`rotation_from_6d`.

    Returns ``d(sum(grad_R * R)) / d(a1, a2)`` as a ``(6,)`` array.
    """
    x = r.as_array() if isinstance(r, Rotation6D) else np.asarray(r, dtype=np.float64)
    a2 = x[3:6]
    b1, b2, n1, n2 = _gram_schmidt(x[:3], a2)
    g1 = grad_R[:, 0].astype(np.float64).copy()
    g2 = grad_R[:, 1].astype(np.float64).copy()
    g3 = grad_R[:, 2]
    # b3 = b1 x b2
    g1 += np.cross(b2, g3)
    g2 += np.cross(g3, b1)
    # b2 = u2 / |u2|
    gu2 = (g2 - b2 * np.dot(b2, g2)) / n2
    # u2 = a2 - (b1 . a2) b1
    ga2 = gu2 - b1 * np.dot(b1, gu2)
    g1 = g1 - (np.dot(b1, a2) * gu2 + np.dot(gu2, b1) * a2)
    # b1 = a1 / |a1|
    ga1 = (g1 - b1 * np.dot(b1, g1)) / n1
    return np.concatenate([ga1, ga2])


def rotation_to_6d(R) -> Rotation6D:
    R = np.asarray(R, dtype=np.float64)
    return Rotation6D(R[:, 0].copy(), R[:, 1].copy())


# --- camera ---------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def project_point(K: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection to continuous pixel coordinates ``(u, v)``.

    Accepts a single point or an ``(N, 3)`` array.
    """
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def rescale_intrinsics(K: CameraIntrinsics, crop, target_w: int = 128,
                       target_h: int = 128) -> CameraIntrinsics:
    """Intrinsics of a crop ``(x0, y0, w, h)`` resampled to ``target_w x target_h``.

    A pixel coordinate ``u`` in the original image maps to
    ``(u - x0) * target_w / w`` in the resampled crop (continuous coordinates,
    pixel edges aligned).
    """
    x0, y0, w, h = (float(c) for c in crop)
    if w <= 0 or h <= 0:
        raise GeometryError("empty crop")
    sx = target_w / w
    sy = target_h / h
    cx = (K.cx - x0) * sx
    cy = (K.cy - y0) * sy
    # CameraIntrinsics requires the principal point inside the image
    if not (0 <= cx < target_w and 0 <= cy < target_h):
        raise GeometryError("principal point falls outside the crop")
    return CameraIntrinsics(K.fx * sx, K.fy * sy, cx, cy, int(target_w), int(target_h))


# --- NOCS -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NocsBounds:
    min_d: np.ndarray
    max_d: np.ndarray

    def __post_init__(self):
        lo = np.array(self.min_d, dtype=np.float64).reshape(3)
        hi = np.array(self.max_d, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise GeometryError("degenerate NOCS bounds: max must exceed min on every axis")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min_d", lo)
        object.__setattr__(self, "max_d", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_d - self.min_d

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_d + self.max_d)


def nocs_bounds(vertices) -> NocsBounds:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise GeometryError("no vertices")
    return NocsBounds(v.min(axis=0), v.max(axis=0))


def nocs_project(bounds: NocsBounds, p) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) - bounds.min_d) / bounds.extent


def nocs_unproject(bounds: NocsBounds, n) -> np.ndarray:
    return bounds.min_d + np.asarray(n, dtype=np.float64) * bounds.extent
