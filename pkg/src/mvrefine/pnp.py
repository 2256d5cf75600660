"""Initial pose hypotheses from dense 2D-3D correspondences: EPnP and RANSAC."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .geom import CameraIntrinsics, NocsBounds, RigidTransform, nocs_unproject

log = logging.getLogger(__name__)

MAX_CORRESPONDENCES = 4000
NOCS_MARGIN = 0.05


class PnPError(ValueError):
    """Degenerate input to a PnP solver."""


class NoPoseError(RuntimeError):
    """RANSAC found no model with enough inliers; the frame has no hypothesis."""


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple
    model_point: tuple


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Array-backed set of correspondences: ``pixels (N, 2)``, ``points (N, 3)``."""

    pixels: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        pt = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(px) != len(pt):
            raise PnPError("pixel and point counts differ")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pt)

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, idx) -> "Correspondences":
        return Correspondences(self.pixels[idx], self.points[idx])

    def __iter__(self):
        for p, X in zip(self.pixels, self.points):
            yield Correspondence(tuple(p), tuple(X))

    @classmethod
    def from_list(cls, corrs) -> "Correspondences":
        if isinstance(corrs, Correspondences):
            return corrs
        corrs = list(corrs)
        return cls(np.array([c.pixel for c in corrs], dtype=np.float64).reshape(-1, 2),
                   np.array([c.model_point for c in corrs], dtype=np.float64).reshape(-1, 3))


def correspondences_from_maps(nocs, mask, bounds: NocsBounds) -> Correspondences:
    """One correspondence per foreground pixel, pixel center -> model point.

    NOCS values are clipped to ``[-0.05, 1.05]`` so model points stay within
    the bounds expanded by 5%.
    """
    nocs = np.asarray(nocs, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if nocs.shape != mask.shape + (3,):
        raise PnPError(f"NOCS map {nocs.shape} does not match mask {mask.shape}")
    rows, cols = np.nonzero(mask)
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)
    values = np.clip(nocs[rows, cols], -NOCS_MARGIN, 1.0 + NOCS_MARGIN)
    return Correspondences(pixels, nocs_unproject(bounds, values).reshape(-1, 3))


def write_correspondences_csv(path, corrs) -> None:
    corrs = Correspondences.from_list(corrs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "x", "y", "z"])
        for (u, v), (x, y, z) in zip(corrs.pixels, corrs.points):
            w.writerow([repr(float(u)), repr(float(v)), repr(float(x)), repr(float(y)), repr(float(z))])


def read_correspondences_csv(path) -> Correspondences:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Correspondences(data[:, :2], data[:, 2:5])


# --- EPnP ---------------------------------------------------------------------

def _procrustes(model, cam):
    """``R, t`` minimizing ``sum |R model + t - cam|^2``."""
    mc, cc = model.mean(axis=0), cam.mean(axis=0)
    H = (model - mc).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cc - R @ mc


def _reprojection(K: CameraIntrinsics, R, t, points, pixels):
    X = points @ R.T + t
    z = X[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * X[:, 0] / z + K.cx
        v = K.fy * X[:, 1] / z + K.cy
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    err[~(z > 0)] = np.inf
    return err


def _refine_reprojection(K: CameraIntrinsics, pose: RigidTransform, points, pixels,
                         scale: float) -> RigidTransform:
    """Minimize a robust (soft-L1 at ``scale`` px) reprojection error from ``pose``.

    EPnP is algebraic; on a small object a consensus set that still holds a
    few chance outliers can leave its solution far from the geometric
    optimum while every true inlier stays under the threshold.
    """
    def residuals(x):
        X = points @ Rotation.from_rotvec(x[:3]).as_matrix().T + x[3:]
        z = np.maximum(X[:, 2], 1e-9)
        return np.concatenate([K.fx * X[:, 0] / z + K.cx - pixels[:, 0],
                               K.fy * X[:, 1] / z + K.cy - pixels[:, 1]])

    x0 = np.r_[Rotation.from_matrix(pose.rotation).as_rotvec(), pose.translation]
    sol = least_squares(residuals, x0, loss="soft_l1", f_scale=scale, max_nfev=50)
    return RigidTransform(Rotation.from_rotvec(sol.x[:3]).as_matrix(), sol.x[3:])


def _control_points(points):
    """Centroid plus principal directions; drops the third for planar sets."""
    c0 = points.mean(axis=0)
    A = points - c0
    evals, evecs = np.linalg.eigh(A.T @ A / len(points))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    scale = max(evals[0], 0.0)
    if scale <= 1e-18:
        raise PnPError("correspondence points are coincident")
    if evals[1] <= 1e-10 * scale:
        raise PnPError("correspondence points are collinear")
    nc = 4 if evals[2] > 1e-10 * scale else 3
    ctrl = [c0] + [c0 + np.sqrt(evals[j]) * evecs[:, j] for j in range(nc - 1)]
    return np.array(ctrl)


def _alphas(points, ctrl):
    c0 = ctrl[0]
    B = (ctrl[1:] - c0).T                       # 3 x (nc-1)
    coeff = np.linalg.lstsq(B, (points - c0).T, rcond=None)[0].T
    return np.column_stack([1.0 - coeff.sum(axis=1), coeff])


def _m_matrix(alphas, pixels, K):
    n, nc = alphas.shape
    M = np.zeros((2 * n, 3 * nc))
    du = K.cx - pixels[:, 0]
    dv = K.cy - pixels[:, 1]
    for j in range(nc):
        a = alphas[:, j]
        M[0::2, 3 * j] = a * K.fx
        M[0::2, 3 * j + 2] = a * du
        M[1::2, 3 * j + 1] = a * K.fy
        M[1::2, 3 * j + 2] = a * dv
    return M


def _pairs(nc):
    return [(i, j) for i in range(nc) for j in range(i + 1, nc)]


def _betas_linear(V, ctrl, N):
    """Initial betas for a kernel of dimension ``N`` from the distance constraints."""
    nc = len(ctrl)
    pairs = _pairs(nc)
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    vecs = [V[:, k].reshape(nc, 3) for k in range(N)]
    diffs = [[v[i] - v[j] for v in vecs] for i, j in pairs]
    lifted = [(a, b) for a in range(N) for b in range(a, N)]
    if len(lifted) > len(pairs):
        return None
    L = np.array([[(1.0 if a == b else 2.0) * d[a] @ d[b] for a, b in lifted] for d in diffs])
    sol = np.linalg.lstsq(L, rho, rcond=None)[0]
    betas = np.zeros(N)
    b11 = sol[0]
    betas[0] = np.sqrt(abs(b11))
    for k in range(1, N):
        bkk = sol[lifted.index((k, k))]
        b1k = sol[lifted.index((0, k))]
        betas[k] = np.sqrt(abs(bkk)) * (np.sign(b1k) if b1k != 0 else 1.0)
    if b11 < 0:
        betas = -betas
    return betas


def _gauss_newton(V, ctrl, betas, iterations=10):
    nc = len(ctrl)
    N = len(betas)
    pairs = _pairs(nc)
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    vecs = [V[:, k].reshape(nc, 3) for k in range(N)]
    D = np.array([[v[i] - v[j] for v in vecs] for i, j in pairs])   # pairs x N x 3
    G = np.einsum("pax,pbx->pab", D, D)
    b = betas.copy()
    for _ in range(iterations):
        Gb = G @ b
        r = Gb @ b - rho
        J = 2.0 * Gb
        JtJ = J.T @ J
        try:
            step = -np.linalg.solve(JtJ + 1e-12 * np.trace(JtJ) * np.eye(N), J.T @ r)
        except np.linalg.LinAlgError:
            break
        b = b + step
        if step @ step <= 1e-24 * max(b @ b, 1e-24):
            break
    return b


def _pose_from_betas(V, betas, alphas, points):
    nc = alphas.shape[1]
    ctrl_cam = (V[:, :len(betas)] @ betas).reshape(nc, 3)
    cam = alphas @ ctrl_cam
    if np.mean(cam[:, 2]) < 0:
        cam = -cam
    return _procrustes(points, cam)


def epnp(corrs, K: CameraIntrinsics) -> RigidTransform:
    """Camera-from-model pose from at least four correspondences.

    Control points are the centroid and the principal directions of the
    model points (three control points for planar sets).  Kernel dimensions
    1 to 3 are tried, each polished by Gauss-Newton on the control-point
    distances, and the solution with the lowest reprojection error is kept.
    """
    corrs = Correspondences.from_list(corrs)
    if len(corrs) < 4:
        raise PnPError("EPnP needs at least 4 correspondences")
    points, pixels = corrs.points, corrs.pixels
    ctrl = _control_points(points)
    alphas = _alphas(points, ctrl)
    M = _m_matrix(alphas, pixels, K)
    _, s, Vt = np.linalg.svd(M.T @ M)
    V = Vt[::-1].T                              # smallest singular vectors first
    if s[-1 - min(4, len(s) - 1)] <= 1e-14 * s[0]:
        raise PnPError("rank-deficient correspondence configuration")
    best = None
    for N in (1, 2, 3):
        betas = _betas_linear(V, ctrl, N)
        if betas is None:
            continue
        betas = _gauss_newton(V, ctrl, np.concatenate([betas, np.zeros(max(0, 4 - N))])[:4]
                              if len(ctrl) == 4 else betas)
        R, t = _pose_from_betas(V, betas, alphas, points)
        err = float(np.mean(_reprojection(K, R, t, points, pixels) ** 2))
        if best is None or err < best[0]:
            best = (err, R, t)
        if best[0] < 1e-12:
            break
    if best is None or not np.isfinite(best[0]):
        raise PnPError("EPnP produced no pose in front of the camera")
    return RigidTransform(best[1], best[2])


# --- RANSAC -------------------------------------------------------------------

@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 300
    inlier_threshold_px: float = 3.0
    sample_size: int = 4
    min_inliers: int = 12
    # random correspondences agree with ~1% of a model by chance at 3 px,
    # so a fixed count alone cannot reject pure noise
    min_inlier_ratio: float = 0.05
    seed: int = 0
    confidence: float = 0.99
    max_correspondences: int = MAX_CORRESPONDENCES

    def __post_init__(self):
        if self.sample_size < 4:
            raise ValueError("sample_size must be >= 4")
        if self.inlier_threshold_px <= 0 or self.max_iterations < 1 or self.min_inliers < 1:
            raise ValueError("RANSAC thresholds must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0 <= self.min_inlier_ratio <= 1:
            raise ValueError("min_inlier_ratio must be in [0, 1]")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PnPResult:
    pose: RigidTransform
    inlier_indices: np.ndarray
    mean_reprojection_error_px: float
    iterations: int = 0


def _needed_iterations(inlier_ratio, sample_size, confidence):
    p = inlier_ratio ** sample_size
    if p >= 1.0:
        return 0
    if p <= 0.0:
        return np.inf
    return np.log(1.0 - confidence) / np.log(1.0 - p)


def ransac_pnp(corrs, K: CameraIntrinsics, cfg: RansacConfig | None = None) -> PnPResult:
    """Robust pose: EPnP on random minimal samples, refit on the consensus set.

    Inputs larger than ``cfg.max_correspondences`` are uniformly subsampled
    first (seeded).  Sampling stops once the best inlier ratio implies the
    chance of having missed a better model is below ``1 - cfg.confidence``.
    The consensus set is refit with EPnP and then by robust nonlinear
    least squares on the reprojection error; each refit is kept only when
    it lowers the truncated quadratic (MSAC) cost over all correspondences.  The reported
    inliers are those of the returned pose.
    Raises :class:`NoPoseError` when fewer than ``cfg.min_inliers`` inliers,
    or fewer than ``cfg.min_inlier_ratio`` of the (subsampled) input, remain.
    """
    cfg = cfg or RansacConfig()
    corrs = Correspondences.from_list(corrs)
    n_all = len(corrs)
    if n_all < cfg.sample_size:
        raise NoPoseError(f"{n_all} correspondences, need at least {cfg.sample_size}")
    rng = np.random.default_rng(cfg.seed)
    index = np.arange(n_all)
    if n_all > cfg.max_correspondences:
        index = np.sort(rng.choice(n_all, cfg.max_correspondences, replace=False))
    sub = corrs[index]
    n = len(sub)
    thr = cfg.inlier_threshold_px
    min_count = max(cfg.min_inliers, int(np.ceil(cfg.min_inlier_ratio * n)))

    best_count, best_pose = 0, None
    needed = cfg.max_iterations
    it = 0
    while it < min(cfg.max_iterations, needed):
        it += 1
        sample = rng.choice(n, cfg.sample_size, replace=False)
        try:
            T = epnp(sub[sample], K)
        except (PnPError, np.linalg.LinAlgError):
            continue
        count = int(np.count_nonzero(_reprojection(K, T.rotation, T.translation,
                                                   sub.points, sub.pixels) <= thr))
        if count > best_count:
            best_count, best_pose = count, T
            needed = _needed_iterations(count / n, cfg.sample_size, cfg.confidence)
    if best_pose is None or best_count < min_count:
        raise NoPoseError(f"best model has {best_count} inliers, need {min_count}")

    def msac(e):
        return float((np.minimum(e, thr) ** 2).sum())

    pose = best_pose
    err = _reprojection(K, pose.rotation, pose.translation, sub.points, sub.pixels)
    try:
        refit = epnp(sub[err <= thr], K)
        err_r = _reprojection(K, refit.rotation, refit.translation, sub.points, sub.pixels)
        if msac(err_r) <= msac(err):
            pose, err = refit, err_r
    except (PnPError, np.linalg.LinAlgError):
        log.debug("refit on the consensus set failed; keeping the sampled model")
    inl = err <= thr
    refined = _refine_reprojection(K, pose, sub.points[inl], sub.pixels[inl], thr / 3.0)
    err_r = _reprojection(K, refined.rotation, refined.translation, sub.points, sub.pixels)
    if msac(err_r) <= msac(err):
        pose, err = refined, err_r
    inl = err <= thr
    if np.count_nonzero(inl) < min_count:
        raise NoPoseError("too few inliers after refit")
    return PnPResult(pose=pose, inlier_indices=index[inl],
                     mean_reprojection_error_px=float(err[inl].mean()), iterations=it)
