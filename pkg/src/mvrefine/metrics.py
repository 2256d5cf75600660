"""Pose error metrics: ADD, ADD-S and accuracy at a fraction of the diameter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import RigidTransform

DEFAULT_THRESHOLD = 0.1


def _transformed(vertices, T: RigidTransform) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise ValueError("need at least one vertex")
    return T.apply(v)


def add_error(vertices, T_gt: RigidTransform, T_est: RigidTransform) -> float:
    """Mean distance between corresponding transformed vertices."""
    a = _transformed(vertices, T_gt)
    b = _transformed(vertices, T_est)
    return float(np.linalg.norm(a - b, axis=1).mean())


def adds_error(vertices, T_gt: RigidTransform, T_est: RigidTransform) -> float:
    """Mean distance from each ground-truth vertex to the nearest estimated vertex."""
    a = _transformed(vertices, T_gt)
    b = _transformed(vertices, T_est)
    d, _ = cKDTree(b).query(a, k=1)
    return float(np.mean(d))


def adds_error_bruteforce(vertices, T_gt: RigidTransform, T_est: RigidTransform) -> float:
    a = _transformed(vertices, T_gt)
    b = _transformed(vertices, T_est)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).mean())


def accuracy(errors, diameter: float, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Fraction of errors below ``threshold * diameter`` (nan counts as wrong)."""
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        return float("nan")
    return float(np.mean(e < threshold * diameter))


@dataclass(frozen=True)
class AddResult:
    add_error: float
    adds_error: float
    diameter: float
    symmetric: bool = False
    threshold: float = DEFAULT_THRESHOLD

    @property
    def error(self) -> float:
        """The error deciding correctness: ADD-S for symmetric objects, else ADD."""
        return self.adds_error if self.symmetric else self.add_error

    @property
    def correct_at_10pct(self) -> bool:
        return bool(self.error < self.threshold * self.diameter)

    def to_dict(self) -> dict:
        return {"add": self.add_error, "adds": self.adds_error, "diameter": self.diameter,
                "symmetric": self.symmetric, "correct": self.correct_at_10pct}


def evaluate_pose(mesh, T_gt: RigidTransform, T_est: RigidTransform | None) -> AddResult:
    """ADD/ADD-S of an estimate; a missing estimate scores infinite error."""
    if T_est is None:
        return AddResult(float("inf"), float("inf"), mesh.diameter, mesh.symmetric)
    return AddResult(add_error(mesh.vertices, T_gt, T_est), adds_error(mesh.vertices, T_gt, T_est),
                     mesh.diameter, mesh.symmetric)
