"""Synthetic multi-view scenes standing in for a learned detector.

Cameras sit on a spherical shell around the object and look at its
centroid.  Each view's "prediction" is the hard render of the true pose,
corrupted by Gaussian NOCS noise, uniform outlier pixels and local mask
erosion/dilation.  Views are rendered through a square crop around the
object resampled to the refinement resolution, as a detector crop would be.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import (CameraIntrinsics, NocsBounds, RigidTransform, compose, euler_xyz_to_matrix,
                   look_at, rescale_intrinsics)
from .mesh import NocsMesh, read_ply, write_ply
from .raster_io import read_mask_png, read_nocs_png, write_mask_png, write_nocs_png
from .refine import ViewObservation
from .render import render_hard

STRATEGIES = ("closest", "random", "farthest")

# LineMOD-like full-frame camera
DEFAULT_INTRINSICS = CameraIntrinsics(572.4, 573.6, 325.3, 242.0, 640, 480)


class SynthError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SceneSpec:
    mesh: NocsMesh
    object_pose_world: RigidTransform = field(default_factory=RigidTransform.identity)
    camera_count: int = 16
    radius_range: tuple | None = None       # meters; None -> 2.5-3.5 diameters
    elevation_range: tuple = (15.0, 75.0)   # degrees
    seed: int = 0
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    render_size: tuple = (128, 128)
    crop_margin: float = 1.3

    def __post_init__(self):
        if self.radius_range is None:
            d = self.mesh.diameter
            object.__setattr__(self, "radius_range", (2.5 * d, 3.5 * d))
        lo, hi = (float(r) for r in self.radius_range)
        object.__setattr__(self, "radius_range", (lo, hi))
        if self.camera_count < 1:
            raise SynthError("camera_count must be >= 1")
        if not self.mesh.diameter < lo <= hi:
            raise SynthError("radius range must satisfy diameter < min <= max")
        e0, e1 = self.elevation_range
        if not -90.0 <= e0 <= e1 <= 90.0:
            raise SynthError("elevation range must lie in [-90, 90] degrees")
        if not 0 <= self.seed < 2 ** 64:
            raise SynthError("seed must be a 64-bit unsigned integer")
        if self.crop_margin <= 0:
            raise SynthError("crop_margin must be positive")

    @property
    def centroid_world(self) -> np.ndarray:
        return self.object_pose_world.apply(self.mesh.vertices.mean(axis=0))


@dataclass(frozen=True)
class NoiseSpec:
    nocs_sigma: float = 0.02
    outlier_fraction: float = 0.3
    mask_boundary_noise_px: int = 2
    relpose_rot_sigma_deg: float = 0.0
    relpose_trans_sigma: float = 0.0

    def __post_init__(self):
        vals = (self.nocs_sigma, self.outlier_fraction, self.mask_boundary_noise_px,
                self.relpose_rot_sigma_deg, self.relpose_trans_sigma)
        if any(v < 0 for v in vals):
            raise SynthError("noise parameters must be non-negative")
        if self.outlier_fraction > 1:
            raise SynthError("outlier_fraction must be <= 1")

    @classmethod
    def noiseless(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0, 0.0, 0.0)

    @staticmethod
    def trans_sigma_for(diameter: float, level: float = 0.1) -> float:
        """Translation sigma of one third of ``level`` diameters."""
        return level * diameter / 3.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d) -> "NoiseSpec":
        return replace(cls(), **d)


@dataclass(frozen=True)
class ViewSampling:
    strategy: str = "farthest"
    set_size: int = 2

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SynthError(f"strategy must be one of {STRATEGIES}")
        if self.set_size < 1:
            raise SynthError("set_size must be >= 1")


# --- cameras ------------------------------------------------------------------

def sample_cameras(spec: SceneSpec) -> list:
    """Seeded cameras on the shell ``radius_range`` around the object centroid."""
    rng = np.random.default_rng([spec.seed, 0x63616D])
    target = spec.centroid_world
    cams = []
    for _ in range(spec.camera_count):
        r = rng.uniform(*spec.radius_range)
        el = np.radians(rng.uniform(*spec.elevation_range))
        az = rng.uniform(0.0, 2.0 * np.pi)
        eye = target + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(look_at(eye, target))
    return cams


def camera_center(cam_from_world: RigidTransform) -> np.ndarray:
    return -cam_from_world.rotation.T @ cam_from_world.translation


def view_intrinsics(spec: SceneSpec, cam_from_world: RigidTransform) -> CameraIntrinsics:
    """Intrinsics of a square crop around the object resampled to ``render_size``.

    The crop is centered on the projected centroid and sized to the
    projected bounding sphere times ``crop_margin``.
    """
    K = spec.intrinsics
    c = cam_from_world.apply(spec.centroid_world)
    if c[2] <= 0:
        raise SynthError("object centroid is behind the camera")
    u = K.fx * c[0] / c[2] + K.cx
    v = K.fy * c[1] / c[2] + K.cy
    half = spec.crop_margin * max(K.fx, K.fy) * 0.5 * spec.mesh.diameter / c[2]
    w, h = spec.render_size
    return rescale_intrinsics(K, (u - half, v - half, 2 * half, 2 * half), w, h)


# --- observations ---------------------------------------------------------------

def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def perturb_mask(mask, radius: int, rng: np.random.Generator, patch_radius: int = 6) -> np.ndarray:
    """Random local erosion/dilation along the silhouette.

    Patches are disks centered on random boundary pixels; inside each patch
    the mask is eroded or dilated with a disk of radius ``1..radius``.
    """
    mask = np.asarray(mask).astype(bool)
    if radius <= 0 or not mask.any():
        return mask.copy()
    boundary = mask & ~ndimage.binary_erosion(mask)
    by, bx = np.nonzero(boundary)
    n_patches = max(1, len(by) // (2 * patch_radius))
    out = mask.copy()
    ys, xs = np.mgrid[:mask.shape[0], :mask.shape[1]]
    morphed = {}
    for k in rng.choice(len(by), size=min(n_patches, len(by)), replace=False):
        r = int(rng.integers(1, radius + 1))
        dilate = bool(rng.integers(0, 2))
        key = (r, dilate)
        if key not in morphed:
            op = ndimage.binary_dilation if dilate else ndimage.binary_erosion
            morphed[key] = op(mask, structure=_disk(r))
        patch = (ys - by[k]) ** 2 + (xs - bx[k]) ** 2 <= patch_radius ** 2
        out[patch] = morphed[key][patch]
    return out


@dataclass(frozen=True, eq=False)
class Observation:
    view: ViewObservation
    gt_pose: RigidTransform          # camera-from-model
    gt_mask: np.ndarray
    gt_nocs: np.ndarray
    outlier_mask: np.ndarray


def make_observation(scene: SceneSpec, camera: RigidTransform, K: CameraIntrinsics,
                     noise: NoiseSpec, seed) -> Observation:
    """Corrupted prediction for one view plus the true camera-from-model pose."""
    rng = np.random.default_rng(seed)
    gt_pose = compose(camera, scene.object_pose_world)
    out = render_hard(scene.mesh, gt_pose, K)
    gt_mask = out.mask > 0.5
    if not gt_mask.any():
        raise SynthError("object is not visible in this view")
    mask = perturb_mask(gt_mask, noise.mask_boundary_noise_px, rng)
    nocs = out.nocs.copy()
    grown = mask & ~gt_mask
    if grown.any():
        # pixels added by dilation take the nearest true foreground value
        _, (iy, ix) = ndimage.distance_transform_edt(~gt_mask, return_indices=True)
        nocs[grown] = out.nocs[iy[grown], ix[grown]]
    if noise.nocs_sigma > 0:
        nocs = nocs + rng.normal(0.0, noise.nocs_sigma, nocs.shape)
    nocs = np.clip(nocs, 0.0, 1.0)
    outliers = np.zeros_like(mask)
    fg = np.flatnonzero(mask)
    n_out = int(round(noise.outlier_fraction * len(fg)))
    if n_out:
        pick = rng.choice(fg, size=n_out, replace=False)
        outliers.flat[pick] = True
        nocs.reshape(-1, 3)[pick] = rng.uniform(0.0, 1.0, (n_out, 3))
    nocs[~mask] = 0.0
    view = ViewObservation(mask, nocs, K, camera)
    return Observation(view, gt_pose, gt_mask, out.nocs, outliers)


def perturb_relative_pose(xi: RigidTransform, noise: NoiseSpec, seed, center=None) -> RigidTransform:
    """Per-axis Gaussian rotation (``Rx Ry Rz``, degrees) and translation noise.

    The perturbation ``P`` acts in the source frame of ``xi``: it rotates
    about ``center`` (source-frame coordinates, default the origin), then
    shifts, and the result is ``xi @ P``.  With ``xi`` a camera-from-world
    transform and ``center`` the object, the camera is displaced around the
    object rather than swung about its own center.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angles = rng.normal(0.0, 1.0, 3) * np.radians(noise.relpose_rot_sigma_deg)
    shift = rng.normal(0.0, 1.0, 3) * noise.relpose_trans_sigma
    Rp = euler_xyz_to_matrix(*angles)
    c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    P = RigidTransform(Rp, c - Rp @ c + shift)
    return compose(xi, P)


# --- view sets ----------------------------------------------------------------

def sample_view_sets(cameras, sampling: ViewSampling, seed) -> list:
    """Disjoint index sets of ``sampling.set_size`` cameras.

    Each set starts from a seeded random remaining camera, its anchor, and
    grows by the remaining camera nearest to the set (``closest``), the one
    maximizing its minimum distance to the set (``farthest``) or a seeded
    random one (``random``).  Members are listed in selection order, so the
    anchor comes first; with one seed all strategies and set sizes share
    the anchor of their first set.  Leftover cameras are dropped.
    """
    n = len(cameras)
    k = sampling.set_size
    if k > n:
        raise SynthError(f"set size {k} exceeds camera count {n}")
    rng = np.random.default_rng(seed)
    centers = np.array([camera_center(c) if isinstance(c, RigidTransform) else np.asarray(c, float)
                        for c in cameras])
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    remaining = list(range(n))
    sets = []
    while len(remaining) >= k:
        members = [remaining.pop(int(rng.integers(len(remaining))))]
        while len(members) < k:
            if sampling.strategy == "random":
                j = int(rng.integers(len(remaining)))
            else:
                d = dist[np.ix_(remaining, members)].min(axis=1)
                j = int(np.argmin(d)) if sampling.strategy == "closest" else int(np.argmax(d))
            members.append(remaining.pop(j))
        sets.append(members)
    return sets


# --- scene bundles ------------------------------------------------------------------

SCENE_FILE = "scene.json"


def _view_stem(i: int) -> str:
    return f"view_{i:04d}"


def write_scene_bundle(directory, spec: SceneSpec, noise: NoiseSpec, observations,
                       mesh_info: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``scene.json`` plus per-view NOCS and mask PNGs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    views = []
    for i, obs in enumerate(observations):
        stem = _view_stem(i)
        write_nocs_png(d / f"{stem}_nocs.png", obs.view.pred_nocs)
        write_mask_png(d / f"{stem}_mask.png", obs.view.pred_mask)
        views.append({
            "index": i,
            "nocs": f"{stem}_nocs.png",
            "mask": f"{stem}_mask.png",
            "intrinsics": obs.view.intrinsics.to_dict(),
            "cam_from_world": obs.view.cam_from_world.to_list(),
            "gt_cam_from_model": obs.gt_pose.to_list(),
        })
    doc = {
        "format": "mvrefine-scene/1",
        "seed": spec.seed,
        "camera_count": spec.camera_count,
        "radius_range": list(spec.radius_range),
        "elevation_range": list(spec.elevation_range),
        "full_intrinsics": spec.intrinsics.to_dict(),
        "render_size": list(spec.render_size),
        "object_pose_world": spec.object_pose_world.to_list(),
        "mesh": dict(mesh_info or {}, diameter=spec.mesh.diameter, symmetric=spec.mesh.symmetric,
                     bounds_min=spec.mesh.bounds.min_d.tolist(),
                     bounds_max=spec.mesh.bounds.max_d.tolist()),
        "noise": noise.to_dict(),
        "views": views,
    }
    if extra:
        doc.update(extra)
    (d / SCENE_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return d


SCENE_SCHEMA = {
    "type": "object",
    "required": ["format", "seed", "object_pose_world", "mesh", "noise", "views"],
    "properties": {
        "format": {"const": "mvrefine-scene/1"},
        "seed": {"type": "integer", "minimum": 0},
        "object_pose_world": {"$ref": "#/$defs/mat4"},
        "mesh": {"type": "object", "required": ["diameter", "symmetric", "bounds_min", "bounds_max"]},
        "noise": {"type": "object"},
        "views": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["index", "nocs", "mask", "intrinsics", "cam_from_world"],
                "properties": {
                    "cam_from_world": {"$ref": "#/$defs/mat4"},
                    "gt_cam_from_model": {"$ref": "#/$defs/mat4"},
                    "intrinsics": {
                        "type": "object",
                        "required": ["fx", "fy", "cx", "cy", "width", "height"],
                    },
                },
            },
        },
    },
    "$defs": {
        "mat4": {
            "type": "array", "minItems": 4, "maxItems": 4,
            "items": {"type": "array", "minItems": 4, "maxItems": 4, "items": {"type": "number"}},
        },
    },
}


@dataclass
class SceneBundle:
    directory: Path
    doc: dict
    views: list
    gt_poses: list          # camera-from-model per view, or None

    @property
    def symmetric(self) -> bool:
        return bool(self.doc["mesh"].get("symmetric", False))


def validate_scene_doc(doc: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SynthError(f"scene.json: {exc.message}") from exc


def read_scene_bundle(directory) -> SceneBundle:
    d = Path(directory)
    try:
        doc = json.loads((d / SCENE_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SynthError(f"cannot read {d / SCENE_FILE}: {exc}") from exc
    validate_scene_doc(doc)
    views, gts = [], []
    try:
        for entry in doc["views"]:
            K = CameraIntrinsics.from_dict(entry["intrinsics"])
            mask = read_mask_png(d / entry["mask"])
            nocs = read_nocs_png(d / entry["nocs"])
            views.append(ViewObservation(mask, nocs, K, RigidTransform.from_list(entry["cam_from_world"])))
            gt = entry.get("gt_cam_from_model")
            gts.append(RigidTransform.from_list(gt) if gt is not None else None)
    except (ValueError, OSError) as exc:
        raise SynthError(f"malformed scene bundle {d}: {exc}") from exc
    return SceneBundle(d, doc, views, gts)


MESH_FILE = "mesh.ply"


def write_bundle_mesh(directory, mesh: NocsMesh) -> str:
    """Store the (possibly decimated) mesh next to ``scene.json``."""
    Path(directory).mkdir(parents=True, exist_ok=True)
    write_ply(Path(directory) / MESH_FILE, mesh.vertices, mesh.faces)
    return MESH_FILE


def load_bundle_mesh(bundle: SceneBundle) -> NocsMesh:
    """The bundle's mesh with the NOCS bounds and diameter recorded in ``scene.json``.

    The recorded bounds are those of the original model, which may differ
    from the stored (decimated) vertices.
    """
    info = bundle.doc["mesh"]
    name = info.get("file", MESH_FILE)
    try:
        v, f = read_ply(bundle.directory / name)
        bounds = NocsBounds(info["bounds_min"], info["bounds_max"])
        return NocsMesh.from_arrays(v, f, bounds, float(info["diameter"]),
                                    symmetric=bool(info.get("symmetric", False)))
    except (OSError, ValueError) as exc:
        raise SynthError(f"cannot load bundle mesh {bundle.directory / name}: {exc}") from exc
