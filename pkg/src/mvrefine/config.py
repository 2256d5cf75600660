"""Run configuration: one JSON file, every field defaulted.

A minimal config is ``{}``.  Sections mirror the module dataclasses
(``scene``, ``noise``, ``sampling``, ``ransac``, ``refine``) plus ``paths``,
``mesh`` (used when no mesh file is given) and ``sweep`` (the experiment
grid).  :func:`config_hash` identifies a resolved config in manifests.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from .geom import CameraIntrinsics
from .mesh import NocsMesh, decimate_mesh, load_mesh, make_test_object
from .pnp import RansacConfig
from .refine import RefineConfig
from .synth import DEFAULT_INTRINSICS, STRATEGIES, NoiseSpec, SceneSpec, ViewSampling


class ConfigError(ValueError):
    pass


VERBOSITY = ("debug", "info", "warning", "error")

DEFAULTS = {
    "seed": 0,
    "verbosity": "warning",
    "paths": {"mesh": None, "scene_dir": None, "output_dir": "out"},
    "mesh": {"builtin": "blob", "target_faces": 1000, "symmetric": False, "diameter": None},
    "scene": {
        "camera_count": 16,
        "radius_range": None,
        "elevation_range": [15.0, 75.0],
        "intrinsics": DEFAULT_INTRINSICS.to_dict(),
        "render_size": [128, 128],
        "crop_margin": 1.3,
    },
    "noise": NoiseSpec().to_dict(),
    "sampling": {"strategy": "farthest", "set_size": 2},
    "ransac": RansacConfig().to_dict(),
    "refine": RefineConfig().to_dict(),
    "sweep": {
        "trials": 20,
        "views": [1, 2, 4],
        "strategies": ["farthest"],
        # (rotation sigma in degrees, translation level as a fraction of the diameter)
        "relpose": [[0.0, 0.0]],
        "jobs": 1,
        "figures": True,
    },
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _section(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _section({
    "seed": {"type": "integer", "minimum": 0},
    "verbosity": {"enum": list(VERBOSITY)},
    "paths": _section({
        "mesh": {"type": ["string", "null"]},
        "scene_dir": {"type": ["string", "null"]},
        "output_dir": {"type": "string"},
    }),
    "mesh": _section({
        "builtin": {"enum": ["blob", "sphere", "box"]},
        "target_faces": {"type": "integer", "minimum": 4},
        "symmetric": {"type": "boolean"},
        "diameter": {"type": ["number", "null"], "exclusiveMinimum": 0},
    }),
    "scene": _section({
        "camera_count": {"type": "integer", "minimum": 1},
        "radius_range": {"oneOf": [_pair, {"type": "null"}]},
        "elevation_range": _pair,
        "intrinsics": _section({k: _num for k in ("fx", "fy", "cx", "cy")}
                               | {"width": _int, "height": _int},
                               required=("fx", "fy", "cx", "cy", "width", "height")),
        "render_size": {"type": "array", "items": {"type": "integer", "minimum": 8},
                        "minItems": 2, "maxItems": 2},
        "crop_margin": {"type": "number", "exclusiveMinimum": 0},
    }),
    "noise": _section({
        "nocs_sigma": {"type": "number", "minimum": 0},
        "outlier_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "mask_boundary_noise_px": {"type": "integer", "minimum": 0},
        "relpose_rot_sigma_deg": {"type": "number", "minimum": 0},
        "relpose_trans_sigma": {"type": "number", "minimum": 0},
    }),
    "sampling": _section({
        "strategy": {"enum": list(STRATEGIES)},
        "set_size": {"type": "integer", "minimum": 1},
    }),
    "ransac": _section({
        "max_iterations": {"type": "integer", "minimum": 1},
        "inlier_threshold_px": {"type": "number", "exclusiveMinimum": 0},
        "sample_size": {"type": "integer", "minimum": 4},
        "min_inliers": {"type": "integer", "minimum": 1},
        "min_inlier_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "confidence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "max_correspondences": {"type": "integer", "minimum": 4},
    }),
    "refine": {"type": "object"},   # checked by RefineConfig itself
    "sweep": _section({
        "trials": {"type": "integer", "minimum": 1},
        "views": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "strategies": {"type": "array", "items": {"enum": list(STRATEGIES)}, "minItems": 1},
        "relpose": {"type": "array", "items": _pair, "minItems": 1},
        "jobs": {"type": "integer", "minimum": 1},
        "figures": {"type": "boolean"},
    }),
})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "refine":
            out[k] = _merge(out[k], v)
        elif k == "refine" and isinstance(v, dict):
            out[k] = _merge_refine(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _merge_refine(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k == "soft" and isinstance(v, dict):
            out["soft"] = dict(out["soft"], **v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """A validated, fully resolved configuration document."""

    doc: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict | None = None, check_paths: bool = True) -> "RunConfig":
        d = d or {}
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {exc.message}") from exc
        cfg = cls(_merge(DEFAULTS, d))
        cfg._check_sections()
        if check_paths:
            cfg.check_paths()
        return cfg

    @classmethod
    def load(cls, path=None, check_paths: bool = True) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, check_paths)
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(d, check_paths)

    def _check_sections(self):
        # building each section runs the dataclass validators
        try:
            self.noise()
            self.sampling()
            self.ransac()
            self.refine()
            CameraIntrinsics.from_dict(self.doc["scene"]["intrinsics"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def check_paths(self):
        mesh = self.doc["paths"]["mesh"]
        if mesh is not None and not Path(mesh).is_file():
            raise ConfigError(f"mesh file {mesh} does not exist")
        scene = self.doc["paths"]["scene_dir"]
        if scene is not None and not Path(scene).is_dir():
            raise ConfigError(f"scene directory {scene} does not exist")

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply CLI flags (``seed``, ``views``, ``strategy``, ``out``, ``jobs``)."""
        doc = copy.deepcopy(self.doc)
        if kw.get("seed") is not None:
            doc["seed"] = int(kw["seed"])
        if kw.get("views") is not None:
            doc["sampling"]["set_size"] = int(kw["views"])
            doc["sweep"]["views"] = [int(kw["views"])]
        if kw.get("strategy") is not None:
            doc["sampling"]["strategy"] = kw["strategy"]
            doc["sweep"]["strategies"] = [kw["strategy"]]
        if kw.get("out") is not None:
            doc["paths"]["output_dir"] = str(kw["out"])
        if kw.get("jobs") is not None:
            doc["sweep"]["jobs"] = int(kw["jobs"])
        if kw.get("scene_dir") is not None:
            doc["paths"]["scene_dir"] = str(kw["scene_dir"])
        if kw.get("mesh") is not None:
            doc["paths"]["mesh"] = str(kw["mesh"])
        out = RunConfig(doc)
        out._check_sections()
        return out

    # --- section builders ---------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.doc["paths"]["output_dir"])

    def noise(self) -> NoiseSpec:
        return NoiseSpec.from_dict(self.doc["noise"])

    def sampling(self) -> ViewSampling:
        return ViewSampling(**self.doc["sampling"])

    def ransac(self) -> RansacConfig:
        return replace(RansacConfig(), **self.doc["ransac"])

    def refine(self) -> RefineConfig:
        return RefineConfig.from_dict(self.doc["refine"])

    def load_mesh(self) -> NocsMesh:
        """The configured mesh, decimated to the face budget."""
        m = self.doc["mesh"]
        path = self.doc["paths"]["mesh"]
        if path is not None:
            mesh = load_mesh(path, symmetric=m["symmetric"], diameter=m["diameter"])
        else:
            mesh = make_test_object(m["builtin"], m["diameter"] or 0.2)
            if m["symmetric"] != mesh.symmetric:
                mesh = NocsMesh(mesh.vertices, mesh.faces, mesh.bounds, mesh.diameter,
                                symmetric=m["symmetric"])
        if mesh.face_count > m["target_faces"]:
            mesh = decimate_mesh(mesh, m["target_faces"], report_hausdorff=False).mesh
        return mesh

    def scene_spec(self, mesh: NocsMesh, seed: int) -> SceneSpec:
        s = self.doc["scene"]
        return SceneSpec(
            mesh,
            camera_count=s["camera_count"],
            radius_range=None if s["radius_range"] is None else tuple(s["radius_range"]),
            elevation_range=tuple(s["elevation_range"]),
            seed=int(seed),
            intrinsics=CameraIntrinsics.from_dict(s["intrinsics"]),
            render_size=tuple(s["render_size"]),
            crop_margin=s["crop_margin"],
        )

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)


def config_hash(doc: dict) -> str:
    """SHA-256 of the canonical JSON form of a config document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
