"""Triangle meshes carrying per-vertex NOCS colors.

Includes PLY/OBJ readers and writers, a few procedural test objects, the
vertex-clustering decimator and the object diameter.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .geom import GeometryError, NocsBounds, nocs_bounds, nocs_project

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NocsMesh:
    """Triangle mesh with NOCS colors tied to fixed bounds.

    ``bounds`` is the NOCS frame; it is taken from the original model and
    survives decimation unchanged.
    """

    vertices: np.ndarray
    faces: np.ndarray
    bounds: NocsBounds
    diameter: float
    vertex_nocs: np.ndarray = field(default=None)
    symmetric: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) == 0:
            raise MeshError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("face index out of range")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex")
        nocs = nocs_project(self.bounds, v)
        for a in (v, f, nocs):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "vertex_nocs", nocs)
        object.__setattr__(self, "diameter", float(self.diameter))

    @classmethod
    def from_arrays(cls, vertices, faces, bounds: NocsBounds | None = None,
                    diameter: float | None = None, symmetric: bool = False) -> "NocsMesh":
        """Build a mesh; bounds and diameter default to the vertices' own."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if bounds is None:
            bounds = nocs_bounds(v)
        if diameter is None:
            diameter = mesh_diameter(v)
        return cls(v, faces, bounds, diameter, symmetric=symmetric)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def with_diameter(self, diameter: float) -> "NocsMesh":
        return NocsMesh(self.vertices, self.faces, self.bounds, diameter, symmetric=self.symmetric)


def mesh_diameter(vertices) -> float:
    """Largest pairwise vertex distance.

    The farthest pair always lies on the convex hull, so only hull vertices
    are compared.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) < 2:
        raise MeshError("diameter needs at least two vertices")
    candidates = v
    if len(v) > 64:
        try:
            candidates = v[ConvexHull(v).vertices]
        except QhullError:
            candidates = v
    best = 0.0
    for start in range(0, len(candidates), 512):
        block = candidates[start:start + 512]
        d2 = ((block[:, None, :] - candidates[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


# --- procedural models ----------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0):
    """Vertices and faces of a subdivided icosahedron (20 * 4**n faces)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def box(size=(1.0, 1.0, 1.0)):
    sx, sy, sz = (0.5 * s for s in size)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    f = np.array([
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),  # -x, +x
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),  # -y, +y
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),  # -z, +z
    ], dtype=np.int64)
    return v, f


def uv_sphere(rings: int, segments: int):
    """Latitude/longitude sphere with ``2 * segments * (rings - 1)`` faces."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, rings):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2 * np.pi * j / segments
            verts.append((np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    south = len(verts) - 1
    for j in range(segments):
        faces.append((0, 1 + j, 1 + (j + 1) % segments))
    for i in range(rings - 2):
        r0 = 1 + i * segments
        r1 = r0 + segments
        for j in range(segments):
            a, b = r0 + j, r0 + (j + 1) % segments
            c, d = r1 + j, r1 + (j + 1) % segments
            faces.append((a, c, d))
            faces.append((a, d, b))
    last = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append((south, last + (j + 1) % segments, last + j))
    return np.array(verts), np.array(faces, dtype=np.int64)


def asymmetric_blob(diameter: float = 0.2, rings: int = 20, segments: int = 26):
    """A lumpy, elongated closed surface without rotational symmetries.

    The default has 988 faces, under the 1000-face rendering budget.
    """
    v, f = uv_sphere(rings, segments)
    x, y, z = v.T
    r = (1.0 + 0.25 * np.exp(-((x - 0.7) ** 2 + (y - 0.5) ** 2 + z ** 2) * 3.0)
         + 0.18 * np.exp(-((x + 0.3) ** 2 + (y + 0.8) ** 2 + (z - 0.4) ** 2) * 4.0)
         + 0.08 * np.sin(3.0 * x + 2.0 * z))
    v = v * r[:, None] * np.array([1.4, 0.9, 0.7])
    v -= 0.5 * (v.min(axis=0) + v.max(axis=0))
    v *= diameter / mesh_diameter(v)
    return v, f


def make_test_object(kind: str = "blob", diameter: float = 0.2) -> NocsMesh:
    if kind == "blob":
        v, f = asymmetric_blob(diameter)
    elif kind == "sphere":
        v, f = icosphere(3, diameter / 2.0)
    elif kind == "box":
        v, f = box((diameter * 0.6, diameter * 0.45, diameter * 0.3))
    else:
        raise MeshError(f"unknown test object {kind!r}")
    return NocsMesh.from_arrays(v, f)


# --- decimation -----------------------------------------------------------

def _cluster(vertices, faces, cells: int, lo, span):
    idx = np.floor((vertices - lo) / span * cells).astype(np.int64)
    idx = np.clip(idx, 0, cells - 1)
    keys = (idx[:, 0] * cells + idx[:, 1]) * cells + idx[:, 2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, vertices)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    new_v = sums / counts[:, None]
    new_f = inverse[faces]
    keep = ((new_f[:, 0] != new_f[:, 1]) & (new_f[:, 1] != new_f[:, 2])
            & (new_f[:, 0] != new_f[:, 2]))
    new_f = new_f[keep]
    if len(new_f):
        # drop duplicate faces (same vertex set)
        _, first = np.unique(np.sort(new_f, axis=1), axis=0, return_index=True)
        new_f = new_f[np.sort(first)]
    used = np.unique(new_f)
    remap = -np.ones(len(new_v), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return new_v[used], remap[new_f] if len(new_f) else new_f


def sample_surface(vertices, faces, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    choice = rng.choice(len(faces), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    t = tri[choice]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest points on triangles ``(a, b, c)`` to points ``p`` (all (n, 3)), by Voronoi region."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + v[:, None] * ab + w[:, None] * ac
        # edge regions, then vertex regions (later assignments take priority)
        t = np.where(d4 - d3 + d5 - d6 != 0, (d4 - d3) / (d4 - d3 + d5 - d6), 0.0)
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out[m] = (b + t[:, None] * (c - b))[m]
        t = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out[m] = (a + t[:, None] * ac)[m]
        t = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out[m] = (a + t[:, None] * ab)[m]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    return out


def point_surface_distance(points, vertices, faces, candidates: int = 24) -> np.ndarray:
    """Distance from each point to a triangle mesh surface.

    Exact against the ``candidates`` faces whose centroids are nearest,
    which covers the true nearest face unless triangle sizes vary wildly.
    """
    tri = vertices[faces]
    k = min(candidates, len(faces))
    _, idx = cKDTree(tri.mean(axis=1)).query(points, k=k)
    idx = np.asarray(idx).reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for j in range(k):
        t = tri[idx[:, j]]
        q = closest_point_on_triangles(points, t[:, 0], t[:, 1], t[:, 2])
        best = np.minimum(best, np.linalg.norm(points - q, axis=1))
    return best


def hausdorff_distance(mesh_a: NocsMesh, mesh_b: NocsMesh, samples: int = 20000,
                       seed: int = 0) -> float:
    """Symmetric Hausdorff distance between two surfaces.

    Dense surface samples of each mesh (plus its vertices) are measured
    against the other surface exactly.
    """
    rng = np.random.default_rng(seed)
    pa = np.vstack([sample_surface(mesh_a.vertices, mesh_a.faces, samples, rng), mesh_a.vertices])
    pb = np.vstack([sample_surface(mesh_b.vertices, mesh_b.faces, samples, rng), mesh_b.vertices])
    dab = point_surface_distance(pa, mesh_b.vertices, mesh_b.faces).max()
    dba = point_surface_distance(pb, mesh_a.vertices, mesh_a.faces).max()
    return float(max(dab, dba))


@dataclass(frozen=True)
class DecimationResult:
    mesh: NocsMesh
    hausdorff: float
    grid_cells: int


def decimate_mesh(mesh: NocsMesh, target_faces: int = 1000, report_hausdorff: bool = True) -> DecimationResult:
    """Reduce ``mesh`` to at most ``target_faces`` faces by vertex clustering.

    The clustering grid is the finest one meeting the budget.  NOCS bounds
    and the diameter of the input are kept, so the NOCS frame never moves.
    If no grid reaches the budget without collapsing the mesh, the input is
    returned unchanged with a warning.
    """
    if target_faces < 4:
        raise MeshError("target_faces must be at least 4")
    if mesh.face_count <= target_faces:
        return DecimationResult(mesh, 0.0, 0)
    lo = mesh.vertices.min(axis=0)
    span = np.maximum(mesh.vertices.max(axis=0) - lo, 1e-12) * (1 + 1e-9)
    hi_cells, lo_cells = 512, 1
    best = None
    # largest cell count whose face count fits; face count grows with cells
    while hi_cells - lo_cells > 1:
        mid = (hi_cells + lo_cells) // 2
        v, f = _cluster(mesh.vertices, mesh.faces, mid, lo, span)
        if len(f) <= target_faces:
            lo_cells = mid
            if len(f) > 0:
                best = (mid, v, f)
        else:
            hi_cells = mid
    # face count is not strictly monotone in the cell count; scan downward
    # from the bisection result for a non-empty fit
    if best is None or best[0] != lo_cells:
        for cells in range(lo_cells, 0, -1):
            v, f = _cluster(mesh.vertices, mesh.faces, cells, lo, span)
            if 0 < len(f) <= target_faces:
                best = (cells, v, f)
                break
    if best is None:
        log.warning("cannot decimate %d faces to %d without collapsing the mesh; "
                    "keeping it unchanged", mesh.face_count, target_faces)
        return DecimationResult(mesh, 0.0, 0)
    cells, v, f = best
    out = NocsMesh(v, f, mesh.bounds, mesh.diameter, symmetric=mesh.symmetric)
    h = hausdorff_distance(mesh, out) if report_hausdorff else float("nan")
    return DecimationResult(out, h, cells)


# --- I/O ------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _fan(polys):
    tris = []
    for p in polys:
        for k in range(1, len(p) - 1):
            tris.append((p[0], p[k], p[k + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_ply(path):
    """Positions and faces from an ASCII or binary PLY file."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = None
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                else:
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None, None))
            elif tok[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
            raise MeshError(f"{path}: unsupported PLY format {fmt}")
        data = fh.read()

    vertices = None
    polys = []
    if fmt == "ascii":
        values = data.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype, ctype, itype in props:
                    if ptype == "list":
                        n = int(values[pos]); pos += 1
                        row[pname] = [int(x) for x in values[pos:pos + n]]; pos += n
                    else:
                        row[pname] = float(values[pos]); pos += 1
                rows.append(row)
            if name == "vertex":
                vertices = np.array([[r["x"], r["y"], r["z"]] for r in rows])
            elif name == "face":
                key = next(p[0] for p in props if p[1] == "list")
                polys = [r[key] for r in rows]
    else:
        end = "<" if fmt == "binary_little_endian" else ">"
        pos = 0
        for name, count, props in elements:
            if all(p[1] != "list" for p in props):
                dt = np.dtype([(p[0], end + p[1]) for p in props])
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                if name == "vertex":
                    vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                continue
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype, ctype, itype in props:
                    if ptype == "list":
                        cdt = np.dtype(end + ctype)
                        n = int(np.frombuffer(data, cdt, 1, pos)[0]); pos += cdt.itemsize
                        idt = np.dtype(end + itype)
                        row[pname] = np.frombuffer(data, idt, n, pos).tolist(); pos += idt.itemsize * n
                    else:
                        sdt = np.dtype(end + ptype)
                        row[pname] = float(np.frombuffer(data, sdt, 1, pos)[0]); pos += sdt.itemsize
                rows.append(row)
            if name == "face":
                key = next(p[0] for p in props if p[1] == "list")
                polys = [r[key] for r in rows]
    if vertices is None:
        raise MeshError(f"{path}: no vertex element")
    return vertices, _fan(polys)


def read_obj(path):
    verts, polys = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                polys.append(idx)
    return np.array(verts, dtype=np.float64).reshape(-1, 3), _fan(polys)


def load_mesh(path, symmetric: bool = False, diameter: float | None = None) -> NocsMesh:
    """Read a PLY or OBJ model.  Bounds come from the file's vertices."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        v, f = read_ply(path)
    elif ext == ".obj":
        v, f = read_obj(path)
    else:
        raise MeshError(f"unsupported mesh format {ext!r}")
    if len(f) == 0:
        raise MeshError(f"{path}: no faces")
    try:
        bounds = nocs_bounds(v)
    except GeometryError as exc:
        raise MeshError(f"{path}: {exc}") from exc
    return NocsMesh.from_arrays(v, f, bounds, diameter, symmetric=symmetric)


def write_ply(path, vertices, faces, binary: bool = True):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(vertices)}", "property double x", "property double y",
              "property double z", f"element face {len(faces)}",
              "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vertices.astype("<f8").tobytes())
            rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", 3)])
            rec["n"] = 3
            rec["i"] = faces
            fh.write(rec.tobytes())
        else:
            for x, y, z in vertices.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n".encode("ascii"))
            for a, b, c in faces:
                fh.write(f"3 {a} {b} {c}\n".encode("ascii"))


def write_obj(path, vertices, faces):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in np.asarray(vertices, dtype=np.float64).tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
