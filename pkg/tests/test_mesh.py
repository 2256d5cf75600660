import logging

import numpy as np
import pytest

from mvrefine.geom import nocs_project
from mvrefine.mesh import (MeshError, NocsMesh, box, decimate_mesh, hausdorff_distance, icosphere,
                           load_mesh, mesh_diameter, read_obj, read_ply, write_obj, write_ply)


def brute_diameter(v):
    return float(np.sqrt(((v[:, None] - v[None]) ** 2).sum(-1).max()))


def test_diameter_examples(rng):
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    assert mesh_diameter(cube) == pytest.approx(np.sqrt(3))
    assert mesh_diameter([[0, 0, 0], [3, 4, 0]]) == pytest.approx(5.0)
    pts = rng.normal(size=(1000, 3))
    assert mesh_diameter(pts) == pytest.approx(brute_diameter(pts), abs=1e-12)
    with pytest.raises(MeshError):
        mesh_diameter([[1, 2, 3]])


def test_mesh_invariants(blob):
    assert np.abs(blob.vertex_nocs - nocs_project(blob.bounds, blob.vertices)).max() < 1e-6
    assert blob.diameter == pytest.approx(brute_diameter(blob.vertices), abs=1e-6)
    assert blob.face_count > 0
    assert blob.vertex_nocs.min() >= 0 and blob.vertex_nocs.max() <= 1


def test_mesh_rejects_bad_faces():
    v, f = box()
    with pytest.raises(MeshError):
        NocsMesh.from_arrays(v, f + 100)
    with pytest.raises(MeshError):
        NocsMesh.from_arrays(v, np.zeros((0, 3), int))


def test_decimate_noop_below_budget(blob):
    res = decimate_mesh(blob, blob.face_count)
    assert res.mesh is blob


def test_decimate_icosphere():
    mesh = NocsMesh.from_arrays(*icosphere(3, 0.1))
    assert mesh.face_count == 1280
    res = decimate_mesh(mesh, 1000)
    assert res.mesh.face_count <= 1000
    assert res.hausdorff < 0.02 * mesh.diameter
    # the NOCS frame is that of the input
    assert np.array_equal(res.mesh.bounds.min_d, mesh.bounds.min_d)
    assert np.array_equal(res.mesh.bounds.max_d, mesh.bounds.max_d)
    assert res.mesh.diameter == mesh.diameter
    assert np.allclose(res.mesh.vertex_nocs, nocs_project(mesh.bounds, res.mesh.vertices))
    # independent check of the reported distance
    assert hausdorff_distance(mesh, res.mesh, seed=7) == pytest.approx(res.hausdorff, rel=0.25)


def test_decimate_cube_floor_case(caplog):
    mesh = NocsMesh.from_arrays(*box())
    with caplog.at_level(logging.WARNING):
        res = decimate_mesh(mesh, 4)
    assert res.mesh.face_count <= 4 or (res.mesh is mesh and caplog.records)


def test_decimate_rejects_tiny_budget(blob):
    with pytest.raises(MeshError):
        decimate_mesh(blob, 3)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, blob, binary):
    p = tmp_path / "m.ply"
    write_ply(p, blob.vertices, blob.faces, binary=binary)
    v, f = read_ply(p)
    assert np.array_equal(v, blob.vertices) and np.array_equal(f, blob.faces)


def test_obj_round_trip_and_fan(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 1\nf 1/1 2/2 3/3 4/4\n")
    v, f = read_obj(p)
    assert v.shape == (4, 3)
    assert f.tolist() == [[0, 1, 2], [0, 2, 3]]
    write_obj(tmp_path / "r.obj", v, f)
    v2, f2 = read_obj(tmp_path / "r.obj")
    assert np.array_equal(v, v2) and np.array_equal(f, f2)


def test_load_mesh_rejects_planar(tmp_path):
    p = tmp_path / "flat.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(MeshError):
        load_mesh(p)
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "x.stl")


def test_load_mesh_diameter_override(tmp_path, blob):
    p = tmp_path / "m.ply"
    write_ply(p, blob.vertices, blob.faces)
    assert load_mesh(p).diameter == pytest.approx(blob.diameter)
    assert load_mesh(p, diameter=0.5, symmetric=True).diameter == 0.5


def test_closest_point_matches_dense_grid(rng):
    from mvrefine.mesh import closest_point_on_triangles

    a, b, c = rng.normal(size=(3, 200, 3))
    p = rng.normal(size=(200, 3)) * 2
    q = closest_point_on_triangles(p, a, b, c)
    u, v = np.meshgrid(np.linspace(0, 1, 201), np.linspace(0, 1, 201))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    for i in range(len(p)):
        grid = a[i] + u[:, None] * (b[i] - a[i]) + v[:, None] * (c[i] - a[i])
        dmin = np.linalg.norm(grid - p[i], axis=1).min()
        d = np.linalg.norm(q[i] - p[i])
        assert d <= dmin + 1e-12
        assert d >= dmin - 0.02 * np.linalg.norm(b[i] - a[i]) - 0.02 * np.linalg.norm(c[i] - a[i])


def test_hausdorff_of_identical_meshes_is_zero(blob):
    assert hausdorff_distance(blob, blob) < 1e-12
