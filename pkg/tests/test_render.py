import numpy as np
import pytest

from conftest import K64, raycast
from mvrefine import _raster
from mvrefine.geom import (CameraIntrinsics, NocsBounds, RigidTransform, axis_angle_to_matrix,
                           nocs_project, random_rotation, rotation_from_6d, rotation_to_6d)
from mvrefine.gradcheck import central_differences, relative_errors
from mvrefine.mesh import NocsMesh, asymmetric_blob, icosphere, make_test_object
from mvrefine.render import (SoftRenderConfig, SoftRenderContext, iou, render_hard, render_soft,
                             render_soft_backward)

K128 = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)


def front(z=0.6, rot=None):
    return RigidTransform(np.eye(3) if rot is None else rot, [0.0, 0.0, z])


def erode(mask, r):
    """Pixels whose (2r+1)^2 neighborhood lies inside ``mask``."""
    m = np.pad(mask, r)
    out = np.ones_like(mask, dtype=bool)
    H, W = mask.shape
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out &= m[dy:dy + H, dx:dx + W]
    return out


def single_triangle():
    v = np.array([[-0.1, -0.1, 0.0], [0.12, -0.08, 0.0], [0.0, 0.12, 0.0]])
    bounds = NocsBounds([-0.2, -0.2, -0.2], [0.2, 0.2, 0.2])
    return NocsMesh.from_arrays(v, [[0, 1, 2]], bounds=bounds, diameter=0.25)


# --- hard rendering -----------------------------------------------------------

def test_constant_vertex_nocs_interpolates_to_constant():
    u = np.array([10.0, 50.0, 30.0])
    v = np.array([10.0, 15.0, 55.0])
    z = np.array([1.0, 1.5, 2.0])
    depth, nocs, fid = _raster.rasterize_hard(u, v, z, np.array([[0, 1, 2]]), np.full((3, 3), 0.5),
                                             64, 64, 1e-6)
    fg = fid >= 0
    assert fg.sum() > 500
    assert np.abs(nocs[fg] - 0.5).max() < 1e-12


def test_nearer_triangle_wins():
    v = np.array([[-0.1, -0.1, 0.0], [0.1, -0.1, 0.0], [0.0, 0.1, 0.0],
                  [-0.1, -0.05, 0.05], [0.1, -0.05, 0.05], [0.0, 0.12, 0.05]])
    mesh = NocsMesh.from_arrays(v, [[0, 1, 2], [3, 4, 5]])
    out, fid = render_hard(mesh, front(), K128, return_faces=True)
    both = np.zeros_like(fid, dtype=bool)
    # pixels covered by each triangle alone
    for f in (0, 1):
        sub = NocsMesh.from_arrays(v, [[0, 1, 2], [3, 4, 5]][f:f + 1], bounds=mesh.bounds, diameter=1)
        m = render_hard(sub, front(), K128).mask > 0
        both = m if f == 0 else both & m
    assert both.sum() > 100
    assert np.all(fid[both] == 0)   # z = 0 is nearer than z = 0.05
    assert np.allclose(out.nocs[both][:, 2], 0.0)


def test_sphere_silhouette_area():
    r, z = 0.3, 1.0
    mesh = NocsMesh.from_arrays(*icosphere(5, r))
    out = render_hard(mesh, front(z), K128)
    analytic = np.pi * (100.0 * r / np.sqrt(z * z - r * r)) ** 2
    assert abs(out.mask.sum() - analytic) / analytic < 0.03


def test_hard_render_invariants(blob, rng):
    for _ in range(3):
        out = render_hard(blob, front(rot=random_rotation(rng)), K128)
        fg = out.mask > 0
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert np.array_equal(fg, np.isfinite(out.depth))
        assert np.all(out.nocs[~fg] == 0)
        assert out.nocs[fg].min() >= 0 and out.nocs[fg].max() <= 1
        assert out.mask.shape == (128, 128) and out.nocs.shape == (128, 128, 3)


def test_hard_nocs_matches_raycast(blob, rng):
    pose = front(0.5, random_rotation(rng))
    out = render_hard(blob, pose, K128)
    fg = np.argwhere(out.mask > 0)
    pix = fg[rng.choice(len(fg), 300, replace=False)]
    hit = raycast(blob, pose, K128, pix)
    ok = np.isfinite(hit[:, 0])
    assert ok.mean() > 0.99
    expect = nocs_project(blob.bounds, hit[ok])
    got = out.nocs[pix[ok, 0], pix[ok, 1]]
    assert np.abs(got - expect).max() < 1e-5
    assert np.allclose(out.depth[pix[ok, 0], pix[ok, 1]], pose.apply(hit[ok])[:, 2], atol=1e-9)


def test_off_screen_object_gives_empty_mask(blob):
    out = render_hard(blob, RigidTransform(np.eye(3), [5.0, 0.0, 0.5]), K128)
    assert out.mask.sum() == 0
    behind = render_hard(blob, RigidTransform(np.eye(3), [0.0, 0.0, -1.0]), K128)
    assert behind.mask.sum() == 0


# --- soft rendering -----------------------------------------------------------

def test_soft_config_validation():
    with pytest.raises(ValueError):
        SoftRenderConfig(sigma=-1)
    with pytest.raises(ValueError):
        SoftRenderConfig(near=2.0, far=1.0)
    assert SoftRenderConfig().resolved_sigma(K128) == pytest.approx(1e-5 * 2 * 128 ** 2)


def test_soft_far_and_interior_pixels():
    mesh = single_triangle()
    pose = front(0.6)
    soft = render_soft(mesh, pose, K128)
    hard = render_hard(mesh, pose, K128)
    assert soft.mask[5, 5] < 1e-4
    inner = erode(hard.mask > 0, 4)
    assert inner.sum() > 50
    assert soft.mask[inner].min() > 1 - 1e-4
    assert np.abs(soft.nocs[inner] - hard.nocs[inner]).max() < 1e-3


def test_soft_sphere_nocs_close_to_hard():
    mesh = make_test_object("sphere")
    pose = front(0.5, axis_angle_to_matrix([0.3, -0.2, 0.5]))
    soft = render_soft(mesh, pose, K128)
    hard = render_hard(mesh, pose, K128)
    inner = erode(hard.mask > 0, 2)
    assert np.abs(soft.nocs[inner] - hard.nocs[inner]).mean() < 0.01


def test_soft_invariant_to_face_order(blob, rng):
    perm = rng.permutation(blob.face_count)
    shuffled = NocsMesh(blob.vertices, blob.faces[perm][:, [1, 2, 0]], blob.bounds, blob.diameter)
    pose = front(0.5, random_rotation(rng))
    a = render_soft(blob, pose, K64)
    b = render_soft(shuffled, pose, K64)
    assert np.abs(a.mask - b.mask).max() < 1e-12
    assert np.abs(a.nocs - b.nocs).max() < 1e-9


def test_soft_mask_sigma_limit(blob, rng):
    for _ in range(3):
        pose = front(0.5, random_rotation(rng))
        hard = render_hard(blob, pose, K128).mask > 0
        soft = render_soft(blob, pose, K128, SoftRenderConfig(sigma=1e-4, gamma=1e-6))
        band = erode(~hard, 2) | erode(hard, 2)
        bad = np.abs(soft.mask - hard)[band] > 0.01
        assert bad.mean() < 1e-3


def test_soft_render_is_deterministic(blob):
    pose = front(0.5, axis_angle_to_matrix([0.1, 0.7, -0.3]))
    a = render_soft(blob, pose, K64)
    b = render_soft(blob, pose, K64)
    assert np.array_equal(a.mask, b.mask) and np.array_equal(a.nocs, b.nocs)


# --- gradients ----------------------------------------------------------------

def test_zero_upstream_gives_zero_gradient(blob):
    g = render_soft_backward(blob, front(0.5), K64, None, np.zeros((64, 64, 3)), np.zeros((64, 64)))
    assert np.all(g.d_rot6 == 0) and np.all(g.d_trans == 0)


def test_rejects_wrong_upstream_shape(blob):
    with pytest.raises(ValueError):
        render_soft_backward(blob, front(0.5), K64, None, np.zeros((32, 32, 3)), np.zeros((64, 64)))


def test_axial_translation_of_symmetric_object():
    mesh = NocsMesh.from_arrays(*icosphere(3, 0.1))
    g = render_soft_backward(mesh, front(0.6), K64, None, np.zeros((64, 64, 3)), np.ones((64, 64)))
    assert abs(g.d_trans[2]) > 0
    assert np.abs(g.d_trans[:2]).max() < 1e-6 * abs(g.d_trans[2])


def _functional(mesh, x, K, d_nocs, d_mask):
    pose = RigidTransform(rotation_from_6d(x[:6]), x[6:])
    out = render_soft(mesh, pose, K)
    return float((d_nocs * out.nocs).sum() + (d_mask * out.mask).sum())


MESHES = {"sphere-80": (icosphere, (1, 0.1)), "blob-500": (asymmetric_blob, (0.2, 11, 25)),
          "blob-988": (asymmetric_blob, (0.2,))}


@pytest.mark.parametrize("name", list(MESHES))
def test_gradient_matches_finite_differences(name):
    fn, args = MESHES[name]
    mesh = NocsMesh.from_arrays(*fn(*args))
    rng = np.random.default_rng(list(MESHES).index(name))
    worst = 0.0
    for _ in range(20):
        R = random_rotation(rng)
        r6 = rotation_to_6d(R)
        x = np.concatenate([r6.a1, r6.a2, rng.normal(0, 0.01, 3) + [0, 0, 0.5]])
        d_nocs = rng.normal(size=(64, 64, 3))
        d_mask = rng.normal(size=(64, 64))
        g = SoftRenderContext(mesh, RigidTransform(R, x[6:]), K64, SoftRenderConfig()).backward(
            d_nocs, d_mask).as_array()
        fd = central_differences(lambda p: _functional(mesh, p, K64, d_nocs, d_mask), x)
        worst = max(worst, float(relative_errors(g, fd)[0].max()))
    assert worst < 1e-3, worst


# --- IOU ----------------------------------------------------------------------

def test_iou_examples():
    a = np.zeros((10, 10), bool)
    a[2:6, 2:6] = True
    assert iou(a, a) == 1.0
    b = np.zeros_like(a)
    b[7:9, 7:9] = True
    assert iou(a, b) == 0.0
    c = np.zeros_like(a)
    c[2:6, 4:8] = True
    assert iou(a, c) == pytest.approx(1 / 3)
    assert iou(np.zeros_like(a), np.zeros_like(a)) == 0.0
    with pytest.raises(ValueError):
        iou(a, a[:5])
