import numpy as np
import pytest

from conftest import K128, pnp_problem, raycast
from mvrefine.geom import (NocsBounds, RigidTransform, project_point, random_rotation)
from mvrefine.mesh import NocsMesh, icosphere
from mvrefine.metrics import add_error
from mvrefine.pnp import (Correspondences, NoPoseError, PnPError, RansacConfig,
                          correspondences_from_maps, epnp, ransac_pnp, read_correspondences_csv,
                          write_correspondences_csv)
from mvrefine.render import render_hard


def geodesic_deg(Ra, Rb):
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


def project_all(K, T, X):
    return np.array([project_point(K, p) for p in T.apply(X)])


# --- correspondences ----------------------------------------------------------

def test_empty_mask_gives_no_correspondences():
    b = NocsBounds([-1, -1, -1], [1, 1, 1])
    c = correspondences_from_maps(np.zeros((8, 8, 3)), np.zeros((8, 8), bool), b)
    assert len(c) == 0


def test_single_pixel_corner():
    b = NocsBounds([-1, -2, -3], [1, 2, 3])
    mask = np.zeros((8, 8), bool)
    mask[3, 5] = True
    c = list(correspondences_from_maps(np.zeros((8, 8, 3)), mask, b))
    assert len(c) == 1
    assert c[0].pixel == (5.5, 3.5)
    assert np.allclose(c[0].model_point, b.min_d)


def test_dimension_mismatch():
    b = NocsBounds([-1, -1, -1], [1, 1, 1])
    with pytest.raises(PnPError):
        correspondences_from_maps(np.zeros((8, 8, 3)), np.zeros((8, 9), bool), b)


def test_sphere_correspondences_hit_surface(rng):
    mesh = NocsMesh.from_arrays(*icosphere(3, 0.1))
    pose = RigidTransform(random_rotation(rng), [0, 0, 0.5])
    out = render_hard(mesh, pose, K128)
    corrs = correspondences_from_maps(out.nocs, out.mask > 0, mesh.bounds)
    rows = (corrs.pixels[:, 1] - 0.5).astype(int)
    cols = (corrs.pixels[:, 0] - 0.5).astype(int)
    pick = rng.choice(len(corrs), 400, replace=False)
    hit = raycast(mesh, pose, K128, np.stack([rows[pick], cols[pick]], 1))
    ok = np.isfinite(hit[:, 0])
    d = np.linalg.norm(hit[ok] - corrs.points[pick][ok], axis=1)
    assert d.max() < 1e-3 * mesh.diameter


def test_correspondence_csv_round_trip(tmp_path, rng):
    c = Correspondences(rng.uniform(0, 128, (20, 2)), rng.normal(size=(20, 3)))
    write_correspondences_csv(tmp_path / "c.csv", c)
    back = read_correspondences_csv(tmp_path / "c.csv")
    assert np.array_equal(back.pixels, c.pixels) and np.array_equal(back.points, c.points)


# --- EPnP ---------------------------------------------------------------------

def test_epnp_cube_corners(rng):
    X = np.array([[x, y, z] for x in (-0.05, 0.05) for y in (-0.05, 0.05) for z in (-0.05, 0.05)])
    for _ in range(10):
        T = RigidTransform(random_rotation(rng), [0.02, -0.01, 0.6])
        est = epnp(Correspondences(project_all(K128, T, X), X), K128)
        assert geodesic_deg(est.rotation, T.rotation) < 0.1
        assert np.linalg.norm(est.translation - T.translation) < 1e-4


def test_epnp_planar_square():
    X = np.array([[-0.05, -0.05, 0], [0.05, -0.05, 0], [0.05, 0.05, 0], [-0.05, 0.05, 0.]])
    T = RigidTransform(np.eye(3), [0, 0, 0.5])
    px = project_all(K128, T, X)
    est = epnp(Correspondences(px, X), K128)
    assert np.abs(project_all(K128, est, X) - px).max() < 0.1


def test_epnp_coincident_points():
    X = np.tile([[0.01, 0.02, 0.03]], (6, 1))
    with pytest.raises(PnPError):
        epnp(Correspondences(np.full((6, 2), 64.0), X), K128)


def test_epnp_order_invariance(rng, blob):
    T = RigidTransform(random_rotation(rng), [0, 0, 0.6])
    X = blob.vertices[rng.choice(len(blob.vertices), 50, replace=False)]
    px = project_all(K128, T, X) + rng.normal(0, 0.5, (50, 2))
    a = epnp(Correspondences(px, X), K128)
    perm = rng.permutation(50)
    b = epnp(Correspondences(px[perm], X[perm]), K128)
    assert a.allclose(b, 1e-9)


# --- RANSAC -------------------------------------------------------------------

def test_ransac_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(sample_size=3)
    with pytest.raises(ValueError):
        RansacConfig(inlier_threshold_px=0)


def test_ransac_40_percent_inliers(blob, rng):
    T, px, X, is_in = pnp_problem(blob, K128, rng)
    res = ransac_pnp(Correspondences(px, X), K128, RansacConfig(seed=3))
    assert add_error(blob.vertices, T, res.pose) < 0.01 * blob.diameter
    found = np.zeros(len(px), bool)
    found[res.inlier_indices] = True
    assert (found & is_in).sum() / is_in.sum() > 0.95


def test_ransac_all_outliers(blob, rng):
    _, px, X, _ = pnp_problem(blob, K128, rng, inlier_fraction=0.0)
    with pytest.raises(NoPoseError):
        ransac_pnp(Correspondences(px, X), K128)


def test_ransac_noiseless_is_consensus_saturated(blob, rng):
    T, px, X, _ = pnp_problem(blob, K128, rng, n=300, inlier_fraction=1.0)
    corrs = Correspondences(px, X)
    res = ransac_pnp(corrs, K128)
    assert len(res.inlier_indices) == 300
    assert res.pose.allclose(epnp(corrs, K128), 1e-9)


def test_ransac_deterministic_and_inliers_within_threshold(blob, rng):
    T, px, X, _ = pnp_problem(blob, K128, rng, inlier_fraction=0.5)
    px = px + rng.normal(0, 0.7, px.shape)
    corrs = Correspondences(px, X)
    cfg = RansacConfig(seed=11)
    a, b = ransac_pnp(corrs, K128, cfg), ransac_pnp(corrs, K128, cfg)
    assert a.pose.allclose(b.pose, 0.0)
    assert np.array_equal(a.inlier_indices, b.inlier_indices)
    err = np.linalg.norm(project_all(K128, a.pose, X[a.inlier_indices]) - px[a.inlier_indices], axis=1)
    assert err.max() <= cfg.inlier_threshold_px


def test_ransac_more_inliers_never_fewer_found(blob, rng):
    T, px, X, _ = pnp_problem(blob, K128, rng, n=600, inlier_fraction=0.5)
    cfg = RansacConfig(seed=5)
    base = ransac_pnp(Correspondences(px, X), K128, cfg)
    extra = blob.vertices[rng.choice(len(blob.vertices), 100, replace=False)]
    more = ransac_pnp(Correspondences(np.vstack([px, project_all(K128, T, extra)]),
                                      np.vstack([X, extra])), K128, cfg)
    assert len(more.inlier_indices) >= len(base.inlier_indices)


def test_ransac_subsamples_large_inputs(blob, rng):
    T, px, X, _ = pnp_problem(blob, K128, rng, n=5000, inlier_fraction=0.6)
    res = ransac_pnp(Correspondences(px, X), K128, RansacConfig(seed=1))
    assert len(res.inlier_indices) <= 4000
    assert add_error(blob.vertices, T, res.pose) < 0.01 * blob.diameter
