import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clutterseg.fixtures import FixtureSpec, look_at, render
from clutterseg.geometry import (GeometryParams, PointCloud, backproject_depth, backproject_frame,
                                 build_supervoxels, estimate_normals, fuse_and_downsample, pair_distance,
                                 project_points)
from clutterseg.scene_io import CameraFrame


def _frame(depth, intr=(100.0, 100.0, 0.0, 0.0), pose=None, index=0):
    depth = np.asarray(depth, float)
    return CameraFrame(index, np.asarray(intr, float), np.eye(4) if pose is None else pose,
                       np.full(depth.shape + (3,), 0.5), depth)


# ---------------------------------------------------------------- back-projection

def test_principal_point_ray():
    pts, _ = backproject_depth(np.array([[1.0]]), (500.0, 500.0, 0.0, 0.0), np.eye(4))
    assert np.allclose(pts, [[0.0, 0.0, 1.0]])


def test_invalid_depth_skipped():
    pts, cols = backproject_frame(_frame(np.zeros((4, 5))))
    assert pts.shape == (0, 3) and cols.shape == (0, 3)


def test_planted_table_plane():
    intr = np.array([285.0, 285.0, 159.5, 119.5])
    pose = look_at([0.35, -0.2, 0.45], [0.0, 0.0, 0.0])
    depth, _, _ = render([], intr, pose, (240, 320), table_half=0.32)
    pts, _ = backproject_depth(depth, intr, pose)
    assert len(pts) > 1000
    assert np.abs(pts[:, 2]).max() < 1e-6


def test_projection_consistency():
    intr = np.array([285.0, 285.0, 159.5, 119.5])
    pose = look_at([0.3, 0.3, 0.5], [0.0, 0.0, 0.0])
    depth, _, _ = render([], intr, pose, (240, 320))
    pts, idx = backproject_depth(depth, intr, pose)
    u, v, _ = project_points(pts, intr, pose)
    assert np.abs(u - idx % 320).max() < 0.5
    assert np.abs(v - idx // 320).max() < 0.5


# ---------------------------------------------------------------- voxel aggregation

def test_five_coincident_points_average():
    frames = [_frame([[1.0]], index=i) for i in range(5)]
    cloud = fuse_and_downsample(frames, GeometryParams(min_occupancy=3))
    assert len(cloud) == 1
    assert np.allclose(cloud.positions[0], [0.0, 0.0, 1.0])
    assert cloud.counts[0] == 5


def test_two_points_below_occupancy():
    frames = [_frame([[1.0]], index=i) for i in range(2)]
    assert len(fuse_and_downsample(frames, GeometryParams(min_occupancy=3))) == 0


def test_occupancy_filter_against_histogram(small_scene):
    bundle, _ = small_scene
    edge = 0.005
    hist = {}
    for f in bundle.frames:
        pts, _ = backproject_depth(f.depth, f.intrinsics, f.pose)
        for c in map(tuple, np.floor(pts / edge).astype(np.int64)):
            hist[c] = hist.get(c, 0) + 1

    def cells(cloud):
        return set(map(tuple, np.floor(cloud.positions / edge).astype(np.int64)))

    c1 = cells(fuse_and_downsample(bundle.frames, GeometryParams(min_occupancy=1)))
    c3 = cells(fuse_and_downsample(bundle.frames, GeometryParams(min_occupancy=3)))
    assert c1 == set(hist)
    assert c3 == {c for c, n in hist.items() if n >= 3}
    assert c3 <= c1


# ---------------------------------------------------------------- normals

def _grid(n=20, spacing=0.005, z=0.0):
    g = np.arange(n) * spacing
    x, y = np.meshgrid(g, g)
    return np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], axis=1)


def test_plane_normals():
    pts = _grid()
    cloud = estimate_normals(PointCloud(pts, np.zeros_like(pts)), 16)
    assert np.abs(np.abs(cloud.normals[:, 2]) - 1.0).max() < 1e-3
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-6)


def test_sphere_normals():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((3000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = 0.1 * d
    cloud = estimate_normals(PointCloud(pts, np.zeros_like(pts)), 16)
    assert np.abs(np.einsum("ij,ij->i", cloud.normals, d)).min() >= 0.99


def test_normals_face_cameras():
    pts = _grid()
    cloud = PointCloud(pts, np.zeros_like(pts), view_centers=np.tile([0.0, 0.0, 1.0], (len(pts), 1)))
    estimate_normals(cloud, 16)
    assert (cloud.normals[:, 2] > 0.999).all()


def test_cloud_too_small():
    pts = np.zeros((2, 3))
    with pytest.raises(ValueError, match="cloud too small"):
        estimate_normals(PointCloud(pts, pts.copy()), 16)


# ---------------------------------------------------------------- pair distance

def test_pair_distance_examples():
    n = np.array([0.0, 0.0, 1.0])
    x = np.array([0.1, 0.2, 0.3])
    assert pair_distance(x, n, x, n) == 0.0
    assert abs(pair_distance(x, n, x + [0.02, 0, 0], n, 0.5, 1.0) - 0.01) < 1e-9
    assert abs(pair_distance(x, n, x, np.array([1.0, 0, 0]), 0.5, 1.0) - 1.0) < 1e-9


unit = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)
coord = st.lists(st.floats(-10, 10), min_size=3, max_size=3)


@settings(max_examples=1000, deadline=None)
@given(coord, unit, coord, unit)
def test_pair_distance_symmetric(xi, ni, xj, nj):
    ni = np.asarray(ni) / np.linalg.norm(ni)
    nj = np.asarray(nj) / np.linalg.norm(nj)
    assert pair_distance(xi, ni, xj, nj) == pair_distance(xj, nj, xi, ni)


# ---------------------------------------------------------------- super-voxels

def _planes(gap=0.1):
    a, b = _grid(z=0.0), _grid(z=gap)
    pts = np.vstack([a, b])
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return PointCloud(pts, np.zeros_like(pts), nrm)


def _component_count(cloud, params):
    """Independent union-find over all k-NN pairs with distance <= tau."""
    from scipy.spatial import cKDTree
    n = len(cloud.positions)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    _, nbr = cKDTree(cloud.positions).query(cloud.positions, k=params.k_nn)
    for i in range(n):
        for j in nbr[i]:
            if i != j and pair_distance(cloud.positions[i], cloud.normals[i], cloud.positions[j], cloud.normals[j],
                                        params.alpha, params.beta) <= params.tau_merge:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def test_two_planes_two_supervoxels():
    cloud = _planes()
    params = GeometryParams()
    sv = build_supervoxels(cloud, params)
    assert sv.count == 2 == _component_count(cloud, params)


def test_huge_tau_single_supervoxel():
    assert build_supervoxels(_planes(0.004), GeometryParams(tau_merge=1e6)).count == 1


def test_tiny_tau_one_per_point():
    cloud = _planes()
    assert build_supervoxels(cloud, GeometryParams(tau_merge=1e-12)).count == len(cloud)


def test_supervoxel_partition(small_result):
    sv = small_result.supervoxels
    n = len(small_result.cloud)
    assert len(sv.point_labels) == n
    assert sv.sizes.sum() == n and (sv.sizes > 0).all()
    assert abs(sv.weights.sum() - 1.0) < 1e-9
    seen = np.concatenate([sv.members(k) for k in range(sv.count)])
    assert np.array_equal(np.sort(seen), np.arange(n))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.05), st.floats(0.001, 0.05))
def test_supervoxel_count_monotone_in_tau(seed, t1, t2):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 0.05, size=(120, 3))
    lo, hi = sorted((t1, t2))
    cloud = estimate_normals(PointCloud(pts, np.zeros_like(pts)), 16)
    n_lo = build_supervoxels(cloud, GeometryParams(tau_merge=lo)).count
    n_hi = build_supervoxels(cloud, GeometryParams(tau_merge=hi)).count
    assert n_hi <= n_lo


def test_params_validation():
    with pytest.raises(ValueError):
        GeometryParams(voxel_size_m=0)
    with pytest.raises(ValueError):
        GeometryParams(k_nn=2)
