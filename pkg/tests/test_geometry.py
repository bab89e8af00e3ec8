import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from geocontact import autodiff as ad
from geocontact.geometry import (MeshFormatError, PointCloud, TriangleMesh, center_cloud, chamfer,
                                 chamfer_brute, eliminate_samples, elimination_radius, load_cloud,
                                 load_mesh, mean_nn_distance, nearest_brute, nearest_tree,
                                 preprocess_mesh, sample_surface, save_cloud, save_mesh)

CUBE = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_unit_cube(tmp_path):
    mesh = load_mesh(write(tmp_path, CUBE))
    assert mesh.vertices.shape == (8, 3) and mesh.triangles.shape == (12, 3)
    assert np.isclose(mesh.area, 6.0)


def test_zero_area_triangle_is_dropped(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mesh = load_mesh(write(tmp_path, text))
    assert mesh.dropped == 1 and len(mesh.triangles) == 1 and caught


def test_malformed_face_names_the_line(tmp_path):
    with pytest.raises(MeshFormatError, match=":3:"):
        load_mesh(write(tmp_path, "v 0 0 0\nv 1 0 0\nf 1 2 x\n"))


def test_empty_mesh(tmp_path):
    with pytest.raises(MeshFormatError):
        load_mesh(write(tmp_path, "# nothing\n"))


def test_mesh_round_trip(tmp_path):
    mesh = load_mesh(write(tmp_path, CUBE))
    save_mesh(mesh, tmp_path / "out.obj")
    again = load_mesh(tmp_path / "out.obj")
    assert np.array_equal(again.vertices, mesh.vertices)
    assert np.array_equal(again.triangles, mesh.triangles)


def test_samples_lie_in_single_triangle():
    tri = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 0]])
    cloud = sample_surface(TriangleMesh(tri, np.array([[0, 1, 2]])), 2000, seed=0)
    # barycentric coordinates from the 2-D parametrisation
    l1, l2 = cloud.points[:, 0] / 2.0, cloud.points[:, 1]
    l0 = 1.0 - l1 - l2
    assert (np.stack([l0, l1, l2]) >= -1e-12).all() and np.allclose(cloud.points[:, 2], 0)


def test_sampling_follows_area():
    # areas 9 : 1 along the x axis
    verts = np.array([[0.0, 0, 0], [9, 0, 0], [0, 2, 0], [20, 0, 0], [21, 0, 0], [20, 2, 0]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_surface(mesh, 10000, seed=1).points
    big = np.sum(pts[:, 0] < 10.0)
    ratio = big / (10000 - big)
    assert abs(ratio - 9.0) / 9.0 < 0.05


def test_sampling_is_seeded():
    mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    assert np.array_equal(sample_surface(mesh, 50, 7).points, sample_surface(mesh, 50, 7).points)
    with pytest.raises(ValueError):
        sample_surface(TriangleMesh(np.eye(3), np.zeros((0, 3), int)), 5)


def test_elimination_returns_exact_count_subset():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.random((2000, 3)) * [1, 1, 0])
    out = eliminate_samples(cloud, 200, area=1.0)
    assert out.n == 200
    rows = {tuple(p) for p in cloud.points}
    assert all(tuple(p) in rows for p in out.points)
    assert eliminate_samples(cloud, 2000) is cloud
    with pytest.raises(ValueError):
        eliminate_samples(cloud, 2001)


def test_elimination_beats_random_subset():
    g = np.linspace(0.0, 1.0, 60)
    grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    grid = np.column_stack([grid, np.zeros(len(grid))])
    n = len(grid) // 10
    ratios = []
    for seed in range(10):
        jitter = np.random.default_rng(seed).normal(scale=1e-4, size=grid.shape) * [1, 1, 0]
        cloud = PointCloud(grid + jitter)
        thinned = eliminate_samples(cloud, n, area=1.0)
        subset = cloud.points[np.random.default_rng(100 + seed).choice(len(grid), n, replace=False)]
        ratios.append(pdist(thinned.points).min() / pdist(subset).min())
    assert np.mean(ratios) >= 2.0


def test_elimination_radius_formula():
    assert np.isclose(elimination_radius(2.0 * np.sqrt(3.0) * 100.0, 100), 1.0)


def test_default_preprocessing_gives_4096_centered_points():
    from geocontact.data import generate_pin
    cloud = preprocess_mesh(generate_pin(8.0, 30.0), seed=0)
    assert cloud.n == 4096 and np.abs(cloud.points.mean(axis=0)).max() < 1e-9


def test_center_cloud_examples():
    assert np.array_equal(center_cloud(PointCloud(np.array([[1.0, 2.0, 3.0]]))).points, [[0, 0, 0]])
    pts = np.random.default_rng(2).normal(size=(30, 3))
    c = center_cloud(PointCloud(pts)).points
    assert np.allclose(center_cloud(PointCloud(c)).points, c, atol=1e-15)
    assert np.allclose(center_cloud(PointCloud(pts + [5.0, -1.0, 2.0])).points, c, atol=1e-12)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_cloud_round_trip(tmp_path, suffix):
    cloud = PointCloud(np.random.default_rng(0).normal(size=(17, 3)))
    save_cloud(cloud, tmp_path / f"c{suffix}")
    assert np.array_equal(load_cloud(tmp_path / f"c{suffix}").points, cloud.points)


def test_binary_cloud_layout(tmp_path):
    save_cloud(PointCloud(np.array([[1.0, 2.0, 3.0]])), tmp_path / "c.bin")
    blob = (tmp_path / "c.bin").read_bytes()
    assert blob[:4] == b"GCPC" and int.from_bytes(blob[4:8], "little") == 1 and len(blob) == 32
    (tmp_path / "t.bin").write_bytes(blob[:-1])
    with pytest.raises(ValueError):
        load_cloud(tmp_path / "t.bin")


def test_chamfer_examples():
    x = np.zeros((1, 3))
    y = np.array([[0.0, 0, 0], [1, 0, 0]])
    assert chamfer(x, y).item() == 1.0
    assert chamfer(y, y).item() == 0.0
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), y)


clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(-1, 1))


@settings(max_examples=40, deadline=None)
@given(clouds, clouds)
def test_chamfer_symmetric_nonnegative(x, y):
    a, b = chamfer(x, y).item(), chamfer(y, x).item()
    assert a == b and a >= 0.0


@settings(max_examples=20, deadline=None)
@given(clouds, clouds, st.integers(0, 2 ** 32 - 1))
def test_chamfer_rigid_invariance(x, y, seed):
    R = Rotation.random(random_state=seed).as_matrix()
    t = np.random.default_rng(seed).normal(size=3)
    moved = chamfer(x @ R.T + t, y @ R.T + t).item()
    assert abs(moved - chamfer(x, y).item()) <= 1e-9 * max(1.0, moved)


@settings(max_examples=40, deadline=None)
@given(clouds, clouds)
def test_tree_matches_brute_force(x, y):
    ib, db = nearest_brute(x, y)
    it, dt = nearest_tree(x, y)
    assert np.array_equal(ib, it) and np.array_equal(db, dt)


def test_tree_tie_break_lowest_index():
    y = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    idx, _ = nearest_tree(np.zeros((1, 3)), y)
    assert idx[0] == 0


def test_batched_chamfer_and_gradient():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 5, 3))
    out = chamfer(x, y).data
    assert np.array_equal(out, [chamfer_brute(x[0], y[0]), chamfer_brute(x[1], y[1])])
    xt = ad.Tensor(x[0], requires_grad=True)
    with ad.Tape() as tape:
        loss = chamfer(xt, y[0])
    g = tape.backward(loss)[xt]
    num = ad.numerical_gradient(lambda: chamfer_brute(xt.data, y[0]), xt.data)
    assert np.allclose(g, num, atol=1e-7)


def test_mean_nn_distance_of_shifted_copy():
    x = np.random.default_rng(5).normal(size=(10, 3)) * 100
    assert np.isclose(mean_nn_distance(x, x + [0.01, 0, 0]), 0.01)
