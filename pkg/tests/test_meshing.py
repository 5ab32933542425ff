import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from featnsr.errors import EmptySet, EmptySurface, ParseError
from featnsr.meshing import (Mesh, chamfer_distance, marching_cubes, nearest_distances, read_ply, sample_mesh,
                             write_ply)


def sphere(r):
    return lambda p: np.linalg.norm(p, axis=1) - r


def test_sphere_mesh_radius_and_watertight():
    mesh = marching_cubes(sphere(0.5), 64)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(radii - 0.5) < 0.02)
    assert mesh.is_watertight()
    # Euler characteristic of a sphere
    e = len(mesh.edge_counts())
    assert len(mesh.vertices) - e + len(mesh.triangles) == 2


def test_finer_grid_is_more_accurate():
    errs = []
    for res in (16, 32, 64):
        mesh = marching_cubes(sphere(0.5), res)
        errs.append(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5).max())
    assert errs[0] > errs[1] > errs[2]


def test_empty_surface():
    with pytest.raises(EmptySurface):
        marching_cubes(lambda p: np.ones(len(p)), 16)
    with pytest.raises(EmptySurface):
        marching_cubes(sphere(5.0), 16)


def test_resolution_floor():
    with pytest.raises(ValueError):
        marching_cubes(sphere(0.5), 7)


def test_exact_zero_grid_values():
    # a plane through grid nodes: values exactly zero must not produce degenerate output
    mesh = marching_cubes(lambda p: p[:, 2].copy(), 9)
    assert len(mesh.triangles) > 0 and np.all(mesh.areas() > 0)


def test_chamfer_examples():
    A = np.zeros((1, 3))
    B = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    acc, comp, mean = chamfer_distance(A, B)
    assert (acc, comp, mean) == (1.0, 1.5, 1.25)
    assert chamfer_distance(B, B) == (0.0, 0.0, 0.0)
    with pytest.raises(EmptySet):
        chamfer_distance(np.zeros((0, 3)), B)


def test_nearest_matches_brute_force(rng):
    A = rng.normal(size=(1000, 3))
    B = rng.normal(size=(700, 3))
    brute = np.array([np.min(np.sqrt(np.sum((B - a) ** 2, axis=1))) for a in A])
    assert np.array_equal(nearest_distances(A, B), brute)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    acc, comp, mean = chamfer_distance(A, B)
    acc2, comp2, mean2 = chamfer_distance(B, A)
    assert (acc, comp) == (comp2, acc2) and mean == pytest.approx(mean2, abs=1e-15)
    R = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3)
    assert chamfer_distance(A @ R.T + t, B @ R.T + t)[2] == pytest.approx(mean, abs=1e-12)


def test_ply_round_trip(tmp_path):
    mesh = marching_cubes(sphere(0.4), 20)
    write_ply(tmp_path / "m.ply", mesh)
    back = read_ply(tmp_path / "m.ply")
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.max(np.abs(back.vertices - mesh.vertices)) < 1e-7


def test_ply_errors(tmp_path):
    (tmp_path / "bad.ply").write_text("not a ply\n")
    with pytest.raises(ParseError, match="bad.ply"):
        read_ply(tmp_path / "bad.ply")
    mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]))
    write_ply(tmp_path / "t.ply", mesh)
    text = (tmp_path / "t.ply").read_text().replace("3 0 1 2", "3 0 1 9")
    (tmp_path / "t.ply").write_text(text)
    with pytest.raises(ParseError, match="out of range"):
        read_ply(tmp_path / "t.ply")


def test_sampled_points_on_surface_and_area_weighted(rng):
    mesh = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [3, 0, 1], [0, 3, 1.0]]),
                np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_mesh(mesh, 20000, rng)
    upper = np.abs(pts[:, 2] - 1.0) < 1e-12
    assert np.all((np.abs(pts[:, 2]) < 1e-12) | upper)
    assert upper.mean() == pytest.approx(0.9, abs=0.01)  # areas 0.5 vs 4.5
    assert np.all(pts[:, :2] >= -1e-12)


def test_mesh_to_sphere_chamfer_small(rng):
    mesh = marching_cubes(sphere(0.5), 64)
    pts = sample_mesh(mesh, 20000, rng)
    g = rng.normal(size=(20000, 3))
    gt = 0.5 * g / np.linalg.norm(g, axis=1, keepdims=True)
    assert chamfer_distance(pts, gt)[2] < 0.01


def test_surface_cut_by_cube_is_closed():
    # a sphere larger than the extraction cube: the mesh is closed along the cube faces
    mesh = marching_cubes(sphere(1.2), 16)
    assert mesh.is_watertight()
    assert np.max(np.abs(mesh.vertices)) <= 1.0


def test_clip_to_ball():
    from featnsr.meshing import clip_to_ball
    f = clip_to_ball(lambda p: -np.ones(len(p)))
    p = np.array([[0.0, 0, 0], [0, 0, 1.5]])
    assert np.array_equal(f(p), [-1.0, 0.5])
    mesh = marching_cubes(f, 32)
    assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0).max() < 0.05
