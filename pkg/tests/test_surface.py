"""Surface extraction and metric tests: cube-case table structure, mesh
fidelity against exact signed distances, alignment, PSNR/SSIM fixtures."""

import math
from collections import Counter

import numpy as np
import pytest

from attsurf.encoding import HashGridConfig
from attsurf.fields import AttenuationBand, FieldConfig, SurfaceAttenuationField, geometric_init
from attsurf.meshing import (
    EDGES,
    TRI_COUNTS,
    TRI_TABLE,
    TriMesh,
    extract_surface,
    load_ply,
    marching_cubes,
    save_ply,
    sdf_grid_eval,
    surface_points,
)
from attsurf.metrics import (
    SimilarityTransform,
    alignment_residual,
    chamfer_distance,
    icp_align,
    nearest_distances,
    psnr,
    ssim,
    umeyama_align,
)
from attsurf.phantoms import Box, Capsule, Sphere


def grid_field(fn, resolution):
    axis = np.linspace(-1.0, 1.0, resolution)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs.reshape(-1), ys.reshape(-1), zs.reshape(-1)], axis=1)
    return fn(pts).reshape(resolution, resolution, resolution)


def directed_edge_counts(mesh):
    counts = Counter()
    for tri in mesh.triangles:
        for i in range(3):
            counts[(tri[i], tri[(i + 1) % 3])] += 1
    return counts


# ---------- case table ----------


def test_case_table_structure():
    # every case triangulates exactly its sign-change edges, with at most the
    # classical five triangles, and never repeats a directed edge
    assert TRI_COUNTS.max() == 5
    assert TRI_COUNTS[0] == 0 and TRI_COUNTS[255] == 0
    for case in range(256):
        inside = [bool(case >> i & 1) for i in range(8)]
        cut = {e for e, (a, b) in enumerate(EDGES) if inside[a] != inside[b]}
        row = TRI_TABLE[case][TRI_TABLE[case] >= 0]
        assert len(row) == 3 * TRI_COUNTS[case]
        if TRI_COUNTS[case]:
            assert set(row.tolist()) == cut
        directed = Counter()
        for tri in row.reshape(-1, 3):
            for i in range(3):
                directed[(tri[i], tri[(i + 1) % 3])] += 1
        assert all(n == 1 for n in directed.values())
        # the complementary sign pattern cuts the same edges
        comp = TRI_TABLE[255 - case][TRI_TABLE[255 - case] >= 0]
        assert set(comp.tolist()) == set(row.tolist())


# ---------- extraction ----------


def test_sphere_vertices_near_radius():
    resolution = 64
    spacing = 2.0 / (resolution - 1)
    field = grid_field(lambda p: np.linalg.norm(p, axis=1) - 0.5, resolution)
    mesh = marching_cubes(field)
    assert not mesh.is_empty
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert radii.min() >= 0.5 - spacing
    assert radii.max() <= 0.5 + spacing


def test_no_sign_change_gives_empty_mesh():
    assert marching_cubes(np.ones((8, 8, 8))).is_empty
    assert marching_cubes(-np.ones((8, 8, 8))).is_empty


def test_plane_field_is_exact():
    field = grid_field(lambda p: p[:, 0].copy(), 16)
    mesh = marching_cubes(field)
    assert not mesh.is_empty
    assert np.abs(mesh.vertices[:, 0]).max() < 1e-12


def test_mesh_watertight_and_outward_oriented():
    for resolution, center, radius in [(64, (0, 0, 0), 0.5), (32, (0.13, -0.21, 0.08), 0.37)]:
        sphere = Sphere(center, radius)
        mesh = marching_cubes(grid_field(sphere.sdf, resolution))
        counts = directed_edge_counts(mesh)
        # closed orientable surface: each directed edge appears once and its
        # reverse exists
        assert all(n == 1 for n in counts.values())
        assert all((b, a) in counts for (a, b) in counts)
        n_edges = len(counts) // 2
        assert len(mesh.vertices) - n_edges + len(mesh.triangles) == 2
        a = mesh.vertices[mesh.triangles[:, 0]]
        b = mesh.vertices[mesh.triangles[:, 1]]
        c = mesh.vertices[mesh.triangles[:, 2]]
        volume = np.einsum("ij,ij->i", a - center, np.cross(b - center, c - center)).sum() / 6
        expect = 4.0 / 3.0 * math.pi * radius**3
        assert volume > 0
        assert abs(volume - expect) < 0.02 * expect


@pytest.mark.parametrize("shape", [
    Sphere((0.05, -0.1, 0.0), 0.45),
    Box((0.0, 0.05, -0.05), (0.3, 0.4, 0.25)),
    Capsule((-0.3, -0.2, 0.1), (0.3, 0.2, -0.1), 0.2),
])
def test_vertices_within_one_cell_of_true_surface(shape):
    resolution = 48
    spacing = 2.0 / (resolution - 1)
    mesh = marching_cubes(grid_field(shape.sdf, resolution))
    assert len(mesh.vertices) > 200
    assert np.abs(shape.sdf(mesh.vertices)).max() <= spacing


def test_degenerate_triangles_filtered():
    # grid contains coordinate 0, so the plane x + y = 0 passes exactly
    # through lattice corners and collapses some interpolated triangles
    field = grid_field(lambda p: p[:, 0] + p[:, 1], 9)
    mesh = marching_cubes(field)
    assert not mesh.is_empty
    assert (mesh.areas() > 1e-12).all()
    assert mesh.triangles.max() < len(mesh.vertices)


def test_field_validation():
    with pytest.raises(ValueError, match="at least 8"):
        marching_cubes(np.ones((4, 4, 4)))
    bad = np.ones((8, 8, 8))
    bad[3, 3, 3] = np.nan
    with pytest.raises(ValueError, match="finite"):
        marching_cubes(bad)
    with pytest.raises(ValueError, match="3d"):
        marching_cubes(np.ones((8, 8)))
    with pytest.raises(ValueError, match="indices"):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


def test_surface_point_sampling():
    sphere = Sphere((0.0, 0.0, 0.0), 0.5)
    resolution = 48
    spacing = 2.0 / (resolution - 1)
    mesh = marching_cubes(grid_field(sphere.sdf, resolution))
    pts = surface_points(mesh, 3000, np.random.default_rng(0))
    assert pts.shape == (3000, 3)
    radii = np.linalg.norm(pts, axis=1)
    assert radii.min() >= 0.5 - spacing and radii.max() <= 0.5 + spacing
    # area-uniform sampling covers the whole sphere, all octants populated
    octant = (pts[:, 0] > 0).astype(int) * 4 + (pts[:, 1] > 0).astype(int) * 2 + (pts[:, 2] > 0)
    assert len(np.unique(octant)) == 8
    with pytest.raises(ValueError, match="empty"):
        surface_points(marching_cubes(np.ones((8, 8, 8))), 10)
    with pytest.raises(ValueError, match="sample"):
        surface_points(mesh, 0)


def test_ply_round_trip(tmp_path):
    mesh = marching_cubes(grid_field(lambda p: np.linalg.norm(p, axis=1) - 0.4, 24))
    path = save_ply(mesh, tmp_path / "m.ply")
    text = path.read_text()
    assert text.startswith("ply\nformat ascii 1.0\n")
    assert f"element vertex {len(mesh.vertices)}" in text
    assert f"element face {len(mesh.triangles)}" in text
    back = load_ply(path)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-8


# ---------- model grid evaluation ----------


GRID = HashGridConfig(levels=4, base_resolution=8, max_resolution=32,
                      features_per_level=2, table_size=4096)


def one_material_model(seed=0):
    cfg = FieldConfig(encoder="hash", grid=GRID, materials=1,
                      bands=(AttenuationBand(0.05, 1.0),)).resolved()
    return SurfaceAttenuationField(cfg, np.random.default_rng(seed))


def test_grid_eval_matches_fitted_sphere():
    model = one_material_model()
    mae = geometric_init(model, 0.5, np.random.default_rng(1))
    assert mae < 0.05
    mesh = extract_surface(model, 32)
    assert not mesh.is_empty
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - 0.5).mean() < 0.08


def test_grid_eval_deterministic_and_material_gated():
    model = one_material_model(seed=2)
    a = sdf_grid_eval(model, 12)
    b = sdf_grid_eval(model, 12)
    assert np.array_equal(a, b)
    assert a.shape == (12, 12, 12)
    with pytest.raises(ValueError, match="no inner"):
        sdf_grid_eval(model, 12, material="inner")
    with pytest.raises(ValueError, match="material"):
        sdf_grid_eval(model, 12, material="bone")


# ---------- point-cloud metrics ----------


def test_chamfer_pinned_values():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0.0, 0.0]])
    assert chamfer_distance(a, b) == 1.0
    cloud = np.random.default_rng(0).normal(size=(40, 3))
    assert chamfer_distance(cloud, cloud) == 0.0


def test_chamfer_matches_exhaustive_reference():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (10, 3))
    b = rng.uniform(-1, 1, (10, 3))
    total_a = sum(min(math.dist(p, q) for q in b) for p in a) / len(a)
    total_b = sum(min(math.dist(p, q) for p in a) for q in b) / len(b)
    assert chamfer_distance(a, b) == pytest.approx(0.5 * (total_a + total_b), abs=1e-12)


def test_nearest_neighbor_routes_agree_exactly():
    rng = np.random.default_rng(2)
    for n, m in [(10, 7), (1500, 900)]:
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(m, 3))
        assert np.array_equal(nearest_distances(a, b, "brute"),
                              nearest_distances(a, b, "tree"))
    with pytest.raises(ValueError, match="method"):
        nearest_distances(a, b, "grid")


def test_chamfer_symmetry_and_validation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=(rng.integers(1, 30), 3))
        b = rng.normal(size=(rng.integers(1, 30), 3))
        assert chamfer_distance(a, b) == chamfer_distance(b, a)
    with pytest.raises(ValueError, match="empty"):
        chamfer_distance(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError, match=r"\(N, 3\)"):
        chamfer_distance(np.zeros((4, 2)), np.zeros((4, 3)))


# ---------- alignment ----------


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_umeyama_identity():
    cloud = np.random.default_rng(0).normal(size=(30, 3))
    t = umeyama_align(cloud, cloud)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    assert np.abs(t.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(t.translation).max() < 1e-9


def test_umeyama_recovers_known_transform():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(50, 3))
    rot = random_rotation(rng)
    shift = np.array([0.3, -0.2, 0.7])
    dst = 2.0 * src @ rot.T + shift
    t = umeyama_align(src, dst)
    assert abs(t.scale - 2.0) < 1e-9
    assert np.abs(t.rotation - rot).max() < 1e-9
    assert np.abs(t.translation - shift).max() < 1e-9
    rigid = umeyama_align(src, src @ rot.T + shift, with_scale=False)
    assert rigid.scale == 1.0
    assert np.abs(rigid.rotation - rot).max() < 1e-9


def test_umeyama_rejects_reflection():
    src = np.random.default_rng(5).normal(size=(40, 3))
    mirrored = src @ np.diag([-1.0, 1.0, 1.0])
    t = umeyama_align(src, mirrored)
    assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9


def test_umeyama_degenerate_rejected():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="collinear"):
        umeyama_align(line, line + 1.0)
    with pytest.raises(ValueError, match="at least 3"):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="correspond"):
        umeyama_align(np.zeros((5, 3)), np.zeros((6, 3)))


def test_umeyama_local_optimality():
    rng = np.random.default_rng(6)
    src = rng.normal(size=(60, 3))
    dst = 1.4 * src @ random_rotation(rng).T + rng.normal(size=3) + 0.05 * rng.normal(size=(60, 3))
    best = umeyama_align(src, dst)
    base = alignment_residual(best, src, dst)
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-0.05, 0.05)
        k = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        wiggle = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
        perturbed = SimilarityTransform(best.scale * (1 + rng.uniform(-0.02, 0.02)),
                                        wiggle @ best.rotation,
                                        best.translation + rng.uniform(-0.02, 0.02, 3))
        assert alignment_residual(perturbed, src, dst) >= base - 1e-12


def test_similarity_transform_validation():
    with pytest.raises(ValueError, match="scale"):
        SimilarityTransform(0.0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="orthonormal"):
        SimilarityTransform(1.0, np.eye(3) * 2, np.zeros(3))
    with pytest.raises(ValueError, match="determinant"):
        SimilarityTransform(1.0, np.diag([-1.0, 1.0, 1.0]), np.zeros(3))


def test_icp_recovers_small_misalignment():
    rng = np.random.default_rng(7)
    u = rng.normal(size=(400, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    src = u * (1.0 + 0.3 * np.sin(3 * u[:, 0])[:, None])
    angle = math.radians(8.0)
    rot = np.array([[math.cos(angle), -math.sin(angle), 0],
                    [math.sin(angle), math.cos(angle), 0],
                    [0, 0, 1.0]])
    shift = np.array([0.05, -0.08, 0.03])
    dst = 1.08 * src @ rot.T + shift
    t = icp_align(src, dst[rng.permutation(len(dst))])
    assert abs(t.scale - 1.08) < 1e-9
    assert np.abs(t.rotation - rot).max() < 1e-9
    assert np.abs(t.translation - shift).max() < 1e-9


# ---------- image metrics ----------


def test_psnr_pinned_values():
    a = np.full((8, 8), 0.1)
    b = np.zeros((8, 8))
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a) == math.inf
    c = np.full((10, 10), math.sqrt(1e-5))
    assert psnr(c, np.zeros_like(c)) == pytest.approx(50.0, abs=1e-9)
    with pytest.raises(ValueError, match="shapes"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identical_is_one():
    img = np.random.default_rng(8).uniform(size=(24, 24))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_vs_negative_below_zero():
    board = (np.indices((32, 32)).sum(axis=0) % 2).astype(np.float64)
    assert ssim(board, 1.0 - board) < 0.0


def test_ssim_constant_images_closed_form():
    lo, hi = 0.25, 0.75
    value = ssim(np.full((16, 16), lo), np.full((16, 16), hi))
    c1 = 0.01**2
    expect = (2 * lo * hi + c1) / (lo * lo + hi * hi + c1)
    assert value == pytest.approx(expect, rel=1e-9)


def test_ssim_bounds_and_validation():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a = rng.uniform(size=(16, 16))
        b = rng.uniform(size=(16, 16))
        assert -1.0 <= ssim(a, b) <= 1.0
    with pytest.raises(ValueError, match="11x11"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError, match="shapes"):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
