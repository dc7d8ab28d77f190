from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carvemap.carve import (CarveError, boundary_faces, build_triangulation, carve, cast_votes, label_and_extract,
                            merge_car_hulls)
from carvemap.cars import convex_hull_3d
from carvemap.geometry import GeometryError, box_mesh


# --- oracles -------------------------------------------------------------------

def circumsphere(p):
    a = p[1:] - p[0]
    rhs = 0.5 * (a ** 2).sum(axis=1)
    c = np.linalg.solve(a, rhs)
    return p[0] + c, float(np.linalg.norm(c))


def segment_tet_length(o, q, tet):
    """Parameter length of segment o->q inside a tetrahedron, by half-space clipping."""
    lo, hi = 0.0, 1.0
    for f in range(4):
        face = np.delete(tet, f, axis=0)
        n = np.cross(face[1] - face[0], face[2] - face[0])
        if n @ (tet[f] - face[0]) < 0:
            n = -n
        so, sq = n @ (o - face[0]), n @ (q - face[0])
        if so == sq:
            if so < 0:
                return 0.0
            continue
        t = so / (so - sq)
        if sq < so:
            hi = min(hi, t)
        else:
            lo = max(lo, t)
    return max(hi - lo, 0.0)


def brute_votes(cx, origins, targets):
    votes = np.zeros(cx.n_tets, dtype=np.int64)
    for o, j in zip(origins, targets):
        q = cx.vertices[j]
        for t, tet in enumerate(cx.tets):
            if segment_tet_length(o, q, cx.vertices[tet]) > 1e-9:
                votes[t] += 1
    return votes


def facet_owners(cx):
    owners = defaultdict(list)
    for t, tet in enumerate(cx.tets):
        for f in range(4):
            owners[tuple(sorted(np.delete(tet, f)))].append(t)
    return owners


# --- build_triangulation ---------------------------------------------------------

def test_too_few_points():
    with pytest.raises(GeometryError):
        build_triangulation(np.random.default_rng(0).normal(size=(4, 3)))


def test_bipyramid_gives_two_cloud_tetrahedra():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.3, 0.3, 2.0], [0.3, 0.3, -2.0]], float)
    cx = build_triangulation(pts)
    cloud_tets = cx.tets[(cx.tets < 5).all(axis=1)]
    assert len(cloud_tets) == 2
    shared = set(cloud_tets[0]) & set(cloud_tets[1])
    assert shared == {0, 1, 2}
    assert cx.n_tets > 2   # plus the cells connecting to the bounding corners


def check_valid(cx, tol=1e-9):
    V = cx.vertices
    for tet in cx.tets:
        p = V[tet]
        vol = np.linalg.det(p[1:] - p[0]) / 6
        assert abs(vol) > 0
        c, r = circumsphere(p)
        d = np.linalg.norm(V - c, axis=1)
        inside = d < r * (1 - tol)
        inside[tet] = False
        assert not inside.any()
    # every interior facet shared by exactly two cells, consistent with neighbours
    for facet, ts in facet_owners(cx).items():
        assert len(ts) in (1, 2)
    for t in range(cx.n_tets):
        for f in range(4):
            nb = cx.neighbors[t, f]
            if nb >= 0:
                assert t in cx.neighbors[nb]


def test_grid_is_delaunay_after_jitter():
    g = np.arange(4.0)
    pts = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    check_valid(build_triangulation(pts))


def test_collinear_input_still_valid():
    pts = np.column_stack([np.linspace(0, 5, 12), np.zeros(12), np.zeros(12)])
    cx = build_triangulation(pts)
    check_valid(cx)
    assert cx.n_points == 12


def test_jitter_is_deterministic():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    a, b = build_triangulation(pts), build_triangulation(pts)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.tets, b.tets)
    assert np.abs(a.vertices[:30] - pts).max() <= 1e-6


# --- cast_votes ------------------------------------------------------------------

def test_ray_inside_one_tetrahedron():
    pts = np.random.default_rng(2).normal(size=(20, 3))
    cx = build_triangulation(pts)
    t = int(np.nonzero((cx.tets == 7).any(axis=1))[0][0])
    origin = 0.8 * cx.vertices[7] + 0.2 * cx.vertices[cx.tets[t]].mean(axis=0)
    cast_votes(cx, origin, [7])
    assert cx.votes.sum() == 1 and cx.votes[t] == 1


def test_ray_through_shared_facet():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.3, 0.3, 2.0], [0.3, 0.3, -2.0]], float)
    cx = build_triangulation(pts)
    ta, tb = np.nonzero((cx.tets < 5).all(axis=1))[0]
    facet_centre = pts[:3].mean(axis=0)
    apex_a = (set(cx.tets[ta]) - {0, 1, 2}).pop()
    apex_b = (set(cx.tets[tb]) - {0, 1, 2}).pop()
    origin = facet_centre + 0.05 * (cx.vertices[apex_a] - facet_centre)
    cast_votes(cx, origin, [apex_b])
    assert cx.votes[ta] == 1 and cx.votes[tb] == 1 and cx.votes.sum() == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(5, 7))
def test_votes_match_brute_force_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3))
    origins = rng.uniform(-2, 2, size=(12, 3))
    cx = build_triangulation(pts, origins)
    assert cx.n_tets <= 50
    targets = rng.integers(0, n, size=12)
    cast_votes(cx, origins, targets)
    assert cx.skipped_rays == 0
    assert np.array_equal(cx.votes, brute_votes(cx, origins, targets))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_adding_rays_never_decreases_votes(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 3))
    origins = rng.uniform(-4, 4, size=(60, 3))
    cx = build_triangulation(pts, origins)
    targets = rng.integers(0, 40, size=60)
    cast_votes(cx, origins[:30], targets[:30])
    before = cx.votes.copy()
    cast_votes(cx, origins[30:], targets[30:])
    assert (cx.votes >= before).all()


def test_ray_target_must_be_cloud_point():
    cx = build_triangulation(np.random.default_rng(0).normal(size=(10, 3)))
    with pytest.raises(ValueError):
        cast_votes(cx, [0, 0, 0], [10])


# --- label_and_extract ------------------------------------------------------------

def cube_scan(step=0.05):
    g = np.arange(-0.5 + step / 2, 0.5, step)
    A, B = (x.ravel() for x in np.meshgrid(g, g, indexing="ij"))
    pts, nrm = [], []
    for ax in range(3):
        for sg in (-1, 1):
            p = np.zeros((len(A), 3))
            p[:, ax] = sg * 0.5
            p[:, (ax + 1) % 3], p[:, (ax + 2) % 3] = A, B
            pts.append(p)
            nrm.append(np.broadcast_to(np.eye(3)[ax] * sg, p.shape))
    P, N = np.concatenate(pts), np.concatenate(nrm)
    # sensors on all six sides and along the diagonals, rays to every visible point
    sensors = [s * 3 * np.eye(3)[a] for a in range(3) for s in (-1, 1)]
    sensors += [2 * np.array([x, y, z]) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    origins, targets = [], []
    for c in sensors:
        vis = np.nonzero(np.einsum("ij,ij->i", N, c - P) > 0)[0]
        origins.append(np.broadcast_to(c, (len(vis), 3)))
        targets.append(vis)
    return P, np.concatenate(origins), np.concatenate(targets)


def cube_distance(x):
    """Distance from points to the surface of the unit cube centred at 0."""
    q = np.abs(x) - 0.5
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    return outside - inside


def sample_surface(mesh, n=20000, seed=0):
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    f = rng.choice(mesh.n_faces, n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = mesh.triangles()[f]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


@pytest.fixture(scope="module")
def carved_cube():
    P, O, T = cube_scan()
    cx = build_triangulation(P, O)
    cast_votes(cx, O, T)
    return cx, label_and_extract(cx, 1, P)


def test_cube_is_closed_manifold_and_accurate(carved_cube):
    cx, mesh = carved_cube
    assert mesh.check_manifold() and mesh.is_closed()
    assert mesh.euler_characteristic() == 2
    assert cube_distance(sample_surface(mesh)).mean() <= 1.5 * 0.05


def test_cube_normals_point_into_free_space(carved_cube):
    _, mesh = carved_cube
    c = mesh.triangles().mean(axis=1)
    # free space is outside the cube: normals point away from the centre
    assert (np.einsum("ij,ij->i", mesh.face_normals(), c) > 0).mean() > 0.99


def test_each_output_face_separates_free_and_matter(carved_cube):
    cx, _ = carved_cube
    owners = facet_owners(cx)
    faces = boundary_faces(cx, cx.free)
    assert len(faces)
    for f in faces:
        ts = owners[tuple(sorted(f))]
        labels = [cx.free[t] for t in ts] + ([False] if len(ts) == 1 else [])
        assert sorted(labels) == [False, True]


def test_single_wall_gives_open_sheet():
    y, z = np.meshgrid(np.arange(-2, 2.01, 0.1), np.arange(0, 2.01, 0.1), indexing="ij")
    wall = np.column_stack([np.full(y.size, 5.0), y.ravel(), z.ravel()])
    mesh, cx = carve(wall, [0.0, 0.0, 1.0])
    assert mesh.check_manifold() and not mesh.is_closed()
    assert np.abs(mesh.vertices[:, 0] - 5).max() < 1e-9
    assert mesh.face_areas().sum() == pytest.approx(4 * 2, rel=0.02)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    assert lo[1:] == pytest.approx([-2, 0]) and hi[1:] == pytest.approx([2, 2])


def test_zero_rays_is_an_error():
    cx = build_triangulation(np.random.default_rng(0).normal(size=(20, 3)))
    with pytest.raises(CarveError, match="no visibility evidence"):
        label_and_extract(cx)


def test_vote_threshold_shrinks_free_set():
    P, O, T = cube_scan(0.1)
    cx = build_triangulation(P, O)
    cast_votes(cx, O, T)
    label_and_extract(cx, 1)
    free1 = cx.free.copy()
    label_and_extract(cx, 5)
    assert cx.free.sum() <= free1.sum()
    assert (cx.votes[cx.free] >= 5).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_extracted_mesh_always_manifold(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(150, 3))
    origins = rng.normal(size=(4, 3)) * 4
    which = rng.integers(0, 4, size=150)
    mesh, cx = carve(pts, origins[which])
    assert mesh.check_manifold()
    assert mesh.manifold


# --- merge_car_hulls ----------------------------------------------------------------

def test_merge_with_no_hulls_is_identity():
    m = box_mesh([0, 0, 0], [1, 1, 1])
    assert merge_car_hulls(m, []) is m


def test_merge_adds_components_and_faces():
    m = box_mesh([0, 0, 0], [1, 1, 1])
    rng = np.random.default_rng(0)
    hulls = [convex_hull_3d(rng.normal(size=(30, 3)) + [5, 0, 0]), convex_hull_3d(rng.normal(size=(30, 3)) - 5)]
    out = merge_car_hulls(m, hulls)
    assert out.n_faces == m.n_faces + sum(h.n_faces for h in hulls)
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    e = out.edges
    n, _ = connected_components(coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(out.n_vertices,) * 2))
    assert n == 3
    assert out.check_manifold()
