from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carvemap.geometry import RigidTransform
from carvemap.ground import segment_ground
from carvemap.ingest import SceneObject, SyntheticScene, simulate_scan
from carvemap.motion import (VACUOUS, TotalConflict, beam_evidence, beam_normals, classify_point, combine,
                             label_cloud, surface_range)
from carvemap.registration import AlignedScan, range_filter
from carvemap.scenes import crossing_sphere_scene, grid_box, room_scene, sensor_path

THETA = np.deg2rad(0.5)


# --- beam_evidence -----------------------------------------------------------

def test_point_at_beam_end_is_occupied():
    assert beam_evidence([5, 0, 0], [0, 0, 0], [5, 0, 0], THETA) == pytest.approx((0, 0.9, 0.1))


def test_point_halfway_is_empty():
    assert beam_evidence([2.5, 0, 0], [0, 0, 0], [5, 0, 0], THETA) == pytest.approx((0.9, 0, 0.1))


def test_point_off_beam_is_vacuous():
    assert beam_evidence([0, 3, 0], [0, 0, 0], [5, 0, 0], THETA) == VACUOUS


def test_point_behind_beam_end_is_vacuous():
    assert beam_evidence([7, 0, 0], [0, 0, 0], [5, 0, 0], THETA) == VACUOUS


def test_range_tolerance_edges():
    assert beam_evidence([4.95, 0, 0], [0, 0, 0], [5, 0, 0], THETA)[1] == 0.9
    assert beam_evidence([4.85, 0, 0], [0, 0, 0], [5, 0, 0], THETA)[0] == 0.9


def test_tangent_plane_range_on_slanted_surface():
    # plane z = 0 seen from 2 m height; beam ends at (10, 0, 0)
    origin = np.array([0.0, 0.0, 2.0])
    target = np.array([10.0, 0.0, 0.0])
    point = np.array([10.6, 0.0, 0.0])   # same plane, slightly farther, 0.04 deg off the beam
    # beam length alone calls the point empty; the tangent plane keeps it consistent
    assert beam_evidence(point, origin, target, np.deg2rad(1))[2] == 1.0
    assert beam_evidence(target - [0.6, 0, 0], origin, target, np.deg2rad(1))[0] == 0.9
    assert beam_evidence(target - [0.6, 0, 0], origin, target, np.deg2rad(1), normal=[0, 0, 1])[1] == 0.9
    assert surface_range(point, origin, target, [0, 0, 1]) == pytest.approx(np.linalg.norm(point - origin))


def test_on_beam_points_do_not_depend_on_normal():
    for r in (1.0, 2.5, 4.95, 5.0, 5.05, 8.0):
        p = [r, 0, 0]
        assert beam_evidence(p, [0, 0, 0], [5, 0, 0], THETA) == pytest.approx(
            beam_evidence(p, [0, 0, 0], [5, 0, 0], THETA, normal=[-0.6, 0.8, 0]))


def test_zero_length_beam_rejected():
    with pytest.raises(ValueError):
        beam_evidence([1, 0, 0], [0, 0, 0], [0, 0, 0], THETA)


# --- combine -----------------------------------------------------------------

def exact_dempster(a, b):
    """Oracle: Dempster's rule in rational arithmetic."""
    a = [Fraction(x) for x in a]
    b = [Fraction(x) for x in b]
    k = a[0] * b[1] + a[1] * b[0]
    n = 1 - k
    return ((a[0] * b[0] + a[0] * b[2] + a[2] * b[0]) / n, (a[1] * b[1] + a[1] * b[2] + a[2] * b[1]) / n,
            a[2] * b[2] / n), k


def test_vacuous_is_identity():
    x = (0.3, 0.5, 0.2)
    m, k = combine(x, VACUOUS)
    assert m == pytest.approx(x, abs=0) and k == 0


def test_two_empty_masses():
    m, k = combine((0.9, 0, 0.1), (0.9, 0, 0.1))
    assert m == pytest.approx((0.99, 0, 0.01), abs=1e-15) and k == 0


def test_conflicting_masses():
    m, k = combine((0.9, 0, 0.1), (0, 0.9, 0.1))
    assert k == pytest.approx(0.81, abs=1e-15)
    assert m == pytest.approx((0.09 / 0.19, 0.09 / 0.19, 0.01 / 0.19), abs=1e-15)


def test_total_conflict_raises():
    with pytest.raises(TotalConflict):
        combine((1, 0, 0), (0, 1, 0))


masses = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0.05, 1)).map(
    lambda t: tuple(np.array(t) / sum(t)))


@given(masses, masses)
def test_combine_matches_exact_arithmetic(a, b):
    m, k = combine(a, b)
    em, ek = exact_dempster(a, b)
    assert abs(k - float(ek)) < 1e-12
    assert np.allclose(m, [float(x) for x in em], atol=1e-9)


@given(masses, masses)
def test_combine_simplex_and_commutative(a, b):
    m1, k1 = combine(a, b)
    m2, k2 = combine(b, a)
    assert min(m1) >= -1e-12 and abs(sum(m1) - 1) < 1e-9
    assert np.allclose(m1, m2, atol=1e-9) and abs(k1 - k2) < 1e-12


@given(masses, masses, masses)
def test_combine_associative(a, b, c):
    left, _ = combine(combine(a, b)[0], c)
    right, _ = combine(a, combine(b, c)[0])
    assert np.allclose(left, right, atol=1e-9)


# --- classify_point / label_cloud ------------------------------------------------

def aligned(scene, t):
    sim = simulate_scan(scene, t)
    return range_filter(AlignedScan(t, sim.points_world, sim.sensor_pose.translation, sim.sensor_pose)), sim


def wall_scene(timesteps=5):
    wall = grid_box([8, -6, 0], [8.5, 6, 4], cell=1.0)
    return SyntheticScene([SceneObject(wall, "wall")], sensor_path((0, 0), (2, 0), timesteps), timesteps)


def test_wall_point_seen_in_all_scans_is_static():
    scene = wall_scene()
    scans = [aligned(scene, t)[0] for t in range(5)]
    p = scans[2].points[np.argmin(np.abs(scans[2].points[:, 1]) + np.abs(scans[2].points[:, 2] - 1.7))]
    for aware in (False, True):
        label = classify_point(p, 2, scans, THETA, surface_aware=aware)
        assert not label.moving and label.conflict < 1e-9


def test_object_that_left_is_moving():
    # a box stands in front of the wall in scan 0 only; scans 1-3 see through its location
    box = grid_box([4, -0.5, 1.0], [4.4, 0.5, 2.4], cell=0.5)
    from carvemap.ingest import Trajectory
    gone = Trajectory(np.array([0.0, 0.5, 3.0]), [RigidTransform(), RigidTransform(np.eye(3), [0, 0, 50]),
                                                  RigidTransform(np.eye(3), [0, 0, 50])])
    scene = wall_scene(4)
    scene.objects.append(SceneObject(box, "box", gone))
    runs = [aligned(scene, t) for t in range(4)]
    scans = [r[0] for r in runs]
    box_pts = scans[0].points[runs[0][1].moving]
    assert len(box_pts) > 20
    for p in box_pts[:: max(1, len(box_pts) // 10)]:
        assert classify_point(p, 0, scans, THETA).moving
        assert classify_point(p, 0, scans, THETA, surface_aware=True).moving


def test_point_seen_once_is_static():
    scene = wall_scene(3)
    scans = [aligned(scene, t)[0] for t in range(3)]
    p = np.array([30.0, 0.0, 1.7])  # beyond every beam end: unknown elsewhere
    label = classify_point(p, 0, scans, THETA)
    assert not label.moving and label.conflict == 0.0


def test_all_static_scene_has_no_moving_points():
    scene = wall_scene()
    scans = [aligned(scene, t)[0] for t in range(5)]
    K = label_cloud(scans, 0.5 * scene.lidar.angular_resolution)
    assert sum(int((k > 0.5).sum()) for k in K) == 0


def test_single_scan_window_is_static():
    scene = room_scene(timesteps=1)
    scan = aligned(scene, 0)[0]
    K = label_cloud([scan], 0.5 * scene.lidar.angular_resolution)
    assert not (K[0] > 0.5).any()


@pytest.fixture(scope="module")
def crossing():
    scene = crossing_sphere_scene()
    runs = [aligned(scene, t) for t in range(scene.timesteps)]
    scans = [r[0] for r in runs]
    truth = [r[1].moving[r[0].index] for r in runs]
    query = [~segment_ground(s.points, s.sensor_center, seed_radius=5.0).ground for s in scans]
    return scene, scans, truth, query


def detection_rates(K, truth, query, threshold=0.5):
    pred = np.concatenate(K) > threshold
    mv = np.concatenate(truth)
    q = np.concatenate(query)
    return pred[mv].mean(), pred[~mv & q].mean()


def test_crossing_sphere_detection(crossing):
    scene, scans, truth, query = crossing
    K = label_cloud(scans, 0.5 * scene.lidar.angular_resolution, query)
    recall, fp = detection_rates(K, truth, query)
    assert recall >= 0.9 and fp <= 0.05


def test_vectorised_matches_reference(crossing):
    scene, scans, truth, query = crossing
    theta = 0.5 * scene.lidar.angular_resolution
    rng = np.random.default_rng(0)
    normals = [beam_normals(s) for s in scans]
    for aware in (False, True):
        K = label_cloud(scans, theta, surface_aware=aware)
        for k in (0, 2, 4):
            pick = np.concatenate([rng.choice(len(scans[k]), 60, replace=False),
                                   rng.choice(np.nonzero(truth[k])[0], 10, replace=False)])
            ref = np.array([classify_point(scans[k].points[j], k, scans, theta, surface_aware=aware,
                                           normals=normals).conflict
                            for j in pick])
            assert np.allclose(K[k][pick], ref, atol=1e-9)


def test_rigid_invariance(crossing):
    scene, scans, _, _ = crossing
    T = RigidTransform.from_rotvec([0.3, -0.2, 1.1], [5.0, -3.0, 2.0])
    moved = [AlignedScan(s.scan_id, T.apply(s.points), T.apply(s.sensor_center), T @ s.pose) for s in scans]
    theta = 0.5 * scene.lidar.angular_resolution
    a = label_cloud(scans, theta)
    b = label_cloud(moved, theta)
    for x, y in zip(a, b):
        # rounding can flip a beam sitting exactly on the gate; allow a handful of such points
        assert np.mean(np.abs(x - y) > 1e-6) < 1e-3
    p = scans[1].points[123]
    assert classify_point(p, 1, scans, theta).conflict == pytest.approx(
        classify_point(T.apply(p), 1, moved, theta).conflict, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 0.95), st.floats(0.0, 0.5))
def test_threshold_monotonicity(crossing_K, t, dt):
    K = np.concatenate(crossing_K)
    assert (K > t + dt).sum() <= (K > t).sum()


@pytest.fixture(scope="module")
def crossing_K(crossing):
    scene, scans, _, query = crossing
    return label_cloud(scans, 0.5 * scene.lidar.angular_resolution, query)
