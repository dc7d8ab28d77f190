import logging

import numpy as np
import pytest

from carvemap.bvh import BVH
from carvemap.geometry import RigidTransform, is_manifold
from carvemap.ingest import (Calibration, DatasetError, LidarModel, SceneObject, SyntheticScene, Trajectory,
                             ProceduralTexture, load_dataset, load_scene, render_view, save_scene, simulate_scan, write_dataset)
from carvemap.scenes import LIDAR_TO_CAM, SCENES, default_camera, grid_box, icosphere, room_scene


def fixture_dataset(tmp_path, n=3, nan_points=0):
    rng = np.random.default_rng(0)
    scans = [rng.normal(size=(50, 4)) for _ in range(n)]
    for k in range(nan_points):
        scans[0][k, 1] = np.nan
    images = [rng.uniform(size=(12, 16)) for _ in range(n)]
    calib = Calibration(20.0, 21.0, 7.5, 5.5, 16, 12, LIDAR_TO_CAM)
    poses = [RigidTransform.from_rotvec([0, 0, 0.1 * k], [k, 0, 0]) for k in range(n)]
    return write_dataset(tmp_path / "ds", scans, images, calib, poses), scans, images


# --- load_dataset -------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    root, scans, images = fixture_dataset(tmp_path)
    ds = load_dataset(root)
    assert len(ds.scans) == 3 and len(ds.frames) == 3
    assert np.allclose(ds.scans[1], scans[1][:, :3].astype(np.float32))
    assert np.allclose(ds.reflectance[2], scans[2][:, 3].astype(np.float32))
    assert np.max(np.abs(ds.frames[0].image - images[0])) <= 0.5 / 255 + 1e-12
    assert ds.calibration.fx == 20.0 and ds.calibration.width == 16 and ds.calibration.height == 12
    assert np.allclose(ds.calibration.lidar_to_cam.rotation, LIDAR_TO_CAM.rotation)
    assert np.allclose(ds.poses[2].translation, [2, 0, 0])


def test_missing_calibration(tmp_path):
    root, _, _ = fixture_dataset(tmp_path)
    (root / "calib.txt").unlink()
    with pytest.raises(DatasetError, match="calibration not found"):
        load_dataset(root)


def test_nan_point_dropped(tmp_path, caplog):
    root, _, _ = fixture_dataset(tmp_path, nan_points=1)
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(root)
    assert ds.dropped_nonfinite == 1
    assert len(ds.scans[0]) == 49 and len(ds.scans[1]) == 50
    assert "dropped 1" in caplog.text


def test_unreadable_scan_names_file(tmp_path):
    root, _, _ = fixture_dataset(tmp_path)
    (root / "scans" / "000001.bin").write_bytes(b"\x00" * 7)
    with pytest.raises(DatasetError, match="000001.bin"):
        load_dataset(root)


def test_scan_image_count_mismatch(tmp_path):
    root, _, _ = fixture_dataset(tmp_path)
    (root / "images" / "000002.png").unlink()
    with pytest.raises(DatasetError, match="mismatch"):
        load_dataset(root)


def test_invalid_extrinsic_rejected(tmp_path):
    root, _, _ = fixture_dataset(tmp_path)
    (root / "calib.txt").write_text("K: 1 1 0 0\nTr_lidar_cam: 1 0 0 0 0 1 0 0 0 0 -1 0\n")
    with pytest.raises(DatasetError):
        load_dataset(root)


# --- simulate_scan ---------------------------------------------------------------

def one_ray():
    return LidarModel(n_azimuth=1, n_elevation=1, elevation_min_deg=0, elevation_max_deg=0)


def test_single_wall_single_ray():
    wall = grid_box([5, -1, -1], [5.3, 1, 1], cell=0.5)
    scene = SyntheticScene([SceneObject(wall)], Trajectory.static(), 1, one_ray())
    sim = simulate_scan(scene, 0)
    assert len(sim.points) == 1
    assert abs(np.linalg.norm(sim.points[0]) - 5.0) < 1e-9
    assert not sim.moving[0]


def test_empty_scene_has_no_returns():
    scene = SyntheticScene([], Trajectory.static(), 1)
    assert len(simulate_scan(scene, 0).points) == 0


def test_out_of_range_returns_nothing():
    wall = grid_box([5, -1, -1], [5.3, 1, 1])
    scene = SyntheticScene([SceneObject(wall)], Trajectory.static(), 1, one_ray())
    assert len(simulate_scan(scene, 0, max_range=4.0).points) == 0


def analytic_sphere_hits(dirs, origin, center, radius):
    """Oracle: rays from ``origin`` whose line meets the sphere in front of the sensor."""
    oc = center - origin
    along = dirs @ oc
    perp2 = oc @ oc - along ** 2
    return int(np.sum((along > 0) & (perp2 <= radius ** 2)))


def test_translating_sphere_matches_analytic_silhouette():
    lidar = LidarModel(n_azimuth=720, n_elevation=60, elevation_min_deg=-20, elevation_max_deg=20)
    traj = Trajectory.linear([6, -3, 0.3], [6, 3, 0.3], 0, 2)
    scene = SyntheticScene([SceneObject(icosphere(1.0, 4), "ball", traj)], Trajectory.static(), 3, lidar)
    dirs = lidar.directions()
    for t in range(3):
        sim = simulate_scan(scene, t)
        expected = analytic_sphere_hits(dirs, np.zeros(3), traj.at(t).translation, 1.0)
        assert sim.moving.all()
        assert abs(sim.moving.sum() - expected) <= 0.05 * expected


def test_simulated_points_lie_on_surfaces():
    scene = room_scene()
    for t in (0, 3):
        sim = simulate_scan(scene, t)
        geom, _ = scene.geometry_at(t)
        d, _, _ = BVH.build(geom.triangles()).nearest(sim.points_world)
        assert d.max() < 1e-6


def test_simulation_is_deterministic():
    lidar = LidarModel(noise_sigma=0.02, seed=5)
    a = simulate_scan(room_scene(lidar=lidar), 2)
    b = simulate_scan(room_scene(lidar=lidar), 2)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.moving, b.moving)


def test_noise_changes_ranges_only():
    clean = simulate_scan(room_scene(), 1)
    noisy = simulate_scan(room_scene(lidar=LidarModel(noise_sigma=0.01, seed=1)), 1)
    u0 = clean.points / np.linalg.norm(clean.points, axis=1, keepdims=True)
    u1 = noisy.points / np.linalg.norm(noisy.points, axis=1, keepdims=True)
    assert np.allclose(u0, u1)
    dr = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
    assert 0.008 < dr.std() < 0.012


# --- render_view --------------------------------------------------------------

def test_full_frame_constant_wall():
    wall = grid_box([5, -50, -50], [5.5, 50, 50], cell=10.0, albedo=0.5)
    cam = default_camera(64, 48, 40.0)
    scene = SyntheticScene([SceneObject(wall)], Trajectory.static(), 1, camera=cam)
    img = render_view(scene, scene.view(0), 0)
    assert np.all(img == 0.5)


def test_empty_scene_renders_black():
    scene = SyntheticScene([], Trajectory.static(), 1, camera=default_camera(32, 24))
    assert np.all(render_view(scene, scene.view(0), 0) == 0)


def test_textured_render_samples_texture_at_ray_hit():
    tex = ProceduralTexture(seed=3)
    wall = grid_box([5, -50, -50], [5.5, 50, 50], cell=10.0)
    cam = default_camera(64, 48, 40.0)
    scene = SyntheticScene([SceneObject(wall)], Trajectory.static(), 1, camera=cam, texture=tex)
    view = scene.view(0)
    img = render_view(scene, view, 0)
    # oracle: intersect each pixel ray with the plane x = 5 by hand
    v, u = np.mgrid[0:48, 0:64]
    rays_cam = np.stack([(u - view.cx) / view.fx, (v - view.cy) / view.fy, np.ones_like(u, float)], -1)
    rays = rays_cam.reshape(-1, 3) @ view.pose.rotation
    c = view.center
    hit = c + rays * ((5.0 - c[0]) / rays[:, 0])[:, None]
    assert np.allclose(img.ravel(), tex(hit), atol=1e-9)


def test_procedural_texture_range_and_smoothness():
    tex = ProceduralTexture()
    p = np.random.default_rng(0).uniform(-10, 10, (2000, 3))
    val = tex(p)
    assert np.all((val > 0.05) & (val < 0.95))
    assert val.std() > 0.1
    step = np.abs(tex(p + [1e-4, 0, 0]) - val)
    assert step.max() < 1e-2


def test_moving_object_texture_follows_object():
    # moving the object and the camera together must not change the image
    tex = ProceduralTexture(seed=1)
    ball = icosphere(1.0, 3)
    motion = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.5, -0.4, 0.7])
    cam = default_camera(48, 48, 60.0)
    sensor = RigidTransform(np.eye(3), [-5.0, 0.0, 0.0])
    still = SyntheticScene([SceneObject(ball, "b")], Trajectory.static(sensor), 1, camera=cam, texture=tex)
    moved = SyntheticScene([SceneObject(ball, "b", Trajectory.static(motion))],
                           Trajectory.static(motion @ sensor), 1, camera=cam, texture=tex)
    a = render_view(still, still.view(0), 0)
    b = render_view(moved, moved.view(0), 0)
    assert np.count_nonzero(a) > 300
    assert np.allclose(a, b, atol=1e-6)


def test_identical_cameras_identical_images():
    scene = room_scene()
    a = render_view(scene, scene.view(1), 1)
    b = render_view(scene, scene.view(1), 1)
    assert np.array_equal(a, b)


def camera_unoccluded(bvh, center, points):
    """Oracle: first hit from the camera centre towards each point is the point itself."""
    d = points - center
    r = np.linalg.norm(d, axis=1)
    t, _, _ = bvh.intersect(np.broadcast_to(center, d.shape), d / r[:, None], 1e-9, np.inf)
    return t >= r - 1e-6


def distance_to_projected_edges(view, tri, uv):
    """Pixel distance from ``uv`` to the nearest edge of each projected triangle."""
    corners = np.stack([view.project_points(tri[:, k])[0] for k in range(3)], axis=1)
    best = np.full(len(uv), np.inf)
    for k in range(3):
        a, b = corners[:, k], corners[:, (k + 1) % 3]
        ab = b - a
        s = np.clip(np.einsum("ij,ij->i", uv - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
        best = np.minimum(best, np.linalg.norm(uv - a - s[:, None] * ab, axis=1))
    return best


def test_render_and_scan_are_consistent():
    scene = room_scene(textured=False)
    # offset the camera from the lidar so occlusion actually matters
    scene.camera = Calibration(400.0, 400.0, 319.5, 239.5, 640, 480,
                               RigidTransform(LIDAR_TO_CAM.rotation, [0.3, 0.2, -0.4]))
    for t in (0, 2, 4):
        sim = simulate_scan(scene, t)
        view = scene.view(t)
        img = render_view(scene, view, t)
        geom, _ = scene.geometry_at(t)
        keep = ~sim.moving
        pts, faces = sim.points_world[keep], sim.face[keep]
        uv, z = view.project_points(pts)
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= 639) & (uv[:, 1] >= 0) & (uv[:, 1] <= 479)
        inside &= camera_unoccluded(BVH.build(geom.triangles()), view.center, pts)
        # nearest-pixel lookup is ambiguous within a pixel of the face boundary
        tri = geom.triangles()[faces]
        inside &= distance_to_projected_edges(view, tri, np.nan_to_num(uv)) > 1.0
        pu = np.rint(uv[inside, 0]).astype(int)
        pv = np.rint(uv[inside, 1]).astype(int)
        match = img[pv, pu] == geom.albedo[faces[inside]]
        assert inside.sum() > 1000
        assert match.mean() >= 0.99


# --- scenes ---------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(SCENES))
def test_scene_ground_truth_mesh_is_manifold(name):
    mesh = SCENES[name]().ground_truth_mesh()
    assert is_manifold(mesh.faces) and not mesh.degenerate_faces().any()


def test_trajectory_interpolation():
    a = RigidTransform.from_rotvec([0, 0, 0], [0, 0, 0])
    b = RigidTransform.from_rotvec([0, 0, 1.0], [2, 0, 0])
    tr = Trajectory(np.array([0.0, 2.0]), [a, b])
    mid = tr.at(1.0)
    assert np.allclose(mid.translation, [1, 0, 0])
    assert np.allclose(mid.rotation, RigidTransform.from_rotvec([0, 0, 0.5]).rotation)
    assert tr.at(-1) is a and tr.at(5) is b


def test_trajectory_must_cover_timesteps():
    traj = Trajectory.linear([0, 0, 0], [1, 0, 0], 0, 2)
    with pytest.raises(ValueError, match="cover"):
        SyntheticScene([SceneObject(icosphere(), "x", traj)], Trajectory.static(), 5)


def test_scene_json_round_trip(tmp_path):
    scene = room_scene(timesteps=3)
    path = save_scene(scene, tmp_path / "scene")
    back = load_scene(path)
    assert back.timesteps == 3 and len(back.objects) == len(scene.objects)
    a = simulate_scan(scene, 1)
    b = simulate_scan(back, 1)
    assert np.allclose(a.points, b.points, atol=1e-9) and np.array_equal(a.moving, b.moving)
    assert np.allclose(render_view(scene, scene.view(1), 1), render_view(back, back.view(1), 1))
