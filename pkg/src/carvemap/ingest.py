"""Dataset loading (KITTI-like layout) and fully ground-truthed synthetic scenes.

Layout of a dataset directory::

    scans/NNNNNN.bin    little-endian float32 (x, y, z, reflectance) in the sensor frame
    images/NNNNNN.png   grayscale (``.pgm`` also accepted)
    calib.txt           ``K: fx fy cx cy`` and ``Tr_lidar_cam:`` + 12 row-major floats
    poses.txt           optional, 12 row-major floats per line (world <- sensor)
    times.txt           optional, one timestamp per frame
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation, Slerp

from .bvh import BVH
from .geometry import CameraView, RigidTransform, TriangleMesh, as_gray_image, merge_meshes
from .meshio import read_obj, write_obj
from .raster import hit_points, rasterize

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass
class Calibration:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    lidar_to_cam: RigidTransform = field(default_factory=RigidTransform)

    def view(self, sensor_pose: RigidTransform, image=None, timestamp: float = 0.0) -> CameraView:
        """Camera for a sensor pose given as world <- sensor."""
        pose = self.lidar_to_cam @ sensor_pose.inverse()
        return CameraView(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose,
                          image, None, timestamp)


@dataclass
class Frame:
    image: np.ndarray
    timestamp: float


@dataclass
class Dataset:
    scans: list[np.ndarray]          # (N, 3) sensor-frame points
    reflectance: list[np.ndarray]
    frames: list[Frame]
    calibration: Calibration
    poses: list[RigidTransform] | None = None  # world <- sensor
    dropped_nonfinite: int = 0
    root: Path | None = None

    def __post_init__(self):
        if not self.scans or not self.frames:
            raise DatasetError("dataset needs at least one scan and one frame")


# --- loading -------------------------------------------------------------------

def _parse_calib(path: Path) -> dict[str, list[float]]:
    out = {}
    for line in path.read_text().splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        out[key.strip()] = [float(x) for x in rest.split()]
    return out


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I", "F"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16 or im.mode.startswith("I"):
        return arr.astype(np.float64) / 65535.0
    return as_gray_image(arr)


def write_image(path, image) -> None:
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def read_scan(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"unreadable scan file {path.name}: {exc}") from exc
    if len(raw) % 16:
        raise DatasetError(f"unreadable scan file {path.name}: size {len(raw)} is not a multiple of 16")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)


def load_dataset(root) -> Dataset:
    root = Path(root)
    calib_path = root / "calib.txt"
    if not calib_path.exists():
        raise DatasetError(f"calibration not found: {calib_path}")
    calib = _parse_calib(calib_path)
    if "K" not in calib or "Tr_lidar_cam" not in calib:
        raise DatasetError(f"calibration not found: {calib_path} lacks K or Tr_lidar_cam")
    if len(calib["K"]) != 4 or len(calib["Tr_lidar_cam"]) != 12:
        raise DatasetError("calibration has wrong number of values")
    try:
        extrinsic = RigidTransform.from_matrix(np.array(calib["Tr_lidar_cam"]), orthonormalize=True)
    except ValueError as exc:
        raise DatasetError(f"invalid lidar->camera extrinsic: {exc}") from exc

    scan_files = sorted((root / "scans").glob("*.bin"))
    image_files = sorted(p for p in (root / "images").glob("*") if p.suffix.lower() in (".png", ".pgm"))
    if len(scan_files) != len(image_files):
        raise DatasetError(f"scan/image count mismatch: {len(scan_files)} scans, {len(image_files)} images")
    if not scan_files:
        raise DatasetError(f"no scans found under {root / 'scans'}")

    scans, refl = [], []
    dropped = 0
    for path in scan_files:
        data = read_scan(path)
        finite = np.all(np.isfinite(data[:, :3]), axis=1)
        dropped += int((~finite).sum())
        scans.append(data[finite, :3].copy())
        refl.append(data[finite, 3].copy())
    if dropped:
        log.warning("dropped %d points with non-finite coordinates", dropped)

    times_path = root / "times.txt"
    times = np.loadtxt(times_path, ndmin=1) if times_path.exists() else np.arange(len(image_files), dtype=float)
    frames = [Frame(read_image(p), float(t)) for p, t in zip(image_files, times)]
    h, w = frames[0].image.shape
    fx, fy, cx, cy = calib["K"]
    calibration = Calibration(fx, fy, cx, cy, w, h, extrinsic)

    poses = None
    poses_path = root / "poses.txt"
    if poses_path.exists():
        rows = np.loadtxt(poses_path, ndmin=2)
        if len(rows) != len(scans):
            raise DatasetError(f"poses.txt has {len(rows)} rows for {len(scans)} scans")
        poses = [RigidTransform.from_matrix(r, orthonormalize=True) for r in rows]
    log.info("loaded %d scans (%d points), %d frames from %s", len(scans),
             sum(len(s) for s in scans), len(frames), root)
    return Dataset(scans, refl, frames, calibration, poses, dropped, root)


def write_dataset(root, scans, images, calibration: Calibration, poses=None, times=None) -> Path:
    """Write a dataset in the layout read by :func:`load_dataset`."""
    root = Path(root)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for k, scan in enumerate(scans):
        s = np.asarray(scan, dtype=np.float64)
        if s.shape[1] == 3:
            s = np.concatenate([s, np.zeros((len(s), 1))], axis=1)
        s.astype("<f4").tofile(root / "scans" / f"{k:06d}.bin")
    for k, img in enumerate(images):
        write_image(root / "images" / f"{k:06d}.png", img)
    c = calibration
    tr = " ".join(f"{x:.17g}" for x in c.lidar_to_cam.as_matrix()[:3].reshape(-1))
    (root / "calib.txt").write_text(f"K: {c.fx:.17g} {c.fy:.17g} {c.cx:.17g} {c.cy:.17g}\nTr_lidar_cam: {tr}\n")
    if poses is not None:
        rows = np.array([p.as_matrix()[:3].reshape(-1) for p in poses])
        np.savetxt(root / "poses.txt", rows, fmt="%.17g")
    if times is not None:
        np.savetxt(root / "times.txt", np.asarray(times, dtype=float), fmt="%.17g")
    return root


# --- synthetic scenes --------------------------------------------------------------

@dataclass
class Trajectory:
    """Keyframed rigid motion; translation is linear, rotation slerped, ends clamped."""

    times: np.ndarray
    transforms: list[RigidTransform]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if len(self.times) != len(self.transforms) or len(self.times) == 0:
            raise ValueError("trajectory needs one transform per keyframe time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe times must be strictly increasing")

    @classmethod
    def static(cls, transform: RigidTransform | None = None) -> "Trajectory":
        return cls(np.array([0.0]), [transform or RigidTransform()])

    @classmethod
    def linear(cls, start, end, t0: float, t1: float, rotation=None) -> "Trajectory":
        R = np.eye(3) if rotation is None else rotation
        return cls(np.array([t0, t1]), [RigidTransform(R, start), RigidTransform(R, end)])

    def covers(self, t0: float, t1: float) -> bool:
        return len(self.times) == 1 or (self.times[0] <= t0 and self.times[-1] >= t1)

    def at(self, t: float) -> RigidTransform:
        if len(self.times) == 1 or t <= self.times[0]:
            return self.transforms[0]
        if t >= self.times[-1]:
            return self.transforms[-1]
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        t0, t1 = self.times[k], self.times[k + 1]
        a = (t - t0) / (t1 - t0)
        T0, T1 = self.transforms[k], self.transforms[k + 1]
        trans = (1 - a) * T0.translation + a * T1.translation
        slerp = Slerp([0.0, 1.0], Rotation.from_matrix([T0.rotation, T1.rotation]))
        R = slerp([a]).as_matrix()[0]
        return RigidTransform(R, trans)

    def to_json(self) -> list[dict]:
        return [{"t": float(t), "rotvec": Rotation.from_matrix(T.rotation).as_rotvec().tolist(),
                 "translation": T.translation.tolist()} for t, T in zip(self.times, self.transforms)]

    @classmethod
    def from_json(cls, keys: list[dict]) -> "Trajectory":
        return cls(np.array([k["t"] for k in keys]),
                   [RigidTransform.from_rotvec(k.get("rotvec", [0, 0, 0]), k.get("translation", [0, 0, 0]))
                    for k in keys])


@dataclass
class LidarModel:
    """Idealised spherical ray fan, sensor frame x forward, y left, z up."""

    n_azimuth: int = 500
    n_elevation: int = 100
    elevation_min_deg: float = -50.0
    elevation_max_deg: float = 50.0
    max_range: float = 30.0
    noise_sigma: float = 0.0
    seed: int = 0

    def directions(self) -> np.ndarray:
        az = 2 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth
        el = np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.n_elevation))
        A, E = np.meshgrid(az, el, indexing="ij")
        A, E = A.ravel(), E.ravel()
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)

    @property
    def angular_resolution(self) -> float:
        """Coarser of the azimuth and elevation steps, radians."""
        az = 2 * np.pi / self.n_azimuth
        el = (np.deg2rad(self.elevation_max_deg - self.elevation_min_deg) / (self.n_elevation - 1)
              if self.n_elevation > 1 else az)
        return max(az, el)


@dataclass
class ProceduralTexture:
    """Smooth grey-level field: squashed sum of random plane waves.

    Evaluated in each object's own frame, so the pattern travels with movers.
    """
    seed: int = 0
    waves: int = 12
    min_wavelength: float = 0.25
    max_wavelength: float = 1.5
    contrast: float = 0.45

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rng = np.random.default_rng(self.seed)
        dirs = rng.normal(size=(self.waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lam = np.exp(rng.uniform(np.log(self.min_wavelength), np.log(self.max_wavelength), self.waves))
        phase = rng.uniform(0, 2 * np.pi, self.waves)
        s = np.sin(pts @ (2 * np.pi * dirs / lam[:, None]).T + phase).sum(axis=1)
        return 0.5 + self.contrast * np.tanh(s / np.sqrt(self.waves / 2))


@dataclass
class SceneObject:
    mesh: TriangleMesh                  # object frame for movers, world frame otherwise
    name: str = ""
    trajectory: Trajectory | None = None
    is_car: bool = False

    @property
    def moving(self) -> bool:
        return self.trajectory is not None


@dataclass
class SimulatedScan:
    points: np.ndarray        # sensor frame
    points_world: np.ndarray
    moving: np.ndarray        # ground-truth moving labels
    object_index: np.ndarray  # scene object hit by each return
    face: np.ndarray          # face index within the merged geometry at that timestep
    sensor_pose: RigidTransform


@dataclass
class SyntheticScene:
    objects: list[SceneObject]
    sensor: Trajectory
    timesteps: int
    lidar: LidarModel = field(default_factory=LidarModel)
    camera: Calibration | None = None
    texture: ProceduralTexture | None = None   # replaces the per-face albedo in renders

    def __post_init__(self):
        for obj in self.objects:
            if obj.mesh.albedo is None:
                obj.mesh.albedo = np.full(obj.mesh.n_faces, 0.5)
            if obj.trajectory is not None and not obj.trajectory.covers(0, self.timesteps - 1):
                raise ValueError(f"trajectory of {obj.name!r} does not cover all timesteps")
        if not self.sensor.covers(0, self.timesteps - 1):
            raise ValueError("sensor trajectory does not cover all timesteps")

    @property
    def static(self) -> list[SceneObject]:
        return [o for o in self.objects if not o.moving]

    @property
    def moving(self) -> list[SceneObject]:
        return [o for o in self.objects if o.moving]

    def ground_truth_mesh(self) -> TriangleMesh:
        return merge_meshes([o.mesh for o in self.static])

    def sensor_pose(self, t: float) -> RigidTransform:
        return self.sensor.at(t)

    def geometry_at(self, t: float) -> tuple[TriangleMesh, np.ndarray]:
        """Merged world geometry at timestep ``t`` and the owning object of each face."""
        meshes, owner = [], []
        for k, obj in enumerate(self.objects):
            m = obj.mesh.transformed(obj.trajectory.at(t)) if obj.moving else obj.mesh
            meshes.append(m)
            owner.append(np.full(m.n_faces, k))
        merged = merge_meshes(meshes) if meshes else TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
        return merged, (np.concatenate(owner) if owner else np.zeros(0, dtype=np.int64))

    def view(self, t: float, image=None) -> CameraView:
        if self.camera is None:
            raise ValueError("scene has no camera")
        return self.camera.view(self.sensor_pose(t), image, float(t))


def simulate_scan(scene: SyntheticScene, t: int, lidar: LidarModel | None = None,
                  max_range: float | None = None) -> SimulatedScan:
    """First-hit ray casting of the lidar fan against the scene at timestep ``t``."""
    if not 0 <= t < scene.timesteps:
        raise ValueError(f"timestep {t} outside trajectory [0, {scene.timesteps})")
    lidar = lidar or scene.lidar
    max_range = lidar.max_range if max_range is None else max_range
    pose = scene.sensor_pose(t)
    dirs_s = lidar.directions()
    geom, owner = scene.geometry_at(t)
    empty = np.zeros((0, 3))
    if geom.n_faces == 0:
        return SimulatedScan(empty, empty, np.zeros(0, bool), np.zeros(0, np.int64),
                             np.zeros(0, np.int64), pose)
    dirs_w = dirs_s @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_w.shape)
    tt, face, _ = BVH.build(geom.triangles()).intersect(origins, dirs_w, tmin=1e-9, tmax=max_range)
    hit = face >= 0
    r = tt[hit]
    if lidar.noise_sigma > 0:
        rng = np.random.default_rng([lidar.seed, int(t)])
        r = r + rng.normal(0.0, lidar.noise_sigma, size=r.shape)
    pts_s = dirs_s[hit] * r[:, None]
    obj = owner[face[hit]]
    moving = np.array([scene.objects[k].moving for k in obj], dtype=bool).reshape(-1)
    return SimulatedScan(pts_s, pose.apply(pts_s), moving, obj, face[hit], pose)


def render_view(scene: SyntheticScene, view: CameraView, t: float) -> np.ndarray:
    """Unlit image (background 0) of the scene at timestep ``t``.

    Pixels take the per-face albedo, or the scene's procedural texture at
    the exact ray hit when one is set.
    """
    geom, owner = scene.geometry_at(t)
    img = np.zeros((view.height, view.width))
    if geom.n_faces == 0:
        return img
    buf = rasterize(geom, view)
    m = buf.covered
    if scene.texture is None:
        img[m] = geom.albedo[buf.face[m]]
        return img
    pts = hit_points(geom, buf)[m]
    obj = owner[buf.face[m]]
    for k, o in enumerate(scene.objects):
        sel = obj == k
        if o.moving and sel.any():
            pts[sel] = o.trajectory.at(t).inverse().apply(pts[sel])
    img[m] = scene.texture(pts)
    return img


# --- scene (de)serialisation ----------------------------------------------------

def save_scene(scene: SyntheticScene, directory) -> Path:
    """Write meshes as OBJ (+ per-face albedo text) and the scene description JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    objs = []
    for k, obj in enumerate(scene.objects):
        stem = f"object_{k:02d}"
        write_obj(directory / f"{stem}.obj", obj.mesh)
        np.savetxt(directory / f"{stem}_albedo.txt", obj.mesh.albedo, fmt="%.17g")
        entry = {"name": obj.name, "obj": f"{stem}.obj", "albedo": f"{stem}_albedo.txt", "car": obj.is_car}
        if obj.moving:
            entry["keyframes"] = obj.trajectory.to_json()
        objs.append(entry)
    desc = {
        "timesteps": scene.timesteps,
        "objects": objs,
        "sensor": scene.sensor.to_json(),
        "lidar": {k: getattr(scene.lidar, k) for k in LidarModel.__dataclass_fields__},
    }
    if scene.camera is not None:
        c = scene.camera
        desc["camera"] = {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width,
                          "height": c.height,
                          "lidar_to_cam": c.lidar_to_cam.as_matrix()[:3].reshape(-1).tolist()}
    if scene.texture is not None:
        desc["texture"] = {k: getattr(scene.texture, k) for k in ProceduralTexture.__dataclass_fields__}
    path = directory / "scene.json"
    path.write_text(json.dumps(desc, indent=2))
    return path


def load_scene(path) -> SyntheticScene:
    path = Path(path)
    desc = json.loads(path.read_text())
    base = path.parent
    objects = []
    for entry in desc["objects"]:
        mesh = read_obj(base / entry["obj"])
        albedo = entry.get("albedo", 0.5)
        if isinstance(albedo, str):
            albedo = np.loadtxt(base / albedo, ndmin=1)
        mesh.albedo = np.broadcast_to(np.asarray(albedo, dtype=float), (mesh.n_faces,)).copy()
        traj = Trajectory.from_json(entry["keyframes"]) if "keyframes" in entry else None
        objects.append(SceneObject(mesh, entry.get("name", ""), traj, bool(entry.get("car", False))))
    lidar = LidarModel(**desc.get("lidar", {}))
    camera = None
    if "camera" in desc:
        c = desc["camera"]
        camera = Calibration(c["fx"], c["fy"], c["cx"], c["cy"], int(c["width"]), int(c["height"]),
                             RigidTransform.from_matrix(np.array(c["lidar_to_cam"]), orthonormalize=True))
    texture = ProceduralTexture(**desc["texture"]) if "texture" in desc else None
    return SyntheticScene(objects, Trajectory.from_json(desc["sensor"]), int(desc["timesteps"]), lidar, camera,
                          texture)


def synthesize_dataset(scene: SyntheticScene, out) -> Path:
    """Simulate every timestep and write a dataset plus ground truth under ``out``.

    Ground truth goes to ``out/gt``: the static surface mesh, per-scan moving
    and car labels, and the static world-frame reference cloud.
    """
    from .meshio import write_ply_points

    out = Path(out)
    if scene.camera is None:
        raise ValueError("scene needs a camera to synthesize images")
    scans, images, poses, ref = [], [], [], []
    gt = out / "gt"
    (gt / "labels").mkdir(parents=True, exist_ok=True)
    for t in range(scene.timesteps):
        sim = simulate_scan(scene, t)
        view = scene.view(t)
        scans.append(sim.points)
        images.append(render_view(scene, view, t))
        poses.append(sim.sensor_pose)
        car = np.array([scene.objects[k].is_car for k in sim.object_index], dtype=bool).reshape(-1)
        np.savez(gt / "labels" / f"{t:06d}.npz", moving=sim.moving, car=car)
        ref.append(sim.points_world[~sim.moving])
    write_dataset(out, scans, images, scene.camera, poses, np.arange(scene.timesteps, dtype=float))
    write_obj(gt / "mesh.obj", scene.ground_truth_mesh())
    write_ply_points(gt / "reference.ply", np.concatenate(ref) if ref else np.zeros((0, 3)))
    return out
