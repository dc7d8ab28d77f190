"""Stage orchestration with on-disk caches.

Stages run in a fixed order.  Each stage's output is stored under
``<output>/cache`` keyed by a hash of the dataset fingerprint and the
parameters of every stage up to and including it, so a rerun reuses all
stages whose upstream configuration is unchanged.  Final artifacts are
(re)written from the stage data on every run, which keeps them identical
whether a stage was computed or loaded.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .cars import car_hulls, detect_cars
from .carve import CarveError, carve, merge_car_hulls
from .config import PipelineConfig
from .evaluate import ErrorReport, mesh_to_cloud_error
from .geometry import GeometryError, RigidTransform, TriangleMesh
from .ground import GroundError, GroundGrid, segment_ground
from .ingest import Dataset, DatasetError, load_dataset
from .meshio import read_points, write_ply_mesh
from .motion import estimate_angular_resolution, label_cloud
from .refine import RefineConfig, build_moving_mask, refine
from .registration import AlignedScan, RayCloud, RegistrationError, downsample, register_scans
from .texture import BlendState, TextureAtlas, finalize_atlas, texture_mesh, vertex_colors, write_textured_obj

log = logging.getLogger(__name__)

STAGES = ("ingest", "registration", "ground", "motion", "cars", "carve", "refine", "texture", "eval")
ALIASES = {"register": "registration", "ground-seg": "ground", "motion-dst": "motion", "car-detect": "cars"}
REQUIRES = {
    "ingest": (),
    "registration": (),
    "ground": ("registration",),
    "motion": ("registration", "ground"),
    "cars": ("registration", "ground", "motion"),
    "carve": ("registration", "ground", "motion", "cars"),
    "refine": ("carve", "registration", "motion"),
    "texture": ("refine", "registration", "motion"),
    "eval": ("refine",),
}
DATASET_FILES = ("calib.txt", "poses.txt", "times.txt")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def stage_name(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}; expected one of {', '.join(STAGES)}")
    return name


def dataset_fingerprint(root) -> str:
    """Hash of every input file (names and bytes), ignoring ground-truth extras."""
    root = Path(root)
    h = hashlib.sha256()
    files = [root / n for n in DATASET_FILES if (root / n).exists()]
    files += sorted((root / "scans").glob("*")) + sorted((root / "images").glob("*"))
    for f in files:
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# --- array packing for caches ----------------------------------------------------------

def _pack_mesh(mesh: TriangleMesh, prefix: str = "mesh") -> dict:
    return {f"{prefix}_vertices": mesh.vertices, f"{prefix}_faces": mesh.faces,
            f"{prefix}_manifold": np.array(bool(mesh.manifold))}


def _unpack_mesh(data, prefix: str = "mesh") -> TriangleMesh:
    return TriangleMesh(np.array(data[f"{prefix}_vertices"]), np.array(data[f"{prefix}_faces"]),
                        manifold=bool(data[f"{prefix}_manifold"]))


def _split(values: np.ndarray, offsets: np.ndarray) -> list[np.ndarray]:
    return [values[offsets[k]:offsets[k + 1]] for k in range(len(offsets) - 1)]


@dataclass
class StageRecord:
    name: str
    cached: bool
    seconds: float


@dataclass
class PipelineResult:
    artifacts: dict[str, Path] = field(default_factory=dict)
    report: ErrorReport | None = None
    stages: list[StageRecord] = field(default_factory=list)


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.cfg = config.validate()
        self.out = Path(config.output)
        self.cache_dir = self.out / "cache"
        self._dataset: Dataset | None = None
        self._hashes: dict[str, str] | None = None
        self._memo: dict[str, dict] = {}
        if config.threads > 0:
            numba.set_num_threads(min(config.threads, numba.config.NUMBA_NUM_THREADS))

    # --- bookkeeping -------------------------------------------------------------------

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            try:
                self._dataset = load_dataset(self.cfg.dataset)
            except (DatasetError, OSError, ValueError) as exc:
                raise StageError("ingest", str(exc)) from exc
        return self._dataset

    @property
    def hashes(self) -> dict[str, str]:
        if self._hashes is None:
            root = Path(self.cfg.dataset)
            if not (root / "calib.txt").exists():
                raise StageError("ingest", f"calibration not found: {root / 'calib.txt'}")
            prev = dataset_fingerprint(root)
            out = {"ingest": prev}
            for name in STAGES[1:]:
                prev = self.cfg.section_hash(name, prev)
                out[name] = prev
            self._hashes = out
        return self._hashes

    def cache_path(self, stage: str) -> Path:
        return self.cache_dir / f"{stage}-{self.hashes[stage][:16]}.npz"

    def has_cache(self, stage: str) -> bool:
        return self.cache_path(stage).exists()

    def _save(self, stage: str, data: dict) -> None:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = self.cache_path(stage).with_suffix(".tmp.npz")
        np.savez(tmp, **data)
        tmp.replace(self.cache_path(stage))

    def load(self, stage: str) -> dict:
        if stage in self._memo:
            return self._memo[stage]
        path = self.cache_path(stage)
        if not path.exists():
            raise StageError(stage, f"{stage} output missing")
        with np.load(path, allow_pickle=False) as f:
            data = {k: f[k] for k in f.files}
        self._memo[stage] = data
        return data

    # --- stage data accessors ----------------------------------------------------------

    def scans(self) -> list[AlignedScan]:
        d = self.load("registration")
        pts, idx = _split(d["points"], d["offsets"]), _split(d["index"], d["offsets"])
        return [AlignedScan(k, p, d["centers"][k], RigidTransform.from_matrix(d["poses"][k]), i)
                for k, (p, i) in enumerate(zip(pts, idx))]

    def moving(self) -> np.ndarray:
        d = self.load("motion")
        return d["K"] > float(d["threshold"])

    def views(self):
        ds = self.dataset
        scans = self.scans()
        d = self.load("registration")
        moving = _split(self.moving(), d["offsets"])
        rc = self.cfg.refine
        views = []
        for k, frame in enumerate(ds.frames):
            v = ds.calibration.view(scans[k].pose, frame.image, frame.timestamp)
            v.moving_mask = build_moving_mask(v, scans[k].points[moving[k]], rc.mask_box, rc.mask_dilate,
                                              rc.mask_erode)
            views.append(v)
        return views

    # --- stages ------------------------------------------------------------------------

    def _registration(self) -> dict:
        ds, c = self.dataset, self.cfg.registration
        try:
            scans = register_scans(ds.scans, ds.poses, c.use_gt_poses, tau=c.max_range, map_voxel=c.map_voxel,
                                   scan_voxel=c.scan_voxel, max_iterations=c.max_iterations)
        except RegistrationError as exc:
            raise StageError("registration", str(exc)) from exc
        offsets = np.cumsum([0] + [len(s) for s in scans])
        log.info("registration: %d scans, %d points after range filter", len(scans), offsets[-1])
        return {"points": np.concatenate([s.points for s in scans]),
                "index": np.concatenate([s.index for s in scans]),
                "offsets": offsets,
                "centers": np.array([s.sensor_center for s in scans]),
                "poses": np.array([s.pose.as_matrix() for s in scans])}

    def _ground(self) -> dict:
        d, c = self.load("registration"), self.cfg.ground
        try:
            seg = segment_ground(d["points"], d["centers"][0], c.cell, c.dh, c.delta, c.gap, c.seed_radius)
        except GroundError as exc:
            raise StageError("ground", str(exc)) from exc
        g = seg.grid
        log.info("ground: %d of %d points", int(seg.ground.sum()), len(seg.ground))
        return {"ground": seg.ground, "cell": np.array(g.cell), "origin": g.origin, "height": g.height,
                "classified": g.classified, "seed": np.array(g.seed)}

    def grid(self) -> GroundGrid:
        d = self.load("ground")
        return GroundGrid(float(d["cell"]), d["origin"], d["height"], d["classified"], tuple(int(s) for s in d["seed"]))

    def _motion(self) -> dict:
        c = self.cfg.motion
        scans = self.scans()
        offsets = self.load("registration")["offsets"]
        ground = _split(self.load("ground")["ground"], offsets)
        theta = c.theta_b
        if theta <= 0:
            theta = 0.5 * estimate_angular_resolution(scans[0].points, scans[0].sensor_center)
        K = label_cloud(scans, theta, [~g for g in ground], c.eps, c.lam, c.threshold, c.window,
                        surface_aware=c.surface_aware)
        K = np.concatenate(K)
        log.info("motion: %d moving points (theta_b %.5f rad)", int((K > c.threshold).sum()), theta)
        return {"K": K, "theta_b": np.array(theta), "threshold": np.array(c.threshold)}

    def _cars(self) -> dict:
        c = self.cfg.cars
        d = self.load("registration")
        n = len(d["points"])
        car = np.zeros(n, dtype=bool)
        hulls: list[TriangleMesh] = []
        if c.enabled:
            sel = ~self.load("ground")["ground"] & ~self.moving()
            P = d["points"][sel]
            grid = self.grid()
            h = P[:, 2] - grid.ground_height(P[:, :2]) if len(P) else np.zeros(0)
            det = detect_cars(P, h, c.cell, c.tau, (c.rho_min, c.rho_max), (c.ratio_min, c.ratio_max),
                              np.deg2rad(c.ramp_deg), np.deg2rad(c.flat_deg))
            car[np.flatnonzero(sel)[~det.keep]] = True
            hulls = car_hulls(det.clusters, grid.ground_height)
        else:
            log.info("car detection disabled")
        vo = np.cumsum([0] + [h.n_vertices for h in hulls])
        fo = np.cumsum([0] + [h.n_faces for h in hulls])
        return {"car": car,
                "hull_vertices": np.concatenate([h.vertices for h in hulls]) if hulls else np.zeros((0, 3)),
                "hull_faces": np.concatenate([h.faces for h in hulls]) if hulls else np.zeros((0, 3), np.int64),
                "vertex_offsets": vo, "face_offsets": fo}

    def hulls(self) -> list[TriangleMesh]:
        d = self.load("cars")
        V, F, vo, fo = d["hull_vertices"], d["hull_faces"], d["vertex_offsets"], d["face_offsets"]
        return [TriangleMesh(V[vo[k]:vo[k + 1]], F[fo[k]:fo[k + 1]], manifold=True) for k in range(len(vo) - 1)]

    def _carve(self) -> dict:
        c = self.cfg.carve
        d = self.load("registration")
        keep = ~self.moving() & ~self.load("cars")["car"]
        scan_id = np.repeat(np.arange(len(d["centers"])), np.diff(d["offsets"]))
        cloud = RayCloud(d["points"], d["centers"][scan_id], scan_id).subset(keep)
        small, _ = downsample(cloud, c.downsample_fraction)
        try:
            mesh, _ = carve(small.points, small.origins, c.k, c.seed)
        except (CarveError, ValueError) as exc:
            raise StageError("carve", str(exc)) from exc
        hulls = self.hulls()
        mesh = merge_car_hulls(mesh, hulls)
        log.info("carve: %d points -> %d faces (+%d car hulls)", len(small), mesh.n_faces, len(hulls))
        return _pack_mesh(mesh)

    def _refine(self) -> dict:
        c = self.cfg.refine
        mesh = _unpack_mesh(self.load("carve"))
        if not c.enabled:
            log.info("refinement disabled")
            return {**_pack_mesh(mesh), "energies": np.zeros(0), "objective": np.zeros(0),
                    "aborted": np.array(False)}
        cfg = RefineConfig(iterations=c.iterations, patch=c.patch, step=c.step, smooth=c.smooth, pairs=c.pairs)
        try:
            res = refine(mesh, self.views(), cfg)
        except (GeometryError, ValueError) as exc:
            raise StageError("refine", str(exc)) from exc
        return {**_pack_mesh(res.mesh), "energies": np.array(res.energies), "objective": np.array(res.objective),
                "aborted": np.array(res.aborted)}

    def _texture(self) -> dict:
        c = self.cfg.texture
        mesh = _unpack_mesh(self.load("refine"))
        atlas = texture_mesh(mesh, self.views(), c.texels, c.alpha)
        log.info("texture: %.1f%% of texels observed", 100.0 * atlas.filled.mean() if atlas.filled.size else 0.0)
        return {"C": atlas.state.C, "W": atlas.state.W, "n": atlas.state.n}

    def atlas(self) -> TextureAtlas:
        d = self.load("texture")
        c = self.cfg.texture
        return TextureAtlas(len(d["C"]), c.texels, c.alpha, BlendState(d["C"], d["W"], d["n"]))

    def reference_path(self) -> Path | None:
        if self.cfg.eval.reference:
            return Path(self.cfg.eval.reference)
        default = Path(self.cfg.dataset) / "gt" / "reference.ply"
        return default if default.exists() else None

    # --- artifact export ---------------------------------------------------------------

    def _export(self, stage: str) -> dict[str, Path]:
        out = self.out
        out.mkdir(parents=True, exist_ok=True)
        if stage == "carve":
            p = out / "carved.ply"
            write_ply_mesh(p, _unpack_mesh(self.load("carve")))
            return {"carved_mesh": p}
        if stage == "refine":
            d = self.load("refine")
            p = out / "mesh.ply"
            write_ply_mesh(p, _unpack_mesh(d))
            arts = {"mesh": p}
            if len(d["energies"]):
                t = out / "refine_trace.csv"
                with open(t, "w") as fh:
                    fh.write("iteration,e_photo,objective\n")
                    for k, (e, o) in enumerate(zip(d["energies"], d["objective"])):
                        fh.write(f"{k},{float(e)!r},{float(o)!r}\n")
                arts["refine_trace"] = t
            else:
                (out / "refine_trace.csv").unlink(missing_ok=True)
            return arts
        if stage == "texture":
            mesh = _unpack_mesh(self.load("refine"))
            atlas = self.atlas()
            obj, mtl, png = write_textured_obj(out / "textured.obj", mesh, finalize_atlas(atlas))
            arts = {"textured_obj": obj, "textured_mtl": mtl, "atlas_png": png}
            if self.cfg.texture.export_vertex_colors:
                p = out / "mesh_vertex_colors.ply"
                write_ply_mesh(p, mesh, vertex_colors(atlas, mesh))
                arts["vertex_colors"] = p
            else:
                (out / "mesh_vertex_colors.ply").unlink(missing_ok=True)
            return arts
        return {}

    # --- running -----------------------------------------------------------------------

    def _check_upstream(self, stage: str) -> None:
        for req in REQUIRES[stage]:
            if req not in self._memo and not self.has_cache(req):
                raise StageError(stage, f"{req} output missing")

    def evaluate(self, required: bool = True) -> ErrorReport | None:
        self._check_upstream("eval")
        ref = self.reference_path()
        if ref is None or not ref.exists():
            if required:
                raise StageError("eval", f"reference cloud not found: {ref or '<none configured>'}")
            log.warning("eval skipped: no reference cloud")
            return None
        mesh = _unpack_mesh(self.load("refine"))
        try:
            report = mesh_to_cloud_error(mesh, read_points(ref))
        except ValueError as exc:
            raise StageError("eval", str(exc)) from exc
        self.out.mkdir(parents=True, exist_ok=True)
        report.write_json(self.out / "report.json")
        log.info("eval: %s", report)
        return report

    def run_stage(self, stage: str, use_cache: bool = True, check_upstream: bool = True) -> StageRecord:
        """Run (or load) one stage from cached upstream outputs and export its artifacts."""
        stage = stage_name(stage)
        t0 = time.perf_counter()
        if stage == "ingest":
            ds = self.dataset
            log.info("ingest: %d scans, %d frames", len(ds.scans), len(ds.frames))
            return StageRecord(stage, False, time.perf_counter() - t0)
        if stage == "eval":
            self.evaluate(required=True)
            return StageRecord(stage, False, time.perf_counter() - t0)
        if check_upstream:
            self._check_upstream(stage)
        cached = use_cache and self.has_cache(stage)
        if cached:
            self.load(stage)
        else:
            data = getattr(self, f"_{stage}")()
            self._save(stage, data)
            self._memo.pop(stage, None)
            self.load(stage)  # downstream stages read exactly what was stored
        self._export(stage)
        dt = time.perf_counter() - t0
        log.info("stage %-12s %s in %.2f s", stage, "cache hit" if cached else "done", dt)
        return StageRecord(stage, cached, dt)

    def run(self) -> PipelineResult:
        result = PipelineResult()
        for stage in STAGES[:-1]:
            result.stages.append(self.run_stage(stage, check_upstream=False))
        t0 = time.perf_counter()
        result.report = self.evaluate(required=False)
        result.stages.append(StageRecord("eval", False, time.perf_counter() - t0))
        for stage in ("carve", "refine", "texture"):
            result.artifacts.update(self._export_paths(stage))
        if result.report is not None:
            result.artifacts["report"] = self.out / "report.json"
        return result

    def _export_paths(self, stage: str) -> dict[str, Path]:
        out = self.out
        paths = {"carve": {"carved_mesh": out / "carved.ply"},
                 "refine": {"mesh": out / "mesh.ply", "refine_trace": out / "refine_trace.csv"},
                 "texture": {"textured_obj": out / "textured.obj", "textured_mtl": out / "textured.mtl",
                             "atlas_png": out / "textured.png",
                             "vertex_colors": out / "mesh_vertex_colors.ply"}}[stage]
        return {k: p for k, p in paths.items() if p.exists()}


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    return Pipeline(config).run()


def run_stage(config: PipelineConfig, stage: str) -> StageRecord:
    return Pipeline(config).run_stage(stage)
