"""Pipeline configuration: one TOML file with a table per stage."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class RegistrationSection:
    max_range: float = 30.0          # range filter threshold tau (m)
    use_gt_poses: bool = False
    map_voxel: float = 0.1           # ICP target subsampling (m)
    scan_voxel: float = 0.15         # ICP source subsampling (m)
    max_iterations: int = 50

    def validate(self):
        _positive(self, "max_range", "map_voxel", "scan_voxel", "max_iterations")


@dataclass
class GroundSection:
    cell: float = 0.5
    dh: float = 0.15                 # max height step between linked cells (m)
    delta: float = 0.20              # ground band above the cell height (m)
    gap: int = 1                     # empty cells bridged while growing
    seed_radius: float = 5.0         # fallback search radius for the seed cell (m)

    def validate(self):
        _positive(self, "cell", "dh", "delta")
        _nonneg(self, "gap", "seed_radius")


@dataclass
class MotionSection:
    theta_b: float = 0.0             # angular gate (rad); 0 = half the estimated beam spacing
    eps: float = 0.1                 # range tolerance (m)
    lam: float = 0.9                 # evidence mass
    threshold: float = 0.5           # conflict threshold
    window: int = 5                  # scans compared on each side
    surface_aware: bool = True

    def validate(self):
        _nonneg(self, "theta_b", "window")
        _positive(self, "eps")
        _unit(self, "lam", "threshold")


@dataclass
class CarsSection:
    enabled: bool = True
    cell: float = 0.1                # candidate grid cell (m)
    tau: float = 2.2                 # height above which a cell is emptied (m)
    rho_min: float = 1.5             # box half-diagonal bounds (m)
    rho_max: float = 5.5
    ratio_min: float = 0.24          # box width / length bounds
    ratio_max: float = 0.7
    ramp_deg: float = 30.0           # least slope of the front and rear silhouette bins
    flat_deg: float = 60.0           # greatest slope of the middle bin

    def validate(self):
        _positive(self, "cell", "tau", "rho_min", "ratio_min", "ramp_deg", "flat_deg")
        if self.rho_max <= self.rho_min:
            raise ConfigError("cars.rho_max must exceed cars.rho_min")
        if not self.ratio_min < self.ratio_max <= 1:
            raise ConfigError("cars.ratio_max must lie in (ratio_min, 1]")
        if self.ramp_deg >= 90 or self.flat_deg >= 90:
            raise ConfigError("silhouette angles must be below 90 degrees")


@dataclass
class CarveSection:
    downsample_fraction: float = 0.01
    k: int = 1                       # votes needed for a free tetrahedron
    seed: int = 0                    # jitter seed

    def validate(self):
        if not 0 < self.downsample_fraction <= 1:
            raise ConfigError("carve.downsample_fraction must be in (0, 1]")
        _positive(self, "k")
        _nonneg(self, "seed")


@dataclass
class RefineSection:
    enabled: bool = True
    iterations: int = 30
    patch: int = 5                   # ZNCC patch half-width (px)
    step: float = 0.02               # largest vertex move per iteration (m)
    smooth: float = 0.3              # umbrella weight
    pairs: int = 2                   # neighbouring views per view
    mask_box: int = 11               # moving-mask box filter (px)
    mask_dilate: int = 10            # disk dilation radius (px)
    mask_erode: int = 7              # disk erosion radius (px)

    def validate(self):
        _nonneg(self, "iterations", "smooth", "mask_dilate", "mask_erode")
        _positive(self, "patch", "step", "pairs", "mask_box")


@dataclass
class TextureSection:
    texels: int = 8                  # r x r texels per face
    alpha: float = 8.0               # view-weight exponent
    export_vertex_colors: bool = False

    def validate(self):
        if self.texels < 2:
            raise ConfigError("texture.texels must be at least 2")
        _positive(self, "alpha")


@dataclass
class EvalSection:
    reference: str = ""              # cloud (.ply/.npy/.bin/.txt); empty = <dataset>/gt/reference.ply

    def validate(self):
        pass


SECTIONS = {
    "registration": RegistrationSection,
    "ground": GroundSection,
    "motion": MotionSection,
    "cars": CarsSection,
    "carve": CarveSection,
    "refine": RefineSection,
    "texture": TextureSection,
    "eval": EvalSection,
}


@dataclass
class PipelineConfig:
    dataset: str = ""
    output: str = "out"
    threads: int = 0                 # 0 = library default
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    ground: GroundSection = field(default_factory=GroundSection)
    motion: MotionSection = field(default_factory=MotionSection)
    cars: CarsSection = field(default_factory=CarsSection)
    carve: CarveSection = field(default_factory=CarveSection)
    refine: RefineSection = field(default_factory=RefineSection)
    texture: TextureSection = field(default_factory=TextureSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "PipelineConfig":
        if not self.dataset:
            raise ConfigError("dataset path is required")
        if not self.output:
            raise ConfigError("output directory is required")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "PipelineConfig":
        data = dict(data)
        kwargs = {}
        for key in ("dataset", "output", "threads"):
            if key in data:
                kwargs[key] = _typed(cls, key, data.pop(key), key)
        for name, section_cls in SECTIONS.items():
            values = data.pop(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            unknown = set(values) - {f.name for f in dataclasses.fields(section_cls)}
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
            kwargs[name] = section_cls(**{k: _typed(section_cls, k, v, f"{name}.{k}") for k, v in values.items()})
        if data:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(data))}")
        cfg = cls(**kwargs)
        if base is not None:
            # relative paths are taken relative to the config file
            if cfg.dataset and not Path(cfg.dataset).is_absolute():
                cfg.dataset = str(base / cfg.dataset)
            if cfg.output and not Path(cfg.output).is_absolute():
                cfg.output = str(base / cfg.output)
            ref = cfg.eval.reference
            if ref and not Path(ref).is_absolute():
                cfg.eval.reference = str(base / ref)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, path.resolve().parent)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def section_hash(self, name: str, previous: str) -> str:
        """Cache key of a stage: hash of the upstream key and this stage's parameters."""
        params = dataclasses.asdict(getattr(self, name)) if name in SECTIONS else {}
        blob = json.dumps({"previous": previous, "stage": name, "params": params}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _typed(cls, key, value, label):
    kind = {f.name: f.type for f in dataclasses.fields(cls)}[key]
    if kind in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{label} must be a number")
        return float(value)
    if kind in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{label} must be an integer")
        return value
    if kind in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{label} must be true or false")
        return value
    if kind in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"{label} must be a string")
        return value
    return value


def _positive(obj, *names):
    for n in names:
        if getattr(obj, n) <= 0:
            raise ConfigError(f"{n} must be positive")


def _nonneg(obj, *names):
    for n in names:
        if getattr(obj, n) < 0:
            raise ConfigError(f"{n} must be non-negative")


def _unit(obj, *names):
    for n in names:
        if not 0 <= getattr(obj, n) <= 1:
            raise ConfigError(f"{n} must lie in [0, 1]")


TEMPLATE = """\
# carvemap pipeline configuration.  Relative paths are resolved against this file.
dataset = "{dataset}"
output = "{output}"
threads = 0                   # worker cap for compiled kernels, 0 = all cores

[registration]
max_range = 30.0              # points farther than this from the sensor are dropped (m)
use_gt_poses = false          # take poses.txt as is instead of running ICP
map_voxel = 0.1
scan_voxel = 0.15
max_iterations = 50

[ground]
cell = 0.5
dh = 0.15
delta = 0.20
gap = 1
seed_radius = 5.0

[motion]
theta_b = 0.0                 # 0 = half the beam spacing estimated from the first scan
eps = 0.1
lam = 0.9
threshold = 0.5
window = 5
surface_aware = true

[cars]
enabled = true
cell = 0.1                    # candidate grid (m)
tau = 2.2                     # cells with points above this height are not cars (m)
rho_min = 1.5                 # half-diagonal of the footprint box (m)
rho_max = 5.5
ratio_min = 0.24              # footprint width / length
ratio_max = 0.7
ramp_deg = 30.0               # front and rear silhouette slopes must reach this
flat_deg = 60.0               # middle silhouette slope must stay below this

[carve]
downsample_fraction = 0.01    # keep about 1% of the points
k = 1
seed = 0

[refine]
enabled = true
iterations = 30
patch = 5                     # 11 x 11 ZNCC windows
step = 0.02
smooth = 0.3
pairs = 2
mask_box = 11                 # moving mask: 11 x 11 box, then disk dilation / erosion
mask_dilate = 10
mask_erode = 7

[texture]
texels = 8
alpha = 8.0                   # view weights are raised to this power
export_vertex_colors = false

[eval]
reference = ""                # empty = <dataset>/gt/reference.ply when present
"""


def template(dataset: str = "data", output: str = "out") -> str:
    return TEMPLATE.format(dataset=dataset, output=output)
