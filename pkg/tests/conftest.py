import pytest

from carvemap.config import PipelineConfig
from carvemap.ingest import LidarModel, synthesize_dataset
from carvemap.scenes import default_camera, room_scene


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 3-scan room with a coarse lidar fan and 160 x 120 images."""
    scene = room_scene(timesteps=3, lidar=LidarModel(n_azimuth=200, n_elevation=50))
    scene.camera = default_camera(160, 120, 125.0)
    return synthesize_dataset(scene, tmp_path_factory.mktemp("room-small"))


@pytest.fixture
def small_config(small_dataset, tmp_path):
    cfg = PipelineConfig(dataset=str(small_dataset), output=str(tmp_path / "out"))
    cfg.carve.downsample_fraction = 0.05
    cfg.refine.iterations = 2
    cfg.refine.patch = 2
    return cfg


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
