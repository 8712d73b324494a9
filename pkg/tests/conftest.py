import numpy as np
import pytest
import torch

from radiomap.scenegen import SceneConfig, generate_scene, place_base_stations


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneConfig("crossroad", extent_m=200.0, grid_size=64, building_count=40, seed=11))


@pytest.fixture(scope="session")
def small_bs(small_scene):
    return place_base_stations(small_scene, 2, "mixed", seed=3)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated benchmark: one scene per category, 1 BS, 16 patches of 32x32."""
    from radiomap.benchmark import DatasetConfig, generate_dataset, load_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    cfg = DatasetConfig(grid_size=128, n_bs=1, patches_per_bs=8, patch_size=32, seed=5)
    manifest = generate_dataset(cfg, str(root))
    splits, stats = load_dataset(manifest)
    return manifest, splits, stats


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        if exc_type is not None and not self.detail:
            self.detail = f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"criterion {self.number} {status}: {self.title}; {self.detail}"
        ACCEPTANCE_RESULTS[self.number] = (status, line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """Context manager that records one acceptance criterion as PASS or FAIL."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[k][1])
