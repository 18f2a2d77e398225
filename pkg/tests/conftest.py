import re
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from featalign.dataset import ShapesDatasetSpec, batch_iterator, generate_shapes  # noqa: E402
from featalign.detector import DetectorConfig, ToyDetector  # noqa: E402

torch.set_num_threads(1)

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")


SMALL_CONFIG = DetectorConfig(stride=16, backbone_channels=(8, 8, 16, 16, 16), norm_groups=4)


@pytest.fixture
def small_spec():
    return ShapesDatasetSpec(num_images=24, image_size=32, min_size=8, max_size=14, seed=3)


@pytest.fixture
def small_data(small_spec):
    return generate_shapes(small_spec)


@pytest.fixture
def small_detector():
    return ToyDetector(SMALL_CONFIG, seed=0)


@pytest.fixture
def small_batch(small_data):
    return next(batch_iterator(small_data, 4))


@pytest.fixture(scope="session")
def reference_runs():
    """Paired standard / AT / FA runs for every reference seed (slow, computed once)."""
    from reference import SEEDS, run_seed

    return {seed: run_seed(seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def reference(reference_runs):
    return reference_runs[0]
