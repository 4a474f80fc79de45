import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cqe.synthetic import build_synthetic_dataset
from cqe.types import ImageTensor


def pytest_configure(config):
    torch.set_num_threads(min(4, torch.get_num_threads()))
    config.addinivalue_line("markers", "criterion(label): acceptance criterion label")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_image(rng):
    return ImageTensor(rng.random((24, 24, 3), dtype=np.float32))


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Shared synthetic dataset: 40 images at 64×64, JPEG QF=10 triplets."""
    root = tmp_path_factory.mktemp("corpus")
    train_m, val_m = build_synthetic_dataset(root, n=40, size=64, seed=0)
    return {"root": root, "train": train_m, "val": val_m}


_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(criterion: str, name: str):
    _ACCEPTANCE_RESULTS.setdefault(criterion, name)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in str(item.fspath):
        return
    marker = item.get_closest_marker("criterion")
    if marker:
        label = marker.args[0]
        _ACCEPTANCE_RESULTS[label] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE_RESULTS, key=lambda s: int(s.split(":")[0].lstrip("C"))):
        terminalreporter.write_line(f"ACCEPTANCE {label}: {_ACCEPTANCE_RESULTS[label]}")
