import time

import numpy as np
import pytest
import torch
from hypothesis import settings

from reba.backbone import OptimizerConfig
from reba.config import ExperimentConfig
from reba.datagen import DatasetConfig, DiseaseConfig, make_synthetic_atlas
from reba.pipeline import Pipeline

settings.register_profile("reba", max_examples=60, deadline=None)
settings.load_profile("reba")


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion(request):
    """Record ``CRITERION n: PASS|FAIL - detail`` for the end-of-run summary."""

    def _report(number: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        request.config._acceptance_lines.append(line)

    return _report


@pytest.fixture(autouse=True)
def _torch_threads():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


@pytest.fixture(scope="session")
def small_atlas():
    return make_synthetic_atlas((16, 16, 16), 4, 2, 7)


def tiny_config(root=None, epochs=3) -> ExperimentConfig:
    """A seconds-scale experiment for pipeline plumbing tests."""
    cfg = ExperimentConfig(
        dataset=DatasetConfig(
            shape=[16, 16, 16],
            n_regions=4,
            n_networks=2,
            n_hc_train=12,
            n_hc_test=8,
            diseases=[DiseaseConfig("PD", [1, 2], n=6), DiseaseConfig("AD", [4], n=6)],
        ),
        teacher_opt=OptimizerConfig(lr=1e-3, epochs=epochs),
        student_opt=OptimizerConfig(lr=1e-3, epochs=epochs),
    )
    if root is not None:
        cfg.root = str(root)
    return cfg


@pytest.fixture
def tiny_pipeline(tmp_path):
    pipe = Pipeline(tiny_config(tmp_path / "run"))
    pipe.run_all()
    return pipe


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The shipped default experiment, run once per session."""
    root = tmp_path_factory.mktemp("default")
    cfg = ExperimentConfig(root=str(root))
    pipe = Pipeline(cfg)
    t0 = time.perf_counter()
    pipe.run_all()
    return pipe, time.perf_counter() - t0


def rng(seed=0):
    return np.random.default_rng(seed)
