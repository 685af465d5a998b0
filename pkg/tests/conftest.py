import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tdnnq import cli, model_io
from tdnnq.qat import ToyConfig, train_toy
from tdnnq.tdnn import random_model

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
REFERENCE_INI = REPO / "configs" / "reference.ini"
SMOKE_INI = REPO / "configs" / "smoke.ini"


@dataclass
class Run:
    dir: Path
    model: object
    eval_x: np.ndarray
    eval_y: np.ndarray
    calib_x: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    seconds: float


def _cli_run(config, out: Path) -> Run:
    t0 = time.perf_counter()
    assert cli.main(["train-toy", str(config), "--out", str(out)]) == 0
    seconds = time.perf_counter() - t0
    with np.load(out / "eval.npz") as z:
        ex, ey = z["features"], z["labels"]
    with np.load(out / "train.npz") as z:
        tx, ty = z["features"], z["labels"]
    with np.load(out / "calib.npz") as z:
        cx = z["features"]
    return Run(out, model_io.load_model(out / "float.tdnq"), ex, ey, cx, tx, ty, seconds)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """The reference config trained once through the CLI; shared by acceptance and CLI tests."""
    return _cli_run(REFERENCE_INI, tmp_path_factory.mktemp("reference"))


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    return _cli_run(SMOKE_INI, tmp_path_factory.mktemp("smoke"))


SMALL = ToyConfig(seed=5, hidden_dim=16, num_layers=2, num_classes=7, frames=12, train_utts=60, eval_utts=30,
                  calib_utts=10, epochs=2, batch_size=6)


@pytest.fixture(scope="session")
def small_trained():
    """A tiny trained model with its data, for tests that need non-random weights quickly."""
    model, metrics, data = train_toy(SMALL)
    return model, metrics, data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model(rng):
    return random_model(rng, feat_dim=6, hidden_dim=10, num_layers=3, num_classes=5, context=(-1, 0, 1))


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
