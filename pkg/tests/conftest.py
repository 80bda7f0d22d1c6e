import time

import numpy as np
import pytest

from meterguard.data import DEFAULT_APPLIANCES, House, SynthConfig, synth_scene
from meterguard.experiment import fit_appliance_model
from meterguard.model import TrainConfig

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SCENE_CFG = SynthConfig(DEFAULT_APPLIANCES, baseline_power=60.0, noise_std=5.0, length=100_000, seed=0)
WINDOW = 64
SOURCE_TRAIN = TrainConfig(batch_size=32, epochs=8, learning_rate=1e-3, optimizer="adam", seed=0)
TARGET_TRAIN = TrainConfig(batch_size=32, epochs=8, learning_rate=1e-3, optimizer="adam", seed=1)
TARGET_CONV = ((7, 6), (3, 6))


@pytest.fixture(scope="session")
def house():
    scene = synth_scene(SCENE_CFG)
    return House(scene, [(0, len(scene))], 0.8)


# wall time spent building the shared source models, for runtime criteria
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def source_models(house):
    t0 = time.perf_counter()
    models = {a: fit_appliance_model(house, a, WINDOW, 2, SOURCE_TRAIN) for a in house.scene.appliances}
    TIMINGS["source_training"] = time.perf_counter() - t0
    return models
