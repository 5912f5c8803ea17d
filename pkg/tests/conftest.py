import sys
import math

import numpy as np
import pytest

from orbsync.pipeline import synthesize
from orbsync.plant import (Section, find_limit_cycle, rotor_plant, rotor_reference, vdp_plant)
from orbsync.transverse import TransverseChart, linearize_extended

OMEGA = math.pi


def rotor_config(**overrides):
    cfg = {
        "plant": {"id": "rotor", "params": {"omega": OMEGA, "gravity_coeff": 1.0}},
        "reference": {"kind": "analytic"},
        "chart": {"strategy": "monotone"},
        "grid_N": 2048,
        "lqr": {"Q": [[1.0]], "R": [[1.0]]},
        "augmented_lqr": {"Q": [1.0, 1.0], "R": [[1.0]]},
        "sliding": {"k": 0.05, "b_min_threshold": 1e-4},
    }
    cfg.update(overrides)
    return cfg


def vdp_config(**overrides):
    cfg = {
        "plant": {"id": "vdp", "params": {"mu": 1.0}},
        "reference": {"kind": "limit_cycle", "initial_guess": [2.0, 0.0],
                      "section": {"normal": [0.0, 1.0], "offset": 0.0, "direction": -1}},
        "chart": {"strategy": "orthogonal"},
        "grid_N": 2048,
        "lqr": {"Q": [1.0], "R": [[1.0]]},
        "sliding": {"k": 0.05, "b_min_threshold": 1e-4},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def rotor():
    plant = rotor_plant(OMEGA, 1.0)
    orbit = rotor_reference(plant)
    chart = TransverseChart(orbit, "monotone")
    return plant, orbit, chart


@pytest.fixture(scope="session")
def rotor_lin(rotor):
    return linearize_extended(*rotor)


@pytest.fixture(scope="session")
def vdp():
    plant = vdp_plant(1.0)
    orbit = find_limit_cycle(plant, [2.0, 0.0], Section((0.0, 1.0), 0.0, -1))
    chart = TransverseChart(orbit, "orthogonal")
    return plant, orbit, chart


@pytest.fixture(scope="session")
def vdp_lin(vdp):
    return linearize_extended(*vdp)


@pytest.fixture(scope="session")
def rotor_syn():
    return synthesize(rotor_config())


@pytest.fixture(scope="session")
def vdp_syn():
    return synthesize(vdp_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rotor_oscillator_lin():
    from orbsync.plant import rotor_oscillator_plant, rotor_oscillator_reference
    plant = rotor_oscillator_plant()
    orbit = rotor_oscillator_reference(plant, N=512)
    return linearize_extended(plant, orbit, TransverseChart(orbit, "monotone"), 512)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
