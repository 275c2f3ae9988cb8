import sys

import numpy as np
import pytest

from mpminv.mpm import rollout
from mpminv.render import render_scene
from mpminv.scene import generate_synthetic_scene


@pytest.fixture(scope="session")
def pendulum():
    return generate_synthetic_scene("two_part_pendulum", 0)


@pytest.fixture(scope="session")
def beam():
    return generate_synthetic_scene("beam", 0)


@pytest.fixture(scope="session")
def pendulum_ref(pendulum):
    traj = rollout(pendulum, pendulum.part_params())
    return traj, render_scene(traj, pendulum)


@pytest.fixture(scope="session")
def beam_ref(beam):
    traj = rollout(beam, beam.part_params())
    return traj, render_scene(traj, beam)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # repeat the per-criterion lines of the acceptance suite at the end of the run
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
