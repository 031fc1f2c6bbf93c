from contextlib import contextmanager

import numpy as np
import pytest

from demotune.data import ScenarioSpec, generate_demo
from demotune.planner import P0_DEFAULT, PlannerConfig, PlannerParams

PERTURBATION = np.array([3.0, 0.3, 2.0, 0.5, 3.0])


@pytest.fixture(scope="session")
def planner_cfg():
    return PlannerConfig()


@pytest.fixture(scope="session")
def clean_demo(planner_cfg):
    """Default scenario, no measurement noise, generated with the built-in p0."""
    return generate_demo(ScenarioSpec(noise_std=(0.0, 0.0, 0.0, 0.0)), P0_DEFAULT, planner_cfg)


@pytest.fixture(scope="session")
def noisy_demo(planner_cfg):
    return generate_demo(ScenarioSpec(seed=7), P0_DEFAULT, planner_cfg)


@pytest.fixture(scope="session")
def perturbed_p0():
    return PlannerParams.from_array(P0_DEFAULT.as_array() * PERTURBATION)


# -- acceptance result lines ---------------------------------------------------

_CRITERIA = {}


def _record(number, ok, title, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    _CRITERIA[number] = line
    print(line)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as info: ...`` records one PASS/FAIL line.

    Put a short summary in ``info["detail"]``; an exception marks the
    criterion failed and propagates.
    """

    @contextmanager
    def check(number, title):
        info = {}
        try:
            yield info
        except BaseException as exc:
            msg = info.get("detail") or f"{type(exc).__name__}: {exc}".splitlines()[0][:160]
            _record(number, False, title, msg)
            raise
        _record(number, True, title, info.get("detail", ""))

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
