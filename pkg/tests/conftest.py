import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tdlcal.model import ModelConfig, build_model
from tdlcal.pipeline import Pipeline, load_config

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []

NOMINAL = 3.2
PROFILE = tuple(x * NOMINAL for x in (1.2, -1.2, 1.0, -1.0, 1.4, -1.4, 0.9, -0.9))


def reference_like_config(num_carry_cells=147, seed=100, **kw) -> ModelConfig:
    """Same perturbation as the bundled reference config, any chain length."""
    n = num_carry_cells * 8
    third = n // 3
    base = dict(
        num_carry_cells=num_carry_cells, nominal_tap_ps=NOMINAL, sigma_ps=0.3 * NOMINAL,
        clock_period_ps=4000.0, start_offset_ps=20.0,
        clock_regions=((0, 0.0), (third, 40.0), (2 * third, 80.0)), tap_profile_ps=PROFILE, seed=seed,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Full pipeline at full scale, run once per session."""
    pipe = Pipeline(load_config("reference"), tmp_path_factory.mktemp("reference") / "run")
    t0 = time.perf_counter()
    pipe.run(until="por")
    pipe.por_seconds = time.perf_counter() - t0
    pipe.run()
    return pipe


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    pipe = Pipeline(load_config("demo"), tmp_path_factory.mktemp("demo") / "run")
    pipe.run()
    return pipe


@pytest.fixture
def small_model():
    return build_model(reference_like_config(num_carry_cells=12, clock_period_ps=400.0,
                                         clock_regions=((0, 0.0), (32, 10.0), (64, 20.0))))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
