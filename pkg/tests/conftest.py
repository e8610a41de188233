import numpy as np
import pytest

from urbanicl.model import ModelConfig, init_parameters


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return ModelConfig(n_regions=8, hidden_dim=16, n_layers=2, n_heads=2, ref_dim=4, T=10)


@pytest.fixture
def small_params(small_config):
    return init_parameters(small_config, seed=0, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
