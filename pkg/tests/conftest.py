import numpy as np
import pytest

from dbse.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(T=4, d=3, g_dim=5, mlp_width=6, s_dim=3, d_dim=2, lstm_hidden=4, dec_hidden=4)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
