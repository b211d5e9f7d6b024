import numpy as np
import pytest

from blockattn import tensor
from blockattn.model import ModelConfig, init_weights, profile

TINY = ModelConfig(n_layers=2, d_model=32, n_heads=4, n_kv_heads=2, head_dim=8, d_ffn=48,
                   vocab_size=260, max_positions=2048)


@pytest.fixture(scope="session")
def toy():
    return profile("toy")


@pytest.fixture(scope="session")
def toy_weights(toy):
    return init_weights(toy, 0)


@pytest.fixture(scope="session")
def tiny():
    return TINY


@pytest.fixture(scope="session")
def tiny_weights():
    return init_weights(TINY, 3)


@pytest.fixture(params=tensor.available_backends())
def backend(request):
    previous = tensor.set_backend(request.param)
    yield request.param
    tensor.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, name: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}"
        ACCEPTANCE_LINES[number] = line
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
