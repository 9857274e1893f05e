import sys
from pathlib import Path

import numpy as np
import pytest

from tissueflow import kernels
from tissueflow.memory import open_store

FIXTURES = Path(__file__).parent / "fixtures"
DATA = Path(__file__).resolve().parents[1] / "src" / "tissueflow" / "data"


@pytest.fixture
def store(tmp_path):
    s = open_store(tmp_path / "store")
    yield s
    s.close()


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    return kernels.backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def echo_plugin_command(mode: str = "ok") -> str:
    return f"{sys.executable} {FIXTURES / 'echo_plugin.py'} {mode}"
