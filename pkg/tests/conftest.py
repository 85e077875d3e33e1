import numpy as np
import pytest

from mffunet.params import ParamBuilder
from mffunet.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_block(init, *args, seed=0, perturb=0.3, dtype=np.float64, zero=False):
    """Initialize one block's parameters; returns (scope, {local name: array copy})."""
    r = np.random.default_rng(seed)
    b = ParamBuilder(r, dtype)
    init(b, *args)
    for t in b.params.values():
        if zero:
            t.data[...] = 0.0
        else:
            t.data += perturb * r.standard_normal(t.shape)
    return b.scope(), {k: t.data.copy() for k, t in b.params.items()}


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
