import sys

import numpy as np
import pytest

from grpolab import policy as pol
from grpolab.vocab import CANONICAL_NAMES, LabelSet


@pytest.fixture(params=[0, 1, 2])
def rng(request):
    return np.random.default_rng(request.param)


@pytest.fixture
def params(rng):
    """Random policy with logits of order one, so gradients are non-trivial."""
    p = pol.PolicyParams(d=16)
    p.theta[:] = rng.normal(0.0, 0.3, p.size)
    return p


@pytest.fixture
def random_labelset():
    def make(rng, max_size=None):
        k = int(rng.integers(1, (max_size or len(CANONICAL_NAMES)) + 1))
        return LabelSet.from_names(rng.choice(CANONICAL_NAMES, size=k, replace=False))

    return make


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
