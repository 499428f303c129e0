import numpy as np
import pytest

from ovbshift.glm import LossFamily, one_hot

FAMILIES = {
    "regression": LossFamily.regression(),
    "binary": LossFamily.binary(),
    "multiclass": LossFamily.multiclass(4),
    "seqgen": LossFamily.seqgen(5, 3),
}


def random_labels(family, rng, batch):
    if family.kind == "regression":
        return rng.normal(size=batch)
    if family.kind == "binary":
        return rng.integers(0, 2, size=batch).astype(float)
    return one_hot(rng.integers(0, family.K, size=batch + family.event_shape[:-1]), family.K)


def random_eta(family, rng, batch, scale=2.0):
    return scale * rng.normal(size=batch + family.event_shape)


@pytest.fixture(params=list(FAMILIES))
def family(request):
    return FAMILIES[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
