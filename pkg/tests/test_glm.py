import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovbshift.glm import (
    LossFamily,
    ShapeError,
    grad_nll_eta,
    log_partition,
    mean_param,
    nll,
    one_hot,
    validate_labels,
)

from conftest import FAMILIES, random_eta, random_labels


def test_trivial_values():
    reg, binf = LossFamily.regression(), LossFamily.binary()
    assert nll(reg, np.array([1.0]), np.array([1.0]))[0] == pytest.approx(-0.5)
    assert nll(binf, np.array([0.0]), np.array([1.0]))[0] == pytest.approx(np.log(2))
    mc = LossFamily.multiclass(3)
    assert nll(mc, np.zeros((1, 3)), one_hot([1], 3))[0] == pytest.approx(np.log(3))


def test_regression_matches_gaussian_nll_up_to_constant():
    rng = np.random.default_rng(0)
    eta, y = rng.normal(size=50), rng.normal(size=50)
    full = 0.5 * (y - eta) ** 2
    assert np.allclose(nll(LossFamily.regression(), eta, y), full - 0.5 * y**2)


def test_binary_is_stable_for_large_eta():
    fam = LossFamily.binary()
    out = nll(fam, np.array([800.0, -800.0]), np.array([0.0, 1.0]))
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [800.0, 800.0])


def test_gradient_matches_central_differences(family):
    rng = np.random.default_rng(7)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        eta = random_eta(family, rng, (3,))
        y = random_labels(family, rng, (3,))
        g = grad_nll_eta(family, eta, y)
        fd = np.zeros_like(eta)
        for idx in np.ndindex(eta.shape):
            e = np.zeros_like(eta)
            e[idx] = h
            fd[idx] = (nll(family, eta + e, y).sum() - nll(family, eta - e, y).sum()) / (2 * h)
        worst = max(worst, np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))))
    assert worst < 1e-5


def test_mean_param_is_gradient_of_log_partition(family):
    rng = np.random.default_rng(3)
    eta = random_eta(family, rng, (4,))
    h = 1e-6
    fd = np.zeros_like(eta)
    for idx in np.ndindex(eta.shape):
        e = np.zeros_like(eta)
        e[idx] = h
        fd[idx] = (log_partition(family, eta + e).sum() - log_partition(family, eta - e).sum()) / (2 * h)
    assert np.allclose(mean_param(family, eta), fd, atol=1e-7)


def test_convex_along_random_lines(family):
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b = random_eta(family, rng, (5,)), random_eta(family, rng, (5,))
        y = random_labels(family, rng, (5,))
        t = rng.uniform()
        mid = nll(family, t * a + (1 - t) * b, y)
        assert np.all(mid <= t * nll(family, a, y) + (1 - t) * nll(family, b, y) + 1e-12)


def test_seqgen_single_step_equals_multiclass():
    rng = np.random.default_rng(5)
    sg, mc = LossFamily.seqgen(5, 1), LossFamily.multiclass(5)
    eta = rng.normal(size=(6, 1, 5))
    y = one_hot(rng.integers(0, 5, size=(6, 1)), 5)
    assert np.allclose(nll(sg, eta, y), nll(mc, eta[:, 0], y[:, 0]))


def test_seqgen_masks_padded_steps():
    rng = np.random.default_rng(9)
    fam = LossFamily.seqgen(5, 3)
    eta = rng.normal(size=(4, 3, 5))
    y = one_hot(rng.integers(0, 5, size=(4, 3)), 5)
    lengths = np.array([3, 2, 1, 0])
    out = nll(fam, eta, y, lengths)
    assert out.shape == (4,)
    assert out[3] == 0.0
    per_step = LossFamily.multiclass(5)
    assert out[1] == pytest.approx(nll(per_step, eta[1, :2], y[1, :2]).sum())
    g = grad_nll_eta(fam, eta, y, lengths)
    assert g.shape == eta.shape
    assert np.all(g[2, 1:] == 0) and np.all(g[3] == 0)


def test_shape_errors():
    mc = LossFamily.multiclass(4)
    with pytest.raises(ShapeError):
        nll(mc, np.zeros((3, 5)), np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        nll(LossFamily.regression(), np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        nll(LossFamily.seqgen(5, 3), np.zeros((2, 3, 5)), np.zeros((2, 3, 5)), np.array([4, 1]))


def test_label_validation():
    with pytest.raises(ValueError):
        validate_labels(LossFamily.binary(), [0, 0.5])
    with pytest.raises(ValueError):
        one_hot([0, 4], 4)
    with pytest.raises(ValueError):
        validate_labels(LossFamily.multiclass(3), [[1, 1, 0]])


def test_family_roundtrip():
    for fam in FAMILIES.values():
        assert LossFamily.from_dict(fam.to_dict()) == fam


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.sampled_from([0.0, 1.0]))
def test_binary_nll_nonnegative_and_matches_bernoulli(eta, y):
    out = nll(LossFamily.binary(), np.array([eta]), np.array([y]))[0]
    p = 1 / (1 + np.exp(-eta))
    assert out >= 0
    if 1e-6 < p < 1 - 1e-6:  # reference formula loses digits near the edges
        assert out == pytest.approx(-(y * np.log(p) + (1 - y) * np.log1p(-p)), rel=1e-7, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.integers(0, 3))
def test_softmax_rows_sum_to_one_and_nll_positive(eta, k):
    fam = LossFamily.multiclass(4)
    e = np.array([eta])
    assert mean_param(fam, e).sum() == pytest.approx(1.0)
    assert nll(fam, e, one_hot([k], 4))[0] >= -1e-12
