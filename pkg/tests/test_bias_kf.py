import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slamnc.bias_kf import KfConfig, kf_new, kf_update
from slamnc.errors import InvalidConfig, NonFiniteResidual

CFG = KfConfig()


def scalar_kf(b, p, y, q=4.0, r=40000.0):
    p_pred = p + q
    k = p_pred / (p_pred + r)
    return b + k * y, (1 - k) * p_pred


def test_defaults():
    np.testing.assert_array_equal(CFG.p0_diag, [1e6] * 3)
    np.testing.assert_array_equal(CFG.r_diag, [4e4] * 3)
    np.testing.assert_array_equal(CFG.q_diag, [4.0] * 3)


def test_fresh_filter():
    kf = kf_new()
    np.testing.assert_array_equal(kf.b, 0.0)
    np.testing.assert_array_equal(kf.p, 1e6)
    assert not kf.updated


def test_first_update_arithmetic():
    kf = kf_update(kf_new(), [100.0, 0.0, 0.0], CFG)
    k = 1000004.0 / 1040004.0
    assert k == pytest.approx(0.96154, abs=1e-5)
    np.testing.assert_allclose(kf.b, [100.0 * k, 0.0, 0.0], rtol=1e-12)
    assert kf.b[0] == pytest.approx(96.154, abs=1e-3)
    np.testing.assert_allclose(kf.p, (1 - k) * 1000004.0, rtol=1e-12)
    assert kf.updated


def test_zero_residual_only_shrinks_covariance():
    kf = kf_update(kf_new(), [0.0, 0.0, 0.0], CFG)
    np.testing.assert_array_equal(kf.b, 0.0)
    assert np.all(kf.p < 1e6)


def test_sequence_matches_scalar_oracle(rng):
    kf = kf_new()
    b, p = np.zeros(3), np.full(3, 1e6)
    for y in rng.normal(0, 50, (200, 3)):
        kf = kf_update(kf, y, CFG)
        for a in range(3):
            b[a], p[a] = scalar_kf(b[a], p[a], y[a])
    np.testing.assert_allclose(kf.b, b, rtol=1e-12)
    np.testing.assert_allclose(kf.p, p, rtol=1e-12)


@given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500), st.floats(-500, 500)), min_size=1,
                max_size=20), st.floats(-500, 500))
def test_channels_independent(ys, other):
    a = kf_new()
    b = kf_new()
    for y in ys:
        a = kf_update(a, y, CFG)
        b = kf_update(b, (y[0], other, y[2]), CFG)
    assert a.b[0] == b.b[0] and a.b[2] == b.b[2]


def test_converges_to_constant_offset(rng):
    truth = np.array([45.0, -52.0, 3.0])
    kf = kf_new()
    for _ in range(3000):
        # residual = truth - current estimate, plus measurement noise
        kf = kf_update(kf, truth - kf.b + rng.normal(0, 5, 3), CFG)
    np.testing.assert_allclose(kf.b, truth, atol=1.0)


def test_covariance_decreases_toward_steady_state():
    kf = kf_new()
    prev = kf.p.copy()
    for _ in range(50):
        kf = kf_update(kf, [0, 0, 0], CFG)
        assert np.all(kf.p < prev)
        prev = kf.p.copy()
    # steady state of p = (1-k)(p+q)
    q, r = 4.0, 4e4
    p_inf = (-q + np.sqrt(q * q + 4 * q * r)) / 2
    for _ in range(5000):
        kf = kf_update(kf, [0, 0, 0], CFG)
    np.testing.assert_allclose(kf.p, p_inf, rtol=1e-6)


def test_batch_mask():
    kf = kf_new(n=4)
    y = np.array([[10.0, 0, 0], [np.nan] * 3, [20.0, 0, 0], [np.nan] * 3])
    mask = np.array([True, False, True, False])
    out = kf_update(kf, y, CFG, mask=mask)
    np.testing.assert_array_equal(out.updated, mask)
    np.testing.assert_array_equal(out.b[1], 0.0)
    np.testing.assert_array_equal(out.p[3], 1e6)
    single = kf_update(kf_new(), [20.0, 0, 0], CFG)
    np.testing.assert_array_equal(out.b[2], single.b)


def test_batch_updated_flag_is_sticky():
    kf = kf_update(kf_new(n=2), np.zeros((2, 3)), CFG, mask=[True, False])
    kf = kf_update(kf, np.zeros((2, 3)), CFG, mask=[False, True])
    assert kf.updated.all()


@pytest.mark.parametrize("y", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_non_finite_residual(y):
    with pytest.raises(NonFiniteResidual):
        kf_update(kf_new(), y, CFG)


def test_nan_outside_mask_is_fine():
    kf_update(kf_new(n=2), np.array([[1.0, 2, 3], [np.nan] * 3]), CFG, mask=[True, False])
    with pytest.raises(NonFiniteResidual):
        kf_update(kf_new(n=2), np.array([[1.0, 2, 3], [np.nan] * 3]), CFG, mask=[True, True])


@pytest.mark.parametrize("kw", [{"p0_diag": 0.0}, {"r_diag": -1.0}, {"q_diag": [1, 1, 0]}, {"b0": [np.nan] * 3}])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        KfConfig(**kw)


def test_wrong_config_type():
    with pytest.raises(InvalidConfig):
        kf_new({"p0_diag": 1.0})
