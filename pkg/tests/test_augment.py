import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csifall.augment import (
    AugmentPolicy, augment_sample, inject_noise, scale_amplitude, simulate_nlos, spectral_smooth, time_shift,
)
from csifall.preprocess import CsiTensor, Stage, StageError

N = 3 * 625 * 30


def _tensor(seed=0):
    return CsiTensor(np.random.default_rng(seed).uniform(0, 1, (3, 625, 30)).astype(np.float32),
                     Stage.instance_normalized)


def _top_half_power(x, axis=1):
    spec = np.abs(np.fft.rfft(x, axis=axis)) ** 2
    n = spec.shape[axis]
    return np.take(spec, np.arange(n // 2, n), axis=axis).sum()


def test_noise_zero_sigma_is_identity():
    t = _tensor()
    np.testing.assert_array_equal(inject_noise(t, 0.0, np.random.default_rng(1)).data, t.data)
    with pytest.raises(ValueError):
        inject_noise(t, -0.1, np.random.default_rng(1))


def test_noise_statistics():
    t = _tensor()
    diff = inject_noise(t, 0.02, np.random.default_rng(7)).data.astype(np.float64) - t.data
    assert diff.std() == pytest.approx(0.02, rel=0.05)
    assert abs(diff.mean()) <= 3 * 0.02 / np.sqrt(N)


def test_scale_forced_lambdas():
    t = _tensor()
    same, lam = scale_amplitude(t, lambdas=[1, 1, 1])
    np.testing.assert_array_equal(same.data, t.data)
    x = np.full((3, 625, 30), 0.4, dtype=np.float32)
    out, _ = scale_amplitude(CsiTensor(x, Stage.instance_normalized), lambdas=[1.5, 1.0, 1.0])
    assert out.data[0, 10, 10] == pytest.approx(0.6, abs=1e-6)


def test_scale_ratio_constant_per_channel():
    t = _tensor(2)
    out, lam = scale_amplitude(t, np.random.default_rng(5))
    assert np.all((lam >= 0.5) & (lam <= 1.5))
    for c in range(3):
        ratio = out.data[c].astype(np.float64) / t.data[c]
        np.testing.assert_allclose(ratio, lam[c], rtol=1e-6)


def test_time_shift_examples():
    x = np.zeros((3, 3, 30), dtype=np.float32)
    x[:, :, 0] = [1.0, 2.0, 3.0]
    out = time_shift(CsiTensor(x, Stage.instance_normalized), 1).data
    np.testing.assert_array_equal(out[0, :, 0], [3.0, 1.0, 2.0])
    t = _tensor()
    np.testing.assert_array_equal(time_shift(t, 0).data, t.data)


@given(st.integers(-50, 50))
def test_time_shift_round_trip_and_column_multiset(delta):
    t = _tensor(4)
    shifted = time_shift(t, delta)
    np.testing.assert_array_equal(time_shift(shifted, -delta).data, t.data)
    np.testing.assert_array_equal(np.sort(shifted.data[1, :, 7]), np.sort(t.data[1, :, 7]))


def test_nlos_constant_and_impulse():
    c = CsiTensor(np.full((3, 625, 30), 0.3, dtype=np.float32), Stage.instance_normalized)
    np.testing.assert_allclose(simulate_nlos(c).data, 0.3, atol=1e-7)
    x = np.zeros((3, 625, 30), dtype=np.float32)
    x[0, 300, 4] = 1.0
    out = simulate_nlos(CsiTensor(x, Stage.instance_normalized)).data
    assert out[0, :, 4].max() < 1.0
    assert np.count_nonzero(out[0, :, 4]) > 1
    assert out.shape == x.shape


def test_nlos_preserves_column_means():
    t = _tensor(9)
    out = simulate_nlos(t).data.astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=1), t.data.astype(np.float64).mean(axis=1), atol=1e-5)
    even = np.random.default_rng(1).normal(size=(3, 64, 30))
    np.testing.assert_allclose(spectral_smooth(even, 2).mean(axis=1), even.mean(axis=1), atol=1e-12)


def test_nlos_suppresses_upper_band_on_white_noise():
    rng = np.random.default_rng(11)
    before = after = 0.0
    for _ in range(100):
        x = rng.normal(size=(3, 625, 30)).astype(np.float32)
        before += _top_half_power(x)
        after += _top_half_power(simulate_nlos(CsiTensor(x, Stage.instance_normalized)).data)
    assert after <= 0.5 * before


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(p_noise=1.5)
    with pytest.raises(ValueError):
        AugmentPolicy(scale_lo=2.0, scale_hi=1.0)
    with pytest.raises(ValueError):
        AugmentPolicy(bogus=1)


def test_augment_sample_disabled_is_identity():
    t = _tensor()
    out = augment_sample(t, AugmentPolicy.disabled(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, t.data)


def test_augment_sample_matches_manual_composition():
    t = _tensor(3)
    policy = AugmentPolicy(p_noise=1, p_scale=1, p_shift=1, p_nlos=1)
    out = augment_sample(t, policy, np.random.default_rng(42))
    rng = np.random.default_rng(42)
    rng.random()
    m = inject_noise(t, policy.sigma, rng)
    rng.random()
    m, _ = scale_amplitude(m, rng)
    rng.random()
    m = time_shift(m, int(rng.integers(-50, 51)))
    rng.random()
    m = simulate_nlos(m)
    np.testing.assert_array_equal(out.data, m.data)


def test_augment_sample_deterministic_and_safe():
    t = _tensor(5)
    policy = AugmentPolicy()
    for seed in range(5):
        a = augment_sample(t, policy, np.random.default_rng(seed))
        b = augment_sample(t, policy, np.random.default_rng(seed))
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data.shape == t.data.shape and np.all(np.isfinite(a.data))
    with pytest.raises(StageError):
        augment_sample(CsiTensor(t.data, Stage.standardized), policy, np.random.default_rng(0))
