import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from d3sr.diffusion import NoiseSchedule, build_schedule, forward_diffuse, predict_clean


def test_default_schedule():
    s = build_schedule()
    assert s.T == 1000 and s.beta.shape == (1000,)
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1


def test_hand_computed_alpha_bar():
    s = build_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024], rtol=0, atol=1e-15)


def test_cumulative_product_is_exact():
    s = build_schedule()
    assert s.alpha_bar[0] == s.alpha[0]
    for t in range(1, s.T):
        assert s.alpha_bar[t] == s.alpha_bar[t - 1] * s.alpha[t]
    np.testing.assert_array_equal(s.alpha, 1.0 - s.beta)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.0), (10, 0.1, 1.0), (10, 0.2, 0.1), (10, -0.1, 0.1)])
def test_schedule_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_schedule_is_immutable():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.beta[0] = 0.5


def test_forward_zero_noise_and_zero_signal():
    s = build_schedule()
    z = torch.randn(4, 8, 8, dtype=torch.float64)
    t = 321
    ab = s.alpha_bar[t]
    assert torch.equal(forward_diffuse(z, t, torch.zeros_like(z), s), math.sqrt(ab) * z)
    eps = torch.randn_like(z)
    assert torch.equal(forward_diffuse(torch.zeros_like(z), t, eps, s), math.sqrt(1 - ab) * eps)


def test_forward_monte_carlo_statistics():
    # t where alpha_bar is closest to 0.5; compare to the exact coefficients at that t
    s = build_schedule()
    t = int(np.argmin(np.abs(s.alpha_bar - 0.5)))
    ab = s.alpha_bar[t]
    z = torch.tensor([1.0, -0.5, 2.0], dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(100_000, 3, generator=gen, dtype=torch.float64)
    out = forward_diffuse(z.expand(100_000, 3), t, eps, s)
    assert torch.all((out.mean(0) - math.sqrt(ab) * z).abs() < 0.01)
    assert torch.all((out.var(0) - (1 - ab)).abs() < 0.02)
    # nominal values for alpha_bar = 0.5
    assert abs(ab - 0.5) < 2e-3
    assert torch.all((out.mean(0) - 0.70711 * z).abs() < 0.01)
    assert torch.all((out.var(0) - 0.5).abs() < 0.02)


def test_predict_clean_hand_value():
    # alpha_bar = 0.25 needs a custom schedule: one step with beta = 0.75
    s = NoiseSchedule(1, 0.75, 0.75)
    out = predict_clean(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64), 0, s)
    assert out.item() == pytest.approx((1 - math.sqrt(0.75) * 0.5) / 0.5, abs=1e-12)
    assert out.item() == pytest.approx(1.13397, abs=1e-5)


def test_predict_clean_zero_prediction():
    s = build_schedule()
    z_t = torch.randn(4, 8, 8, dtype=torch.float64)
    assert torch.allclose(predict_clean(z_t, torch.zeros_like(z_t), 500, s), z_t / math.sqrt(s.alpha_bar[500]),
                          atol=0, rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(t=st.integers(0, 999), seed=st.integers(0, 2**31 - 1))
def test_roundtrip_identity_double(t, seed):
    s = build_schedule()
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    back = predict_clean(forward_diffuse(z, t, eps, s), eps, t, s)
    assert (back - z).abs().max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(t=st.integers(0, 999), seed=st.integers(0, 2**31 - 1))
def test_roundtrip_identity_single(t, seed):
    s = build_schedule()
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 8, 8, generator=g)
    eps = torch.randn(4, 8, 8, generator=g)
    out = forward_diffuse(z, t, eps, s)
    assert out.shape == z.shape and torch.isfinite(out).all()
    back = predict_clean(out, eps, t, s)
    # single precision: 1/sqrt(alpha_bar) amplifies rounding (alpha_bar[999] ~ 4e-5)
    tol = 1e-5 if s.alpha_bar[t] > 0.05 else 1e-5 / math.sqrt(s.alpha_bar[t]) * 2
    assert (back - z).abs().max() < tol


def test_batched_timesteps():
    s = build_schedule()
    z = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    eps = torch.randn_like(z)
    t = torch.tensor([0, 10, 999])
    out = forward_diffuse(z, t, eps, s)
    for i in range(3):
        assert torch.equal(out[i], forward_diffuse(z[i], int(t[i]), eps[i], s))


@pytest.mark.parametrize("t", [-1, 1000, torch.tensor([0, 1000])])
def test_timestep_out_of_range(t):
    s = build_schedule()
    z = torch.zeros(2, 4, 2, 2)
    with pytest.raises(IndexError):
        forward_diffuse(z, t, z, s)
    with pytest.raises(IndexError):
        predict_clean(z, z, t, s)


def test_shape_mismatch_and_non_finite():
    s = build_schedule()
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(4, 2, 2), 0, torch.zeros(4, 2, 3), s)
    with pytest.raises(ValueError):
        predict_clean(torch.zeros(4, 2, 2), torch.zeros(4, 2, 3), 0, s)
    with pytest.raises(FloatingPointError):
        predict_clean(torch.tensor([float("nan")]), torch.zeros(1), 0, s)
