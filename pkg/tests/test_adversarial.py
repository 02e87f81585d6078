import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from d3sr.adversarial import (
    CLAMP_EPS, derive_seed, discriminator_loss, generator_adv_loss, generator_total_loss, numpy_rng,
    sample_timestep, torch_rng,
)


def test_uniform_half_scores():
    half = torch.full((4, 4, 4), 0.5, dtype=torch.float64)
    assert float(generator_adv_loss(half)) == pytest.approx(0.693147, abs=1e-6)
    assert float(discriminator_loss(half, half)) == pytest.approx(1.386294, abs=1e-6)


def test_hand_values():
    fake = torch.tensor([0.2, 0.8], dtype=torch.float64)
    real = torch.tensor([0.9, 0.6], dtype=torch.float64)
    g = -(math.log(0.2) + math.log(0.8)) / 2
    d = -(math.log(0.8) + math.log(0.2)) / 2 - (math.log(0.9) + math.log(0.6)) / 2
    assert float(generator_adv_loss(fake)) == pytest.approx(g, abs=1e-12)
    assert float(discriminator_loss(fake, real)) == pytest.approx(d, abs=1e-12)


def test_total_loss_arithmetic():
    # spatial 0.34, adversarial 0.6931, lambda1 0.1
    assert generator_total_loss(0.34, 0.6931, 0.1) == pytest.approx(0.40931, abs=1e-9)
    assert generator_total_loss(0.34, 5.0, 0.0) == 0.34
    with pytest.raises(ValueError):
        generator_total_loss(0.34, 0.1, -0.1)


def test_saturated_scores_stay_finite():
    zeros, ones = torch.zeros(8), torch.ones(8)
    assert math.isfinite(float(generator_adv_loss(zeros)))
    assert float(generator_adv_loss(zeros)) == pytest.approx(-math.log(CLAMP_EPS), rel=1e-3)
    assert math.isfinite(float(discriminator_loss(ones, zeros)))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-4, 1 - 1e-4), b=st.floats(1e-4, 1 - 1e-4))
def test_monotonicity(a, b):
    lo, hi = sorted((a, b))
    t = lambda v: torch.tensor([v], dtype=torch.float64)
    # generator loss falls as fake scores rise
    assert float(generator_adv_loss(t(hi))) <= float(generator_adv_loss(t(lo)))
    # discriminator loss rises with the fake score and falls with the real score
    r = t(0.5)
    assert float(discriminator_loss(t(hi), r)) >= float(discriminator_loss(t(lo), r))
    assert float(discriminator_loss(r, t(hi))) <= float(discriminator_loss(r, t(lo)))


def test_gradients_point_the_right_way():
    s = torch.tensor([0.3], dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(generator_adv_loss(s), s)
    assert g.item() == pytest.approx(-1 / 0.3, rel=1e-9)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        generator_adv_loss(torch.zeros(0))
    with pytest.raises(ValueError):
        discriminator_loss(torch.zeros(0), torch.ones(2))


# ----------------------------------------------------------------------------- timesteps


def test_timestep_uniformity_chi_square():
    draws = sample_timestep(numpy_rng(0, "chi"), 10, 100_000)
    counts = np.bincount(draws, minlength=10)
    assert draws.min() >= 0 and draws.max() <= 9
    assert stats.chisquare(counts).pvalue > 0.01


def test_torch_timestep_uniformity():
    draws = sample_timestep(torch_rng(0, "chi"), 10, 100_000)
    assert draws.dtype == torch.int64
    assert stats.chisquare(np.bincount(draws.numpy(), minlength=10)).pvalue > 0.01


def test_timestep_range_full_schedule():
    draws = sample_timestep(numpy_rng(1), 1000, 50_000)
    assert draws.min() == 0 and draws.max() == 999


def test_timestep_determinism():
    a = sample_timestep(numpy_rng(7, "x"), 1000, 32)
    b = sample_timestep(numpy_rng(7, "x"), 1000, 32)
    np.testing.assert_array_equal(a, b)
    assert torch.equal(sample_timestep(torch_rng(7, "x"), 1000, 32), sample_timestep(torch_rng(7, "x"), 1000, 32))
    with pytest.raises(ValueError):
        sample_timestep(numpy_rng(0), 0)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "d-step", 3) == derive_seed(0, "d-step", 3)
    seeds = {derive_seed(0, "d-step", i) for i in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(0, "d-step", 1) != derive_seed(0, "g-step", 1)
    assert 0 <= derive_seed(123, "x") < 2**63
