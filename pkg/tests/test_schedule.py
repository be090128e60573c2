import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddad.schedule import (
    VarianceSchedule,
    build_schedule,
    perturb,
    perturb_batch,
    schedule_from_config,
)


def sequential_noising_oracle(x, t, betas, step_noises):
    """Apply t single-step noising transitions explicitly.

    x_k = sqrt(1 - beta_k) * x_{k-1} + sqrt(beta_k) * eps_k, together with the
    algebraic reduction of the accumulated noise to a single equivalent draw.
    Returns (x_t, eps_combined).
    """
    x_k = x.double()
    for k in range(t):
        x_k = math.sqrt(1.0 - betas[k]) * x_k + math.sqrt(betas[k]) * step_noises[k].double()
    abar = 1.0
    for k in range(t):
        abar *= 1.0 - betas[k]
    combined = torch.zeros_like(x, dtype=torch.float64)
    for k in range(t):
        coef = math.sqrt(betas[k])
        for j in range(k + 1, t):
            coef *= math.sqrt(1.0 - betas[j])
        combined = combined + coef * step_noises[k].double()
    eps_combined = combined / math.sqrt(1.0 - abar)
    return x_k, eps_combined


class TestBuildSchedule:
    def test_two_step_cumulative_products(self):
        s = build_schedule("linear", num_steps=2, beta_start=0.1, beta_end=0.2)
        assert s.betas.tolist() == pytest.approx([0.1, 0.2])
        assert s.alpha_bars.tolist() == pytest.approx([0.9, 0.72])

    def test_default_endpoints(self):
        s = build_schedule()
        assert s.num_steps == 1000
        assert float(s.betas[0]) == pytest.approx(1e-4)
        assert float(s.betas[-1]) == pytest.approx(0.02)

    def test_alpha_bar_of_zero_is_one(self):
        s = build_schedule(num_steps=10)
        assert s.alpha_bar(0) == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(num_steps=0),
            dict(beta_start=0.2, beta_end=0.1),
            dict(beta_start=0.1, beta_end=0.1),
            dict(beta_start=0.0),
            dict(beta_end=1.0),
            dict(kind="cosine"),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            build_schedule(**{"kind": "linear", "num_steps": 10, **kwargs})

    def test_config_roundtrip(self):
        s = build_schedule("linear", 50, 1e-3, 0.05)
        s2 = schedule_from_config(s.config())
        assert torch.equal(s.betas, s2.betas)

    @given(
        num_steps=st.integers(min_value=2, max_value=400),
        beta_start=st.floats(min_value=1e-5, max_value=0.01),
        gap=st.floats(min_value=1e-4, max_value=0.4),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotonic_invariants(self, num_steps, beta_start, gap):
        s = build_schedule("linear", num_steps, beta_start, min(beta_start + gap, 0.999))
        betas = s.betas
        abars = s.alpha_bars
        assert bool((betas[1:] > betas[:-1]).all())
        assert bool((abars[1:] < abars[:-1]).all())
        assert 0.0 < float(abars[-1]) and float(abars[0]) < 1.0

    @given(
        num_steps=st.integers(min_value=1, max_value=200),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    @settings(max_examples=30, deadline=None)
    def test_cumulative_product_matches_running_product(self, num_steps, seed):
        s = build_schedule("linear", num_steps, 1e-4, 0.02)
        running = 1.0
        for i in range(num_steps):
            running *= 1.0 - float(s.betas[i])
            assert float(s.alpha_bars[i]) == pytest.approx(running, rel=1e-12)


@pytest.fixture(scope="module")
def two_step():
    return build_schedule("linear", num_steps=2, beta_start=0.1, beta_end=0.2)


class TestPerturb:

    def test_zero_noise_scales_signal(self, two_step):
        x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
        out = perturb(x, 2, torch.zeros_like(x), two_step)
        assert torch.allclose(out, math.sqrt(0.72) * x)

    def test_zero_signal_scales_noise(self, two_step):
        eps = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(1))
        out = perturb(torch.zeros_like(eps), 2, eps, two_step)
        assert torch.allclose(out, math.sqrt(0.28) * eps)

    def test_shape_mismatch_rejected(self, two_step):
        with pytest.raises(ValueError):
            perturb(torch.zeros(3, 8, 8), 1, torch.zeros(3, 4, 4), two_step)

    @pytest.mark.parametrize("t", [0, 3, -1])
    def test_timestep_out_of_range_rejected(self, two_step, t):
        x = torch.zeros(3, 4, 4)
        with pytest.raises(ValueError):
            perturb(x, t, x, two_step)

    def test_deterministic_bitwise(self, two_step):
        g = torch.Generator().manual_seed(7)
        x = torch.randn(3, 8, 8, generator=g)
        eps = torch.randn(3, 8, 8, generator=g)
        assert torch.equal(perturb(x, 2, eps, two_step), perturb(x, 2, eps, two_step))

    @pytest.mark.parametrize("t", [1, 5, 17, 40])
    def test_matches_sequential_composition_oracle(self, t):
        # closed-form jump == t explicit single-step transitions with the
        # accumulated noise reduced to one equivalent draw
        s = build_schedule("linear", num_steps=40, beta_start=1e-3, beta_end=0.05)
        g = torch.Generator().manual_seed(t)
        x = torch.randn(3, 6, 6, generator=g, dtype=torch.float64)
        noises = [torch.randn(3, 6, 6, generator=g, dtype=torch.float64) for _ in range(t)]
        expected, eps_combined = sequential_noising_oracle(x, t, s.betas.tolist(), noises)
        got = perturb(x, t, eps_combined, s)
        assert torch.allclose(got, expected, atol=1e-6)

    def test_coefficients_recovered_by_regression(self):
        # fit x_t ~ a*x + b*eps and recover the schedule coefficients
        s = build_schedule("linear", num_steps=100, beta_start=1e-4, beta_end=0.02)
        g = torch.Generator().manual_seed(3)
        x = torch.randn(500, generator=g, dtype=torch.float64)
        eps = torch.randn(500, generator=g, dtype=torch.float64)
        t = 60
        out = perturb(x, t, eps, s)
        design = torch.stack([x, eps], dim=1)
        coefs = torch.linalg.lstsq(design, out.unsqueeze(1)).solution.squeeze()
        abar = s.alpha_bar(t)
        assert float(coefs[0]) == pytest.approx(math.sqrt(abar), abs=1e-9)
        assert float(coefs[1]) == pytest.approx(math.sqrt(1 - abar), abs=1e-9)

    def test_batch_variant_matches_scalar(self):
        s = build_schedule("linear", num_steps=30, beta_start=1e-3, beta_end=0.04)
        g = torch.Generator().manual_seed(11)
        x = torch.randn(4, 3, 8, 8, generator=g)
        eps = torch.randn(4, 3, 8, 8, generator=g)
        ts = torch.tensor([1, 7, 15, 30])
        batched = perturb_batch(x, ts, eps, s)
        for i, t in enumerate(ts.tolist()):
            single = perturb(x[i], t, eps[i], s)
            assert torch.allclose(batched[i], single, atol=1e-6)

    def test_batch_variant_validates(self):
        s = build_schedule("linear", num_steps=10, beta_start=1e-3, beta_end=0.04)
        x = torch.zeros(2, 3, 4, 4)
        with pytest.raises(ValueError):
            perturb_batch(x, torch.tensor([1, 11]), torch.zeros_like(x), s)
        with pytest.raises(ValueError):
            perturb_batch(x, torch.tensor([1]), torch.zeros_like(x), s)


@given(
    t_frac=st.floats(min_value=0.01, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=40, deadline=None)
def test_perturb_interpolates_between_signal_and_noise(t_frac, seed):
    # the mixture weights trade off monotonically: more steps, less signal
    s = build_schedule("linear", num_steps=100, beta_start=1e-3, beta_end=0.02)
    t = max(1, int(round(t_frac * 100)))
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 4, 4, generator=g)
    out = perturb(x, t, torch.zeros_like(x), s)
    ratio = float(out.abs().sum() / x.abs().sum())
    assert ratio == pytest.approx(math.sqrt(s.alpha_bar(t)), rel=1e-5)
    if t < 100:
        assert math.sqrt(s.alpha_bar(t + 1)) < ratio
