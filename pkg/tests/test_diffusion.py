"""Schedule invariants, closed-form noising vs the iterated chain,
denoising loss contracts, and sampler behavior."""

import numpy as np
import pytest

from slotkit import tensor as tt
from slotkit.diffusion import (NoiseSchedule, SamplingError, ancestral_step,
                               build_schedule, denoise_loss, fast_sample,
                               q_sample, sample)
from slotkit.rng import Rng
from slotkit.tensor import ContractError, Tensor


def assert_schedule_invariants(s: NoiseSchedule):
    assert (s.beta > 0).all() and (s.beta < 1).all()
    assert (np.diff(s.beta) >= 0).all()
    assert np.array_equal(s.alpha, 1.0 - s.beta)
    assert (np.diff(s.alpha_bar) < 0).all() or s.T == 1
    running = 1.0
    for i in range(s.T):
        running = running * s.alpha[i]
        assert s.alpha_bar[i] == running  # recurrence holds bitwise as stored


class TestBuildSchedule:
    def test_single_step(self):
        s = build_schedule(1, 0.5, 0.5)
        assert s.alpha_bar.tolist() == [0.5]

    def test_two_step_hand_product(self):
        s = build_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(s.alpha_bar, [0.9, 0.9 * 0.8], rtol=0, atol=1e-15)

    def test_default_table_tail(self):
        s = build_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar[-1] < 1e-4
        assert_schedule_invariants(s)

    def test_randomized_schedules_keep_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            t = int(rng.integers(1, 400))
            b0 = float(rng.uniform(1e-6, 0.1))
            b1 = float(rng.uniform(b0, 0.5))
            assert_schedule_invariants(build_schedule(t, b0, b1))

    def test_bad_ranges_rejected(self):
        for args in ((0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)):
            with pytest.raises(ContractError):
                build_schedule(*args)


class TestQSample:
    def test_no_noise_limit(self):
        s = NoiseSchedule(T=1, beta=np.array([0.1]), alpha=np.array([0.9]),
                          alpha_bar=np.array([1.0]))  # hypothetical abar=1
        z0 = np.random.default_rng(1).normal(size=(2, 3))
        out = q_sample(z0, 1, np.ones_like(z0), s)
        np.testing.assert_allclose(out, z0, atol=0)

    def test_zero_signal(self):
        s = build_schedule(10, 0.1, 0.2)
        eps = np.random.default_rng(2).normal(size=(2, 3))
        out = q_sample(np.zeros((2, 3)), 5, eps, s)
        np.testing.assert_allclose(out, np.sqrt(1 - s.alpha_bar[4]) * eps, rtol=1e-12)

    def test_t_out_of_range(self):
        s = build_schedule(10, 0.1, 0.2)
        for t in (0, 11):
            with pytest.raises(ContractError):
                q_sample(np.zeros(3), t, np.zeros(3), s)

    def test_closed_form_matches_iterated_chain(self):
        # Monte-Carlo oracle: step the one-step kernel t times and compare
        # moments of z_t against the closed form, within 3 standard errors
        s = build_schedule(50, 1e-3, 0.05)
        rng = Rng(123)
        z0 = 1.7
        n = 10_000
        for t in (7, 23, 50):
            z = np.full(n, z0)
            chain = rng.stream(t)
            for step in range(1, t + 1):
                xi = chain.normal((n,))
                z = np.sqrt(1.0 - s.beta[step - 1]) * z + np.sqrt(s.beta[step - 1]) * xi
            abar = s.alpha_bar[t - 1]
            mean_se = np.sqrt((1 - abar) / n)
            var_se = (1 - abar) * np.sqrt(2.0 / (n - 1))
            assert abs(z.mean() - np.sqrt(abar) * z0) < 3 * mean_se
            assert abs(z.var(ddof=1) - (1 - abar)) < 3 * var_se


class TestDenoiseLoss:
    def _stub_setup(self):
        sched = build_schedule(40, 1e-3, 0.05)
        z0 = np.random.default_rng(3).normal(size=(8, 2, 4, 4)).astype(np.float32)
        return sched, z0

    def test_perfect_stub_denoiser_gives_zero(self):
        sched, z0 = self._stub_setup()
        rng = Rng(5)
        t_draw = rng.stream(0)
        expected_t = t_draw.integers(1, 41, (8,))
        expected_eps = t_draw.normal(z0.shape).astype(np.float32)

        def perfect(zt, t, slots):
            assert np.array_equal(t, expected_t)
            abar = sched.abar(t).reshape(-1, 1, 1, 1)
            eps = (zt.data - np.sqrt(abar) * z0) / np.sqrt(1 - abar)
            return Tensor(eps.astype(np.float32))

        loss = denoise_loss(z0, None, sched, perfect, rng.stream(0))
        assert loss.item() < 1e-10

    def test_zero_denoiser_estimates_unit_noise(self):
        sched, _ = self._stub_setup()
        z0 = np.zeros((16, 4, 8, 8), dtype=np.float32)

        def zero(zt, t, slots):
            return Tensor(np.zeros_like(zt.data))

        loss = denoise_loss(z0, None, sched, zero, Rng(6))
        assert abs(loss.item() - 1.0) < 0.05  # >= 4096 noise draws

    def test_gradient_reaches_slots(self, f64):
        from slotkit.denoiser import UNet, UNetConfig
        cfg = UNetConfig(in_channels=2, base_width=4, channel_mults=(1,),
                         attn_levels=(0,), time_dim=8, heads=2, d_cond=6, groups=2)
        unet = UNet(cfg, rng=Rng(7))
        unet.head.w.data = np.random.default_rng(8).normal(
            size=unet.head.w.shape) * 0.2
        sched = build_schedule(5, 0.01, 0.2)
        z0 = np.random.default_rng(9).normal(size=(2, 2, 2, 2))
        slots = Tensor(np.random.default_rng(10).normal(size=(2, 2, 6)),
                       requires_grad=True)
        err = tt.grad_check(
            lambda slots: denoise_loss(z0, slots, sched, unet, Rng(11)), slots)
        assert err < 1e-4


class TestAncestralStep:
    def test_single_step_chain_recovers_exactly(self):
        s = build_schedule(1, 0.3, 0.3)
        rng = np.random.default_rng(12)
        z0 = rng.normal(size=(2, 3))
        eps = rng.normal(size=(2, 3))
        z1 = q_sample(z0, 1, eps, s)
        back = ancestral_step(z1, 1, eps, s, Rng(13))
        np.testing.assert_allclose(back, z0, atol=1e-12)

    def test_small_beta_limit(self):
        s = NoiseSchedule(T=1, beta=np.array([1e-12]), alpha=np.array([1 - 1e-12]),
                          alpha_bar=np.array([1 - 1e-12]))
        z = np.random.default_rng(14).normal(size=(3,))
        out = ancestral_step(z, 1, np.zeros(3), s, Rng(15))
        np.testing.assert_allclose(out, z, atol=1e-9)

    def test_injected_variance_matches_beta(self):
        s = build_schedule(10, 0.05, 0.3)
        z = np.zeros(1)
        eps_hat = np.zeros(1)
        t = 6
        draws = np.array([
            ancestral_step(z, t, eps_hat, s, Rng(16).stream(i))[0]
            for i in range(4000)
        ])
        beta = s.beta[t - 1]
        se = beta * np.sqrt(2.0 / (len(draws) - 1))
        assert abs(draws.var(ddof=1) - beta) < 3 * se

    def test_t_out_of_range(self):
        s = build_schedule(4, 0.1, 0.2)
        with pytest.raises(ContractError):
            ancestral_step(np.zeros(2), 5, np.zeros(2), s, Rng(0))


def constant_denoiser(value=0.0):
    def fn(zt, t, slots):
        return Tensor(np.full_like(zt.data, value))
    return fn


class TestSamplers:
    def test_sample_shape_and_finiteness(self):
        s = build_schedule(8, 0.01, 0.1)
        out = sample(constant_denoiser(), None, s, (2, 3, 4, 4), Rng(17))
        assert out.shape == (2, 3, 4, 4) and np.isfinite(out).all()

    def test_degenerate_single_step_chain(self):
        s = build_schedule(1, 0.3, 0.3)
        rng = Rng(18)
        z0 = np.random.default_rng(19).normal(size=(1, 2))

        def perfect(zt, t, slots):
            abar = s.abar(t).reshape(-1, 1)
            return Tensor(((zt.data - np.sqrt(abar) * z0) / np.sqrt(1 - abar)
                           ).astype(zt.dtype))

        out = sample(perfect, None, s, (1, 2), rng)
        np.testing.assert_allclose(out, z0, atol=1e-5)

    def test_nonfinite_abort_names_step(self):
        s = build_schedule(5, 0.1, 0.2)

        def bad(zt, t, slots):
            return Tensor(np.full_like(zt.data, np.inf))

        with pytest.raises(SamplingError) as exc:
            sample(bad, None, s, (1, 2), Rng(20))
        assert exc.value.step == 5

    def test_fast_sample_deterministic(self):
        s = build_schedule(30, 0.01, 0.2)
        a = fast_sample(constant_denoiser(0.1), None, s, (2, 2, 4, 4), Rng(21), steps=7)
        b = fast_sample(constant_denoiser(0.1), None, s, (2, 2, 4, 4), Rng(21), steps=7)
        assert np.array_equal(a, b)

    def test_full_grid_visits_every_timestep(self):
        s = build_schedule(12, 0.01, 0.2)
        seen = []

        def track(zt, t, slots):
            seen.append(int(t[0]))
            return Tensor(np.zeros_like(zt.data))

        fast_sample(track, None, s, (1, 1, 2, 2), Rng(22), steps=12)
        assert seen == list(range(12, 0, -1))

    def test_steps_range_validated(self):
        s = build_schedule(10, 0.01, 0.2)
        for steps in (0, 11):
            with pytest.raises(ContractError):
                fast_sample(constant_denoiser(), None, s, (1, 1, 2, 2), Rng(23),
                            steps=steps)

    def test_fast_equals_ancestral_when_noise_free(self):
        # with the t=1-only chain both samplers are the same deterministic map
        s = build_schedule(1, 0.25, 0.25)
        rng_a, rng_b = Rng(24), Rng(24)
        a = sample(constant_denoiser(0.3), None, s, (1, 2), rng_a)
        b = fast_sample(constant_denoiser(0.3), None, s, (1, 2), rng_b, steps=1)
        np.testing.assert_allclose(a, b, rtol=1e-6)
