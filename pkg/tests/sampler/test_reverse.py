"""Tests for forward diffusion and the reverse samplers."""

import io
import json
import math

import pytest
import torch

from purifycert.errors import InvalidRangeError, NonFiniteStateError
from purifycert.posterior import build_posterior, endpoint_divergence
from purifycert.rng import SeedStream
from purifycert.sampler import (
    DDPM_ANCESTRAL,
    DDPM_FAST,
    EXACT_SDE,
    ONE_SHOT,
    ReverseConfig,
    ScoreModel,
    TrajectoryRecorder,
    exact_epsilon_predictor,
    forward_diffuse,
    make_exact_score,
    one_shot_denoise,
    reverse,
    reverse_ddpm,
    reverse_sde_exact,
    sample_endpoints,
    zero_epsilon_predictor,
)
from purifycert.schedule import build_subschedule, map_sigma_to_timestep


class TestReverseConfig:
    """
    Tests reverse-procedure configuration.

    This suite verifies that:
    - The defaults are valid
    - Too few integrator steps, unknown modes and bad variances are reported
    """

    def test_defaults(self):
        """The default configuration validates."""
        ReverseConfig().validate()

    def test_integrator_steps(self):
        """Exact-SDE runs need at least 10 steps."""
        cfg = ReverseConfig(mode=EXACT_SDE, integrator_steps=5)
        assert any("integrator_steps" in e for e in cfg.errors())
        with pytest.raises(InvalidRangeError):
            cfg.validate()

    def test_collects_all_errors(self):
        """Every problem is reported at once."""
        cfg = ReverseConfig(mode="euler", variance="sigma", bound=0.0)
        assert len(cfg.errors()) == 3

    def test_unknown_mode_in_reverse(self, two_prototypes, linear_schedule, generator):
        """reverse() refuses modes it does not know."""
        with pytest.raises(InvalidRangeError):
            reverse(two_prototypes, torch.zeros(1, 2, dtype=torch.float64), 10, ReverseConfig(mode="euler"), linear_schedule, generator)


class TestForwardDiffuse:
    """
    Tests the forward chain in closed form.

    This suite verifies that:
    - Draws have mean sqrt(a) x0 and variance 1 - a
    - alpha_bar may differ per row
    - alpha_bar outside (0, 1] is rejected
    """

    def test_moments(self, generator):
        """Empirical moments over 40000 draws."""
        x0 = torch.tensor([[1.0, -2.0]], dtype=torch.float64).expand(40000, -1)
        x = forward_diffuse(x0, 0.36, generator)
        torch.testing.assert_close(x.mean(0), torch.tensor([0.6, -1.2], dtype=torch.float64), atol=0.02, rtol=0)
        torch.testing.assert_close(x.var(0), torch.full((2,), 0.64, dtype=torch.float64), atol=0.02, rtol=0)

    def test_per_row(self, generator):
        """alpha_bar = 1 on a row returns that row unchanged."""
        x0 = torch.tensor([[1.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
        x = forward_diffuse(x0, torch.tensor([1.0, 0.5], dtype=torch.float64), generator)
        torch.testing.assert_close(x[0], x0[0])

    @pytest.mark.parametrize("alpha_bar", [0.0, 1.2])
    def test_range(self, generator, alpha_bar):
        """Out-of-range alpha_bar raises."""
        with pytest.raises(InvalidRangeError):
            forward_diffuse([0.0, 0.0], alpha_bar, generator)


class TestScoreModel:
    """
    Tests the exact score and noise predictors.

    This suite verifies that:
    - epsilon(x, n) = -sqrt(1 - alpha_bar_n) * score
    - score(x, t) at t = n / N matches the discrete view
    """

    def test_epsilon(self, demo_prototypes, linear_schedule):
        """The noise predictor is the scaled negative score."""
        x = torch.tensor([[0.2, 0.1], [-0.5, 0.9]], dtype=torch.float64)
        a = linear_schedule.alpha_bar(150)
        eps = exact_epsilon_predictor(demo_prototypes, linear_schedule)(x, 150)
        expected = -math.sqrt(1 - a) * demo_prototypes.diffused_score(x, a)
        torch.testing.assert_close(eps, expected)

    def test_continuous_matches_discrete(self, demo_mixture, linear_schedule):
        """score(x, n / N) equals the score at alpha_bar_n."""
        x = torch.tensor([[0.2, 0.1]], dtype=torch.float64)
        score = make_exact_score(demo_mixture, linear_schedule)(x, linear_schedule.timestep_to_time(400))
        expected = demo_mixture.diffused_score(x, linear_schedule.alpha_bar(400))
        torch.testing.assert_close(score, expected)


class TestOneShot:
    """
    Tests the one-shot denoiser.

    This suite verifies that:
    - A zero noise predictor returns x / sqrt(alpha_bar_n)
    - The exact predictor on a single prototype returns the prototype
    - One-shot equals a one-step DDPM run bit for bit
    """

    def test_zero_predictor(self, linear_schedule):
        """No predicted noise means pure rescaling."""
        x = torch.tensor([[0.3, -0.7], [1.0, 2.0]], dtype=torch.float64)
        out = one_shot_denoise(x, 80, linear_schedule, zero_epsilon_predictor)
        torch.testing.assert_close(out, x / math.sqrt(linear_schedule.alpha_bar(80)))

    def test_single_prototype(self, single_prototype, linear_schedule, generator):
        """Tweedie on a point mass recovers the point."""
        n = 300
        x = forward_diffuse(single_prototype.positions.expand(5, -1), linear_schedule.alpha_bar(n), generator)
        out = one_shot_denoise(x, n, linear_schedule, exact_epsilon_predictor(single_prototype, linear_schedule))
        torch.testing.assert_close(out, single_prototype.positions.expand(5, -1), atol=1e-9, rtol=0)

    def test_equals_one_step_ddpm(self, demo_prototypes, linear_schedule):
        """reverse_ddpm with b = 1 consumes no noise and matches one-shot exactly."""
        x = torch.tensor([[0.2, 0.1], [-0.5, 0.9]], dtype=torch.float64)
        eps = exact_epsilon_predictor(demo_prototypes, linear_schedule)
        ddpm = reverse_ddpm(x, build_subschedule(linear_schedule, 120, 1), eps, torch.Generator().manual_seed(1))
        assert torch.equal(one_shot_denoise(x, 120, linear_schedule, eps), ddpm)


class TestDdpm:
    """
    Tests DDPM-style reverse runs.

    This suite verifies that:
    - Runs are reproducible from the generator
    - Trajectory recording writes one record per step plus the start
    - Leaving the divergence box raises NonFiniteStateError
    - ddpm-fast with b = 1 is the one-shot denoiser
    """

    def test_reproducible(self, demo_prototypes, linear_schedule):
        """Equal generators give equal endpoints."""
        cfg = ReverseConfig(mode=DDPM_FAST, sub_steps=5)
        x = torch.zeros(8, 2, dtype=torch.float64)
        a = reverse(demo_prototypes, x, 100, cfg, linear_schedule, torch.Generator().manual_seed(4))
        b = reverse(demo_prototypes, x, 100, cfg, linear_schedule, torch.Generator().manual_seed(4))
        assert torch.equal(a, b)

    def test_fast_b1_is_one_shot(self, demo_prototypes, linear_schedule, generator):
        """Sub-schedules of one step are the one-shot path."""
        x = torch.tensor([[0.2, 0.1]], dtype=torch.float64)
        fast = reverse(demo_prototypes, x, 90, ReverseConfig(mode=DDPM_FAST, sub_steps=1), linear_schedule, generator)
        shot = reverse(demo_prototypes, x, 90, ReverseConfig(mode=ONE_SHOT), linear_schedule, generator)
        assert torch.equal(fast, shot)

    def test_recorder(self, demo_prototypes, linear_schedule, generator):
        """b steps produce b + 1 JSONL records ending at t = 0."""
        stream = io.StringIO()
        sub = build_subschedule(linear_schedule, 100, 4)
        eps = exact_epsilon_predictor(demo_prototypes, linear_schedule)
        reverse_ddpm(torch.zeros(1, 2, dtype=torch.float64), sub, eps, generator, recorder=TrajectoryRecorder(stream))
        records = [json.loads(line) for line in stream.getvalue().splitlines()]
        assert len(records) == 5
        assert [r["t"] for r in records] == [100.0, 75.0, 50.0, 1.0, 0.0]
        assert len(records[-1]["state"][0]) == 2

    def test_divergence_box(self, demo_prototypes, linear_schedule, generator):
        """A tiny bound makes the first step fail with its index."""
        cfg = ReverseConfig(mode=DDPM_ANCESTRAL, bound=1e-3)
        x = torch.full((1, 2), 0.5, dtype=torch.float64)
        with pytest.raises(NonFiniteStateError) as info:
            reverse(demo_prototypes, x, 20, cfg, linear_schedule, generator)
        assert info.value.step == 0

    def test_sde_divergence_box(self, demo_prototypes, linear_schedule, generator):
        """The SDE integrator checks the same bound."""
        cfg = ReverseConfig(mode=EXACT_SDE, integrator_steps=10, bound=1e-3)
        with pytest.raises(NonFiniteStateError):
            reverse_sde_exact(demo_prototypes, [[0.5, 0.5]], 0.1, cfg, linear_schedule, generator)


class TestSampleEndpoints:
    """
    Tests batched endpoint sampling.

    This suite verifies that:
    - Results do not depend on the number of workers
    - Results depend on the stream
    """

    def test_workers_independent(self, demo_prototypes, linear_schedule):
        """One and three workers give identical endpoints."""
        cfg = ReverseConfig(mode=DDPM_FAST, sub_steps=4)
        stream = SeedStream(12, ("sample",))
        one = sample_endpoints(demo_prototypes, [0.2, 0.1], 60, 2500, cfg, linear_schedule, stream, workers=1)
        three = sample_endpoints(demo_prototypes, [0.2, 0.1], 60, 2500, cfg, linear_schedule, stream, workers=3)
        assert one.shape == (2500, 2)
        assert torch.equal(one, three)

    def test_stream_matters(self, demo_prototypes, linear_schedule):
        """Different seeds give different endpoints."""
        cfg = ReverseConfig(mode=DDPM_FAST, sub_steps=4)
        a = sample_endpoints(demo_prototypes, [0.0, 0.0], 300, 200, cfg, linear_schedule, SeedStream(1))
        b = sample_endpoints(demo_prototypes, [0.0, 0.0], 300, 200, cfg, linear_schedule, SeedStream(2))
        assert not torch.equal(a, b)


def _posterior_agreement(dist, anchor, cfg, sched, runs, seed):
    n = map_sigma_to_timestep(sched, 0.5).n_star
    endpoints = sample_endpoints(dist, anchor, n, runs, cfg, sched, SeedStream(seed))
    return endpoint_divergence(build_posterior(dist, anchor, sched.sigma_at(n)), endpoints)


@pytest.mark.slow
class TestPosteriorAgreement:
    """
    Tests that reverse runs sample the closed-form posterior.

    This suite verifies that:
    - Exact-score SDE endpoints on a prototype set match the posterior weights
    - Full-chain ancestral DDPM endpoints match the posterior label masses
    - Exact-score SDE endpoints on a mixture match the posterior histogram
    - Fewer fast-DDPM steps move the endpoints away from the posterior
    """

    def test_sde_prototypes(self, demo_prototypes, linear_schedule):
        """Prototype-level TV over 10000 runs is at most 0.03."""
        cfg = ReverseConfig(mode=EXACT_SDE, integrator_steps=1000)
        report = _posterior_agreement(demo_prototypes, [0.2, 0.1], cfg, linear_schedule, 10000, 1)
        assert report.tv <= 0.03

    def test_ancestral_prototypes(self, demo_prototypes, linear_schedule):
        """Label-level TV over 10000 runs is at most 0.05."""
        cfg = ReverseConfig(mode=DDPM_ANCESTRAL)
        report = _posterior_agreement(demo_prototypes, [0.2, 0.1], cfg, linear_schedule, 10000, 2)
        assert report.label_tv <= 0.05

    def test_sde_mixture(self, demo_mixture, linear_schedule):
        """Binned TV over 10000 runs stays near the sampling floor."""
        cfg = ReverseConfig(mode=EXACT_SDE, integrator_steps=1000)
        report = _posterior_agreement(demo_mixture, [0.0, 0.0], cfg, linear_schedule, 10000, 3)
        assert report.tv <= 0.06

    def test_fewer_steps_trend(self, demo_prototypes, linear_schedule):
        """b = n, n/2, ..., 2: each TV is at least the previous one minus 0.025, three noise standard deviations."""
        n = map_sigma_to_timestep(linear_schedule, 0.5).n_star
        steps = []
        b = n
        while b >= 2:
            steps.append(b)
            b //= 2
        tvs = [
            _posterior_agreement(
                demo_prototypes, [0.2, 0.1], ReverseConfig(mode=DDPM_FAST, sub_steps=b), linear_schedule, 10000, 4
            ).tv
            for b in steps
        ]
        for coarse, fine in zip(tvs[1:], tvs):
            assert coarse >= fine - 0.025, (steps, tvs)
        assert tvs[-1] >= tvs[0] - 0.025
