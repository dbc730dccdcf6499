"""Forward diffusion and the four reverse procedures.

- `reverse_sde_exact`: Euler-Maruyama on the reverse VP-SDE with the exact
  (or a deliberately perturbed) score.
- `reverse_ddpm`: ancestral DDPM updates over a (sub-)schedule; with the
  full schedule this is the plain ancestral sampler, with b < n it is the
  fast sampler.
- `one_shot_denoise`: the deterministic single step from timestep n.

All samplers work on `(batch, dim)` states and draw noise only from the
generator they are given.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, TextIO, Union

import torch
from torch import Tensor

from purifycert import config
from purifycert.distributions import LabeledDistribution
from purifycert.errors import InvalidRangeError, NonFiniteStateError
from purifycert.rng import SeedStream, chunks
from purifycert.schedule import (
    NoiseSchedule,
    SubSchedule,
    build_subschedule,
)
from purifycert.utils import PointLike, as_points, as_tensor, squeeze_if

logger = logging.getLogger(__name__)

EXACT_SDE = "exact-sde"
DDPM_ANCESTRAL = "ddpm-ancestral"
DDPM_FAST = "ddpm-fast"
ONE_SHOT = "one-shot"
MODES = (EXACT_SDE, DDPM_ANCESTRAL, DDPM_FAST, ONE_SHOT)

MIN_INTEGRATOR_STEPS = 10


@dataclass(frozen=True)
class ReverseConfig:
    mode: str = DDPM_FAST
    integrator_steps: int = 1000
    # None: derived from the smoothing sigma
    start_timestep: Optional[int] = None
    sub_steps: int = 10
    seed: int = 0
    # per-step variance of the ancestral sampler: "beta_tilde" or "beta"
    variance: str = "beta_tilde"
    bound: float = config.divergence_bound

    def errors(self) -> List[str]:
        errors = []
        if self.mode not in MODES:
            errors.append(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.mode == EXACT_SDE and self.integrator_steps < MIN_INTEGRATOR_STEPS:
            errors.append(f"integrator_steps must be >= {MIN_INTEGRATOR_STEPS} for {EXACT_SDE}")
        if self.mode == DDPM_FAST and self.sub_steps < 1:
            errors.append("sub_steps must be >= 1")
        if self.start_timestep is not None and self.start_timestep < 1:
            errors.append("start_timestep must be >= 1")
        if self.variance not in ("beta_tilde", "beta"):
            errors.append(f"variance must be 'beta_tilde' or 'beta', got {self.variance!r}")
        if not self.bound > 0:
            errors.append("bound must be positive")
        return errors

    def validate(self) -> None:
        errors = self.errors()
        if errors:
            raise InvalidRangeError("; ".join(errors))


class ScoreOffset(Protocol):
    def delta(self, x: Tensor, t: Tensor, generator: Optional[torch.Generator]) -> Tensor:
        """Score error added at state `x` (B, d) and time `t`."""


class ScoreModel:
    """Exact diffused-marginal score of `dist`, optionally plus a perturbation.

    `score(x, t)` is the continuous-time view; `epsilon(x, n)` is the
    discrete noise predictor eps = -sqrt(1 - alpha_bar_n) * score.
    """

    def __init__(
        self,
        dist: LabeledDistribution,
        sched: NoiseSchedule,
        perturbation: Optional[ScoreOffset] = None,
        generator: Optional[torch.Generator] = None,
    ):
        self.dist = dist
        self.sched = sched
        self.perturbation = perturbation
        self.generator = generator

    def _score(self, x: Tensor, alpha_bar: Tensor, t: Tensor) -> Tensor:
        score = self.dist.diffused_score(x, alpha_bar)
        if self.perturbation is not None:
            score = score + self.perturbation.delta(x, t, self.generator)
        return score

    def score(self, x: Tensor, t: Union[float, Tensor]) -> Tensor:
        t = as_tensor(t)
        return self._score(x, self.sched.alpha_bar_at(t), t)

    def epsilon(self, x: Tensor, n: int) -> Tensor:
        alpha_bar = as_tensor(self.sched.alpha_bar(n))
        t = as_tensor(self.sched.timestep_to_time(n))
        return -torch.sqrt(1 - alpha_bar) * self._score(x, alpha_bar, t)


EpsilonPredictor = Callable[[Tensor, int], Tensor]


def make_exact_score(dist: LabeledDistribution, sched: NoiseSchedule) -> Callable[[Tensor, float], Tensor]:
    """score(x, t) of the diffused marginal at continuous time t."""
    return ScoreModel(dist, sched).score


def exact_epsilon_predictor(dist: LabeledDistribution, sched: NoiseSchedule) -> EpsilonPredictor:
    return ScoreModel(dist, sched).epsilon


def perturbed_epsilon_predictor(
    dist: LabeledDistribution,
    sched: NoiseSchedule,
    perturbation: ScoreOffset,
    generator: Optional[torch.Generator] = None,
) -> EpsilonPredictor:
    return ScoreModel(dist, sched, perturbation, generator).epsilon


def zero_epsilon_predictor(x: Tensor, n: int) -> Tensor:
    return torch.zeros_like(x)


class TrajectoryRecorder:
    """Writes one JSONL record {t, state} per reverse step."""

    def __init__(self, stream: TextIO):
        self.stream = stream

    def __call__(self, t: float, state: Tensor) -> None:
        self.stream.write(json.dumps({"t": float(t), "state": state.tolist()}) + "\n")


Recorder = Callable[[float, Tensor], None]


def _check_bounded(x: Tensor, bound: float, step: int) -> None:
    if not bool(torch.isfinite(x).all()) or bool((x.abs() > bound).any()):
        raise NonFiniteStateError(
            f"reverse state left the box |x| <= {bound} at step {step}; "
            "the integrator is too coarse for this configuration",
            step,
        )


def forward_diffuse(x0: PointLike, alpha_bar: Union[float, Tensor], generator: torch.Generator) -> Tensor:
    """sqrt(a) * x0 + sqrt(1 - a) * eps with eps ~ N(0, I).

    `alpha_bar` is a scalar or one value per row of a `(batch, dim)` x0.
    """
    x = as_tensor(x0)
    a = as_tensor(alpha_bar)
    if bool(((a <= 0) | (a > 1)).any()):
        raise InvalidRangeError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
    if a.ndim == 1:
        a = a[:, None]
    eps = torch.randn(x.shape, generator=generator, dtype=config.dtype)
    return torch.sqrt(a) * x + torch.sqrt(1 - a) * eps


def reverse_sde_exact(
    dist: LabeledDistribution,
    x_start: PointLike,
    t_start: float,
    cfg: ReverseConfig,
    sched: NoiseSchedule,
    generator: torch.Generator,
    *,
    perturbation: Optional[ScoreOffset] = None,
    perturbation_generator: Optional[torch.Generator] = None,
    recorder: Optional[Recorder] = None,
) -> Tensor:
    """Integrates dx = [-g(t)/2 x - g(t) score_t(x)] dt + sqrt(g(t)) dw backwards
    from `t_start` to 0 with `cfg.integrator_steps` uniform Euler-Maruyama steps.

    `x_start` is the already scaled start point sqrt(alpha_bar(t_start)) * x_a.
    The last step adds no noise. Perturbation noise comes from
    `perturbation_generator` so exact and perturbed runs can share `generator`.

    Raises:
        NonFiniteStateError: if the state leaves the `cfg.bound` box.
    """
    if not 0 < t_start <= 1:
        raise InvalidRangeError(f"t_start must lie in (0, 1], got {t_start}")
    x, single = as_points(x_start, dist.dimension)
    model = ScoreModel(dist, sched, perturbation, perturbation_generator or generator)
    steps = cfg.integrator_steps
    dt = t_start / steps
    if recorder is not None:
        recorder(t_start, x)
    for k in range(steps):
        t = as_tensor(t_start - k * dt)
        gamma = sched.gamma_at(t)
        drift = -0.5 * gamma * x - gamma * model.score(x, t)
        x = x - drift * dt
        if k < steps - 1:
            noise = torch.randn(x.shape, generator=generator, dtype=config.dtype)
            x = x + torch.sqrt(gamma * dt) * noise
        _check_bounded(x, cfg.bound, k)
        if recorder is not None:
            recorder(float(t) - dt, x)
    return squeeze_if(x, single)


def _ddpm_step(x: Tensor, eps_hat: Tensor, alpha_bar: Tensor, beta: Tensor) -> Tensor:
    """Posterior mean (x - beta / sqrt(1 - alpha_bar) * eps) / sqrt(1 - beta)."""
    return (x - beta / torch.sqrt(1 - alpha_bar) * eps_hat) / torch.sqrt(1 - beta)


def reverse_ddpm(
    x_start: Tensor,
    sub: SubSchedule,
    eps: EpsilonPredictor,
    generator: torch.Generator,
    *,
    variance: str = "beta_tilde",
    bound: float = config.divergence_bound,
    recorder: Optional[Recorder] = None,
) -> Tensor:
    """Ancestral updates over the rows of `sub`; the final step is noiseless."""
    x = as_tensor(x_start)
    variances = sub.variances(variance)
    if recorder is not None:
        recorder(float(sub.indices[0]), x)
    for j in range(sub.b):
        n = int(sub.indices[j])
        x = _ddpm_step(x, eps(x, n), sub.sub_alpha_bars[j], sub.sub_betas[j])
        if j < sub.b - 1:
            noise = torch.randn(x.shape, generator=generator, dtype=config.dtype)
            x = x + torch.sqrt(variances[j]) * noise
        _check_bounded(x, bound, j)
        if recorder is not None:
            next_n = int(sub.indices[j + 1]) if j < sub.b - 1 else 0
            recorder(float(next_n), x)
    return x


def one_shot_denoise(
    x_start: Tensor, n: int, sched: NoiseSchedule, eps: EpsilonPredictor
) -> Tensor:
    """x0 = (x_n - sqrt(1 - a_n) eps(x_n, n)) / sqrt(a_n); consumes no randomness."""
    sub = build_subschedule(sched, n, 1)
    x = as_tensor(x_start)
    return _ddpm_step(x, eps(x, n), sub.sub_alpha_bars[0], sub.sub_betas[0])


def reverse(
    dist: LabeledDistribution,
    x_scaled: Tensor,
    n: int,
    cfg: ReverseConfig,
    sched: NoiseSchedule,
    generator: torch.Generator,
    *,
    perturbation: Optional[ScoreOffset] = None,
    perturbation_generator: Optional[torch.Generator] = None,
    recorder: Optional[Recorder] = None,
) -> Tensor:
    """Runs the reverse procedure selected by `cfg.mode` from timestep n.

    `x_scaled` is sqrt(alpha_bar_n) * x, one row per independent run.
    """
    if cfg.mode not in MODES:
        raise InvalidRangeError(f"unknown reverse mode {cfg.mode!r}")
    if cfg.mode == EXACT_SDE:
        return reverse_sde_exact(
            dist,
            x_scaled,
            sched.timestep_to_time(n),
            cfg,
            sched,
            generator,
            perturbation=perturbation,
            perturbation_generator=perturbation_generator,
            recorder=recorder,
        )
    eps = ScoreModel(dist, sched, perturbation, perturbation_generator or generator).epsilon
    if cfg.mode == ONE_SHOT:
        return one_shot_denoise(x_scaled, n, sched, eps)
    b = n if cfg.mode == DDPM_ANCESTRAL else min(cfg.sub_steps, n)
    sub = build_subschedule(sched, n, b)
    return reverse_ddpm(
        x_scaled,
        sub,
        eps,
        generator,
        variance=cfg.variance,
        bound=cfg.bound,
        recorder=recorder,
    )


def sample_endpoints(
    dist: LabeledDistribution,
    x_a: PointLike,
    n: int,
    runs: int,
    cfg: ReverseConfig,
    sched: NoiseSchedule,
    stream: SeedStream,
    *,
    perturbation: Optional[ScoreOffset] = None,
    workers: int = 1,
) -> Tensor:
    """`runs` independent reverse endpoints started from sqrt(alpha_bar_n) * x_a.

    Runs are cut into fixed-size chunks, each with the generator of
    `stream.child(chunk_index)`, so the result does not depend on `workers`.
    """
    point, _ = as_points(x_a, dist.dimension)
    scaled = torch.sqrt(as_tensor(sched.alpha_bar(n))) * point

    def run_chunk(piece) -> Tensor:
        index, start, stop = piece
        x = scaled.expand(stop - start, -1).clone()
        return reverse(
            dist,
            x,
            n,
            cfg,
            sched,
            stream.child(index).generator(),
            perturbation=perturbation,
            perturbation_generator=stream.child(index, "perturbation").generator(),
        )

    pieces = list(chunks(runs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, pieces))
    else:
        results = [run_chunk(p) for p in pieces]
    logger.debug("sampled %d endpoints in %d chunks (mode=%s)", runs, len(pieces), cfg.mode)
    return torch.cat(results, dim=0)
