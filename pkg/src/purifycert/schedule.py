"""Noise schedules: the discrete chain, its continuous view, sigma <-> timestep
mapping and the uniformly sub-sampled schedules used for fast reverse runs.

Timesteps are 1-based (1..N) everywhere in the public API; tensor row
`i - 1` holds timestep `i`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import torch
from torch import Tensor

from purifycert import config
from purifycert.errors import InvalidRangeError
from purifycert.tensor_table import TensorTable
from purifycert.utils import as_tensor

logger = logging.getLogger(__name__)


class NoiseSchedule(TensorTable):
    """beta_1..beta_N and the cumulative products alpha_bar_1..alpha_bar_N."""

    betas: Tensor
    alpha_bars: Tensor

    @property
    def N(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, n: int) -> float:
        """alpha_bar_n, with alpha_bar_0 = 1."""
        return 1.0 if n == 0 else float(self.alpha_bars[n - 1])

    def sigma_at(self, n: int) -> float:
        """Data-space noise level sqrt((1 - a_n) / a_n) of timestep n."""
        a = self.alpha_bar(n)
        return math.sqrt((1 - a) / a)

    @property
    def beta_tildes(self) -> Tensor:
        """Posterior variances (1 - a_{i-1}) / (1 - a_i) * beta_i."""
        prev = torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars[:-1]])
        return (1 - prev) / (1 - self.alpha_bars) * self.betas

    # --- continuous view: t = n / N, log alpha_bar linear between knots ---

    def timestep_to_time(self, n: int) -> float:
        return n / self.N

    def _knots(self) -> Tensor:
        return torch.cat([self.alpha_bars.new_zeros(1), torch.log(self.alpha_bars)])

    def _segment(self, t: Tensor) -> Tensor:
        scaled = t * self.N
        return torch.clamp(torch.ceil(scaled), 1, self.N).long()

    def alpha_bar_at(self, t: Union[float, Tensor]) -> Tensor:
        """alpha_bar(t) for t in [0, 1]; alpha_bar(0) = 1."""
        t = as_tensor(t)
        knots = self._knots()
        idx = self._segment(t)
        frac = t * self.N - (idx - 1)
        log_ab = knots[idx - 1] + frac * (knots[idx] - knots[idx - 1])
        return torch.exp(log_ab)

    def gamma_at(self, t: Union[float, Tensor]) -> Tensor:
        """gamma(t) = -d log alpha_bar / dt, constant on each timestep segment."""
        t = as_tensor(t)
        knots = self._knots()
        idx = self._segment(t)
        return self.N * (knots[idx - 1] - knots[idx])


def build_schedule_from_betas(betas: Union[Sequence[float], Tensor]) -> NoiseSchedule:
    """Builds a schedule from an explicit beta array.

    Raises:
        InvalidRangeError: unless 0 < beta_1 < ... < beta_N < 1 and N >= 2.
    """
    b = as_tensor(betas).reshape(-1)
    errors = schedule_errors(b)
    if errors:
        raise InvalidRangeError("; ".join(errors))
    return NoiseSchedule(betas=b, alpha_bars=torch.cumprod(1 - b, dim=0))


def schedule_errors(betas: Tensor) -> List[str]:
    errors = []
    if betas.shape[0] < 2:
        errors.append("a schedule needs N >= 2 steps")
        return errors
    if not bool(((betas > 0) & (betas < 1)).all()):
        errors.append("every beta must lie in (0, 1)")
    if not bool((betas[1:] > betas[:-1]).all()):
        errors.append("betas must be strictly increasing")
    return errors


def build_linear_schedule(N: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """betas linearly spaced from beta_min to beta_max inclusive."""
    if not (0 < beta_min < beta_max < 1) or N < 2:
        raise InvalidRangeError(
            f"need 0 < beta_min < beta_max < 1 and N >= 2, got "
            f"N={N}, beta_min={beta_min}, beta_max={beta_max}"
        )
    return build_schedule_from_betas(
        torch.linspace(beta_min, beta_max, N, dtype=config.dtype)
    )


@dataclass(frozen=True)
class SigmaTimestepMap:
    sigma: float
    n_star: int
    achieved_alpha_bar: float
    target_alpha_bar: float
    gap: float
    # sqrt((1 - a) / a) at n_star
    sigma_n: float
    warning: Optional[str] = None


def map_sigma_to_timestep(sched: NoiseSchedule, sigma: float) -> SigmaTimestepMap:
    """Picks n = argmin_s |alpha_bar_s - 1 / (1 + sigma^2)|, ties to the smaller s.

    Targets far beyond the end of the chain are clamped to N with a warning.
    """
    if not sigma > 0:
        raise InvalidRangeError(f"sigma must be positive, got {sigma}")
    target = 1.0 / (1.0 + sigma**2)
    gaps = torch.abs(sched.alpha_bars - target)
    # first minimal index, i.e. the smaller timestep on ties
    n_star = int(torch.argmin(gaps)) + 1
    warning = None
    if target < float(sched.alpha_bars[-1]) / 2:
        warning = (
            f"sigma={sigma} needs alpha_bar={target:.3e} beyond the chain "
            f"(alpha_bar_N={float(sched.alpha_bars[-1]):.3e}); clamped to N"
        )
        logger.warning(warning)
    achieved = sched.alpha_bar(n_star)
    return SigmaTimestepMap(
        sigma=float(sigma),
        n_star=n_star,
        achieved_alpha_bar=achieved,
        target_alpha_bar=target,
        gap=abs(achieved - target),
        sigma_n=sched.sigma_at(n_star),
        warning=warning,
    )


class SubSchedule(TensorTable):
    """Reverse-order timestep subsequence with recomputed step coefficients.

    Row j is the reverse step from timestep `indices[j]` down to
    `indices[j + 1]` (or to alpha_bar = 1 after the last row).
    """

    indices: Tensor
    sub_alpha_bars: Tensor
    sub_alpha_bars_prev: Tensor
    sub_betas: Tensor
    sub_beta_tildes: Tensor
    warnings: List[str] = field(default_factory=list)

    @property
    def b(self) -> int:
        return int(self.indices.shape[0])

    @property
    def start(self) -> int:
        return int(self.indices[0])

    def variances(self, kind: str = "beta_tilde") -> Tensor:
        if kind == "beta_tilde":
            return self.sub_beta_tildes
        if kind == "beta":
            return self.sub_betas
        raise InvalidRangeError(f"unknown variance choice {kind!r}")


def subsequence_indices(start: int, b: int) -> List[int]:
    """floor(start - j * start / b) for j < b, the last entry forced to 1."""
    if b == 1:
        return [start]
    # floor(start - j*start/b) == start - ceil(j*start/b), in exact integers
    indices = [start - (-(-j * start // b)) for j in range(b)]
    indices[-1] = 1
    return indices


def build_subschedule(sched: NoiseSchedule, start: int, b: int) -> SubSchedule:
    """Uniformly sub-sampled schedule of b reverse steps starting at `start`.

    b > start makes the floor formula repeat indices; repeats collapse and
    the effective b shrinks, recorded in `warnings`.

    Raises:
        InvalidRangeError: unless 1 <= b and 1 <= start <= N.
    """
    if not (1 <= start <= sched.N) or b < 1:
        raise InvalidRangeError(f"need 1 <= b and 1 <= start <= N={sched.N}, got start={start}, b={b}")
    raw = subsequence_indices(start, b)
    # with b > start the formula also reaches 0, which is not a timestep
    indices = sorted({i for i in raw if i >= 1}, reverse=True)
    warnings = []
    if len(indices) < len(raw):
        message = f"sub-schedule start={start}, b={b} repeats indices; effective b={len(indices)}"
        logger.warning(message)
        warnings.append(message)

    idx = torch.tensor(indices, dtype=torch.long)
    ab = sched.alpha_bars[idx - 1]
    ab_prev = torch.cat([ab[1:], ab.new_ones(1)])
    sub_betas = 1 - ab / ab_prev
    sub_beta_tildes = (1 - ab_prev) / (1 - ab) * sub_betas
    return SubSchedule(
        indices=idx,
        sub_alpha_bars=ab,
        sub_alpha_bars_prev=ab_prev,
        sub_betas=sub_betas,
        sub_beta_tildes=sub_beta_tildes,
        warnings=warnings,
    )
