"""Controlled score errors and their effect on reverse-run endpoints.

A perturbed score is the exact score plus delta(x, tau). The
score-matching loss

    J = 1/2 int_0^t E_{x ~ p_tau} [ lambda(tau) |delta(x, tau)|^2 ] dtau,
    lambda = lambda_scale * gamma,

equals the KL divergence between the exact and perturbed path measures,
so by Pinsker the label TV between their endpoints is at most sqrt(J / 2).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import torch
from torch import Tensor

from purifycert import config
from purifycert.distributions import LabeledDistribution, PrototypeDistribution
from purifycert.errors import InvalidRangeError
from purifycert.rng import SeedStream, chunks
from purifycert.sampler import ReverseConfig, EXACT_SDE, forward_diffuse, reverse_sde_exact
from purifycert.schedule import NoiseSchedule
from purifycert.utils import PointLike, as_points, as_tensor

logger = logging.getLogger(__name__)

CONSTANT_VECTOR = "constant-vector"
SCALED_NOISE = "scaled-noise"
RADIAL = "radial"
PERTURBATION_KINDS = (CONSTANT_VECTOR, SCALED_NOISE, RADIAL)

MIN_MC_SAMPLES = 1000
MIN_RUNS = 2000


@dataclass(frozen=True)
class ScorePerturbation:
    """delta = m * c / |c| (constant-vector), m * zeta with fresh zeta ~ N(0, I)
    (scaled-noise) or m * (x - center) (radial)."""

    kind: str = CONSTANT_VECTOR
    magnitude: float = 0.0
    direction: Optional[Sequence[float]] = None
    center: Optional[Sequence[float]] = None

    def errors(self, dimension: Optional[int] = None) -> List[str]:
        errors = []
        if self.kind not in PERTURBATION_KINDS:
            errors.append(f"kind must be one of {', '.join(PERTURBATION_KINDS)}, got {self.kind!r}")
        if not self.magnitude >= 0:
            errors.append("magnitude must be >= 0")
        if self.kind == CONSTANT_VECTOR:
            if self.direction is None or not any(float(v) != 0 for v in self.direction):
                errors.append("constant-vector needs a nonzero direction")
            elif dimension is not None and len(self.direction) != dimension:
                errors.append(f"direction has {len(self.direction)} entries, expected {dimension}")
        if self.kind == RADIAL and self.center is not None and dimension is not None:
            if len(self.center) != dimension:
                errors.append(f"center has {len(self.center)} entries, expected {dimension}")
        return errors

    def validate(self, dimension: Optional[int] = None) -> None:
        errors = self.errors(dimension)
        if errors:
            raise InvalidRangeError("; ".join(errors))

    def delta(self, x: Tensor, t: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        if self.magnitude == 0:
            return torch.zeros_like(x)
        if self.kind == CONSTANT_VECTOR:
            c = as_tensor(self.direction)
            return (self.magnitude * c / c.norm()).expand_as(x)
        if self.kind == SCALED_NOISE:
            return self.magnitude * torch.randn(x.shape, generator=generator, dtype=config.dtype)
        center = as_tensor(self.center) if self.center is not None else torch.zeros_like(x[0])
        return self.magnitude * (x - center)


@dataclass(frozen=True)
class JsmEstimate:
    value: float
    stderr: float
    samples: int


def estimate_jsm(
    dist: LabeledDistribution,
    pert: ScorePerturbation,
    t: float,
    sched: NoiseSchedule,
    mc_samples: int,
    stream: SeedStream,
    lambda_scale: float = 1.0,
) -> JsmEstimate:
    """Monte-Carlo J over tau ~ U[0, t] and x ~ p_tau, with its standard error."""
    if not 0 < t <= 1:
        raise InvalidRangeError(f"t must lie in (0, 1], got {t}")
    if mc_samples < MIN_MC_SAMPLES:
        raise InvalidRangeError(f"mc_samples must be >= {MIN_MC_SAMPLES}, got {mc_samples}")
    pert.validate(dist.dimension)
    if pert.magnitude == 0:
        return JsmEstimate(value=0.0, stderr=0.0, samples=mc_samples)

    values = []
    for index, start, stop in chunks(mc_samples):
        g = stream.child(index).generator()
        tau = t * torch.rand(stop - start, generator=g, dtype=config.dtype)
        x0, _ = dist.sample(stop - start, g)
        x = forward_diffuse(x0, sched.alpha_bar_at(tau), g)
        delta = pert.delta(x, tau, g)
        values.append(0.5 * lambda_scale * sched.gamma_at(tau) * delta.pow(2).sum(-1) * t)
    v = torch.cat(values)
    stderr = float(v.std(unbiased=True)) / math.sqrt(mc_samples)
    return JsmEstimate(value=float(v.mean()), stderr=stderr, samples=mc_samples)


@dataclass(frozen=True)
class ScoreGapReport:
    kind: str
    magnitude: float
    j_sm: float
    j_sm_stderr: float
    endpoint_tv: float
    # binomial standard error of the label TV estimate
    tv_stderr: float
    runs: int
    mc_samples: int

    @property
    def noise_floor(self) -> float:
        return 3.0 * self.tv_stderr

    @property
    def pinsker_bound(self) -> float:
        return math.sqrt(max(self.j_sm, 0.0) / 2)

    def row(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "magnitude": self.magnitude,
            "j_sm": self.j_sm,
            "stderr": self.j_sm_stderr,
            "endpoint_tv": self.endpoint_tv,
            "tv_stderr": self.tv_stderr,
        }


def _endpoint_labels(dist: LabeledDistribution, endpoints: Tensor) -> Tensor:
    if isinstance(dist, PrototypeDistribution):
        return dist.nearest_prototype_classify(endpoints)
    return dist.bayes_classify(endpoints)


def compare_endpoint_distributions(
    dist: LabeledDistribution,
    pert: ScorePerturbation,
    x_a: PointLike,
    t: float,
    sched: NoiseSchedule,
    runs: int,
    stream: SeedStream,
    cfg: Optional[ReverseConfig] = None,
    mc_samples: int = 4000,
    lambda_scale: float = 1.0,
) -> ScoreGapReport:
    """Label TV between exact-score and perturbed-score reverse-SDE endpoints.

    Both runs share every reverse-noise draw; only the score differs.
    """
    if runs < MIN_RUNS:
        raise InvalidRangeError(f"runs must be >= {MIN_RUNS}, got {runs}")
    pert.validate(dist.dimension)
    cfg = cfg or ReverseConfig(mode=EXACT_SDE)
    point, _ = as_points(x_a, dist.dimension)
    scaled = torch.sqrt(sched.alpha_bar_at(t)) * point

    exact_labels, perturbed_labels = [], []
    for index, start, stop in chunks(runs):
        x_start = scaled.expand(stop - start, -1).clone()
        chunk = stream.child("reverse", index)
        exact = reverse_sde_exact(dist, x_start, t, cfg, sched, chunk.generator())
        perturbed = reverse_sde_exact(
            dist,
            x_start,
            t,
            cfg,
            sched,
            chunk.generator(),
            perturbation=pert,
            perturbation_generator=stream.child("perturbation", index).generator(),
        )
        exact_labels.append(_endpoint_labels(dist, exact))
        perturbed_labels.append(_endpoint_labels(dist, perturbed))

    ids = dist.label_ids
    p = (torch.cat(exact_labels)[:, None] == ids).to(config.dtype).mean(0)
    q = (torch.cat(perturbed_labels)[:, None] == ids).to(config.dtype).mean(0)
    tv = 0.5 * float((p - q).abs().sum())
    pooled = (p + q) / 2
    tv_stderr = 0.5 * float(torch.sqrt(2 * pooled * (1 - pooled) / runs).sum())

    jsm = estimate_jsm(dist, pert, t, sched, mc_samples, stream.child("jsm"), lambda_scale)
    logger.info(
        "score gap %s m=%g: J=%.4g (+/- %.2g) label TV=%.4g",
        pert.kind, pert.magnitude, jsm.value, jsm.stderr, tv,
    )
    return ScoreGapReport(
        kind=pert.kind,
        magnitude=float(pert.magnitude),
        j_sm=jsm.value,
        j_sm_stderr=jsm.stderr,
        endpoint_tv=tv,
        tv_stderr=tv_stderr,
        runs=runs,
        mc_samples=mc_samples,
    )
