"""Closed-form conditional posterior of a reverse run started at x_a.

For a clean-data distribution p and a start at noise level sigma_t, the
endpoint of an exact reverse run has density proportional to
p(x) * exp(-|x - x_a|^2 / (2 sigma_t^2)). Both families have a closed form:
a reweighted prototype table or a Gaussian-product mixture.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import torch
from statsmodels.stats.proportion import proportion_confint
from torch import Tensor

from purifycert import config
from purifycert.distributions import (
    PROTOTYPE_SET,
    LabeledDistribution,
    MixtureDistribution,
    PrototypeDistribution,
    _gaussian_log_prob,
)
from purifycert.errors import DegenerateSigmaError, InvalidRangeError, TooFewSamplesError
from purifycert.tensor_table import TensorTable
from purifycert.utils import PointLike, as_points, as_tensor, squeeze_if

logger = logging.getLogger(__name__)

MIN_SIGMA = 1e-12
MIN_SAMPLES = 100
MODE_GRAD_TOL = 1e-9
MODE_MAX_ITER = 500
# histogram bins per axis for the mixture-case TV, by dimension
MIXTURE_BINS = {1: 30, 2: 12, 3: 6}
MIXTURE_SPAN = 6.0


class ConditionalPosterior(TensorTable):
    """One row per base component.

    Prototype case: `locations` are the prototypes and `variances` are zero.
    Mixture case: rows are the Gaussian-product components.
    """

    log_weights: Tensor
    locations: Tensor
    variances: Tensor
    labels: Tensor
    kind: str = PROTOTYPE_SET
    sigma_t: float = 1.0
    anchor: Tuple[float, ...] = ()
    base: Optional[LabeledDistribution] = None

    @property
    def weights(self) -> Tensor:
        return torch.exp(self.log_weights)

    @property
    def dimension(self) -> int:
        return int(self.locations.shape[-1])

    @property
    def label_ids(self) -> Tensor:
        return torch.unique(self.labels, sorted=True)

    def label_weights(self) -> Tuple[Tensor, Tensor]:
        """(label_ids, posterior mass of each label)."""
        ids = self.label_ids
        mask = self.labels[None, :] == ids[:, None]
        return ids, (self.weights[None, :] * mask).sum(-1)

    def log_prob(self, x: PointLike) -> Tensor:
        """Log density (mixture) or log mass (prototype set, -inf off the support)."""
        points, single = as_points(x, self.dimension)
        if self.kind == PROTOTYPE_SET:
            hit = (points[:, None, :] == self.locations[None]).all(-1)
            terms = self.log_weights[None].expand_as(hit).masked_fill(~hit, -math.inf)
        else:
            terms = self.log_weights + _gaussian_log_prob(points, self.locations[None], self.variances[None])
        return squeeze_if(torch.logsumexp(terms, dim=-1), single)

    def grad_log_prob(self, points: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Mixture case: (log density, gradient, responsibilities) at `points` (B, d)."""
        terms = self.log_weights + _gaussian_log_prob(points, self.locations[None], self.variances[None])
        log_p = torch.logsumexp(terms, dim=-1)
        resp = torch.softmax(terms, dim=-1)
        grad = (resp[..., None] * (self.locations[None] - points[:, None, :]) / self.variances[None]).sum(1)
        return log_p, grad, resp


def build_posterior(dist: LabeledDistribution, x_a: PointLike, sigma_t: float) -> ConditionalPosterior:
    """Exact posterior of the clean point given a reverse start at `x_a`.

    Raises:
        DegenerateSigmaError: if `sigma_t` <= 1e-12; the posterior collapses
            onto x_a and callers have to special-case t -> 0.
        DimensionMismatchError: if `x_a` has the wrong dimension.
    """
    if not sigma_t > MIN_SIGMA:
        raise DegenerateSigmaError(f"sigma_t={sigma_t} is too small for a posterior")
    point, _ = as_points(x_a, dist.dimension)
    anchor = point[0]
    s2 = float(sigma_t) ** 2

    if isinstance(dist, PrototypeDistribution):
        sq = (dist.positions - anchor).pow(2).sum(-1)
        log_w = torch.log_softmax(torch.log(dist.masses) - sq / (2 * s2), dim=0)
        locations = dist.positions
        variances = torch.zeros_like(dist.positions)
    elif isinstance(dist, MixtureDistribution):
        # product of N(x; mu, v) and N(x; x_a, s2)
        v = dist.variances
        variances = 1 / (1 / v + 1 / s2)
        locations = variances * (dist.means / v + anchor / s2)
        evidence = _gaussian_log_prob(point, dist.means[None], (v + s2)[None])[0]
        log_w = torch.log_softmax(torch.log(dist.weights) + evidence, dim=0)
    else:
        raise InvalidRangeError(f"unsupported distribution {type(dist).__name__}")

    return ConditionalPosterior(
        log_weights=log_w,
        locations=locations,
        variances=variances,
        labels=dist.labels,
        kind=dist.kind,
        sigma_t=float(sigma_t),
        anchor=tuple(anchor.tolist()),
        base=dist,
    )


def sample_posterior(post: ConditionalPosterior, n: int, generator: torch.Generator) -> Tuple[Tensor, Tensor]:
    """Exact draws from the posterior and their labels."""
    index = torch.multinomial(post.weights, n, replacement=True, generator=generator)
    points = post.locations[index]
    if post.kind != PROTOTYPE_SET:
        noise = torch.randn(points.shape, generator=generator, dtype=config.dtype)
        points = points + torch.sqrt(post.variances[index]) * noise
    return points, post.labels[index]


@dataclass(frozen=True)
class ModeResult:
    argmax_point: Tensor
    argmax_label: int
    # None when the posterior carries a single label
    runner_up_label: Optional[int]
    log_density_gap: float
    ascent_failed: bool = False


def _runner_up(values: Tensor, labels: Tensor, winner: int) -> Tuple[Optional[int], float]:
    """Best (label, value) among entries whose label differs from `winner`."""
    other = labels != winner
    if not bool(other.any()):
        return None, -math.inf
    masked = values.masked_fill(~other, -math.inf)
    best = int(torch.argmax(masked))
    return int(labels[best]), float(masked[best])


def _mixture_modes(post: ConditionalPosterior) -> Tuple[Tensor, Tensor, bool]:
    """Multi-start ascent from every component mean; returns (points, log densities, failed)."""
    x = post.locations.clone()
    log_p, grad, resp = post.grad_log_prob(x)
    converged = grad.norm(dim=-1) <= MODE_GRAD_TOL
    precision = 1 / post.variances
    for _ in range(MODE_MAX_ITER):
        if bool(converged.all()):
            break
        # mean-shift: responsibility-weighted precision average of the means
        weight = resp[..., None] * precision[None]
        target = (weight * post.locations[None]).sum(1) / weight.sum(1)
        step = target - x
        candidate = x + step
        cand_log_p, _, _ = post.grad_log_prob(candidate)
        # halve the step where the density would drop
        for _ in range(30):
            worse = cand_log_p < log_p
            if not bool(worse.any()):
                break
            step = torch.where(worse[:, None], step / 2, step)
            candidate = x + step
            cand_log_p, _, _ = post.grad_log_prob(candidate)
        x = torch.where(converged[:, None], x, candidate)
        log_p, grad, resp = post.grad_log_prob(x)
        converged = converged | (grad.norm(dim=-1) <= MODE_GRAD_TOL)
    return x, log_p, not bool(converged.all())


def highest_density_point(post: ConditionalPosterior) -> ModeResult:
    """The most likely reverse endpoint and the margin to the best other label."""
    if post.kind == PROTOTYPE_SET:
        # argmax returns the first maximum, i.e. the smallest component index
        best = int(torch.argmax(post.log_weights))
        label = int(post.labels[best])
        runner_up, other = _runner_up(post.log_weights, post.labels, label)
        return ModeResult(
            argmax_point=post.locations[best],
            argmax_label=label,
            runner_up_label=runner_up,
            log_density_gap=float(post.log_weights[best]) - other,
        )

    points, log_p, failed = _mixture_modes(post)
    if failed:
        logger.warning("mode ascent did not converge from every start; using the best point reached")
    _, _, resp = post.grad_log_prob(points)
    mode_labels = post.labels[torch.argmax(resp, dim=-1)]
    best = int(torch.argmax(log_p))
    label = int(mode_labels[best])
    # modes reached plus the starting means, so labels whose starts drained
    # into another basin still get a runner-up value
    start_log_p, _, _ = post.grad_log_prob(post.locations)
    runner_up, other = _runner_up(
        torch.cat([log_p, start_log_p]), torch.cat([mode_labels, post.labels]), label
    )
    return ModeResult(
        argmax_point=points[best],
        argmax_label=label,
        runner_up_label=runner_up,
        log_density_gap=float(log_p[best]) - other,
        ascent_failed=failed,
    )


@dataclass
class DivergenceReport:
    kind: str
    samples: int
    tv: float
    # label-level TV; prototype case only
    label_tv: Optional[float] = None
    rows: List[Dict[str, Any]] = field(default_factory=list)


def endpoint_divergence(
    post: ConditionalPosterior, samples: PointLike, confidence_alpha: float = 0.05
) -> DivergenceReport:
    """TV distance between reverse-run endpoints and the closed-form posterior.

    Prototype case: samples snap to their nearest prototype; rows carry the
    exact and empirical weight and a Clopper-Pearson interval per prototype.
    Mixture case: histogram TV over a grid spanning 6 standard deviations
    of every component, with exact bin masses.

    Raises:
        TooFewSamplesError: with fewer than 100 samples.
    """
    points, _ = as_points(samples, post.dimension)
    total = points.shape[0]
    if total < MIN_SAMPLES:
        raise TooFewSamplesError(f"need at least {MIN_SAMPLES} samples, got {total}")
    if post.kind == PROTOTYPE_SET:
        return _prototype_divergence(post, points, confidence_alpha)
    return _mixture_divergence(post, points)


def _prototype_divergence(post: ConditionalPosterior, points: Tensor, confidence_alpha: float) -> DivergenceReport:
    total = points.shape[0]
    sq = (points[:, None, :] - post.locations[None]).pow(2).sum(-1)
    nearest = torch.argmin(sq, dim=-1)
    counts = torch.bincount(nearest, minlength=len(post)).to(config.dtype)
    empirical = counts / total
    exact = post.weights
    tv = 0.5 * float((empirical - exact).abs().sum())

    ids = post.label_ids
    mask = (post.labels[None, :] == ids[:, None]).to(config.dtype)
    label_tv = 0.5 * float((mask @ empirical - mask @ exact).abs().sum())

    low, high = proportion_confint(counts.numpy(), total, alpha=confidence_alpha, method="beta")
    rows = [
        {
            "index": i,
            "label": int(post.labels[i]),
            "exact": float(exact[i]),
            "empirical": float(empirical[i]),
            "ci_low": float(low[i]),
            "ci_high": float(high[i]),
        }
        for i in range(len(post))
    ]
    return DivergenceReport(kind=post.kind, samples=total, tv=tv, label_tv=label_tv, rows=rows)


def _mixture_divergence(post: ConditionalPosterior, points: Tensor) -> DivergenceReport:
    d = post.dimension
    if d not in MIXTURE_BINS:
        raise InvalidRangeError(f"binned TV supports dimensions 1 to 3, got {d}")
    bins = MIXTURE_BINS[d]
    std = torch.sqrt(post.variances)
    low = (post.locations - MIXTURE_SPAN * std).min(0).values
    high = (post.locations + MIXTURE_SPAN * std).max(0).values
    edges = [torch.linspace(float(lo), float(hi), bins + 1, dtype=config.dtype) for lo, hi in zip(low, high)]

    # exact bin masses: diagonal components factor over axes
    mass = None
    for axis, e in enumerate(edges):
        cdf = torch.special.ndtr((e[None, :] - post.locations[:, axis : axis + 1]) / std[:, axis : axis + 1])
        per_axis = cdf[:, 1:] - cdf[:, :-1]
        mass = per_axis if mass is None else (mass[..., None] * per_axis.reshape(len(post), *([1] * axis), bins))
    exact = (post.weights.reshape(-1, *([1] * d)) * mass).sum(0).reshape(-1)

    inside = torch.ones(points.shape[0], dtype=torch.bool)
    flat = torch.zeros(points.shape[0], dtype=torch.long)
    for axis, e in enumerate(edges):
        coord = points[:, axis]
        inside &= (coord >= e[0]) & (coord <= e[-1])
        index = torch.clamp(torch.bucketize(coord, e, right=True) - 1, 0, bins - 1)
        flat = flat * bins + index
    counts = torch.bincount(flat[inside], minlength=bins**d).to(config.dtype)
    empirical = counts / points.shape[0]

    outside_exact = max(0.0, 1.0 - float(exact.sum()))
    outside_empirical = 1.0 - float(empirical.sum())
    tv = 0.5 * (float((empirical - exact).abs().sum()) + abs(outside_empirical - outside_exact))
    return DivergenceReport(kind=post.kind, samples=points.shape[0], tv=tv)


def posterior_rows(post: ConditionalPosterior) -> List[Dict[str, Any]]:
    """Table rows (index, label, weight, position...) for CSV output."""
    rows = []
    for i in range(len(post)):
        row = {"index": i, "label": int(post.labels[i]), "weight": float(post.weights[i])}
        for axis, value in enumerate(post.locations[i].tolist()):
            row[f"x{axis}"] = value
        if post.kind != PROTOTYPE_SET:
            for axis, value in enumerate(post.variances[i].tolist()):
                row[f"var{axis}"] = value
        rows.append(row)
    return rows
