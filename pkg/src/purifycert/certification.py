"""Randomized-smoothing certification of the purify-then-classify pipeline.

One noisy draw x0 + sigma * eps goes through `densepure_predict_one`:
scale by sqrt(alpha_bar_n), run K reverse processes, classify every
endpoint and take the majority vote. `certify` wraps that in the usual
two-phase procedure (select a candidate on n0 draws, bound its success
probability on n draws).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from scipy.stats import binomtest, norm
from statsmodels.stats.proportion import proportion_confint
from torch import Tensor
from tqdm import tqdm

from purifycert import config
from purifycert.distributions import CLASSIFIERS, Classifier, LabeledDistribution
from purifycert.errors import InvalidCountsError, InvalidRangeError
from purifycert.posterior import build_posterior, highest_density_point
from purifycert.rng import SeedStream, chunks
from purifycert.sampler import DDPM_FAST, ReverseConfig, reverse
from purifycert.schedule import NoiseSchedule, map_sigma_to_timestep
from purifycert.utils import PointLike, as_points, as_tensor

logger = logging.getLogger(__name__)

ABSTAIN = -1


@dataclass(frozen=True)
class SmoothingParams:
    sigma: float = 0.25
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001
    K: int = 40
    b: int = 10

    def errors(self) -> List[str]:
        errors = []
        if not self.sigma > 0:
            errors.append("sigma must be positive")
        if self.n0 < 10:
            errors.append("n0 must be >= 10")
        if self.n < self.n0:
            errors.append("n must be >= n0")
        if not 0 < self.alpha < 0.5:
            errors.append("alpha must lie in (0, 0.5)")
        if self.K < 1:
            errors.append("K must be >= 1")
        if self.b < 1:
            errors.append("b must be >= 1")
        return errors

    def validate(self) -> None:
        errors = self.errors()
        if errors:
            raise InvalidRangeError("; ".join(errors))


@dataclass(frozen=True)
class CertificationResult:
    input: Tuple[float, ...]
    predicted_label: int
    pA_lower: float
    radius: float
    # estimation-phase vote tallies keyed by class id
    counts: Dict[int, int]
    seed: int
    params: SmoothingParams
    timestep: int
    selection_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def abstained(self) -> bool:
        return self.predicted_label == ABSTAIN

    def to_json(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["input"] = list(self.input)
        doc["counts"] = {str(k): v for k, v in self.counts.items()}
        doc["selection_counts"] = {str(k): v for k, v in self.selection_counts.items()}
        return doc


ClassifierLike = Union[str, Classifier]


def resolve_classifier(classifier: ClassifierLike) -> Classifier:
    if callable(classifier):
        return classifier
    try:
        return CLASSIFIERS[classifier]
    except KeyError:
        raise InvalidRangeError(
            f"unknown classifier {classifier!r}; expected one of {sorted(CLASSIFIERS)}"
        ) from None


def _reverse_config(params: SmoothingParams, cfg: Optional[ReverseConfig]) -> ReverseConfig:
    if cfg is None:
        return ReverseConfig(mode=DDPM_FAST, sub_steps=params.b)
    if cfg.mode == DDPM_FAST:
        return replace(cfg, sub_steps=params.b)
    return cfg


def start_timestep(sched: NoiseSchedule, params: SmoothingParams, cfg: Optional[ReverseConfig] = None) -> int:
    if cfg is not None and cfg.start_timestep is not None:
        return cfg.start_timestep
    return map_sigma_to_timestep(sched, params.sigma).n_star


def _vote(labels: Tensor, label_ids: Tensor) -> Tuple[Tensor, Tensor]:
    """Majority vote per row of `labels` (B, K); ties go to the smallest id.

    Returns (winners (B,), tallies (B, L)).
    """
    tallies = (labels[..., None] == label_ids).sum(1)
    return label_ids[torch.argmax(tallies, dim=-1)], tallies


def _predict_batch(
    dist: LabeledDistribution,
    classify: Classifier,
    x_rs: Tensor,
    n: int,
    K: int,
    cfg: ReverseConfig,
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> Tensor:
    scaled = math.sqrt(sched.alpha_bar(n)) * x_rs
    runs = scaled.repeat_interleave(K, dim=0)
    endpoints = reverse(dist, runs, n, cfg, sched, generator)
    labels = classify(dist, endpoints).reshape(x_rs.shape[0], K)
    winners, _ = _vote(labels, dist.label_ids)
    return winners


def densepure_predict_one(
    dist: LabeledDistribution,
    classifier: ClassifierLike,
    x_rs: PointLike,
    params: SmoothingParams,
    sched: NoiseSchedule,
    generator: torch.Generator,
    cfg: Optional[ReverseConfig] = None,
) -> int:
    """Majority vote over K reverse runs from sqrt(alpha_bar_n) * x_rs."""
    point, _ = as_points(x_rs, dist.dimension)
    cfg = _reverse_config(params, cfg)
    n = start_timestep(sched, params, cfg)
    return int(_predict_batch(dist, resolve_classifier(classifier), point, n, params.K, cfg, sched, generator)[0])


def densepure_predict_mode(
    dist: LabeledDistribution,
    classifier: ClassifierLike,
    x_rs: PointLike,
    params: SmoothingParams,
    sched: NoiseSchedule,
    cfg: Optional[ReverseConfig] = None,
) -> int:
    """Classifies the highest-density point of the reverse posterior; no sampling."""
    n = start_timestep(sched, params, cfg)
    post = build_posterior(dist, x_rs, sched.sigma_at(n))
    mode = highest_density_point(post)
    return int(resolve_classifier(classifier)(dist, mode.argmax_point[None])[0])


def clopper_pearson_lower(successes: int, trials: int, alpha: float) -> float:
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion.

    Raises:
        InvalidCountsError: unless 0 <= successes <= trials and trials >= 1.
    """
    if trials < 1 or not 0 <= successes <= trials:
        raise InvalidCountsError(f"need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}")
    if not 0 < alpha < 0.5:
        raise InvalidRangeError(f"alpha must lie in (0, 0.5), got {alpha}")
    if successes == 0:
        return 0.0
    # the two-sided interval at 2 * alpha has one-sided level alpha per tail
    low, _ = proportion_confint(successes, trials, alpha=2 * alpha, method="beta")
    return float(low)


def two_class_radius(sigma: float, pA_lower: float, pB_upper: float) -> float:
    """sigma / 2 * (Phi^-1(pA_lower) - Phi^-1(pB_upper)), 0 when pA_lower <= pB_upper."""
    if pA_lower <= pB_upper:
        return 0.0
    return float(sigma / 2 * (norm.ppf(pA_lower) - norm.ppf(pB_upper)))


def _tally(
    dist: LabeledDistribution,
    classify: Classifier,
    x0: Tensor,
    draws: int,
    n: int,
    params: SmoothingParams,
    cfg: ReverseConfig,
    sched: NoiseSchedule,
    stream: SeedStream,
    workers: int = 1,
) -> Tensor:
    """Vote tallies (L,) of `draws` noisy copies of x0.

    Noise and reverse randomness come from disjoint per-chunk streams.
    """
    chunk_size = max(1, config.chunk_size // params.K)

    def run_chunk(piece) -> Tensor:
        index, start, stop = piece
        noise = torch.randn(
            (stop - start, x0.shape[-1]),
            generator=stream.child("noise", index).generator(),
            dtype=config.dtype,
        )
        x_rs = x0 + params.sigma * noise
        winners = _predict_batch(
            dist, classify, x_rs, n, params.K, cfg, sched, stream.child("reverse", index).generator()
        )
        return (winners[:, None] == dist.label_ids).sum(0)

    pieces = list(chunks(draws, chunk_size))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, pieces))
    else:
        parts = [run_chunk(p) for p in pieces]
    return torch.stack(parts).sum(0)


def certify(
    dist: LabeledDistribution,
    classifier: ClassifierLike,
    x0: PointLike,
    params: SmoothingParams,
    sched: NoiseSchedule,
    stream: Union[SeedStream, int],
    cfg: Optional[ReverseConfig] = None,
    workers: int = 1,
) -> CertificationResult:
    """Two-phase certification of the smoothed pipeline at x0.

    The candidate is the vote winner over n0 draws; pA_lower bounds its
    success probability over n fresh draws. The radius is
    sigma * Phi^-1(pA_lower) when pA_lower > 0.5, otherwise the result
    abstains with radius 0.
    """
    params.validate()
    if isinstance(stream, int):
        stream = SeedStream(stream)
    point, _ = as_points(x0, dist.dimension)
    classify = resolve_classifier(classifier)
    cfg = _reverse_config(params, cfg)
    n = start_timestep(sched, params, cfg)
    ids = dist.label_ids

    selection = _tally(dist, classify, point, params.n0, n, params, cfg, sched, stream.child("select"), workers)
    candidate = int(ids[torch.argmax(selection)])
    estimate = _tally(dist, classify, point, params.n, n, params, cfg, sched, stream.child("estimate"), workers)
    successes = int(estimate[ids == candidate][0])

    pA_lower = clopper_pearson_lower(successes, params.n, params.alpha)
    if pA_lower > 0.5:
        label, radius = candidate, float(params.sigma * norm.ppf(pA_lower))
    else:
        label, radius = ABSTAIN, 0.0
    logger.debug("certify %s: label=%d pA_lower=%.6f radius=%.6f", point[0].tolist(), label, pA_lower, radius)
    return CertificationResult(
        input=tuple(point[0].tolist()),
        predicted_label=label,
        pA_lower=pA_lower,
        radius=radius,
        counts={int(i): int(c) for i, c in zip(ids, estimate)},
        seed=stream.seed,
        params=params,
        timestep=n,
        selection_counts={int(i): int(c) for i, c in zip(ids, selection)},
    )


def predict(
    dist: LabeledDistribution,
    classifier: ClassifierLike,
    x: PointLike,
    params: SmoothingParams,
    sched: NoiseSchedule,
    stream: Union[SeedStream, int],
    cfg: Optional[ReverseConfig] = None,
) -> int:
    """Smoothed prediction over n draws; abstains unless the top two counts
    differ under a two-sided binomial test at level alpha."""
    if isinstance(stream, int):
        stream = SeedStream(stream)
    point, _ = as_points(x, dist.dimension)
    cfg = _reverse_config(params, cfg)
    n = start_timestep(sched, params, cfg)
    tallies = _tally(
        dist, resolve_classifier(classifier), point, params.n, n, params, cfg, sched, stream.child("predict")
    )
    order = torch.argsort(tallies, descending=True, stable=True)
    top = int(tallies[order[0]])
    second = int(tallies[order[1]]) if len(order) > 1 else 0
    if binomtest(top, top + second, 0.5).pvalue > params.alpha:
        return ABSTAIN
    return int(dist.label_ids[order[0]])


def certified_accuracy_curve(
    results: Sequence[CertificationResult],
    labels: Sequence[int],
    epsilons: Optional[Sequence[float]] = None,
) -> List[Tuple[float, float]]:
    """(epsilon, fraction of points predicted correctly with radius >= epsilon)."""
    if not results:
        raise InvalidRangeError("need at least one certification result")
    if epsilons is None:
        sigma = results[0].params.sigma
        epsilons = [k * sigma / 8 for k in range(33)]
    correct = torch.tensor(
        [r.predicted_label == int(y) and not r.abstained for r, y in zip(results, labels)]
    )
    radii = as_tensor([r.radius for r in results])
    return [
        (float(eps), float((correct & (radii >= eps)).to(config.dtype).mean()))
        for eps in epsilons
    ]


@dataclass
class BatchCertification:
    results: List[CertificationResult]
    curve: List[Tuple[float, float]]


def certify_batch(
    dist: LabeledDistribution,
    classifier: ClassifierLike,
    points: PointLike,
    labels: Sequence[int],
    params: SmoothingParams,
    sched: NoiseSchedule,
    seed: int,
    cfg: Optional[ReverseConfig] = None,
    workers: int = 1,
    epsilons: Optional[Sequence[float]] = None,
    show_progress: bool = False,
) -> BatchCertification:
    """Certifies every point with stream ("certify", index) under `seed`."""
    batch, _ = as_points(points, dist.dimension)
    if batch.shape[0] == 0:
        raise InvalidRangeError("certify_batch needs at least one point")
    root = SeedStream(seed).child("certify")

    def run(index: int) -> CertificationResult:
        return certify(dist, classifier, batch[index], params, sched, root.child(index), cfg)

    total = batch.shape[0]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(run, range(total)), total=total, desc="certify", disable=not show_progress))
    else:
        results = [run(i) for i in tqdm(range(total), desc="certify", disable=not show_progress)]
    return BatchCertification(results=results, curve=certified_accuracy_curve(results, labels, epsilons))
