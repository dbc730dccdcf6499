"""Labeled ground-truth distributions: finite prototype sets and Gaussian mixtures.

Both families are component tables (one row per prototype or mixture
component) and share one interface: exact log densities where they exist,
the closed-form diffused marginal under x_t = sqrt(a) x_0 + sqrt(1 - a) eps,
its score, sampling and two reference classifiers.
"""

from __future__ import annotations

import json
import math
from abc import abstractmethod
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Tuple, Union

import torch
from torch import Tensor
from torch.distributions import (
    Categorical,
    Distribution,
    Independent,
    MixtureSameFamily,
    Normal,
)

from purifycert import config
from purifycert.errors import (
    InvalidRangeError,
    SingularMarginalError,
    UnsupportedKindError,
)
from purifycert.tensor_table import TensorTable
from purifycert.utils import PointLike, as_points, as_tensor, squeeze_if

PROTOTYPE_SET = "prototype-set"
GAUSSIAN_MIXTURE = "gaussian-mixture"

NORMALIZATION_TOL = 1e-12
MIN_VARIANCE = 1e-10

AlphaBar = Union[float, Tensor]


def _gaussian_log_prob(x: Tensor, means: Tensor, variances: Tensor) -> Tensor:
    """log N(x; mean, diag(var)) for x (B, d) against components (A, K, d); returns (B, K)."""
    diff = x[:, None, :] - means
    return -0.5 * (diff.pow(2) / variances + torch.log(2 * math.pi * variances)).sum(-1)


def _label_logsumexp(log_joint: Tensor, labels: Tensor, label_ids: Tensor) -> Tensor:
    """Collapses per-component log terms (B, K) into per-label terms (B, L)."""
    mask = labels[None, :] == label_ids[:, None]
    expanded = log_joint[:, None, :].expand(-1, mask.shape[0], -1)
    masked = expanded.masked_fill(~mask, -math.inf)
    return torch.logsumexp(masked, dim=-1)


class LabeledDistribution(TensorTable):
    """Common interface of both distribution families.

    Subclasses hold their components as table rows and implement
    `_diffused_parameters`. Instances are treated as immutable; every
    operation is pure.
    """

    @property
    @abstractmethod
    def kind(self) -> str:
        """Either `prototype-set` or `gaussian-mixture`."""

    @property
    @abstractmethod
    def component_weights(self) -> Tensor:
        pass

    @property
    @abstractmethod
    def component_locations(self) -> Tensor:
        """Prototype positions or mixture means, (K, d)."""

    @abstractmethod
    def dist(self) -> Distribution:
        """Returns the underlying torch.distributions.Distribution instance."""

    @abstractmethod
    def invariant_errors(self) -> List[Tuple[str, str]]:
        """Returns (invariant, message) pairs for every violated invariant."""

    @abstractmethod
    def _diffused_parameters(self, alpha_bar: Tensor) -> Tuple[Tensor, Tensor]:
        """Means and variances (A, K, d) of the diffused marginal for alpha_bar (A,)."""

    def __post_init__(self):
        super().__post_init__()
        if config.validate_args and not getattr(self._validation_disabled, "value", False):
            errors = self.invariant_errors()
            if errors:
                raise InvalidRangeError(
                    "; ".join(f"{name}: {message}" for name, message in errors)
                )

    @property
    def dimension(self) -> int:
        return int(self.component_locations.shape[-1])

    @property
    def label_ids(self) -> Tensor:
        """Sorted distinct class ids."""
        return torch.unique(self.labels, sorted=True)

    # --- diffused marginal ---

    def _check_alpha_bar(self, alpha_bar: AlphaBar) -> Tensor:
        a = as_tensor(alpha_bar).reshape(-1)
        if bool(((a <= 0) | (a > 1)).any()):
            raise InvalidRangeError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
        return a

    def diffused_log_joint(self, x: Tensor, alpha_bar: AlphaBar) -> Tensor:
        """log w_k + log N(x; diffused component k), shape (B, K)."""
        a = self._check_alpha_bar(alpha_bar)
        means, variances = self._diffused_parameters(a)
        log_w = torch.log(self.component_weights)
        return log_w + _gaussian_log_prob(x, means, variances)

    def diffused(self, alpha_bar: float) -> MixtureDistribution:
        """The closed-form marginal p_t as a Gaussian mixture."""
        a = self._check_alpha_bar(alpha_bar)
        means, variances = self._diffused_parameters(a)
        keep = self.component_weights > 0
        # variances may fall below MIN_VARIANCE as alpha_bar approaches 1
        with TensorTable.unsafe_construction():
            return MixtureDistribution(
                weights=self.component_weights[keep],
                means=means[0][keep],
                variances=variances[0][keep],
                labels=self.labels[keep],
            )

    def diffused_log_density(self, x: PointLike, alpha_bar: AlphaBar) -> Tensor:
        points, single = as_points(x, self.dimension)
        out = torch.logsumexp(self.diffused_log_joint(points, alpha_bar), dim=-1)
        return squeeze_if(out, single)

    def diffused_score(self, x: PointLike, alpha_bar: AlphaBar) -> Tensor:
        """Exact score of the diffused marginal at `x`.

        `alpha_bar` is a scalar or one value per row of `x`.

        Raises:
            SingularMarginalError: prototype sets at alpha_bar == 1.
            DimensionMismatchError: if `x` has the wrong dimension.
        """
        points, single = as_points(x, self.dimension)
        a = self._check_alpha_bar(alpha_bar)
        means, variances = self._diffused_parameters(a)
        log_joint = torch.log(self.component_weights) + _gaussian_log_prob(
            points, means, variances
        )
        responsibilities = torch.softmax(log_joint, dim=-1)
        component_scores = -(points[:, None, :] - means) / variances
        score = (responsibilities[..., None] * component_scores).sum(dim=1)
        return squeeze_if(score, single)

    # --- classification ---

    @abstractmethod
    def log_label_evidence(self, x: Tensor) -> Tensor:
        """Per-label log evidence (B, L) in `label_ids` order."""

    def bayes_classify(self, x: PointLike) -> Tensor:
        """Label with the largest evidence; ties go to the smallest class id."""
        points, single = as_points(x, self.dimension)
        evidence = self.log_label_evidence(points)
        # argmax returns the first maximal index and label_ids are sorted
        return squeeze_if(self.label_ids[torch.argmax(evidence, dim=-1)], single)

    def nearest_prototype_classify(self, x: PointLike) -> Tensor:
        raise UnsupportedKindError(
            f"nearest_prototype_classify needs a {PROTOTYPE_SET}, got {self.kind}"
        )

    # --- sampling ---

    def sample(self, n: int, generator: torch.Generator) -> Tuple[Tensor, Tensor]:
        """Draws `n` points and their component labels."""
        index = torch.multinomial(
            self.component_weights, n, replacement=True, generator=generator
        )
        return self._sample_components(index, generator), self.labels[index]

    @abstractmethod
    def _sample_components(self, index: Tensor, generator: torch.Generator) -> Tensor:
        pass

    def to_document(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dimension": self.dimension, "components": self._component_documents()}

    @abstractmethod
    def _component_documents(self) -> List[Dict[str, Any]]:
        pass


class PrototypeDistribution(LabeledDistribution):
    """Finite set of labeled point masses.

    Zero masses are allowed; such positions lie outside the support and
    receive zero posterior weight everywhere.
    """

    positions: Tensor
    masses: Tensor
    labels: Tensor
    # bandwidth of the Gaussian observation kernel used by bayes_classify
    kernel_scale: float = 1.0

    @property
    def kind(self) -> str:
        return PROTOTYPE_SET

    @property
    def component_weights(self) -> Tensor:
        return self.masses

    @property
    def component_locations(self) -> Tensor:
        return self.positions

    def dist(self) -> Distribution:
        return Categorical(probs=self.masses)

    def invariant_errors(self) -> List[Tuple[str, str]]:
        errors = []
        if self.positions.ndim != 2 or self.positions.shape[0] == 0:
            return [("shape", "positions must be a non-empty (K, d) table")]
        if not bool(torch.isfinite(self.positions).all()):
            errors.append(("finite-positions", "prototype positions must be finite"))
        if bool(((self.masses < 0) | (self.masses > 1)).any()):
            errors.append(("mass-range", "prototype masses must lie in [0, 1]"))
        total = float(self.masses.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            errors.append(("normalization", f"prototype masses sum to {total!r}, not 1"))
        if bool((self.labels < 0).any()):
            errors.append(("label-range", "class ids must be non-negative integers"))
        return errors

    def _diffused_parameters(self, alpha_bar: Tensor) -> Tuple[Tensor, Tensor]:
        if bool((alpha_bar >= 1).any()):
            raise SingularMarginalError(
                "the diffused marginal of a prototype set is singular at alpha_bar = 1"
            )
        a = alpha_bar[:, None, None]
        means = torch.sqrt(a) * self.positions[None]
        variances = (1 - a).expand(-1, *self.positions.shape)
        return means, variances

    def log_label_evidence(self, x: Tensor) -> Tensor:
        sq = (x[:, None, :] - self.positions[None]).pow(2).sum(-1)
        log_joint = torch.log(self.masses) - sq / (2 * self.kernel_scale**2)
        return _label_logsumexp(log_joint, self.labels, self.label_ids)

    def nearest_prototype_classify(self, x: PointLike) -> Tensor:
        """Label of the Euclidean-nearest prototype; ties go to the smallest class id."""
        points, single = as_points(x, self.dimension)
        sq = (points[:, None, :] - self.positions[None]).pow(2).sum(-1)
        per_label = -_label_min(sq, self.labels, self.label_ids)
        return squeeze_if(self.label_ids[torch.argmax(per_label, dim=-1)], single)

    def nearest_index(self, x: Tensor) -> Tensor:
        """Index of the nearest prototype per row; ties go to the smallest index."""
        sq = (x[:, None, :] - self.positions[None]).pow(2).sum(-1)
        return torch.argmin(sq, dim=-1)

    def _sample_components(self, index: Tensor, generator: torch.Generator) -> Tensor:
        return self.positions[index]

    def to_document(self) -> Dict[str, Any]:
        return {**super().to_document(), "kernel_scale": self.kernel_scale}

    def _component_documents(self) -> List[Dict[str, Any]]:
        return [
            {"mass": float(m), "position": p.tolist(), "label": int(lab)}
            for p, m, lab in zip(self.positions, self.masses, self.labels)
        ]


def _label_min(values: Tensor, labels: Tensor, label_ids: Tensor) -> Tensor:
    mask = labels[None, :] == label_ids[:, None]
    expanded = values[:, None, :].expand(-1, mask.shape[0], -1)
    masked = expanded.masked_fill(~mask, math.inf)
    return masked.min(dim=-1).values


class MixtureDistribution(LabeledDistribution):
    """Labeled Gaussian mixture with diagonal covariances (K, d)."""

    weights: Tensor
    means: Tensor
    variances: Tensor
    labels: Tensor

    @property
    def kind(self) -> str:
        return GAUSSIAN_MIXTURE

    @property
    def component_weights(self) -> Tensor:
        return self.weights

    @property
    def component_locations(self) -> Tensor:
        return self.means

    def dist(self) -> Distribution:
        return MixtureSameFamily(
            Categorical(probs=self.weights),
            Independent(Normal(self.means, torch.sqrt(self.variances)), 1),
        )

    def invariant_errors(self) -> List[Tuple[str, str]]:
        errors = []
        if self.means.ndim != 2 or self.means.shape[0] == 0:
            return [("shape", "means must be a non-empty (K, d) table")]
        if self.variances.shape != self.means.shape:
            errors.append(("shape", "variances must match the (K, d) means table"))
        if not bool(torch.isfinite(self.means).all()):
            errors.append(("finite-means", "component means must be finite"))
        if bool(((self.weights <= 0) | (self.weights > 1)).any()):
            errors.append(("weight-range", "component weights must lie in (0, 1]"))
        total = float(self.weights.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            errors.append(("normalization", f"component weights sum to {total!r}, not 1"))
        if bool((self.variances < MIN_VARIANCE).any()):
            errors.append(
                ("covariance-eigenvalues", f"covariance eigenvalues must be >= {MIN_VARIANCE}")
            )
        if bool((self.labels < 0).any()):
            errors.append(("label-range", "class ids must be non-negative integers"))
        return errors

    def log_density(self, x: PointLike) -> Tensor:
        points, single = as_points(x, self.dimension)
        return squeeze_if(self.dist().log_prob(points), single)

    def density(self, x: PointLike) -> Tensor:
        return torch.exp(self.log_density(x))

    def _diffused_parameters(self, alpha_bar: Tensor) -> Tuple[Tensor, Tensor]:
        a = alpha_bar[:, None, None]
        means = torch.sqrt(a) * self.means[None]
        variances = a * self.variances[None] + (1 - a)
        return means, variances

    def component_log_joint(self, x: Tensor) -> Tensor:
        return torch.log(self.weights) + _gaussian_log_prob(x, self.means[None], self.variances[None])

    def log_label_evidence(self, x: Tensor) -> Tensor:
        return _label_logsumexp(self.component_log_joint(x), self.labels, self.label_ids)

    def _sample_components(self, index: Tensor, generator: torch.Generator) -> Tensor:
        noise = torch.randn(
            (index.shape[0], self.dimension), generator=generator, dtype=config.dtype
        )
        return self.means[index] + torch.sqrt(self.variances[index]) * noise

    def _component_documents(self) -> List[Dict[str, Any]]:
        return [
            {"weight": float(w), "mean": m.tolist(), "cov": v.tolist(), "label": int(lab)}
            for w, m, v, lab in zip(self.weights, self.means, self.variances, self.labels)
        ]


def density(dist: LabeledDistribution, x: PointLike) -> Tensor:
    """Mixture density at `x`; point masses have none.

    Raises:
        UnsupportedKindError: for prototype sets (use their masses instead).
    """
    if not isinstance(dist, MixtureDistribution):
        raise UnsupportedKindError("density is undefined for a prototype set; use masses")
    return dist.density(x)


def diffused_score(dist: LabeledDistribution, x: PointLike, alpha_bar: AlphaBar) -> Tensor:
    return dist.diffused_score(x, alpha_bar)


def bayes_classify(dist: LabeledDistribution, x: PointLike) -> Tensor:
    return dist.bayes_classify(x)


def nearest_prototype_classify(dist: LabeledDistribution, x: PointLike) -> Tensor:
    return dist.nearest_prototype_classify(x)


Classifier = Callable[[LabeledDistribution, Tensor], Tensor]

CLASSIFIERS: Dict[str, Classifier] = {
    "bayes": bayes_classify,
    "nearest_prototype": nearest_prototype_classify,
}


# --- JSON documents ---


def _document_errors(doc: Any) -> List[Dict[str, str]]:
    def err(path: str, invariant: str, message: str) -> Dict[str, str]:
        return {"path": path, "invariant": invariant, "message": message}

    if not isinstance(doc, Mapping):
        return [err("distribution", "schema", "distribution section must be an object")]
    errors = []
    kind = doc.get("kind")
    if kind not in (PROTOTYPE_SET, GAUSSIAN_MIXTURE):
        errors.append(err("distribution.kind", "schema", f"unknown kind {kind!r}"))
    dimension = doc.get("dimension")
    if not isinstance(dimension, int) or dimension < 1:
        errors.append(err("distribution.dimension", "schema", "dimension must be a positive integer"))
    components = doc.get("components")
    if not isinstance(components, list) or not components:
        errors.append(err("distribution.components", "schema", "components must be a non-empty list"))
        return errors
    location_key = "position" if kind == PROTOTYPE_SET else "mean"
    for i, c in enumerate(components):
        path = f"distribution.components[{i}]"
        if not isinstance(c, Mapping):
            errors.append(err(path, "schema", "component must be an object"))
            continue
        loc = c.get(location_key)
        if not isinstance(loc, list) or (isinstance(dimension, int) and len(loc) != dimension):
            errors.append(
                err(f"{path}.{location_key}", "dimension", f"{location_key} must have {dimension} entries")
            )
        if not isinstance(c.get("label"), int):
            errors.append(err(f"{path}.label", "schema", "label must be an integer class id"))
        if not isinstance(c.get("weight", c.get("mass")), (int, float)):
            errors.append(err(path, "schema", "component needs a numeric weight or mass"))
        if kind == GAUSSIAN_MIXTURE:
            cov = c.get("cov", 1.0)
            if isinstance(cov, list):
                if isinstance(dimension, int) and len(cov) != dimension:
                    errors.append(err(f"{path}.cov", "dimension", "cov vector must have one entry per axis"))
            elif not isinstance(cov, (int, float)):
                errors.append(err(f"{path}.cov", "schema", "cov must be a scalar or a vector"))
    return errors


def _from_valid_document(doc: Mapping[str, Any]) -> LabeledDistribution:
    components = doc["components"]
    labels = torch.tensor([int(c["label"]) for c in components], dtype=torch.long)
    weights = as_tensor([float(c.get("weight", c.get("mass"))) for c in components])
    if doc["kind"] == PROTOTYPE_SET:
        return PrototypeDistribution(
            positions=as_tensor([c["position"] for c in components]),
            masses=weights,
            labels=labels,
            kernel_scale=float(doc.get("kernel_scale", 1.0)),
        )
    dimension = int(doc["dimension"])
    variances = []
    for c in components:
        cov = c.get("cov", 1.0)
        variances.append(list(cov) if isinstance(cov, list) else [float(cov)] * dimension)
    return MixtureDistribution(
        weights=weights,
        means=as_tensor([c["mean"] for c in components]),
        variances=as_tensor(variances),
        labels=labels,
    )


def distribution_errors(doc: Any) -> List[Dict[str, str]]:
    """Every schema and invariant violation of a distribution document."""
    errors = _document_errors(doc)
    if errors:
        return errors
    with TensorTable.unsafe_construction():
        dist = _from_valid_document(doc)
    return [
        {"path": "distribution", "invariant": name, "message": message}
        for name, message in dist.invariant_errors()
    ]


def load_distribution(source: Union[str, Path, Mapping[str, Any]]) -> LabeledDistribution:
    """Builds a distribution from a JSON file or an already parsed document.

    Raises:
        InvalidRangeError: listing every violated invariant.
    """
    doc = source
    if isinstance(source, (str, Path)):
        doc = json.loads(Path(source).read_text())
    errors = distribution_errors(doc)
    if errors:
        raise InvalidRangeError("; ".join(f"{e['path']}: {e['message']}" for e in errors))
    return _from_valid_document(doc)


def dump_distribution(dist: LabeledDistribution) -> str:
    return json.dumps(dist.to_document(), indent=2, sort_keys=True)
