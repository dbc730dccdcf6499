"""Experiment configuration: JSON documents, validation, overrides, manifests.

A config document looks like

    {
      "seed": 0,
      "distribution": "prototypes.json" | {...inline...},
      "schedule": {"N": 1000, "beta_min": 1e-4, "beta_max": 0.02},
      "smoothing": {"sigma": 0.25, "n0": 100, "n": 1000, "alpha": 0.001, "K": 40, "b": 10},
      "reverse": {"mode": "ddpm-fast"},
      "classifier": "bayes",
      "points": {"sample": 20},
      ...
    }

Every section except `distribution` and `seed` has defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from purifycert.certification import SmoothingParams
from purifycert.distributions import CLASSIFIERS, LabeledDistribution, distribution_errors, load_distribution
from purifycert.errors import ConfigInvalidError, IoFailureError
from purifycert.rng import SeedStream
from purifycert.sampler import ReverseConfig
from purifycert.schedule import (
    NoiseSchedule,
    build_linear_schedule,
    build_schedule_from_betas,
    schedule_errors,
)
from purifycert.score_gap import ScorePerturbation
from purifycert.utils import as_tensor

logger = logging.getLogger(__name__)

SWEEP_KEYS = ("sigma", "K", "b")


@dataclass(frozen=True)
class ScheduleSpec:
    N: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # explicit betas win over the linear parameters
    betas: Optional[Tuple[float, ...]] = None

    def build(self) -> NoiseSchedule:
        if self.betas is not None:
            return build_schedule_from_betas(list(self.betas))
        return build_linear_schedule(self.N, self.beta_min, self.beta_max)

    def errors(self) -> List[str]:
        if self.betas is not None:
            return schedule_errors(as_tensor(list(self.betas)))
        if self.N < 2 or not 0 < self.beta_min < self.beta_max < 1:
            return ["need N >= 2 and 0 < beta_min < beta_max < 1"]
        return []


@dataclass(frozen=True)
class PointsSpec:
    """Evaluation points: explicit coordinates, or `sample` draws from the distribution."""

    points: Optional[Tuple[Tuple[float, ...], ...]] = None
    labels: Optional[Tuple[int, ...]] = None
    sample: int = 0


@dataclass(frozen=True)
class PosteriorSpec:
    anchor: Optional[Tuple[float, ...]] = None
    # sigma_t wins over timestep; neither means the smoothing sigma's timestep
    sigma_t: Optional[float] = None
    timestep: Optional[int] = None
    runs: int = 10000


@dataclass(frozen=True)
class RegionSpec:
    x0_index: int = 0
    sigma_t: float = 1.0
    direction_count: int = 512
    tol: float = 1e-6
    grid_low: Optional[Tuple[float, ...]] = None
    grid_high: Optional[Tuple[float, ...]] = None
    grid_resolution: int = 200


@dataclass(frozen=True)
class ScoreGapSpec:
    kind: str = "radial"
    magnitudes: Tuple[float, ...] = (0.0, 0.1, 0.5, 1.0)
    direction: Optional[Tuple[float, ...]] = None
    center: Optional[Tuple[float, ...]] = None
    anchor: Optional[Tuple[float, ...]] = None
    t: float = 0.5
    runs: int = 2000
    mc_samples: int = 4000
    lambda_scale: float = 1.0

    def perturbation(self, magnitude: float) -> ScorePerturbation:
        return ScorePerturbation(
            kind=self.kind, magnitude=magnitude, direction=self.direction, center=self.center
        )


@dataclass(frozen=True)
class SweepSpec:
    sigma: Tuple[float, ...] = ()
    K: Tuple[int, ...] = ()
    b: Tuple[int, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    distribution: Any
    seed: int
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    reverse: ReverseConfig = field(default_factory=ReverseConfig)
    classifier: str = "bayes"
    points: PointsSpec = field(default_factory=PointsSpec)
    posterior: PosteriorSpec = field(default_factory=PosteriorSpec)
    region: RegionSpec = field(default_factory=RegionSpec)
    scoregap: ScoreGapSpec = field(default_factory=ScoreGapSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output: str = "runs"
    # canonical hash of the resolved document
    config_hash: str = ""

    def load_distribution(self) -> LabeledDistribution:
        return load_distribution(self.distribution)

    def stream(self, *keys) -> SeedStream:
        return SeedStream(self.seed).child(*keys)


SECTIONS = {
    "schedule": ScheduleSpec,
    "smoothing": SmoothingParams,
    "reverse": ReverseConfig,
    "points": PointsSpec,
    "posterior": PosteriorSpec,
    "region": RegionSpec,
    "scoregap": ScoreGapSpec,
    "sweep": SweepSpec,
}


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: Mapping[str, Any]) -> str:
    """sha256 of the canonical serialization; stable under key reordering."""
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def read_document(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigInvalidError([_error("", "json", f"{path}: {e}")]) from e
    if not isinstance(doc, dict):
        raise ConfigInvalidError([_error("", "schema", "config must be a JSON object")])
    return doc


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Applies `a.b=value` overrides; values parse as JSON, else stay strings."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigInvalidError([_error(item, "override", "overrides look like key=value")])
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = node[part] = {}
            node = child
        node[parts[-1]] = _parse_value(raw)
    return doc


def _resolve_distribution(doc: Dict[str, Any], base_dir: Optional[Path]) -> Dict[str, Any]:
    source = doc.get("distribution")
    if isinstance(source, str):
        path = Path(source)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            doc = {**doc, "distribution": json.loads(path.read_text(encoding="utf-8"))}
        except OSError as e:
            raise IoFailureError(f"cannot read distribution {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigInvalidError([_error("distribution", "json", f"{path}: {e}")]) from e
    return doc


def _error(path: str, invariant: str, message: str) -> Dict[str, str]:
    return {"path": path, "invariant": invariant, "message": message}


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _build_section(name: str, raw: Any, errors: List[Dict[str, str]]):
    cls = SECTIONS[name]
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        errors.append(_error(name, "schema", f"{name} must be an object"))
        return None
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    for key in unknown:
        errors.append(_error(f"{name}.{key}", "schema", f"unknown field {key!r}"))
    try:
        return cls(**{k: _freeze(v) for k, v in raw.items() if k in known})
    except TypeError as e:
        errors.append(_error(name, "schema", str(e)))
        return None


def _section_errors(config: ExperimentConfig, dimension: Optional[int]) -> List[Dict[str, str]]:
    errors = []
    for message in config.schedule.errors():
        errors.append(_error("schedule", "schedule", message))
    for message in config.smoothing.errors():
        errors.append(_error("smoothing", "smoothing", message))
    for message in config.reverse.errors():
        errors.append(_error("reverse", "reverse", message))
    if config.classifier not in CLASSIFIERS:
        errors.append(_error("classifier", "schema", f"unknown classifier {config.classifier!r}"))
    for magnitude in config.scoregap.magnitudes:
        for message in config.scoregap.perturbation(magnitude).errors(dimension):
            errors.append(_error("scoregap", "perturbation", message))
            break
    for key in SWEEP_KEYS:
        if not isinstance(getattr(config.sweep, key), tuple):
            errors.append(_error(f"sweep.{key}", "schema", "sweep values must be a list"))
    points = config.points
    if points.points is not None and dimension is not None:
        if any(len(p) != dimension for p in points.points):
            errors.append(_error("points.points", "dimension", f"every point needs {dimension} coordinates"))
        if points.labels is not None and len(points.labels) != len(points.points):
            errors.append(_error("points.labels", "schema", "one label per point"))
    if points.sample < 0:
        errors.append(_error("points.sample", "schema", "sample must be >= 0"))
    return errors


def _build(doc: Dict[str, Any]) -> Tuple[Optional[ExperimentConfig], List[Dict[str, str]]]:
    errors: List[Dict[str, str]] = []
    known = set(SECTIONS) | {"distribution", "seed", "classifier", "output"}
    for key in sorted(set(doc) - known):
        errors.append(_error(key, "schema", f"unknown section {key!r}"))

    if "seed" not in doc:
        errors.append(_error("seed", "seed", "a master seed is required"))
    elif not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool) or not 0 <= doc["seed"] < 2**64:
        errors.append(_error("seed", "seed", "seed must be an unsigned 64-bit integer"))

    dimension = None
    if "distribution" not in doc:
        errors.append(_error("distribution", "schema", "a distribution is required"))
    else:
        dist_errors = distribution_errors(doc["distribution"])
        errors.extend(dist_errors)
        if not dist_errors:
            dimension = doc["distribution"].get("dimension")

    sections = {name: _build_section(name, doc.get(name), errors) for name in SECTIONS}
    if errors or any(v is None for v in sections.values()):
        return None, errors

    config = ExperimentConfig(
        distribution=doc["distribution"],
        seed=int(doc["seed"]),
        classifier=doc.get("classifier", "bayes"),
        output=str(doc.get("output", "runs")),
        config_hash=config_hash(doc),
        **sections,
    )
    errors.extend(_section_errors(config, dimension))
    return (None if errors else config), errors


def validate_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> List[Dict[str, str]]:
    """Every error in the config at `path`, each as {path, invariant, message}.

    Raises:
        IoFailureError: if the file or a referenced distribution cannot be read.
    """
    try:
        doc = apply_overrides(read_document(path), overrides)
        doc = _resolve_distribution(doc, Path(path).parent)
    except ConfigInvalidError as e:
        return e.errors
    return _build(doc)[1]


def load_config(
    source: Union[str, Path, Mapping[str, Any]],
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """Loads, overrides and validates an experiment config.

    Raises:
        ConfigInvalidError: with the full error list.
        IoFailureError: if a file cannot be read.
    """
    if isinstance(source, Mapping):
        doc, base_dir = dict(source), None
    else:
        doc, base_dir = read_document(source), Path(source).parent
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    doc = _resolve_distribution(doc, base_dir)
    config, errors = _build(doc)
    if errors:
        raise ConfigInvalidError(errors)
    logger.info("loaded config %s (hash %s)", source if not isinstance(source, Mapping) else "<inline>", config.config_hash[:12])
    return config


def with_smoothing(config: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    """Copy of `config` with some smoothing parameters replaced."""
    smoothing = SmoothingParams(**{**asdict(config.smoothing), **changes})
    return ExperimentConfig(**{**{f.name: getattr(config, f.name) for f in fields(config)}, "smoothing": smoothing})


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    started: str
    finished: Optional[str] = None
    # subcommand -> output files relative to the run directory
    outputs: Dict[str, List[str]] = field(default_factory=dict)

    @classmethod
    def start(cls, config: ExperimentConfig) -> RunManifest:
        return cls(config_hash=config.config_hash, tool_version=tool_version(), started=_now())

    def record(self, subcommand: str, path: Union[str, Path]) -> None:
        self.outputs.setdefault(subcommand, []).append(str(path))

    def finish(self) -> None:
        self.finished = _now()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def tool_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("purifycert")
    except PackageNotFoundError:
        return "0+unknown"
