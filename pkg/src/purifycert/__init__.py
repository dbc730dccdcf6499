from .certification import (
    ABSTAIN,
    CertificationResult,
    SmoothingParams,
    certify,
    certify_batch,
    clopper_pearson_lower,
    densepure_predict_mode,
    densepure_predict_one,
)
from .distributions import (
    CLASSIFIERS,
    LabeledDistribution,
    MixtureDistribution,
    PrototypeDistribution,
    load_distribution,
)
from .geometry import RobustRegion, build_region, membership, sub_region_radius, union_radius
from .posterior import ConditionalPosterior, build_posterior, endpoint_divergence, highest_density_point
from .rng import SeedStream
from .sampler import ReverseConfig, forward_diffuse, one_shot_denoise, reverse, reverse_ddpm, reverse_sde_exact
from .schedule import NoiseSchedule, build_linear_schedule, build_subschedule, map_sigma_to_timestep
from .score_gap import ScorePerturbation, compare_endpoint_distributions, estimate_jsm
from .tensor_table import TensorTable

__all__ = [
    "ABSTAIN",
    "CLASSIFIERS",
    "CertificationResult",
    "ConditionalPosterior",
    "LabeledDistribution",
    "MixtureDistribution",
    "NoiseSchedule",
    "PrototypeDistribution",
    "ReverseConfig",
    "RobustRegion",
    "ScorePerturbation",
    "SeedStream",
    "SmoothingParams",
    "TensorTable",
    "build_linear_schedule",
    "build_posterior",
    "build_region",
    "build_subschedule",
    "certify",
    "certify_batch",
    "clopper_pearson_lower",
    "compare_endpoint_distributions",
    "densepure_predict_mode",
    "densepure_predict_one",
    "endpoint_divergence",
    "estimate_jsm",
    "forward_diffuse",
    "highest_density_point",
    "load_distribution",
    "map_sigma_to_timestep",
    "membership",
    "one_shot_denoise",
    "reverse",
    "reverse_ddpm",
    "reverse_sde_exact",
    "sub_region_radius",
    "union_radius",
]
