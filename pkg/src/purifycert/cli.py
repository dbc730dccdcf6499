"""`purifycert` command line.

    purifycert <subcommand> --config FILE [--seed U64] [--out DIR] [--set key=value ...]

Exit codes: 0 success, 2 invalid config or usage, 3 computation failure,
4 file system failure. The log level comes from PURIFYCERT_LOG_LEVEL.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

from purifycert.certification import certify_batch, start_timestep
from purifycert.distributions import LabeledDistribution
from purifycert.errors import ComputeFailureError, ConfigInvalidError, IoFailureError, PurifyCertError
from purifycert.experiment import ExperimentConfig, RunManifest, load_config, validate_config, with_smoothing
from purifycert.geometry import (
    build_region,
    half_space_rows,
    membership_grid,
    sub_region_radius,
    union_radius,
)
from purifycert.posterior import (
    build_posterior,
    endpoint_divergence,
    highest_density_point,
    posterior_rows,
)
from purifycert.sampler import TrajectoryRecorder, reverse, sample_endpoints
from purifycert.schedule import NoiseSchedule
from purifycert.score_gap import compare_endpoint_distributions
from purifycert.utils import as_tensor

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPUTE = 3
EXIT_IO = 4

SUBCOMMANDS = ("posterior", "region", "certify", "sample", "scoregap", "sweep", "validate")


class RunContext:
    """Everything a subcommand needs: config, distribution, schedule and output sink."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, workers: int, trace: bool):
        self.config = config
        self.dist: LabeledDistribution = config.load_distribution()
        self.sched: NoiseSchedule = config.schedule.build()
        self.out_dir = out_dir
        self.workers = workers
        self.trace = trace
        self.manifest = RunManifest.start(config)

    def path(self, subcommand: str, name: str) -> Path:
        path = self.out_dir / name
        self.manifest.record(subcommand, name)
        return path

    def timestep(self) -> int:
        section = self.config.posterior
        if section.timestep is not None:
            return section.timestep
        return start_timestep(self.sched, self.config.smoothing, self.config.reverse)

    def anchor(self, value: Optional[Sequence[float]]) -> Tensor:
        if value is None:
            return as_tensor([0.0] * self.dist.dimension)
        return as_tensor(list(value))


# --- output helpers ---


def _write_csv(path: Path, rows: List[Dict[str, Any]], fieldnames: Optional[List[str]] = None) -> None:
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, docs: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps(doc, sort_keys=True) + "\n")


# --- subcommands ---


def run_posterior(ctx: RunContext) -> None:
    section = ctx.config.posterior
    sigma_t = section.sigma_t if section.sigma_t is not None else ctx.sched.sigma_at(ctx.timestep())
    post = build_posterior(ctx.dist, ctx.anchor(section.anchor), sigma_t)
    _write_csv(ctx.path("posterior", "posterior.csv"), posterior_rows(post))
    mode = highest_density_point(post)
    ids, weights = post.label_weights()
    _write_json(
        ctx.path("posterior", "mode.json"),
        {
            "sigma_t": sigma_t,
            "anchor": list(post.anchor),
            "argmax_point": mode.argmax_point.tolist(),
            "argmax_label": mode.argmax_label,
            "runner_up_label": mode.runner_up_label,
            "log_density_gap": mode.log_density_gap if mode.log_density_gap != float("inf") else "inf",
            "ascent_failed": mode.ascent_failed,
            "label_weights": {str(int(i)): float(w) for i, w in zip(ids, weights)},
        },
    )


def _grid_bounds(ctx: RunContext) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    section = ctx.config.region
    if section.grid_low is not None and section.grid_high is not None:
        return tuple(section.grid_low), tuple(section.grid_high)
    locations = ctx.dist.component_locations
    low = (locations.min(0).values - 2).tolist()
    high = (locations.max(0).values + 2).tolist()
    return tuple(low), tuple(high)


def run_region(ctx: RunContext) -> None:
    section = ctx.config.region
    region = build_region(ctx.dist, section.x0_index, section.sigma_t)
    _write_csv(ctx.path("region", "half_spaces.csv"), half_space_rows(region))
    union = union_radius(region, section.direction_count, section.tol)
    _write_json(
        ctx.path("region", "radii.json"),
        {
            "label": region.label,
            "sigma_t": region.sigma_t,
            "x0_index": region.center_index,
            "sub_region_radius": {
                str(int(i)): sub_region_radius(region, int(i)) for i in region.anchor_indices
            },
            "union_radius": union.estimate if union.direction is not None else "inf",
            "union_direction": union.direction.tolist() if union.direction is not None else None,
            "directions": union.directions,
        },
    )
    if region.dimension == 2:
        low, high = _grid_bounds(ctx)
        _write_csv(
            ctx.path("region", "membership_grid.csv"),
            membership_grid(region, low, high, section.grid_resolution),
        )


def evaluation_points(config: ExperimentConfig, dist: LabeledDistribution) -> Tuple[Tensor, List[int]]:
    section = config.points
    if section.points is not None:
        points = as_tensor([list(p) for p in section.points])
        labels = list(section.labels) if section.labels is not None else dist.bayes_classify(points).tolist()
        return points, [int(y) for y in labels]
    if section.sample > 0:
        points, labels = dist.sample(section.sample, config.stream("points").generator())
        return points, [int(y) for y in labels]
    raise ConfigInvalidError([{"path": "points", "invariant": "schema", "message": "no evaluation points"}])


def _certify(ctx: RunContext, config: ExperimentConfig, subcommand: str, tag: str = ""):
    points, labels = evaluation_points(config, ctx.dist)
    batch = certify_batch(
        ctx.dist,
        config.classifier,
        points,
        labels,
        config.smoothing,
        ctx.sched,
        config.seed,
        cfg=config.reverse,
        workers=ctx.workers,
        show_progress=sys.stderr.isatty(),
    )
    _write_jsonl(ctx.path(subcommand, f"certify{tag}.jsonl"), (r.to_json() for r in batch.results))
    rows = [{"epsilon": eps, "certified_accuracy": acc} for eps, acc in batch.curve]
    _write_csv(ctx.path(subcommand, f"curve{tag}.csv"), rows)
    return batch


def run_certify(ctx: RunContext) -> None:
    _certify(ctx, ctx.config, "certify")


def run_sweep(ctx: RunContext) -> None:
    base = ctx.config.smoothing
    sweep = ctx.config.sweep
    grid = itertools.product(sweep.sigma or (base.sigma,), sweep.K or (base.K,), sweep.b or (base.b,))
    merged = []
    for sigma, K, b in grid:
        config = with_smoothing(ctx.config, sigma=sigma, K=K, b=b)
        logger.info("sweep cell sigma=%g K=%d b=%d", sigma, K, b)
        batch = _certify(ctx, config, "sweep", f"_sigma={sigma}_K={K}_b={b}")
        merged.extend(
            {"sigma": sigma, "K": K, "b": b, "epsilon": eps, "certified_accuracy": acc}
            for eps, acc in batch.curve
        )
    _write_csv(ctx.path("sweep", "sweep.csv"), merged, ["sigma", "K", "b", "epsilon", "certified_accuracy"])


def run_sample(ctx: RunContext) -> None:
    section = ctx.config.posterior
    n = ctx.timestep()
    anchor = ctx.anchor(section.anchor)
    stream = ctx.config.stream("sample")
    endpoints = sample_endpoints(
        ctx.dist, anchor, n, section.runs, ctx.config.reverse, ctx.sched, stream, workers=ctx.workers
    )
    rows = [{f"x{i}": v for i, v in enumerate(row)} for row in endpoints.tolist()]
    _write_csv(ctx.path("sample", "endpoints.csv"), rows)

    post = build_posterior(ctx.dist, anchor, ctx.sched.sigma_at(n))
    report = endpoint_divergence(post, endpoints)
    _write_json(
        ctx.path("sample", "divergence.json"),
        {
            "timestep": n,
            "mode": ctx.config.reverse.mode,
            "samples": report.samples,
            "tv": report.tv,
            "label_tv": report.label_tv,
            "rows": report.rows,
        },
    )
    if ctx.trace:
        scaled = (torch.sqrt(as_tensor(ctx.sched.alpha_bar(n))) * anchor)[None]
        with open(ctx.path("sample", "trajectory.jsonl"), "w", encoding="utf-8") as f:
            reverse(
                ctx.dist,
                scaled,
                n,
                ctx.config.reverse,
                ctx.sched,
                stream.child("trace").generator(),
                recorder=TrajectoryRecorder(f),
            )


def run_scoregap(ctx: RunContext) -> None:
    section = ctx.config.scoregap
    rows = []
    for magnitude in section.magnitudes:
        report = compare_endpoint_distributions(
            ctx.dist,
            section.perturbation(magnitude),
            ctx.anchor(section.anchor),
            section.t,
            ctx.sched,
            section.runs,
            ctx.config.stream("scoregap"),
            mc_samples=section.mc_samples,
            lambda_scale=section.lambda_scale,
        )
        rows.append(report.row())
    _write_csv(ctx.path("scoregap", "scoregap.csv"), rows)


RUNNERS = {
    "posterior": run_posterior,
    "region": run_region,
    "certify": run_certify,
    "sample": run_sample,
    "scoregap": run_scoregap,
    "sweep": run_sweep,
}


def run_subcommand(
    name: str,
    config_path: str,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out: Optional[str] = None,
    workers: int = 1,
    trace: bool = False,
) -> int:
    """Runs one subcommand and returns its exit code."""
    try:
        if name == "validate":
            errors = validate_config(config_path, overrides)
            sys.stdout.write(json.dumps(errors, indent=2) + "\n")
            return EXIT_CONFIG if errors else EXIT_OK
        config = load_config(config_path, overrides, seed)
        out_dir = Path(out or config.output)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailureError(f"cannot create {out_dir}: {e}") from e
        ctx = RunContext(config, out_dir, workers, trace)
        try:
            RUNNERS[name](ctx)
        except PurifyCertError:
            raise
        except OSError as e:
            raise IoFailureError(str(e)) from e
        except (RuntimeError, ValueError) as e:
            raise ComputeFailureError(f"{name}: {e}") from e
        ctx.manifest.finish()
        try:
            (out_dir / "manifest.json").write_text(ctx.manifest.to_json(), encoding="utf-8")
        except OSError as e:
            raise IoFailureError(f"cannot write manifest: {e}") from e
        return EXIT_OK
    except ConfigInvalidError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except IoFailureError as e:
        logger.error("%s", e)
        return EXIT_IO
    except PurifyCertError as e:
        logger.error("%s failed: %s", name, e)
        return EXIT_COMPUTE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="purifycert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field, e.g. smoothing.sigma=0.5",
        )
        p.add_argument("--workers", type=int, default=1, help="threads for independent work")
        p.add_argument("--trace", action="store_true", help="sample: also dump one trajectory as JSONL")
    return parser


def configure_logging() -> None:
    level = os.environ.get("PURIFYCERT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    return run_subcommand(
        args.subcommand,
        args.config,
        overrides=args.overrides,
        seed=args.seed,
        out=args.out,
        workers=args.workers,
        trace=args.trace,
    )


if __name__ == "__main__":
    sys.exit(main())
