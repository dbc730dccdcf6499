"""Robust regions of a prototype set.

A reverse run started at x_a ends, in its highest-density point, on a
prototype carrying the label of x0 iff some same-label prototype x~
beats every differently labeled prototype x'. Each such comparison is a
half-space

    (x_a - x~) . a < c,   a = x' - x~,
    c = sigma_t^2 log(p(x~) / p(x')) + |a|^2 / 2,

so the set for a fixed x~ is convex (a sub-region) and the robust region
is the union of the sub-regions over all same-label prototypes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import torch
from torch import Tensor

from purifycert import config
from purifycert.distributions import LabeledDistribution, PrototypeDistribution
from purifycert.errors import (
    CenterOutsideError,
    InvalidRangeError,
    NoOtherLabelsError,
    UnsupportedKindError,
    ZeroMassError,
)
from purifycert.tensor_table import TensorTable
from purifycert.utils import PointLike, as_points

logger = logging.getLogger(__name__)

# points this close to a boundary count as outside
BOUNDARY_BAND = 1e-12
MIN_DIRECTIONS = 64
# halvings of the initial [exit - tol, exit + tol] bracket
BISECTION_STEPS = 2


@dataclass(frozen=True)
class HalfSpace:
    normal: Tensor
    offset: float
    anchor: Tensor
    # component indices of the same-label anchor and the opponent
    anchor_index: int
    opponent_index: int


class RobustRegion(TensorTable):
    """One row per same-label prototype x~; columns hold its half-spaces,
    one per differently labeled prototype, in `opponent_indices` order."""

    anchor_indices: Tensor
    anchors: Tensor
    normals: Tensor
    offsets: Tensor
    label: int = 0
    sigma_t: float = 1.0
    center_index: int = 0
    opponent_indices: Tuple[int, ...] = ()

    @property
    def center(self) -> Tensor:
        """The point x0 the region was built for."""
        row = int(torch.nonzero(self.anchor_indices == self.center_index)[0, 0])
        return self.anchors[row]

    @property
    def dimension(self) -> int:
        return int(self.anchors.shape[-1])

    def sub_region(self, anchor_index: int) -> RobustRegion:
        """The one-row table holding the half-spaces of `anchor_index`."""
        part = self[self.anchor_indices == anchor_index]
        if len(part) == 0:
            raise InvalidRangeError(f"prototype {anchor_index} does not carry label {self.label}")
        return part

    def half_spaces(self) -> List[HalfSpace]:
        return [
            HalfSpace(
                normal=self.normals[s, j],
                offset=float(self.offsets[s, j]),
                anchor=self.anchors[s],
                anchor_index=int(self.anchor_indices[s]),
                opponent_index=opponent,
            )
            for s in range(len(self))
            for j, opponent in enumerate(self.opponent_indices)
        ]

    def sub_region_mask(self, points: Tensor) -> Tensor:
        """(B, S) strict membership of every point in every sub-region."""
        rel = points[:, None, :] - self.anchors[None]
        lhs = (rel[:, :, None, :] * self.normals[None]).sum(-1)
        return (lhs < self.offsets[None] - BOUNDARY_BAND).all(-1)

    def contains(self, points: Tensor) -> Tensor:
        return self.sub_region_mask(points).any(-1)


def build_region(dist: LabeledDistribution, x0_index: int, sigma_t: float) -> RobustRegion:
    """Every sub-region for the label of prototype `x0_index`.

    Raises:
        UnsupportedKindError: for mixtures.
        NoOtherLabelsError: if every prototype carries the label of x0.
        ZeroMassError: if any prototype has zero mass.
        InvalidRangeError: if two prototypes with different labels coincide,
            which leaves their half-space without a normal.
    """
    if not isinstance(dist, PrototypeDistribution):
        raise UnsupportedKindError(f"robust regions need a prototype set, got {dist.kind}")
    if not 0 <= x0_index < len(dist):
        raise InvalidRangeError(f"x0_index {x0_index} out of range for {len(dist)} prototypes")
    if bool((dist.masses <= 0).any()):
        raise ZeroMassError("robust regions need every prototype mass to be positive")
    label = int(dist.labels[x0_index])
    same = torch.nonzero(dist.labels == label).reshape(-1)
    other = torch.nonzero(dist.labels != label).reshape(-1)
    if other.numel() == 0:
        raise NoOtherLabelsError(f"every prototype carries label {label}")

    anchors = dist.positions[same]
    normals = dist.positions[other][None] - anchors[:, None, :]
    coincident = torch.nonzero((normals == 0).all(-1))
    if coincident.numel():
        s, j = coincident[0].tolist()
        raise InvalidRangeError(
            f"prototypes {int(same[s])} and {int(other[j])} coincide but carry different labels"
        )
    log_ratio = torch.log(dist.masses[same])[:, None] - torch.log(dist.masses[other])[None]
    offsets = sigma_t**2 * log_ratio + 0.5 * normals.pow(2).sum(-1)
    return RobustRegion(
        anchor_indices=same,
        anchors=anchors,
        normals=normals,
        offsets=offsets,
        label=label,
        sigma_t=float(sigma_t),
        center_index=int(x0_index),
        opponent_indices=tuple(int(i) for i in other),
    )


@dataclass(frozen=True)
class Membership:
    in_union: bool
    # prototype indices whose sub-region contains the point
    sub_regions: Tuple[int, ...]

    @property
    def outside(self) -> bool:
        return not self.in_union


def membership(region: RobustRegion, x_a: PointLike):
    """Union and sub-region membership of `x_a`; boundary points are outside.

    Returns a `Membership` for a single point and a list for a batch.
    """
    points, single = as_points(x_a, region.dimension)
    mask = region.sub_region_mask(points)
    results = [
        Membership(
            in_union=bool(row.any()),
            sub_regions=tuple(int(region.anchor_indices[s]) for s in torch.nonzero(row).reshape(-1)),
        )
        for row in mask
    ]
    return results[0] if single else results


def sub_region_radius(region: RobustRegion, anchor_index: int) -> float:
    """Radius of the largest ball centered at x0 inside the sub-region of `anchor_index`.

    min_j (c_j - (x0 - x~)^T a_j) / |a_j|, clamped at 0.
    """
    sub = region.sub_region(anchor_index)
    rel = region.center - sub.anchors[0]
    slack = sub.offsets[0] - sub.normals[0] @ rel
    distances = slack / sub.normals[0].norm(dim=-1)
    return max(0.0, float(distances.min()))


def sphere_directions(dimension: int, count: int) -> Tensor:
    """Quasi-uniform unit directions; the set for `count` is a prefix of the set for 2 * `count`.

    Evenly spaced angles in 2-D (doubling interleaves the old angles),
    normalized Gaussian transforms of a Sobol sequence otherwise.
    """
    if dimension == 1:
        return torch.tensor([[1.0], [-1.0]], dtype=config.dtype)
    if dimension == 2:
        # bit-reversed order keeps every power-of-two prefix evenly spaced
        k = torch.arange(count)
        angles = 2 * math.pi * _van_der_corput(k)
        return torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1)
    engine = torch.quasirandom.SobolEngine(dimension, scramble=False)
    # the origin maps to -inf and (0.5, ..., 0.5) to the zero vector
    engine.fast_forward(2)
    u = engine.draw(count, dtype=config.dtype)
    z = torch.special.ndtri(u.clamp(1e-12, 1 - 1e-12))
    return z / z.norm(dim=-1, keepdim=True)


def _van_der_corput(k: Tensor) -> Tensor:
    out = torch.zeros(k.shape, dtype=config.dtype)
    base = 0.5
    k = k.clone()
    while bool((k > 0).any()):
        out += (k % 2).to(config.dtype) * base
        k //= 2
        base /= 2
    return out


@dataclass(frozen=True)
class UnionRadius:
    estimate: float
    direction: Optional[Tensor]
    directions: int


def union_radius(region: RobustRegion, direction_count: int = 512, tol: float = 1e-6) -> UnionRadius:
    """Estimated radius of the largest ball centered at x0 inside the union.

    Along a ray x0 + r d every sub-region is an open interval of r, so the
    ray leaves the union where the chain of intervals covering r = 0 ends.
    That exit is then bisected against `membership` to `tol`. The minimum
    over directions is an upper estimate of the true radius that can only
    shrink as directions are added; rays that never leave count as infinite.

    Raises:
        CenterOutsideError: if x0 is not inside the union.
        InvalidRangeError: if `direction_count` < 64.
    """
    if direction_count < MIN_DIRECTIONS:
        raise InvalidRangeError(f"direction_count must be >= {MIN_DIRECTIONS}, got {direction_count}")
    center = region.center
    if not bool(region.contains(center[None])[0]):
        raise CenterOutsideError("x0 lies outside its own robust region")

    directions = sphere_directions(region.dimension, direction_count)
    lower, upper = ray_intervals(region, center, directions)
    exits = _first_exit(lower, upper)
    finite = torch.isfinite(exits)
    if not bool(finite.any()):
        logger.warning("no ray leaves the union; radius reported as infinite")
        return UnionRadius(estimate=math.inf, direction=None, directions=len(directions))

    lo = torch.clamp(exits[finite] - tol, min=0.0)
    hi = exits[finite] + tol
    dirs = directions[finite]
    # a fixed number of halvings keeps each ray's result independent of the batch
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        inside = region.contains(center + mid[:, None] * dirs)
        lo = torch.where(inside, mid, lo)
        hi = torch.where(inside, hi, mid)
    best = int(torch.argmin(hi))
    return UnionRadius(estimate=float(hi[best]), direction=dirs[best], directions=len(directions))


def ray_intervals(region: RobustRegion, center: Tensor, directions: Tensor) -> Tuple[Tensor, Tensor]:
    """(B, S) open intervals (lower, upper) of r with center + r d inside sub-region s.

    Empty intervals have upper <= lower.
    """
    rel = center - region.anchors
    slack = region.offsets - (region.normals * rel[:, None, :]).sum(-1) - BOUNDARY_BAND
    rate = torch.einsum("bd,sjd->bsj", directions, region.normals)
    ratio = slack[None] / rate
    upper = torch.where(rate > 0, ratio, math.inf).amin(-1)
    lower = torch.where(rate < 0, ratio, -math.inf).amax(-1)
    # parallel to a plane the ray is inside it everywhere or nowhere
    blocked = ((rate == 0) & (slack[None] <= 0)).any(-1)
    return lower, upper.masked_fill(blocked, -math.inf)


def _first_exit(lower: Tensor, upper: Tensor) -> Tensor:
    """Smallest r >= 0 outside every interval reachable from r = 0, per ray."""
    reach = torch.zeros(lower.shape[0], dtype=config.dtype)
    # each pass either adopts a new interval or stops
    for _ in range(lower.shape[1] + 1):
        covering = (lower < reach[:, None]) & (upper > reach[:, None])
        extended = torch.where(covering, upper, reach[:, None]).amax(-1)
        if torch.equal(extended, reach):
            break
        reach = extended
    return reach


def membership_grid(
    region: RobustRegion, low: Tuple[float, float], high: Tuple[float, float], resolution: int = 200
) -> List[Dict[str, Any]]:
    """Rasterized 2-D membership rows (x, y, in_union, sub_count)."""
    if region.dimension != 2:
        raise InvalidRangeError("membership grids are 2-D only")
    xs = torch.linspace(low[0], high[0], resolution, dtype=config.dtype)
    ys = torch.linspace(low[1], high[1], resolution, dtype=config.dtype)
    gx, gy = torch.meshgrid(xs, ys, indexing="xy")
    points = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
    mask = region.sub_region_mask(points)
    return [
        {"x": float(p[0]), "y": float(p[1]), "in_union": int(m.any()), "sub_count": int(m.sum())}
        for p, m in zip(points, mask)
    ]


def half_space_rows(region: RobustRegion) -> List[Dict[str, Any]]:
    rows = []
    for h in region.half_spaces():
        row: Dict[str, Any] = {"anchor_index": h.anchor_index, "opponent_index": h.opponent_index}
        row.update({f"normal{i}": v for i, v in enumerate(h.normal.tolist())})
        row["offset"] = h.offset
        row.update({f"anchor{i}": v for i, v in enumerate(h.anchor.tolist())})
        rows.append(row)
    return rows
