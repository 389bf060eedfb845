"""Differentiable weak-supervision losses over a probability map.

A probability map is a 2-D torch tensor with values in [0, 1].  Every loss
is a sum over pixels (never a mean), so the weighting constants keep their
per-sample meaning, and every loss is differentiable with respect to the
probability map through autograd.

Three constraints are enforced:
  * emptiness  -- the region outside the box carries no foreground,
  * tightness  -- every width-w band across the box carries mass >= w,
  * size       -- total mass stays within [eps_lo, eps_hi] * |box|.

Inequality slacks are turned into losses by a penalty function: either a
scaled ReLU t*max(0, z), or a pseudo log-barrier that is logarithmic on
the feasible side (z <= -1/t^2) and extended linearly, once
differentiably, on the infeasible side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ShapeMismatch
from .geometry import RegionPartition, SegmentSet

# Probabilities are clamped to [EPS, 1-EPS] before logs; applied
# identically in the reference oracles.
PROBABILITY_EPS = 1e-7

PENALTY_KINDS = ("scaled_relu", "pseudo_log_barrier")


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty shape and sharpness t (> 0)."""

    kind: str = "pseudo_log_barrier"
    t: float = 5.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not self.t > 0:
            raise ValueError("penalty sharpness t must be > 0")


@dataclass(frozen=True)
class SizePrior:
    """Foreground fraction bounds relative to the box area."""

    eps_lo: float = 0.5
    eps_hi: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.eps_lo <= self.eps_hi <= 1.0):
            raise ValueError("need 0 <= eps_lo <= eps_hi <= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_tight: float = 0.0001
    lambda_size: float = 0.01

    def __post_init__(self):
        if self.lambda_tight < 0 or self.lambda_size < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    """Per-term values; total = empty + lt*tight + ls*size.

    Fields are 0-dim tensors when produced inside a graph; use floats()
    for logging.
    """

    empty: Tensor
    tight: Tensor
    size: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "empty": float(self.empty.detach()),
            "tight": float(self.tight.detach()),
            "size": float(self.size.detach()),
            "total": float(self.total.detach()),
        }


def penalty(z, cfg: PenaltyConfig):
    """Apply the configured penalty to slack z (tensor or float).

    scaled_relu:        t * max(0, z)
    pseudo_log_barrier: -(1/t) * ln(-z)            for z <= -1/t^2
                        t*z - (1/t)*ln(1/t^2) + 1/t otherwise
    Monotone non-decreasing and finite for all finite z.
    """
    scalar = not isinstance(z, Tensor)
    zt = torch.as_tensor(z, dtype=torch.float64) if scalar else z
    t = cfg.t
    if cfg.kind == "scaled_relu":
        out = t * torch.relu(zt)
    else:
        breakpoint_ = -1.0 / (t * t)
        # clamp keeps the unselected log branch finite so backward stays NaN-free
        safe = torch.clamp(-zt, min=1.0 / (t * t))
        log_branch = -(1.0 / t) * torch.log(safe)
        lin_branch = t * zt - (1.0 / t) * math.log(1.0 / (t * t)) + 1.0 / t
        out = torch.where(zt <= breakpoint_, log_branch, lin_branch)
    return float(out) if scalar else out


def emptiness_loss(f: Tensor, part: RegionPartition) -> Tensor:
    """-sum over outside pixels of ln(1 - f(p)), clamped."""
    if tuple(f.shape) != tuple(part.shape):
        raise ShapeMismatch(f"map {tuple(f.shape)} vs partition {part.shape}")
    outside = torch.from_numpy(part.outside)
    if not bool(outside.any()):
        return f.sum() * 0.0  # empty sum, keeps graph and dtype
    fc = f[outside].clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
    return -torch.log(1.0 - fc).sum()


def tightness_loss(f: Tensor, segs: SegmentSet, cfg: PenaltyConfig) -> Tensor:
    """Sum of penalties on (threshold - band mass) over all bands."""
    h, w = f.shape
    slacks = []
    for band in segs:
        if band.rmax >= h or band.cmax >= w:
            raise ShapeMismatch(f"band {band} exceeds map shape {tuple(f.shape)}")
        mass = f[band.rmin : band.rmax + 1, band.cmin : band.cmax + 1].sum()
        slacks.append(band.threshold - mass)
    if not slacks:
        return f.sum() * 0.0
    return penalty(torch.stack(slacks), cfg).sum()


def size_loss(
    f: Tensor, part: RegionPartition, prior: SizePrior, cfg: PenaltyConfig
) -> Tensor:
    """Two-sided penalty keeping total mass within the size prior.

    The mass is summed over the whole grid (not only the box interior).
    """
    if tuple(f.shape) != tuple(part.shape):
        raise ShapeMismatch(f"map {tuple(f.shape)} vs partition {part.shape}")
    mass = f.sum()
    lo = prior.eps_lo * part.inside_count
    hi = prior.eps_hi * part.inside_count
    return penalty(lo - mass, cfg) + penalty(mass - hi, cfg)


def total_loss(
    f: Tensor,
    part: RegionPartition,
    segs: SegmentSet,
    weights: LossWeights,
    prior: SizePrior,
    cfg: PenaltyConfig,
) -> LossBreakdown:
    """Weighted combination of the three constraint losses."""
    empty = emptiness_loss(f, part)
    tight = tightness_loss(f, segs, cfg)
    size = size_loss(f, part, prior, cfg)
    total = empty + weights.lambda_tight * tight + weights.lambda_size * size
    return LossBreakdown(empty=empty, tight=tight, size=size, total=total)
