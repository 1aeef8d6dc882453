"""Noise-mechanism primitives: per-sample L2 clipping and calibrated Gaussian noise.

These are the two operations that turn an ordinary optimizer into a noisy
one: each per-sample gradient is rescaled so its global L2 norm is at most R,
and the aggregate receives Gaussian noise whose scale is sigma * R.

Two noise placements are supported:

* ``"after-mean"`` (default): noise of full scale sigma*R is added to the
  *averaged* clipped gradient. This injects batch_size times more noise per
  coordinate than the sum-sensitivity analysis requires, so it is at least
  as private under the accountant used here.
* ``"on-sum"``: noise of scale sigma*R is added to the *sum* of clipped
  gradients before dividing by the batch size. This matches the sensitivity
  analysis behind the accountant and the behavior of mainstream DP-SGD
  libraries.

The two placements coincide exactly for batches of size one.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .tensor import GradientSet

__all__ = [
    "ClipSpec",
    "NoiseSpec",
    "NOISE_PLACEMENTS",
    "clip_gradient",
    "gaussian_noise",
    "aggregate_noisy",
]

NOISE_PLACEMENTS = ("after-mean", "on-sum")


@dataclass(frozen=True)
class ClipSpec:
    """Gradient norm bound R: the global L2 norm across all parameter tensors
    of one sample's gradient is clipped to at most R."""

    max_norm: float

    def __post_init__(self):
        if not (np.isfinite(self.max_norm) and self.max_norm > 0):
            raise ValueError(f"clip norm must be positive and finite, got {self.max_norm}")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise scale sigma (a multiplier on the clip norm R) and an RNG seed."""

    sigma: float
    seed: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"noise sigma must be >= 0 and finite, got {self.sigma}")

    def make_rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))


def clip_gradient(grad: GradientSet, spec: ClipSpec) -> GradientSet:
    """Rescale ``grad`` to global L2 norm at most ``spec.max_norm``.

    Returns grad / max(1, ||grad|| / R). Direction is preserved; gradients
    already within the bound pass through unchanged (division by exactly 1).
    """
    norm = grad.global_norm()
    if not np.isfinite(norm):
        raise ValueError("cannot clip a non-finite gradient")
    factor = max(1.0, norm / spec.max_norm)
    return GradientSet([a / factor for a in grad.arrays])


def gaussian_noise(
    shapes: Sequence[tuple[int, ...]],
    scale: float,
    rng: np.random.Generator,
) -> GradientSet:
    """Independent N(0, scale^2) noise for each coordinate of each shape.

    Tensors are drawn in the given order from the single ``rng`` stream, so
    identical generator states produce identical noise. Callers that need
    parallel noise must split seeds explicitly.
    """
    if scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {scale}")
    return GradientSet([rng.standard_normal(s) * scale for s in shapes])


def aggregate_noisy(
    per_sample: Sequence[GradientSet],
    clip: ClipSpec,
    noise: NoiseSpec,
    rng: np.random.Generator,
    placement: str = "after-mean",
) -> GradientSet:
    """Clip every per-sample gradient, average, and add Gaussian noise.

    ``placement`` selects where the sigma*R noise enters (see module
    docstring). Per-sample gradients are summed in list order so results are
    reproducible.
    """
    if not per_sample:
        raise ValueError("aggregate_noisy needs a non-empty batch")
    if placement not in NOISE_PLACEMENTS:
        raise ValueError(f"unknown noise placement {placement!r}")
    shapes = per_sample[0].shapes
    for gs in per_sample[1:]:
        if gs.shapes != shapes:
            raise ValueError("per-sample gradients are not shape-aligned")

    batch = len(per_sample)
    acc = [np.array(a, copy=True) for a in clip_gradient(per_sample[0], clip).arrays]
    for gs in per_sample[1:]:
        for a, b in zip(acc, clip_gradient(gs, clip).arrays):
            a += b

    draw = gaussian_noise(shapes, noise.sigma * clip.max_norm, rng)
    if placement == "after-mean":
        return GradientSet([s / batch + n for s, n in zip(acc, draw.arrays)])
    return GradientSet([(s + n) / batch for s, n in zip(acc, draw.arrays)])
