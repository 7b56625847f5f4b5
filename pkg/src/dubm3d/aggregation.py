"""Weighted scatter of patch stacks back to the image grid, and its transpose.

For a fixed plan the map stacks -> image is linear:

    out[p] = sum_{slots s covering p} w_g(s) * S[s] / den[p],
    den[p] = sum_{slots s covering p} w_g(s)

so its adjoint sends an image-domain gradient Y to ``w_g * Y[p] / den[p]``
in every slot.  ``aggregate_tensor`` registers exactly this pair on the tape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .matching import MatchPlan


class CoverageError(ValueError):
    pass


def denominator(plan: MatchPlan) -> np.ndarray:
    """Per-pixel sum of group weights over covering slots (cached on the plan)."""
    if plan._denominator is None:
        idx = plan.pixel_index()
        h, w = plan.image_shape
        wts = np.broadcast_to(plan.weights[:, None, None, None], idx.shape)
        den = np.bincount(idx.ravel(), weights=wts.ravel(), minlength=h * w).reshape(h, w)
        plan._denominator = den
    return plan._denominator


def check_coverage(plan: MatchPlan) -> None:
    if np.any(plan.weights <= 0):
        raise CoverageError("group weights must be positive")
    den = denominator(plan)
    if np.any(den <= 0):
        rows, cols = np.nonzero(den <= 0)
        raise CoverageError(f"{len(rows)} pixels not covered by the plan, first at ({rows[0]}, {cols[0]})")


def _check_stacks(stacks: np.ndarray, plan: MatchPlan) -> None:
    p, k = plan.config.patch, plan.config.group_size
    expected = (plan.num_groups, k, p, p)
    if tuple(stacks.shape) != expected:
        raise ValueError(f"stacks shape {tuple(stacks.shape)} does not match plan {expected}")


def aggregate(stacks, plan: MatchPlan) -> np.ndarray:
    stacks = np.asarray(stacks)
    _check_stacks(stacks, plan)
    check_coverage(plan)
    h, w = plan.image_shape
    idx = plan.pixel_index()
    num = np.bincount(
        idx.ravel(),
        weights=(stacks.astype(np.float64) * plan.weights[:, None, None, None]).ravel(),
        minlength=h * w,
    ).reshape(h, w)
    return (num / denominator(plan)).astype(np.float32)


def aggregate_adjoint(grad_image, plan: MatchPlan) -> np.ndarray:
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != tuple(plan.image_shape):
        raise ValueError(f"gradient shape {grad_image.shape} does not match plan {tuple(plan.image_shape)}")
    check_coverage(plan)
    scaled = (grad_image / denominator(plan)).reshape(-1)
    return (scaled[plan.pixel_index()] * plan.weights[:, None, None, None]).astype(np.float32)


def aggregate_tensor(stacks: T.Tensor, plan: MatchPlan) -> T.Tensor:
    """Differentiable aggregation; the plan and its weights receive no gradient."""
    out = aggregate(stacks.data, plan)
    return T.record("aggregate", (stacks,), out, lambda g: (aggregate_adjoint(g, plan),))
