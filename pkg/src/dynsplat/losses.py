"""Training objective: reconstruction (RGB + normalized depth + optional
perceptual hook), sky opacity loss, and velocity regularization.

total = recon + lambda_sky * sky + lambda_reg * reg. RGB uses mean squared
error, depth uses mean absolute error of (pred - gt) / max(gt) over valid
pixels, the sky term is L1 between rendered opacity and the non-sky
indicator (an MSE toggle exists), and the velocity term is the per-component
mean of squared velocities. The perceptual term is a pluggable hook, off by
default, gated behind a warmup step threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tp
from .tensor import Tensor


class NonFiniteLossError(RuntimeError):
    """Raised when any loss component stops being finite."""

    def __init__(self, parts: dict[str, float]):
        self.parts = parts
        super().__init__(f"non-finite loss components: {parts}")


@dataclass
class LossWeights:
    lambda_sky: float = 0.1
    lambda_reg: float = 5e-3
    lambda_lpips: float = 0.05
    lpips_warmup_steps: int = 5000
    sky_loss_mse: bool = False

    def __post_init__(self):
        if min(self.lambda_sky, self.lambda_reg, self.lambda_lpips) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


# perceptual hook: callable (pred_image, gt_image) -> scalar Tensor; None = off
_PERCEPTUAL_HOOK: Callable[[Tensor, np.ndarray], Tensor] | None = None

# incremented whenever a frame has no valid depth pixels
depth_empty_count = 0


def register_perceptual_hook(fn: Callable[[Tensor, np.ndarray], Tensor] | None) -> None:
    global _PERCEPTUAL_HOOK
    _PERCEPTUAL_HOOK = fn


def perceptual_hook_active(step: int, weights: LossWeights) -> bool:
    return _PERCEPTUAL_HOOK is not None and step >= weights.lpips_warmup_steps


def reset_counters() -> None:
    global depth_empty_count
    depth_empty_count = 0


def recon_loss(
    pred_rgb: Tensor,
    gt_rgb: np.ndarray,
    pred_depth: Tensor,
    gt_depth: np.ndarray,
    depth_valid: np.ndarray,
    weights: LossWeights | None = None,
    step: int = 0,
) -> Tensor:
    """Per-frame reconstruction loss; images in [-1, 1], depths in meters."""
    global depth_empty_count
    weights = weights or LossWeights()
    if pred_rgb.shape != gt_rgb.shape:
        raise ValueError(f"rgb shapes differ: {pred_rgb.shape} vs {gt_rgb.shape}")
    diff = pred_rgb - Tensor(gt_rgb.astype(pred_rgb.dtype))
    loss = (diff * diff).mean()

    valid = np.asarray(depth_valid, dtype=bool)
    if valid.any():
        dmax = float(gt_depth[valid].max())
        idx = np.flatnonzero(valid.reshape(-1))
        flat = tp.reshape(pred_depth, (int(np.prod(pred_depth.shape)),))
        picked = tp.take(flat, idx, axis=0)
        gt_sel = gt_depth.reshape(-1)[idx].astype(pred_depth.dtype)
        depth_term = tp.absolute((picked - Tensor(gt_sel)) * (1.0 / dmax)).mean()
        loss = loss + depth_term
    else:
        depth_empty_count += 1

    if perceptual_hook_active(step, weights):
        loss = loss + weights.lambda_lpips * _PERCEPTUAL_HOOK(pred_rgb, gt_rgb)
    return loss


def sky_loss(opacity: Tensor, sky_mask: np.ndarray, mse: bool = False) -> Tensor:
    """Push rendered opacity toward the non-sky indicator (1 - mask)."""
    target = (1.0 - np.asarray(sky_mask, dtype=np.float64)).astype(opacity.dtype)
    diff = opacity - Tensor(target)
    if mse:
        return (diff * diff).mean()
    return tp.absolute(diff).mean()


def velocity_reg(velocities: Tensor) -> Tensor:
    """Mean squared velocity component: ||v||^2 / 3 per half, averaged over halves."""
    if velocities.shape[0] == 0:
        return Tensor(np.zeros((), dtype=velocities.dtype))
    return (velocities * velocities).mean()


def total_loss(parts: dict[str, Tensor], weights: LossWeights | None = None) -> Tensor:
    """Weighted sum of named components; aborts on any non-finite part."""
    weights = weights or LossWeights()
    values = {name: float(t.numpy()) for name, t in parts.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(values)
    out = parts["recon"]
    if "sky" in parts:
        out = out + weights.lambda_sky * parts["sky"]
    if "reg" in parts:
        out = out + weights.lambda_reg * parts["reg"]
    return out
