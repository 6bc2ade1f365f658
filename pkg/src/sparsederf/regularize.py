"""Sparse-view regularizers: modulated gradient scaling, surface smoothness on
unobserved rays, perceptual distillation, and the loss assembly."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .blur import BlurKernel, RayBatch, hidden_rays, pose_batch
from .features import FeatureExtractor
from .geometry import Intrinsics, Pose, Ray
from .render import RaySamples, patch_pixels, pose_rays

logger = logging.getLogger(__name__)

MGS_MODES = ("off", "naive", "modulated")

# tolerance before an out-of-range distance is reported
_DISTANCE_SLACK = 1e-9


@dataclass
class MGSConfig:
    rho: float = 10.0
    eta: float = 1.75
    mode: str = "modulated"

    def __post_init__(self):
        if self.mode not in MGS_MODES:
            raise ValueError(f"unknown gradient scaling mode '{self.mode}'")
        if self.mode == "modulated":
            if not 1.0 <= self.rho <= 10.0:
                raise ValueError(f"rho must lie in [1, 10], got {self.rho}")
            if not 0.5 <= self.eta < 2.0:
                raise ValueError(f"eta must lie in [0.5, 2), got {self.eta}")

    def to_item(self) -> Dict[str, Any]:
        return asdict(self)


def mgs_curve(delta, rho: float, eta: float, mode: str = "modulated") -> np.ndarray:
    """min(1, J(delta)) without range checks on rho and eta."""
    delta = np.asarray(delta, dtype=np.float64)
    if mode == "off":
        return np.ones_like(delta)
    if mode == "naive":
        return np.minimum(1.0, delta ** 2)
    j = rho * (np.sin(eta * np.pi * (delta + 3.0 / (2.0 * eta))) + 1.0)
    return np.clip(j, 0.0, 1.0)


def mgs_value(delta, cfg: MGSConfig) -> np.ndarray:
    """Backward scale for samples at normalized distance `delta`."""
    delta = np.asarray(delta, dtype=np.float64)
    outside = (delta < -_DISTANCE_SLACK) | (delta > 1.0 + _DISTANCE_SLACK)
    if np.any(outside):
        logger.warning(f"Clamping {int(np.sum(outside))} sample distances outside [0, 1] for gradient scaling")
    return mgs_curve(np.clip(delta, 0.0, 1.0), cfg.rho, cfg.eta, cfg.mode)


def apply_mgs(samples: RaySamples, cfg: MGSConfig) -> RaySamples:
    """Wrap per-sample color and density in backward-only scale nodes."""
    if cfg.mode == "off":
        return samples
    delta = samples.t if samples.distance is None else samples.distance
    factor = mgs_value(delta, cfg)
    return replace(
        samples,
        rgb=ad.grad_scale(samples.rgb, factor[..., None]),
        sigma=ad.grad_scale(samples.sigma, factor),
    )


# -------------------- surface smoothness --------------------

def smoothness_weights(color: np.ndarray):
    """exp(-|dC|^2) for vertical (k-1, k) and horizontal (k, k-1) neighbour pairs."""
    c = np.asarray(color, dtype=np.float64)
    dv = np.sum((c[..., :-1, :, :] - c[..., 1:, :, :]) ** 2, axis=-1)
    dh = np.sum((c[..., :, :-1, :] - c[..., :, 1:, :]) ** 2, axis=-1)
    return np.exp(-dv), np.exp(-dh)


def surface_smoothness_loss(depth, color) -> Any:
    """Color-weighted squared depth differences over right and down neighbours.

    `depth` is (..., k, k) and `color` (..., k, k, 3); leading axes index
    patches and are summed. Color weights carry no gradient.
    """
    wv, wh = smoothness_weights(ad.value_of(color))
    dv = depth[..., :-1, :] - depth[..., 1:, :]
    dh = depth[..., :, :-1] - depth[..., :, 1:]
    return ad.total(wv * dv * dv) + ad.total(wh * dh * dh)


@dataclass
class UnobservedPatch:
    """World-space ray patch (k, k) that has no ground-truth color."""
    rays: Ray
    pixels: np.ndarray
    source: str
    key: int


def random_rect(rng: np.random.Generator, intr: Intrinsics, k: int):
    x0 = int(rng.integers(0, intr.width - k + 1))
    y0 = int(rng.integers(0, intr.height - k + 1))
    return x0, y0


def patch_batch(pose: Pose, view_id: int, intr: Intrinsics, x0: int, y0: int, k: int) -> RayBatch:
    return pose_batch(pose, view_id, intr, patch_pixels(x0, y0, k))


def integrated_unobserved_patches(
    p,
    train_patch: RayBatch,
    kernel: Optional[BlurKernel],
    unseen_poses: Sequence[Pose],
    intr: Intrinsics,
    rng: np.random.Generator,
    k: int,
) -> List[UnobservedPatch]:
    """Hidden-ray patches of a training patch plus one random patch per unseen pose."""
    patches: List[UnobservedPatch] = []
    if kernel is None:
        hidden = [train_patch.rays]
    else:
        hidden = hidden_rays(p, train_patch, kernel)
    for q, rays in enumerate(hidden):
        patches.append(UnobservedPatch(rays, train_patch.pixels, "hidden", q))
    for i, pose in enumerate(unseen_poses):
        x0, y0 = random_rect(rng, intr, k)
        pixels = patch_pixels(x0, y0, k)
        patches.append(UnobservedPatch(pose_rays(pose, intr, pixels), pixels, "unseen", i))
    return patches


# -------------------- perceptual distillation --------------------

def perceptual_loss(rendered, target_features: np.ndarray, extractor: FeatureExtractor) -> Any:
    """Squared feature distance between a rendered patch and precomputed target features."""
    diff = extractor(rendered) - np.asarray(target_features, dtype=np.float64)
    return ad.total(diff * diff)


def perceptual_loss_patches(rendered, deblurred: np.ndarray, extractor: FeatureExtractor) -> Any:
    """Perceptual loss against a pre-deblurred image patch; gradient reaches `rendered` only."""
    return perceptual_loss(rendered, extractor(np.asarray(deblurred, dtype=np.float64)), extractor)


# -------------------- losses --------------------

def reconstruction_loss(predictions: Sequence[Any], target: np.ndarray) -> Any:
    """Sum over render passes of the mean squared color error."""
    loss = 0.0
    for pred in predictions:
        diff = pred - target
        loss = loss + ad.total(diff * diff) / float(np.size(target))
    return loss


def total_loss(recon, ss, pd, lambda_ss: float = 0.01, lambda_pd: float = 0.01):
    return recon + lambda_ss * ss + lambda_pd * pd
