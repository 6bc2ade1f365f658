"""Blur kernels: the deformable sparse kernel (DSK), the rigid blur kernel (RBK)
and the blurred-color composition.

Both kernels work on world-space rays. They return n rays per input ray,
laid out as (..., n, 3), together with softmax composition weights (..., n).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .errors import InvariantError
from .field import dense, encode, init_dense
from .geometry import Intrinsics, Pose, Ray, ScrewAxis, apply_screw, camera_rays, pixel_directions

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("none", "dsk", "rbk")


@dataclass
class KernelConfig:
    kind: str = "rbk"
    n: int = 5
    embed_dim: int = 32
    depth: int = 3
    width: int = 64
    window: float = 10.0
    head_init: float = 1e-5
    pixel_freqs: int = 4

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind '{self.kind}'")
        if self.n < 1:
            raise ValueError("a blur kernel needs at least one ray")

    def to_item(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RayBatch:
    """World-space rays of training pixels with the metadata the kernels need."""
    rays: Ray
    pixels: np.ndarray
    view_ids: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    intrinsics: Intrinsics


def pose_batch(pose: Pose, view_id: int, intr: Intrinsics, pixels: np.ndarray) -> RayBatch:
    """Batch of rays through `pixels` (..., 2) of a single training view."""
    lead = np.shape(pixels)[:-1]
    return RayBatch(
        rays=camera_rays(pose, intr.focal, intr.width, intr.height, pixels, intr.near, intr.far),
        pixels=pixels,
        view_ids=np.full(lead, view_id, dtype=np.int64),
        rotations=np.broadcast_to(pose.rotation, lead + (3, 3)),
        translations=np.broadcast_to(pose.translation, lead + (3,)),
        intrinsics=intr,
    )


@dataclass
class KernelOutput:
    rays: Ray
    weights: Any


class ViewEmbedding:
    """One learned latent vector per training image."""

    def __init__(self, name: str, n_views: int, dim: int, rng: np.random.Generator):
        self.name = f"{name}.embed"
        self.params = {self.name: rng.normal(0.0, 1.0, size=(n_views, dim))}

    def lookup(self, p: Dict[str, Any], view_ids: np.ndarray):
        return ad.take(p[self.name], view_ids, axis=0)


def compose_blur(colors, weights, tol: float = 1e-9):
    """Blurred color sum_q m_q C_q for colors (..., n, 3) and weights (..., n)."""
    w = ad.value_of(weights)
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise InvariantError("composition weights must be non-negative and sum to one")
    return ad.total(weights[..., None] * colors, axis=-2)


def rotate_directions(rotations: np.ndarray, dirs):
    """Apply per-ray rotation matrices (..., 3, 3) to directions (..., 3)."""
    return ad.total(rotations * dirs[..., None, :], axis=-1)


def dsk_rays(batch: RayBatch, origin_offsets, pixel_offsets) -> Ray:
    """Rays whose origins move by `origin_offsets` (..., n, 3) and whose pixel
    endpoints move by `pixel_offsets` (..., n, 2), directions re-derived
    through the intrinsics."""
    intr = batch.intrinsics
    endpoints = batch.pixels[..., None, :] + pixel_offsets
    dirs = pixel_directions(endpoints, intr.focal, intr.width, intr.height)
    world = rotate_directions(batch.rotations[..., None, :, :], dirs)
    origin = batch.translations[..., None, :] + origin_offsets
    return Ray(origin, world, batch.rays.near, batch.rays.far)


class BlurKernel:
    kind = "none"

    def __init__(self, config: KernelConfig, n_views: int, rng: np.random.Generator):
        self.config = config
        self.embedding = ViewEmbedding(self.kind, n_views, config.embed_dim, rng)
        self.params: Dict[str, np.ndarray] = dict(self.embedding.params)

    @property
    def n(self) -> int:
        return self.config.n

    def transform(self, p: Dict[str, Any], batch: RayBatch) -> KernelOutput:
        raise NotImplementedError

    def __call__(self, batch: RayBatch, tape: Optional[ad.Tape] = None) -> KernelOutput:
        return self.transform(ad.bind(self.params, tape), batch)


class DeformableSparseKernel(BlurKernel):
    """Per-pixel kernel: origin offsets and pixel-endpoint offsets around canonical seeds."""
    kind = "dsk"

    def __init__(self, config: KernelConfig, n_views: int, rng: np.random.Generator):
        super().__init__(config, n_views, rng)
        c = config
        half = 0.5 * c.window
        self.seed_name = "dsk.seeds"
        self.params[self.seed_name] = rng.uniform(-half, half, size=(c.n, 2))
        in_dim = 2 * (1 + 2 * c.pixel_freqs) + c.embed_dim
        sizes = [in_dim] + [c.width] * (c.depth - 1) + [c.n * 6]
        self.params.update(init_dense(rng, "dsk.mlp", sizes, zero_last=True))

    def transform(self, p, batch: RayBatch) -> KernelOutput:
        c = self.config
        intr = batch.intrinsics
        scale = np.array([intr.width, intr.height], dtype=np.float64)
        pix = encode(batch.pixels / scale, c.pixel_freqs)
        features = ad.concatenate([pix, self.embedding.lookup(p, batch.view_ids)], axis=-1)
        out = dense(p, "dsk.mlp", features, c.depth)
        lead = np.shape(ad.value_of(out))[:-1]
        out = ad.reshape(out, lead + (c.n, 6))
        origin_offsets = out[..., 0:3]
        pixel_offsets = p[self.seed_name] + out[..., 3:5]
        weights = ad.softmax(out[..., 5], axis=-1)
        return KernelOutput(dsk_rays(batch, origin_offsets, pixel_offsets), weights)


class RigidBlurKernel(BlurKernel):
    """Per-view kernel: n - 1 screw motions shared by every pixel of a view.

    Slot 0 is always the untransformed ray.
    """
    kind = "rbk"

    def __init__(self, config: KernelConfig, n_views: int, rng: np.random.Generator):
        super().__init__(config, n_views, rng)
        c = config
        hidden = [c.embed_dim] + [c.width] * (c.depth - 1)
        self.params.update(init_dense(rng, "rbk.trunk", hidden))
        self.params.update(init_dense(rng, "rbk.screw", [c.width, max(c.n - 1, 1) * 6],
                                      zero_last=c.head_init == 0, last_scale=c.head_init or None))
        self.params.update(init_dense(rng, "rbk.weight", [c.width, c.n], zero_last=True))

    def view_screws(self, p, view_ids: np.ndarray):
        """Screw vectors (V, n - 1, 6) and weight logits (V, n) for the given views."""
        c = self.config
        h = dense(p, "rbk.trunk", self.embedding.lookup(p, view_ids), c.depth - 1, final_activation=True)
        screws = ad.reshape(dense(p, "rbk.screw", h, 1), (len(view_ids), max(c.n - 1, 1), 6))
        logits = dense(p, "rbk.weight", h, 1)
        return screws, logits

    def screws_for(self, p, view_id: int) -> List[ScrewAxis]:
        screws, _ = self.view_screws(p, np.array([view_id]))
        return [ScrewAxis(screws[0, q, 0:3], screws[0, q, 3:6]) for q in range(self.n - 1)]

    def transform(self, p, batch: RayBatch) -> KernelOutput:
        views, inverse = np.unique(np.asarray(batch.view_ids), return_inverse=True)
        screws, logits = self.view_screws(p, views)
        per_ray = ad.take(screws, inverse.reshape(np.shape(batch.view_ids)), axis=0)
        weights = ad.softmax(ad.take(logits, inverse.reshape(np.shape(batch.view_ids)), axis=0), axis=-1)
        ray = batch.rays
        origin = ray.origin[..., None, :]
        direction = ray.direction[..., None, :]
        if self.n == 1:
            return KernelOutput(Ray(origin, direction, ray.near, ray.far), weights)
        moved = apply_screw(Ray(origin, direction, ray.near, ray.far),
                            ScrewAxis(per_ray[..., 0:3], per_ray[..., 3:6]))
        lead = np.shape(ad.value_of(moved.origin))
        origins = ad.concatenate([origin + np.zeros(lead[:-2] + (1, 3)), moved.origin], axis=-2)
        directions = ad.concatenate([direction + np.zeros(lead[:-2] + (1, 3)), moved.direction], axis=-2)
        return KernelOutput(Ray(origins, directions, ray.near, ray.far), weights)


def build_kernel(config: KernelConfig, n_views: int, rng: np.random.Generator) -> Optional[BlurKernel]:
    if config.kind == "none":
        logger.info("No blur kernel; training renders sharp rays directly")
        return None
    kernel_cls = DeformableSparseKernel if config.kind == "dsk" else RigidBlurKernel
    logger.info(f"Blur kernel {config.kind}: {config.n} rays per pixel over {n_views} views")
    return kernel_cls(config, n_views, rng)


def hidden_rays(p, batch: RayBatch, kernel: BlurKernel) -> List[Ray]:
    """The n kernel-transformed copies of a ray patch."""
    out = kernel.transform(p, batch).rays
    return [Ray(out.origin[..., q, :], out.direction[..., q, :], out.near, out.far) for q in range(kernel.n)]


def weight_entropy(weights: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of composition weights (..., n)."""
    w = np.clip(np.asarray(weights, dtype=np.float64), 1e-300, 1.0)
    return float(np.mean(-np.sum(w * np.log(w), axis=-1)))
