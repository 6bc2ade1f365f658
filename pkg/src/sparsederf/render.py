"""Stratified and hierarchical sampling, volume rendering and patch rendering."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .field import RadianceField
from .geometry import Intrinsics, Pose, Ray, camera_rays, to_render_space

logger = logging.getLogger(__name__)

# minimum gap between merged samples
_MIN_GAP = 1e-9


@dataclass
class RaySamples:
    """Per-sample quantities along a batch of rays; the last axis indexes samples."""
    t: np.ndarray
    delta: np.ndarray
    rgb: Any
    sigma: Any
    distance: Optional[np.ndarray] = None


@dataclass
class RenderOutput:
    color: Any
    depth: Any
    weights: Any
    transmittance: Any
    acc: Any
    t: np.ndarray


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    normalize_depth: bool = False


SampleHook = Callable[[RaySamples], RaySamples]


# -------------------- sampling --------------------

def stratified_from_uniform(near: float, far: float, u: np.ndarray) -> np.ndarray:
    """One sample per equal bin; u (..., N) in [0, 1) is the in-bin offset."""
    n = u.shape[-1]
    edges = near + (far - near) * np.arange(n) / n
    return edges + (far - near) / n * u


def stratified_sample(near: float, far: float, n: int, rng: Optional[np.random.Generator], shape: Tuple[int, ...] = ()) -> np.ndarray:
    """Stratified t values in [near, far]; bin midpoints when `rng` is None."""
    if not near < far:
        raise ValueError("near must be smaller than far")
    if n < 1:
        raise ValueError("at least one sample is required")
    u = np.full(shape + (n,), 0.5) if rng is None else rng.uniform(size=shape + (n,))
    return stratified_from_uniform(near, far, u)


def sample_deltas(t: np.ndarray, far: float) -> np.ndarray:
    """Interval lengths; the last interval ends at the far bound."""
    tail = np.maximum(far - t[..., -1:], 0.0)
    return np.concatenate([np.diff(t, axis=-1), tail], axis=-1)


def _bin_edges(t: np.ndarray, near: float, far: float) -> np.ndarray:
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    lead = t.shape[:-1]
    return np.concatenate([np.full(lead + (1,), near), mids, np.full(lead + (1,), far)], axis=-1)


def _strictly_increasing(t: np.ndarray) -> np.ndarray:
    if np.all(np.diff(t, axis=-1) > 0):
        return t
    steps = np.arange(t.shape[-1]) * _MIN_GAP
    return np.maximum.accumulate(t - steps, axis=-1) + steps


def sample_pdf(t: np.ndarray, weights: np.ndarray, u: np.ndarray, near: float, far: float) -> np.ndarray:
    """Inverse-CDF samples of the piecewise-constant pdf over the bins of `t`.

    Each coarse sample owns the bin between its neighbouring midpoints.
    Rays whose weights are all zero fall back to stratified samples.
    """
    t = np.asarray(t, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("sampling weights must be non-negative")
    lead = t.shape[:-1]
    s = t.shape[-1]
    flat_t = t.reshape(-1, s)
    flat_w = w.reshape(-1, s)
    flat_u = u.reshape(-1, u.shape[-1])
    edges = _bin_edges(flat_t, near, far)
    mass = flat_w.sum(axis=-1, keepdims=True)
    empty = mass[:, 0] <= 0
    pdf = flat_w / np.where(mass > 0, mass, 1.0)
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    idx = np.sum(flat_u[:, :, None] >= cdf[:, None, :], axis=-1) - 1
    idx = np.clip(idx, 0, s - 1)
    lo = np.take_along_axis(cdf, idx, axis=-1)
    hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    width = hi - lo
    frac = np.where(width > 0, (flat_u - lo) / np.where(width > 0, width, 1.0), 0.0)
    e_lo = np.take_along_axis(edges, idx, axis=-1)
    e_hi = np.take_along_axis(edges, idx + 1, axis=-1)
    fine = e_lo + np.clip(frac, 0.0, 1.0) * (e_hi - e_lo)
    if np.any(empty):
        fine[empty] = stratified_from_uniform(near, far, flat_u[empty])
    return fine.reshape(lead + (fine.shape[-1],))


def hierarchical_from_uniform(t: np.ndarray, weights: np.ndarray, u: np.ndarray, near: float, far: float) -> np.ndarray:
    """Fine samples from `sample_pdf` merged and sorted with the coarse ones."""
    fine = sample_pdf(t, weights, u, near, far)
    merged = np.sort(np.concatenate([np.asarray(t, dtype=np.float64), fine], axis=-1), axis=-1)
    return _strictly_increasing(merged)


def hierarchical_sample(t: np.ndarray, weights: np.ndarray, n_fine: int, rng: Optional[np.random.Generator], near: float, far: float) -> np.ndarray:
    """Draw `n_fine` importance samples from normalized weights; evenly spaced CDF levels when `rng` is None."""
    lead = np.shape(t)[:-1]
    if rng is None:
        u = np.broadcast_to(np.linspace(0.0, 1.0, n_fine, endpoint=False) + 0.5 / n_fine, lead + (n_fine,))
    else:
        u = rng.uniform(size=lead + (n_fine,))
    return hierarchical_from_uniform(t, weights, u, near, far)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def keyed_uniforms(keys: np.ndarray, n: int, stream: int = 0) -> np.ndarray:
    """Counter-based uniforms in [0, 1): row i of `keys` alone decides row i of the output."""
    keys = np.asarray(keys, dtype=np.int64)
    h = np.full(keys.shape[:-1], stream, dtype=np.uint64)
    for col in range(keys.shape[-1]):
        h = _splitmix(h ^ keys[..., col].astype(np.uint64))
    counters = np.arange(n, dtype=np.uint64)
    bits = _splitmix(h[..., None] + counters * _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def ray_uniforms(keys: Optional[np.ndarray], n_coarse: int, n_fine: int, lead: Tuple[int, ...]) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Per-ray uniform draws for the coarse and fine passes.

    Rendering a ray alone or inside a batch uses identical draws. Returns
    (None, None) for deterministic rendering.
    """
    if keys is None:
        return None, None
    keys = np.broadcast_to(np.asarray(keys, dtype=np.int64), lead + (np.shape(keys)[-1],))
    return keyed_uniforms(keys, n_coarse, stream=1), keyed_uniforms(keys, n_fine, stream=2)


def pixel_keys(seed: int, step: int, view, pixels: np.ndarray) -> np.ndarray:
    """Sampler keys (seed, step, view, x, y) for integer pixel coordinates (..., 2).

    `view` is a scalar or an array broadcastable to the pixel layout.
    """
    pix = np.asarray(np.rint(pixels), dtype=np.int64)
    lead = pix.shape[:-1]
    head = np.stack([np.broadcast_to(np.asarray(v, dtype=np.int64), lead) for v in (seed, step, view)], axis=-1)
    return np.concatenate([head, pix % (1 << 31)], axis=-1)


# -------------------- volume rendering --------------------

def volume_render(samples: RaySamples, normalize_depth: bool = False) -> RenderOutput:
    """Composite per-sample colors and densities along each ray."""
    tau = samples.sigma * samples.delta
    alpha = 1.0 - ad.exp(-tau)
    transmittance = ad.exp(-ad.cumsum(tau, axis=-1, exclusive=True))
    weights = transmittance * alpha
    color = ad.total(weights[..., None] * samples.rgb, axis=-2)
    depth = ad.total(weights * samples.t, axis=-1)
    acc = ad.total(weights, axis=-1)
    if normalize_depth:
        depth = depth / ad.maximum_const(acc, 1e-10)
    return RenderOutput(color, depth, weights, transmittance, acc, samples.t)


class Renderer:
    """Coarse-to-fine renderer over a pair of radiance fields."""

    def __init__(self, coarse: RadianceField, fine: Optional[RadianceField], config: RenderConfig):
        self.coarse = coarse
        self.fine = fine
        self.config = config

    @property
    def params(self) -> Dict[str, np.ndarray]:
        params = dict(self.coarse.params)
        if self.fine is not None:
            params.update(self.fine.params)
        return params

    def _evaluate(self, field: RadianceField, p, ray: Ray, viewdirs, t: np.ndarray, hook: Optional[SampleHook]) -> RenderOutput:
        """Field outputs at samples `t` along `ray`, composited after the optional hook.

        The distance handed to the hook is (t - near) / (far - near). In NDC that
        is t itself. For metric rays it is the sample depth rescaled to [0, 1],
        not the raw distance |s - o|.
        """
        points = ray.at(t)
        rgb, sigma = field.forward(p, points, viewdirs[..., None, :])
        distance = (t - ray.near) / (ray.far - ray.near)
        samples = RaySamples(t, sample_deltas(t, ray.far), rgb, sigma, distance)
        if hook is not None:
            samples = hook(samples)
        return volume_render(samples, self.config.normalize_depth)

    def render(
        self,
        p: Dict[str, Any],
        ray: Ray,
        viewdirs,
        keys: Optional[np.ndarray] = None,
        hook: Optional[SampleHook] = None,
    ) -> Tuple[RenderOutput, Optional[RenderOutput]]:
        """Render (coarse, fine) outputs for render-space rays.

        `keys` seeds per-ray sampling; None renders deterministically.
        """
        cfg = self.config
        lead = np.shape(ad.value_of(ray.origin))[:-1]
        u_c, u_f = ray_uniforms(keys, cfg.n_coarse, cfg.n_fine, lead)
        if u_c is None:
            t_c = stratified_sample(ray.near, ray.far, cfg.n_coarse, None, lead)
        else:
            t_c = stratified_from_uniform(ray.near, ray.far, u_c)
        coarse = self._evaluate(self.coarse, p, ray, viewdirs, t_c, hook)
        if self.fine is None or cfg.n_fine == 0:
            return coarse, None
        w = ad.value_of(coarse.weights)
        if u_f is None:
            t_f = hierarchical_sample(t_c, w, cfg.n_fine, None, ray.near, ray.far)
        else:
            t_f = hierarchical_from_uniform(t_c, w, u_f, ray.near, ray.far)
        fine = self._evaluate(self.fine, p, ray, viewdirs, t_f, hook)
        return coarse, fine


def final(outputs: Tuple[RenderOutput, Optional[RenderOutput]]) -> RenderOutput:
    coarse, fine = outputs
    return coarse if fine is None else fine


# -------------------- patches and images --------------------

def patch_pixels(x0: int, y0: int, k: int) -> np.ndarray:
    """(k, k, 2) pixel coordinates of a square rect, row-major."""
    ys, xs = np.meshgrid(np.arange(y0, y0 + k, dtype=np.float64),
                         np.arange(x0, x0 + k, dtype=np.float64), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def pose_rays(pose: Pose, intr: Intrinsics, pixels) -> Ray:
    return camera_rays(pose, intr.focal, intr.width, intr.height, pixels, intr.near, intr.far)


@dataclass
class PatchRender:
    color: Any
    depth: Any
    outputs: Tuple[RenderOutput, Optional[RenderOutput]]


def render_world_rays(renderer: Renderer, p, world: Ray, intr: Intrinsics, keys=None, hook=None) -> Tuple[RenderOutput, Optional[RenderOutput]]:
    ray, viewdirs = to_render_space(world, intr)
    return renderer.render(p, ray, viewdirs, keys, hook)


def render_patch(
    renderer: Renderer,
    p,
    pose: Pose,
    intr: Intrinsics,
    x0: int,
    y0: int,
    k: int,
    keys: Optional[np.ndarray] = None,
    hook: Optional[SampleHook] = None,
    depth_from_coarse: bool = False,
) -> PatchRender:
    """Color (k, k, 3) and depth (k, k) of a k x k pixel rect."""
    pixels = patch_pixels(x0, y0, k)
    outputs = render_world_rays(renderer, p, pose_rays(pose, intr, pixels), intr, keys, hook)
    out = final(outputs)
    depth_src = outputs[0] if depth_from_coarse else out
    return PatchRender(out.color, depth_src.depth, outputs)


def render_image(
    renderer: Renderer,
    pose: Pose,
    intr: Intrinsics,
    chunk: int = 256,
    threads: int = 1,
    params: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic full-image render without a tape: (H, W, 3) color, (H, W) depth."""
    p = params if params is not None else renderer.params
    pixels = intr.pixel_grid().reshape(-1, 2)
    starts = list(range(0, len(pixels), chunk))
    logger.debug(f"Rendering {intr.width}x{intr.height} in {len(starts)} chunks on {threads} threads")

    def run(start: int) -> Tuple[np.ndarray, np.ndarray]:
        out = final(render_world_rays(renderer, p, pose_rays(pose, intr, pixels[start:start + chunk]), intr))
        return out.color, out.depth

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    color = np.concatenate([c for c, _ in parts]).reshape(intr.height, intr.width, 3)
    depth = np.concatenate([d for _, d in parts]).reshape(intr.height, intr.width)
    return color, depth
