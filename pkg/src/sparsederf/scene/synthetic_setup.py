"""Synthetic forward-blur scene generator.

Renders an analytic soft-sphere field from a forward-facing camera arc,
then blurs every training view with ground-truth rigid camera shake:
B = sum_q m*_q C(exp(S*_q) rays). Sharp images, blurry images, the manifest
and the ground-truth sidecar are written to the output directory.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from ..geometry import Intrinsics, Pose, Ray, ScrewAxis, apply_screw, look_at, ndc_project
from ..render import RaySamples, pose_rays, stratified_sample, volume_render
from .domain_models import BlurTruth, SceneManifest, SyntheticSceneSpec, ViewRecord
from .scene_repository import SceneRepository

logger = logging.getLogger(__name__)


@dataclass
class SyntheticScene:
    manifest: SceneManifest
    truth: Dict[str, BlurTruth]
    sharp: Dict[str, np.ndarray]
    blurry: Dict[str, np.ndarray]


def analytic_field(spec: SyntheticSceneSpec, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Density sum_k a_k exp(-|x - c_k|^2 / 2 r_k^2) and the density-weighted color blend."""
    sigma = np.zeros(points.shape[:-1])
    rgb = np.zeros(points.shape)
    for s in spec.spheres:
        d2 = np.sum((points - np.asarray(s.center)) ** 2, axis=-1)
        contrib = s.density * np.exp(-d2 / (2.0 * s.radius ** 2))
        sigma += contrib
        rgb += contrib[..., None] * np.asarray(s.rgb)
    rgb = rgb / np.maximum(sigma, 1e-12)[..., None]
    return np.clip(rgb, 0.0, 1.0), sigma


def ndc_to_world(points: np.ndarray, focal: float, width: int, height: int, near: float) -> np.ndarray:
    """Inverse of the NDC mapping for points with z < 1."""
    z = 2.0 * near / (points[..., 2] - 1.0)
    x = -points[..., 0] * z * width / (2.0 * focal)
    y = -points[..., 1] * z * height / (2.0 * focal)
    return np.stack([x, y, z], axis=-1)


def render_analytic(spec: SyntheticSceneSpec, world: Ray, intr: Intrinsics) -> np.ndarray:
    """Deterministic midpoint quadrature of the analytic field along world rays."""
    lead = world.origin.shape[:-1]
    if intr.ndc:
        ray = ndc_project(world, intr.focal, intr.width, intr.height, intr.near)
        t = stratified_sample(ray.near, ray.far, spec.samples, None, lead)
        points = ndc_to_world(ray.at(t), intr.focal, intr.width, intr.height, intr.near)
    else:
        ray = Ray(world.origin, world.direction, intr.near, intr.far)
        t = stratified_sample(ray.near, ray.far, spec.samples, None, lead)
        points = ray.at(t)
    rgb, sigma = analytic_field(spec, points)
    delta = np.concatenate([np.diff(t, axis=-1), np.maximum(ray.far - t[..., -1:], 0.0)], axis=-1)
    return volume_render(RaySamples(t, delta, rgb, sigma)).color


def camera_poses(spec: SyntheticSceneSpec) -> List[Pose]:
    """Training cameras on a ring, followed by test and held-out cameras.

    Every non-training camera sits on a convex blend of two neighbouring
    training positions and their centroid, so it stays inside the training
    translation box.
    """
    target = np.array([0.0, 0.0, -spec.look_at_depth])
    up = [0.0, 1.0, 0.0]
    count = max(spec.views, 1)
    train = []
    for i in range(count):
        angle = 2.0 * np.pi * i / count
        train.append(spec.ring_radius * np.array([np.cos(angle), np.sin(angle), 0.0]))
    centre = np.mean(train, axis=0)
    inner = []
    for j in range(spec.test_views + spec.heldout_views):
        edge = 0.75 * train[j % count] + 0.25 * train[(j + 1) % count]
        pull = 0.5 / (1 + j // count)
        inner.append(centre + pull * (edge - centre))
    return [look_at(position, target, up) for position in train[:spec.views] + inner]


def sample_blur_truth(spec: SyntheticSceneSpec, rng: np.random.Generator) -> BlurTruth:
    """Screws along a straight shake path starting at the identity, uniform weights."""
    def direction(scale: float) -> np.ndarray:
        d = rng.normal(size=3)
        return d / np.linalg.norm(d) * scale * rng.uniform(0.5, 1.0)

    r, v = direction(spec.max_rotation), direction(spec.max_translation)
    alphas = np.linspace(0.0, 1.0, spec.n) if spec.n > 1 else np.zeros(1)
    screws = [ScrewAxis(a * r, a * v) for a in alphas]
    return BlurTruth(screws, [1.0 / spec.n] * spec.n)


def blur_image(spec: SyntheticSceneSpec, pose: Pose, intr: Intrinsics, truth: BlurTruth) -> Tuple[np.ndarray, np.ndarray]:
    """(sharp, blurry) float images of one view."""
    pixels = intr.pixel_grid().reshape(-1, 2)
    rays = pose_rays(pose, intr, pixels)
    shape = (intr.height, intr.width, 3)
    sharp = render_analytic(spec, rays, intr).reshape(shape)
    renders = [render_analytic(spec, apply_screw(rays, s), intr).reshape(shape) for s in truth.screws]
    if all(np.array_equal(renders[0], r) for r in renders[1:]):
        return sharp, renders[0]
    blurry = np.zeros(shape)
    for w, image in zip(truth.weights, renders):
        blurry = blurry + w * image
    return sharp, blurry


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir: str, name: str = "synthetic") -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    intr = Intrinsics(spec.focal, spec.image_size, spec.image_size, spec.near, spec.far, ndc=True)
    poses = camera_poses(spec)
    roles = ["train"] * spec.views + ["test"] * spec.test_views + ["heldout"] * spec.heldout_views
    logger.info(f"[synth] Rendering {len(poses)} views at {spec.image_size}x{spec.image_size} into {out_dir}")

    views: List[ViewRecord] = []
    images: Dict[str, np.ndarray] = {}
    truth: Dict[str, BlurTruth] = {}
    sharp_images: Dict[str, np.ndarray] = {}
    blurry_images: Dict[str, np.ndarray] = {}
    counters = {"train": 0, "test": 0, "heldout": 0}
    for i, (pose, role) in enumerate(zip(poses, roles)):
        view_id = f"{i:03d}"
        sharp_path = os.path.join("images", f"{view_id}_sharp.png")
        record = ViewRecord(
            id=view_id, image=sharp_path, pose=pose, focal=intr.focal, width=intr.width, height=intr.height,
            near=intr.near, far=intr.far, role=role, index=counters[role], sharp=sharp_path,
        )
        counters[role] += 1
        if role == "train":
            truth[view_id] = sample_blur_truth(spec, rng)
            sharp, blurry = blur_image(spec, pose, intr, truth[view_id])
            blur_path = os.path.join("images", f"{view_id}_blur.png")
            images[blur_path] = blurry
            blurry_images[view_id] = blurry
            record.image = blur_path
            record.predeblurred = sharp_path
        else:
            sharp = render_analytic(spec, pose_rays(pose, intr, intr.pixel_grid().reshape(-1, 2)), intr)
            sharp = sharp.reshape(intr.height, intr.width, 3)
        images[sharp_path] = sharp
        sharp_images[view_id] = sharp
        views.append(record)
        logger.info(f"[synth] View {view_id} ({role}) rendered")

    manifest = SceneManifest(name=name, views=views, ndc=True)
    repo = SceneRepository(out_dir)
    repo.save(manifest, images)
    repo.save_blur_truth(truth)
    logger.info(f"[synth] Scene written to {repo.manifest_path}")
    return SyntheticScene(manifest, truth, sharp_images, blurry_images)
