"""File-system repository for scene directories.

A scene directory holds:
  * `scene.json`       the manifest (see `domain_models.SceneManifest`)
  * PNG images         8-bit RGB, paths relative to the scene directory
  * `blur_truth.json`  optional ground-truth blur of synthetic scenes

The repository normalizes load/save so training and evaluation code only
sees decoded float images and validated poses.
"""
from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import replace
from typing import Dict, List, Optional

import imageio.v3 as iio
import numpy as np

from ..errors import GeometryError, ManifestError
from ..geometry import Pose, look_at
from .domain_models import BlurTruth, Scene, SceneManifest, ViewRecord
from .presets import evenly_spaced, mgs_params, train_indices

logger = logging.getLogger(__name__)

MANIFEST_NAME = "scene.json"
TRUTH_NAME = "blur_truth.json"
LLFF_HOLDOUT = 8


def read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    data = iio.imread(path)
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=-1)
    if data.dtype != np.uint8:
        raise ManifestError(f"{path} is not an 8-bit image")
    return data[..., :3].astype(np.float64) / 255.0


def write_image(path: str, image: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    iio.imwrite(path, data, extension=".png")


class SceneRepository:
    def __init__(self, root: str):
        self.root = root

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.root, MANIFEST_NAME)

    def _path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    # -------------------- manifest --------------------
    def load_manifest(self) -> SceneManifest:
        if not os.path.exists(self.manifest_path):
            raise FileNotFoundError(f"manifest not found: {self.manifest_path}")
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            try:
                item = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        manifest = SceneManifest.from_item(item)
        manifest.validate()
        for view in manifest.views:
            try:
                view.pose.validate()
            except GeometryError as exc:
                raise GeometryError(f"view {view.id}: {exc}") from exc
        return manifest

    def save_manifest(self, manifest: SceneManifest) -> str:
        os.makedirs(self.root, exist_ok=True)
        with open(self.manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest.to_item(), fh, indent=2)
        return self.manifest_path

    # -------------------- images --------------------
    def _checked_image(self, view: ViewRecord, relative: str) -> np.ndarray:
        image = read_image(self._path(relative))
        if image.shape[:2] != (view.height, view.width):
            raise ManifestError(
                f"view {view.id}: image {relative} is {image.shape[1]}x{image.shape[0]}, "
                f"intrinsics say {view.width}x{view.height}"
            )
        return image

    def load(self) -> Scene:
        manifest = self.load_manifest()
        images: Dict[str, np.ndarray] = {}
        sharp: Dict[str, np.ndarray] = {}
        for view in manifest.views:
            if view.role == "unused":
                continue
            images[view.id] = self._checked_image(view, view.image)
            if view.sharp:
                sharp[view.id] = self._checked_image(view, view.sharp)
        logger.info(f"Loaded scene '{manifest.name}' with {len(manifest.train_views)} train / {len(manifest.test_views)} test views")
        return Scene(manifest, self.root, images, sharp)

    def save(self, manifest: SceneManifest, images: Dict[str, np.ndarray]) -> str:
        """Write images (keyed by relative path) and the manifest."""
        for relative, image in images.items():
            write_image(self._path(relative), image)
        return self.save_manifest(manifest)

    def load_predeblurred(self, manifest: SceneManifest) -> Dict[str, np.ndarray]:
        """Pre-deblurred images of the views that declare one."""
        result: Dict[str, np.ndarray] = {}
        for view in manifest.views:
            if view.predeblurred and view.role == "train":
                result[view.id] = self._checked_image(view, view.predeblurred)
        if not result:
            logger.info("No pre-deblurred images declared; perceptual distillation disabled")
        return result

    # -------------------- ground truth --------------------
    def load_blur_truth(self) -> Optional[Dict[str, BlurTruth]]:
        path = self._path(TRUTH_NAME)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as fh:
            item = json.load(fh)
        return {view_id: BlurTruth.from_item(v) for view_id, v in item.items()}

    def save_blur_truth(self, truth: Dict[str, BlurTruth]) -> str:
        path = self._path(TRUTH_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({k: v.to_item() for k, v in truth.items()}, fh, indent=2)
        return path


def load_scene(path: str) -> Scene:
    """Load a scene from its directory or its manifest path."""
    root = os.path.dirname(path) if path.endswith(".json") else path
    return SceneRepository(root).load()


def load_predeblurred(scene: Scene) -> Dict[str, np.ndarray]:
    return SceneRepository(scene.root).load_predeblurred(scene.manifest)


# -------------------- view protocol --------------------

def apply_view_preset(manifest: SceneManifest, scene_name: str, views: int, heldout: int = 4) -> SceneManifest:
    """Select the preset training views and mark evenly spread held-out views.

    Views keep their roles when they are test views; the remaining
    training-split views become held-out (pose only) or unused.
    """
    chosen = set(train_indices(scene_name, views))
    known = {v.index for v in manifest.views if v.role != "test"}
    missing = chosen - known
    if missing:
        raise ManifestError(f"scene has no views with indices {sorted(missing)}")
    rest = [v.index for v in manifest.views if v.role != "test" and v.index not in chosen]
    held = set(evenly_spaced(rest, heldout))
    updated: List[ViewRecord] = []
    for v in manifest.views:
        if v.role == "test":
            updated.append(v)
        elif v.index in chosen:
            updated.append(replace(v, role="train"))
        else:
            updated.append(replace(v, role="heldout" if v.index in held else "unused"))
    try:
        rho, eta = mgs_params(scene_name)
    except KeyError:
        rho, eta = manifest.mgs_rho, manifest.mgs_eta
    return replace(manifest, views=updated, mgs_rho=rho, mgs_eta=eta)


# -------------------- LLFF import --------------------

def _recenter(poses: np.ndarray) -> np.ndarray:
    """Express (N, 3, 4) camera-to-world poses relative to their average pose."""
    center = poses[:, :, 3].mean(axis=0)
    back = poses[:, :, 2].sum(axis=0)
    up = poses[:, :, 1].sum(axis=0)
    avg = look_at(center, center - back, up)
    world_from_avg = np.eye(4)
    world_from_avg[:3, :4] = avg.to_matrix()
    homog = np.concatenate([poses, np.tile(np.array([[[0.0, 0.0, 0.0, 1.0]]]), (len(poses), 1, 1))], axis=1)
    return (np.linalg.inv(world_from_avg) @ homog)[:, :3, :4]


def import_llff(source: str, out_dir: str, name: Optional[str] = None, image_dir: str = "images") -> SceneManifest:
    """Convert an LLFF `poses_bounds.npy` capture into a scene directory.

    Poses are rotated from LLFF's [down, right, back] to [right, up, back],
    rescaled so the nearest bound sits at 1/0.75 and recentered. Every
    LLFF_HOLDOUT-th image becomes a test view; view indices count
    positions within the train and test splits separately.
    """
    bounds_path = os.path.join(source, "poses_bounds.npy")
    if not os.path.exists(bounds_path):
        raise FileNotFoundError(f"poses_bounds.npy not found in {source}")
    raw = np.load(bounds_path)
    if raw.ndim != 2 or raw.shape[1] != 17:
        raise ManifestError("poses_bounds.npy must have shape (N, 17)")
    poses = raw[:, :15].reshape(-1, 3, 5)
    bounds = raw[:, 15:17]
    files = sorted(f for ext in ("*.png", "*.PNG", "*.jpg", "*.JPG") for f in glob.glob(os.path.join(source, image_dir, ext)))
    if len(files) != len(poses):
        raise ManifestError(f"{len(files)} images but {len(poses)} poses")
    hwf = poses[0, :, 4]
    poses = np.concatenate([poses[:, :, 1:2], -poses[:, :, 0:1], poses[:, :, 2:4]], axis=2)
    scale = 1.0 / (bounds.min() * 0.75)
    poses[:, :, 3] *= scale
    bounds = bounds * scale
    poses = _recenter(poses)

    repo = SceneRepository(out_dir)
    views: List[ViewRecord] = []
    images: Dict[str, np.ndarray] = {}
    split_index = {"train": 0, "test": 0}
    for i, (pose, path) in enumerate(zip(poses, files)):
        image = iio.imread(path)[..., :3]
        h, w = image.shape[:2]
        view_id = f"{i:03d}"
        role = "test" if i % LLFF_HOLDOUT == 0 else "train"
        index = split_index[role]
        split_index[role] += 1
        relative = os.path.join("images", f"{view_id}.png")
        images[relative] = image.astype(np.float64) / 255.0
        views.append(ViewRecord(
            id=view_id,
            image=relative,
            pose=Pose(pose[:, :3], pose[:, 3]),
            focal=float(hwf[2]) * w / float(hwf[1]),
            width=int(w),
            height=int(h),
            near=1.0,
            far=float(bounds.max()),
            role=role,
            index=index,
        ))
    manifest = SceneManifest(name=name or os.path.basename(os.path.normpath(source)), views=views, ndc=True)
    repo.save(manifest, images)
    logger.info(f"Imported {len(views)} LLFF views into {out_dir}")
    return manifest
