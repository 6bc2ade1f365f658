"""Deterministic image feature extractor for perceptual distillation.

The built-in extractor is a fixed bank of zero-mean filters (difference of
Gaussians and four oriented Gaussian derivatives, at two scales) applied to
every color channel, followed by a seeded random 1x1 projection and a ReLU.
Target features can also be read from precomputed maps on disk.
"""
from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.signal.windows import gaussian

from . import autodiff as ad

logger = logging.getLogger(__name__)

FILTER_SIZE = 7
SCALES = (1.0, 2.0)
ORIENTATIONS = (0.0, 0.25 * np.pi, 0.5 * np.pi, 0.75 * np.pi)
OUT_CHANNELS = 16
MIN_FEATURE_SIZE = 4


def _gaussian_2d(size: int, std: float) -> np.ndarray:
    g = gaussian(size, std)
    k = np.outer(g, g)
    return k / k.sum()


def filter_bank(size: int = FILTER_SIZE) -> np.ndarray:
    """(n_filters, size, size) zero-mean filters."""
    half = size // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    filters = []
    for s in SCALES:
        filters.append(_gaussian_2d(size, s) - _gaussian_2d(size, 1.6 * s))
        base = _gaussian_2d(size, s)
        for theta in ORIENTATIONS:
            filters.append(-(np.cos(theta) * xs + np.sin(theta) * ys) / (s * s) * base)
    bank = np.stack(filters)
    bank -= bank.mean(axis=(1, 2), keepdims=True)
    return bank / np.abs(bank).sum(axis=(1, 2), keepdims=True)


def feature_grid(patch_size: int, stride: int, size: int = FILTER_SIZE) -> int:
    return (patch_size - size) // stride + 1


class FeatureExtractor:
    """Shared, parameter-free feature extractor applied to rendered and target patches."""

    def __init__(self, patch_size: int, seed: int = 0, stride: Optional[int] = None, feature_dir: Optional[str] = None):
        if stride is None:
            stride = max(1, (patch_size - FILTER_SIZE) // 12)
        while stride > 1 and feature_grid(patch_size, stride) < MIN_FEATURE_SIZE:
            stride -= 1
        if feature_grid(patch_size, stride) < MIN_FEATURE_SIZE:
            raise ValueError(f"patch size {patch_size} is too small for the feature extractor")
        self.patch_size = patch_size
        self.stride = stride
        self.feature_dir = feature_dir
        bank = filter_bank()
        n_filters = len(bank)
        # block-diagonal over color channels: (size * size * 3, n_filters * 3)
        flat = bank.reshape(n_filters, -1).T
        weights = np.zeros((FILTER_SIZE * FILTER_SIZE, 3, n_filters, 3))
        for c in range(3):
            weights[:, c, :, c] = flat
        self.edge_weights = weights.reshape(FILTER_SIZE * FILTER_SIZE * 3, n_filters * 3)
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(n_filters * 3), size=(n_filters * 3, OUT_CHANNELS))
        g = feature_grid(patch_size, stride)
        starts = np.arange(g) * stride
        offs = np.arange(FILTER_SIZE)
        rows = starts[:, None, None, None] + offs[None, None, :, None]
        cols = starts[None, :, None, None] + offs[None, None, None, :]
        self._rows = np.broadcast_to(rows, (g, g, FILTER_SIZE, FILTER_SIZE))
        self._cols = np.broadcast_to(cols, (g, g, FILTER_SIZE, FILTER_SIZE))

    @property
    def variant(self) -> str:
        return "external-features" if self.feature_dir else "fixed-filter-bank"

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        g = feature_grid(self.patch_size, self.stride)
        return g, g, OUT_CHANNELS

    def edge_responses(self, image) -> Any:
        """Linear filter-bank responses (g, g, n_filters * 3) of a (k, k, 3) patch."""
        shape = np.shape(ad.value_of(image))
        if shape != (self.patch_size, self.patch_size, 3):
            raise ValueError(f"expected a {self.patch_size}x{self.patch_size} RGB patch, got {shape}")
        windows = image[self._rows, self._cols]
        g = self._rows.shape[0]
        windows = ad.reshape(windows, (g, g, -1))
        return ad.matmul(windows, self.edge_weights)

    def __call__(self, image) -> Any:
        return ad.relu(ad.matmul(self.edge_responses(image), self.projection))

    # -------------------- precomputed target features --------------------

    def _feature_path(self, view_id: str, cell: Tuple[int, int]) -> str:
        return os.path.join(self.feature_dir or "", f"{view_id}_{cell[0]}_{cell[1]}.bin")

    def target_features(self, view_id: str, image: np.ndarray, x0: int, y0: int) -> np.ndarray:
        """Features of the pre-deblurred patch at grid cell (y0, x0) / patch_size."""
        k = self.patch_size
        if self.feature_dir is None:
            return np.asarray(self(image[y0:y0 + k, x0:x0 + k]), dtype=np.float64)
        cell = (y0 // k, x0 // k)
        return load_feature_map(self._feature_path(view_id, cell), self.feature_shape)


def load_feature_map(path: str, expected: Tuple[int, int, int]) -> np.ndarray:
    with open(os.path.splitext(path)[0] + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    shape = (meta["height"], meta["width"], meta["channels"])
    if shape != tuple(expected):
        raise ValueError(f"feature map {path} has shape {shape}, expected {tuple(expected)}")
    data = np.fromfile(path, dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def export_feature_maps(extractor: FeatureExtractor, images: Dict[str, np.ndarray], out_dir: str) -> int:
    """Write target features for every full grid cell of every image; returns the file count."""
    os.makedirs(out_dir, exist_ok=True)
    k = extractor.patch_size
    count = 0
    for view_id, image in images.items():
        h, w = image.shape[:2]
        for cy in range(h // k):
            for cx in range(w // k):
                feats = np.asarray(extractor(image[cy * k:(cy + 1) * k, cx * k:(cx + 1) * k]), dtype="<f4")
                base = os.path.join(out_dir, f"{view_id}_{cy}_{cx}")
                feats.tofile(base + ".bin")
                with open(base + ".json", "w", encoding="utf-8") as fh:
                    json.dump({"channels": int(feats.shape[2]), "height": int(feats.shape[0]),
                               "width": int(feats.shape[1])}, fh)
                count += 1
    logger.info(f"Exported {count} feature maps to {out_dir}")
    return count
