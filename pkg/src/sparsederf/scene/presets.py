"""Per-scene presets for the camera-motion blur dataset.

Training-view indices for the 2/4/6-view protocols (the 2- and 4-view sets
are subsets of the 6-view set) and the gradient-scaling magnitude/period
chosen for each scene.
"""
from __future__ import annotations

from typing import Dict, List, Tuple

VIEW_COUNTS = (2, 4, 6)

REAL_SCENES = ("ball", "basket", "buick", "coffee", "decoration", "girl", "heron", "parterre", "puppet", "stair")
SYNTHETIC_SCENES = ("cozyroom", "factory", "pool", "tanabata", "trolley")

TRAIN_INDICES: Dict[str, Dict[int, Tuple[int, ...]]] = {
    "ball": {2: (1, 12), 4: (1, 12, 18, 22), 6: (1, 5, 10, 12, 18, 22)},
    "basket": {2: (12, 33), 4: (1, 12, 22, 33), 6: (1, 8, 12, 17, 22, 33)},
    "buick": {2: (11, 39), 4: (5, 11, 20, 39), 6: (5, 11, 17, 20, 34, 39)},
    "coffee": {2: (3, 10), 4: (3, 10, 15, 26), 6: (3, 10, 11, 15, 21, 26)},
    "decoration": {2: (1, 19), 4: (1, 19, 22, 39), 6: (1, 14, 19, 22, 27, 39)},
    "girl": {2: (9, 16), 4: (2, 9, 16, 32), 6: (2, 9, 16, 24, 32, 37)},
    "heron": {2: (11, 35), 4: (4, 11, 18, 35), 6: (4, 11, 18, 23, 27, 35)},
    "parterre": {2: (8, 26), 4: (1, 8, 13, 26), 6: (1, 8, 13, 17, 26, 28)},
    "puppet": {2: (9, 31), 4: (9, 13, 21, 31), 6: (7, 9, 13, 21, 23, 31)},
    "stair": {2: (13, 26), 4: (4, 13, 16, 26), 6: (2, 4, 13, 16, 26, 34)},
    "cozyroom": {2: (2, 17), 4: (2, 17, 23, 29), 6: (2, 14, 17, 21, 23, 29)},
    "factory": {2: (3, 19), 4: (3, 14, 19, 33), 6: (1, 3, 14, 19, 28, 33)},
    "pool": {2: (10, 23), 4: (5, 10, 15, 23), 6: (1, 5, 10, 15, 20, 23)},
    "tanabata": {2: (1, 7), 4: (1, 7, 11, 22), 6: (1, 7, 11, 18, 22, 27)},
    "trolley": {2: (13, 23), 4: (7, 13, 23, 31), 6: (7, 13, 20, 23, 27, 31)},
}

# (rho, eta)
MGS_PARAMS: Dict[str, Tuple[float, float]] = {
    "ball": (1.0, 1.2),
    "basket": (1.0, 0.67),
    "buick": (10.0, 1.75),
    "coffee": (1.0, 0.67),
    "decoration": (1.0, 0.5),
    "girl": (1.0, 0.5),
    "heron": (1.0, 0.5),
    "parterre": (1.0, 0.5),
    "puppet": (10.0, 1.75),
    "stair": (1.0, 0.5),
    "cozyroom": (10.0, 1.75),
    "factory": (10.0, 1.75),
    "pool": (10.0, 1.75),
    "tanabata": (1.0, 1.5),
    "trolley": (10.0, 1.75),
}


def train_indices(scene: str, views: int) -> Tuple[int, ...]:
    key = scene.lower()
    if key not in TRAIN_INDICES:
        raise KeyError(f"no view preset for scene '{scene}'")
    if views not in VIEW_COUNTS:
        raise ValueError(f"view presets exist for {VIEW_COUNTS} views, not {views}")
    return TRAIN_INDICES[key][views]


def mgs_params(scene: str) -> Tuple[float, float]:
    key = scene.lower()
    if key not in MGS_PARAMS:
        raise KeyError(f"no gradient-scaling preset for scene '{scene}'")
    return MGS_PARAMS[key]


def evenly_spaced(candidates: List[int], count: int) -> List[int]:
    """`count` entries spread evenly over `candidates` (all of them when fewer)."""
    if count <= 0 or not candidates:
        return []
    if count >= len(candidates):
        return list(candidates)
    step = len(candidates) / count
    return [candidates[int(i * step + step / 2)] for i in range(count)]
