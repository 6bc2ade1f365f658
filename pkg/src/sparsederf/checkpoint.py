"""Checkpoint files.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then a
flat float64 little-endian blob holding the parameters followed by the two
Adam moment sets. Arrays are stored in sorted name order so identical
training states produce identical bytes.
"""
from __future__ import annotations

import glob
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import ManifestError

logger = logging.getLogger(__name__)

FORMAT = "sparsederf-checkpoint"
VERSION = 1
_STEP_PATTERN = re.compile(r"step_(\d+)\.ckpt$")


@dataclass
class Checkpoint:
    step: int
    params: Dict[str, np.ndarray]
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def _layout(arrays: Dict[str, np.ndarray], offset: int) -> Tuple[List[Dict[str, Any]], int]:
    entries = []
    for name in sorted(arrays):
        size = int(np.size(arrays[name]))
        entries.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset, "size": size})
        offset += size
    return entries, offset


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    groups = {"params": ckpt.params, "m": ckpt.first_moments, "v": ckpt.second_moments}
    layout: Dict[str, List[Dict[str, Any]]] = {}
    offset = 0
    for key, arrays in groups.items():
        layout[key], offset = _layout(arrays, offset)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "step": ckpt.step,
        "rng": ckpt.rng_state,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "layout": layout,
        "count": offset,
    }
    blob = np.empty(offset, dtype="<f8")
    for key, arrays in groups.items():
        for entry in layout[key]:
            blob[entry["offset"]:entry["offset"] + entry["size"]] = np.ravel(arrays[entry["name"]])
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(len(raw).to_bytes(8, "little"))
        fh.write(raw)
        fh.write(blob.tobytes())
    os.replace(tmp, path)
    logger.info(f"Checkpoint written: {path} (step {ckpt.step})")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    size = int.from_bytes(data[:8], "little")
    try:
        header = json.loads(data[8:8 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path} is not a checkpoint: {exc}") from exc
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ManifestError(f"{path} has an unsupported checkpoint format")
    blob = np.frombuffer(data[8 + size:], dtype="<f8")
    if blob.size != header["count"]:
        raise ManifestError(f"{path} is truncated: {blob.size} of {header['count']} values")

    def unpack(key: str) -> Dict[str, np.ndarray]:
        return {
            e["name"]: blob[e["offset"]:e["offset"] + e["size"]].astype(np.float64).reshape(e["shape"])
            for e in header["layout"][key]
        }

    return Checkpoint(
        step=int(header["step"]),
        params=unpack("params"),
        first_moments=unpack("m"),
        second_moments=unpack("v"),
        rng_state=header.get("rng"),
        config=header.get("config", {}),
        meta=header.get("meta", {}),
    )


def checkpoint_path(directory: str, step: int) -> str:
    return os.path.join(directory, f"step_{step:06d}.ckpt")


def latest_checkpoint(directory: str) -> Optional[str]:
    """Highest-step checkpoint in `directory`, or None."""
    found = []
    for path in glob.glob(os.path.join(directory, "step_*.ckpt")):
        match = _STEP_PATTERN.search(path)
        if match:
            found.append((int(match.group(1)), path))
    return max(found)[1] if found else None
