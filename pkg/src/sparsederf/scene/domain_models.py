"""Scene manifest domain model.

Mirrors the versioned `scene.json` schema. Lightweight dataclasses with
`to_item()` / `from_item()` for JSON round trips; validation is shallow and
raises `ManifestError`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional

import numpy as np

from ..errors import ManifestError
from ..geometry import Intrinsics, Pose, ScrewAxis

SCHEMA_VERSION = 1

ViewRole = Literal["train", "test", "heldout", "unused"]
VIEW_ROLES = ("train", "test", "heldout", "unused")


@dataclass
class ViewRecord:
    id: str
    image: str
    pose: Pose
    focal: float
    width: int
    height: int
    near: float
    far: float
    role: ViewRole = "train"
    index: int = 0
    predeblurred: Optional[str] = None
    sharp: Optional[str] = None

    def intrinsics(self, ndc: bool) -> Intrinsics:
        return Intrinsics(self.focal, self.width, self.height, self.near, self.far, ndc)

    def to_item(self) -> Dict[str, Any]:
        item = asdict(self)
        item["pose"] = self.pose.to_matrix().tolist()
        return item

    @classmethod
    def from_item(cls, item: Dict[str, Any]) -> "ViewRecord":
        try:
            data = dict(item)
            data["pose"] = Pose.from_matrix(data["pose"])
            view = cls(**data)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid view record: {exc}") from exc
        if view.role not in VIEW_ROLES:
            raise ManifestError(f"view {view.id} has unknown role '{view.role}'")
        return view


@dataclass
class SceneManifest:
    name: str
    views: List[ViewRecord]
    ndc: bool = True
    mgs_rho: float = 10.0
    mgs_eta: float = 1.75
    schema: int = SCHEMA_VERSION

    def views_with_role(self, role: str) -> List[ViewRecord]:
        return [v for v in self.views if v.role == role]

    @property
    def train_views(self) -> List[ViewRecord]:
        return self.views_with_role("train")

    @property
    def test_views(self) -> List[ViewRecord]:
        return self.views_with_role("test")

    def view(self, view_id: str) -> ViewRecord:
        for v in self.views:
            if v.id == view_id:
                return v
        raise ManifestError(f"unknown view '{view_id}'")

    def validate(self) -> None:
        if self.schema != SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema {self.schema}")
        if not self.views:
            raise ManifestError("manifest declares no views")
        if not self.train_views:
            raise ManifestError("manifest needs at least one train view")
        if not self.test_views:
            raise ManifestError("manifest needs at least one test view")
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ManifestError("view ids must be unique")

    def to_item(self) -> Dict[str, Any]:
        return {
            "schema": self.schema,
            "name": self.name,
            "ndc": self.ndc,
            "mgs": {"rho": self.mgs_rho, "eta": self.mgs_eta},
            "views": [v.to_item() for v in self.views],
        }

    @classmethod
    def from_item(cls, item: Dict[str, Any]) -> "SceneManifest":
        if not isinstance(item, dict) or "views" not in item:
            raise ManifestError("manifest must be an object with a 'views' list")
        mgs = item.get("mgs", {})
        return cls(
            name=item.get("name", "scene"),
            views=[ViewRecord.from_item(v) for v in item["views"]],
            ndc=bool(item.get("ndc", True)),
            mgs_rho=float(mgs.get("rho", 10.0)),
            mgs_eta=float(mgs.get("eta", 1.75)),
            schema=int(item.get("schema", SCHEMA_VERSION)),
        )


@dataclass
class Scene:
    """A loaded manifest with decoded [0, 1] float64 images keyed by view id."""
    manifest: SceneManifest
    root: str
    images: Dict[str, np.ndarray]
    sharp: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Sphere:
    center: List[float]
    radius: float
    density: float
    rgb: List[float]


@dataclass
class SyntheticSceneSpec:
    """Analytic soft-sphere scene seen by a forward-facing camera arc, with
    ground-truth rigid camera shake per training view."""
    spheres: List[Sphere] = field(default_factory=lambda: [
        Sphere([0.0, 0.0, -4.0], 0.3, 300.0, [0.9, 0.2, 0.2]),
        Sphere([1.2, 0.7, -5.0], 0.25, 600.0, [0.2, 0.8, 0.3]),
        Sphere([-1.0, -0.6, -4.5], 0.25, 500.0, [0.2, 0.3, 0.9]),
        # dim backdrop, well behind the others and gone before the camera
        Sphere([0.0, 0.0, -8.0], 1.2, 110.0, [0.5, 0.5, 0.45]),
    ])
    views: int = 3
    test_views: int = 1
    heldout_views: int = 2
    image_size: int = 32
    fov_degrees: float = 50.0
    ring_radius: float = 0.3
    look_at_depth: float = 4.0
    near: float = 1.0
    far: float = 10.0
    n: int = 5
    max_rotation: float = 0.06
    max_translation: float = 0.05
    samples: int = 128
    seed: int = 0

    @property
    def focal(self) -> float:
        return 0.5 * self.image_size / np.tan(0.5 * np.radians(self.fov_degrees))

    def to_item(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_item(cls, item: Dict[str, Any]) -> "SyntheticSceneSpec":
        data = dict(item)
        if "spheres" in data:
            data["spheres"] = [Sphere(**s) for s in data["spheres"]]
        return cls(**data)


@dataclass
class BlurTruth:
    """Ground-truth blur of one view: screws S*_q and weights m*_q."""
    screws: List[ScrewAxis]
    weights: List[float]

    def to_item(self) -> Dict[str, Any]:
        return {
            "screws": [[list(map(float, s.r)), list(map(float, s.v))] for s in self.screws],
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_item(cls, item: Dict[str, Any]) -> "BlurTruth":
        screws = [ScrewAxis(np.asarray(r, dtype=np.float64), np.asarray(v, dtype=np.float64)) for r, v in item["screws"]]
        return cls(screws, [float(w) for w in item["weights"]])
