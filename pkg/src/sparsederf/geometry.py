"""Rays, camera poses, NDC projection, screw motions and unseen-pose sampling.

Functions that touch ray origins or directions accept plain arrays or tape
values, so the same code transforms rays while training the blur kernel and
while generating synthetic data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import DegenerateGeometry, GeometryError

logger = logging.getLogger(__name__)

# theta^2 below which the screw coefficients switch to their Taylor series
_SERIES_THRESHOLD = 1e-3


@dataclass
class Ray:
    """A bundle of rays r(t) = o + t d sharing one [near, far] interval.

    `origin` and `direction` have shape (..., 3) and may be tape values.
    """
    origin: Any
    direction: Any
    near: float
    far: float

    def validate(self) -> None:
        if not self.near < self.far:
            raise GeometryError(f"ray interval is empty: near={self.near} far={self.far}")
        norms = np.linalg.norm(ad.value_of(self.direction), axis=-1)
        if np.any(norms <= 0):
            raise GeometryError("ray direction has zero length")

    def at(self, t) -> Any:
        """Points along the rays; `t` has shape (..., S)."""
        return self.origin[..., None, :] + t[..., :, None] * self.direction[..., None, :]


@dataclass
class Pose:
    """Camera-to-world rigid transform [R|t]; the camera looks down its -z axis."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def from_matrix(cls, matrix: Sequence[Sequence[float]]) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    @property
    def up(self) -> np.ndarray:
        return self.rotation[:, 1]

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise GeometryError("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
            raise GeometryError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise GeometryError("pose rotation does not have determinant +1")


@dataclass
class ScrewAxis:
    """Screw motion (r, v): axis-angle rotation r and translation generator v."""
    r: Any
    v: Any

    @classmethod
    def zero(cls) -> "ScrewAxis":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> "ScrewAxis":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3], vec[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([ad.value_of(self.r), ad.value_of(self.v)])

    def negate(self) -> "ScrewAxis":
        return ScrewAxis(-self.r, -self.v)


# -------------------- SO(3) / SE(3) --------------------

def skew(w: Sequence[float]) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _coefficients(s: np.ndarray) -> Tuple[np.ndarray, ...]:
    """A = sin(th)/th, B = (1-cos(th))/th^2, C = (th-sin(th))/th^3 and their
    derivatives with respect to s = th^2."""
    s = np.asarray(s, dtype=np.float64)
    small = s < _SERIES_THRESHOLD
    safe = np.where(small, 1.0, s)
    th = np.sqrt(safe)
    sin, cos = np.sin(th), np.cos(th)
    a = sin / th
    b = (1.0 - cos) / safe
    c = (th - sin) / (safe * th)
    da = (th * cos - sin) / (2.0 * safe * th)
    db = (th * sin - 2.0 * (1.0 - cos)) / (2.0 * safe * safe)
    dc = ((1.0 - cos) / (safe * th) - 3.0 * (th - sin) / (safe * safe)) / (2.0 * th)
    a_s = 1.0 - s / 6.0 + s ** 2 / 120.0 - s ** 3 / 5040.0
    b_s = 0.5 - s / 24.0 + s ** 2 / 720.0 - s ** 3 / 40320.0
    c_s = 1.0 / 6.0 - s / 120.0 + s ** 2 / 5040.0 - s ** 3 / 362880.0
    da_s = -1.0 / 6.0 + s / 60.0 - s ** 2 / 1680.0
    db_s = -1.0 / 24.0 + s / 360.0 - s ** 2 / 13440.0
    dc_s = -1.0 / 120.0 + s / 2520.0 - s ** 2 / 120960.0
    pick = lambda series, closed: np.where(small, series, closed)  # noqa: E731
    return pick(a_s, a), pick(b_s, b), pick(c_s, c), pick(da_s, da), pick(db_s, db), pick(dc_s, dc)


def screw_coefficients(theta_sq) -> Tuple[Any, Any, Any]:
    """Rodrigues / SE(3) series coefficients as functions of the squared angle.

    Smooth at zero, so an identity-initialized kernel stays differentiable.
    """
    a, b, c, da, db, dc = _coefficients(ad.value_of(theta_sq))
    if not isinstance(theta_sq, ad.Dual):
        return a, b, c
    tape = theta_sq.tape
    out = []
    for kind, value, deriv in (("screw_a", a, da), ("screw_b", b, db), ("screw_c", c, dc)):
        rule = (lambda d: (lambda g, o, vals, attrs: (g * d,)))(deriv)
        out.append(tape.custom(kind, [theta_sq], value, rule))
    return tuple(out)


def rodrigues(r: Sequence[float]) -> np.ndarray:
    """Rotation matrix e^[r] for the axis-angle vector r."""
    r = np.asarray(r, dtype=np.float64)
    a, b, _ = screw_coefficients(float(r @ r))
    k = skew(r)
    return np.eye(3) + a * k + b * (k @ k)


def rotate(x, r):
    """Rotate vectors x (..., 3) by axis-angle r (..., 3); tape-friendly."""
    a, b, _ = screw_coefficients(ad.dot(r, r))
    rx = ad.cross(r, x)
    return x + a[..., None] * rx + b[..., None] * ad.cross(r, rx)


def se3_translation(r, v):
    """Translation part p of exp([r, v]): (I + B[r] + C[r]^2) v."""
    _, b, c = screw_coefficients(ad.dot(r, r))
    rv = ad.cross(r, v)
    return v + b[..., None] * rv + c[..., None] * ad.cross(r, rv)


def apply_screw(ray: Ray, s: ScrewAxis) -> Ray:
    """Rigidly move rays by exp(s): rotate origin and direction, translate origin."""
    origin = rotate(ray.origin, s.r) + se3_translation(s.r, s.v)
    direction = rotate(ray.direction, s.r)
    return Ray(origin, direction, ray.near, ray.far)


# -------------------- cameras --------------------

def pixel_directions(pixels, focal: float, width: int, height: int):
    """Camera-frame directions for pixel coordinates (..., 2) given as (x, y)."""
    x = (pixels[..., 0] - 0.5 * width) / focal
    y = -(pixels[..., 1] - 0.5 * height) / focal
    return ad.stack([x, y, -np.ones(np.shape(ad.value_of(x)))], axis=-1)


def camera_rays(pose: Pose, focal: float, width: int, height: int, pixels, near: float, far: float) -> Ray:
    """World-space rays through `pixels` of a camera at `pose`."""
    dirs = pixel_directions(pixels, focal, width, height)
    world = ad.matmul(dirs, pose.rotation.T)
    origin = np.broadcast_to(pose.translation, np.shape(ad.value_of(world))).copy()
    return Ray(origin, world, near, far)


def ndc_project(ray: Ray, focal: float, width: int, height: int, near: float) -> Ray:
    """Map forward-facing rays to normalized device coordinates.

    Origins are first moved to the z = -near plane; the resulting ray spans
    the near plane at t = 0 to infinity at t = 1.
    """
    dz = ad.value_of(ray.direction)[..., 2]
    if np.any(np.abs(dz) < 1e-12):
        raise GeometryError("ray is parallel to the image plane and cannot be projected to NDC")
    o, d = ray.origin, ray.direction
    t = -(near + o[..., 2]) / d[..., 2]
    o = o + t[..., None] * d
    ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
    dx, dy, dzz = d[..., 0], d[..., 1], d[..., 2]
    fx = -2.0 * focal / width
    fy = -2.0 * focal / height
    origin = ad.stack([fx * ox / oz, fy * oy / oz, 1.0 + 2.0 * near / oz], axis=-1)
    direction = ad.stack([
        fx * (dx / dzz - ox / oz),
        fy * (dy / dzz - oy / oz),
        -2.0 * near / oz,
    ], axis=-1)
    return Ray(origin, direction, 0.0, 1.0)


def ndc_point(x: Sequence[float], focal: float, width: int, height: int, near: float) -> np.ndarray:
    """NDC coordinates of camera-space points (..., 3) in front of the camera."""
    x = np.asarray(x, dtype=np.float64)
    z = x[..., 2]
    return np.stack([
        -2.0 * focal / width * x[..., 0] / z,
        -2.0 * focal / height * x[..., 1] / z,
        1.0 + 2.0 * near / z,
    ], axis=-1)


# -------------------- unseen poses --------------------

def mean_focus_point(poses: Sequence[Pose]) -> np.ndarray:
    """Point minimizing the summed squared distance to every optical axis."""
    if len(poses) < 2:
        raise DegenerateGeometry("at least two poses are needed for a focus point")
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for pose in poses:
        d = pose.forward / np.linalg.norm(pose.forward)
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ pose.translation
    if np.linalg.matrix_rank(a, tol=1e-9) < 3:
        raise DegenerateGeometry("optical axes are parallel; focus point is undefined")
    return np.linalg.solve(a, b)


def look_at(position: Sequence[float], target: Sequence[float], up: Sequence[float]) -> Pose:
    """Pose at `position` whose -z axis points at `target`."""
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    norm = np.linalg.norm(back)
    if norm < 1e-12:
        raise GeometryError("look-at target coincides with the camera position")
    z = back / norm
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-12:
        raise GeometryError("up vector is parallel to the viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


def mean_up(poses: Sequence[Pose]) -> np.ndarray:
    up = np.mean([p.up for p in poses], axis=0)
    return up / np.linalg.norm(up)


def translation_box(poses: Sequence[Pose]) -> Tuple[np.ndarray, np.ndarray]:
    ts = np.stack([p.translation for p in poses])
    return ts.min(axis=0), ts.max(axis=0)


def _focus_or_fallback(targets: Sequence[Pose]) -> np.ndarray:
    try:
        return mean_focus_point(targets)
    except DegenerateGeometry:
        centre = np.mean([p.translation for p in targets], axis=0)
        forward = np.mean([p.forward for p in targets], axis=0)
        logger.warning("Optical axes are parallel; focusing one unit along the mean viewing direction")
        return centre + forward / np.linalg.norm(forward)


def sample_unseen_pose(
    targets: Sequence[Pose],
    jitter_std: float = 0.125,
    rng: Optional[np.random.Generator] = None,
    jitter: Optional[Sequence[float]] = None,
) -> Pose:
    """Camera inside the target translation box, looking at the jittered focus point.

    `jitter` overrides the Gaussian focus jitter (pass zeros to disable it).
    """
    if len(targets) < 2:
        raise DegenerateGeometry("at least two target poses are needed to sample unseen poses")
    rng = rng if rng is not None else np.random.default_rng()
    t_min, t_max = translation_box(targets)
    position = rng.uniform(t_min, t_max)
    eps = rng.normal(0.0, jitter_std, size=3) if jitter is None else np.asarray(jitter, dtype=np.float64)
    focus = _focus_or_fallback(targets) + eps
    return look_at(position, focus, mean_up(targets))


def fixed_unseen_poses(manifest: Any, tol: float = 1e-6) -> List[Pose]:
    """Held-out poses declared by the manifest; warns when one leaves the sample box."""
    held_out = [v.pose for v in manifest.views_with_role("heldout")]
    if not held_out:
        return []
    train = [v.pose for v in manifest.views_with_role("train")]
    t_min, t_max = translation_box(train)
    for view, pose in zip(manifest.views_with_role("heldout"), held_out):
        if np.any(pose.translation < t_min - tol) or np.any(pose.translation > t_max + tol):
            logger.warning(f"Held-out view {view.id} lies outside the unseen-pose sample box")
    return held_out


def poses_from_matrices(matrices: Iterable[Sequence[Sequence[float]]]) -> List[Pose]:
    return [Pose.from_matrix(m) for m in matrices]


@dataclass
class Intrinsics:
    """Pinhole intrinsics plus the scene bounds and parameterization."""
    focal: float
    width: int
    height: int
    near: float
    far: float
    ndc: bool = True

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics for an image downsampled by an integer factor."""
        if factor <= 1:
            return self
        return Intrinsics(self.focal / factor, self.width // factor, self.height // factor,
                          self.near, self.far, self.ndc)

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) pixel coordinates as (x, y), row-major."""
        ys, xs = np.meshgrid(np.arange(self.height, dtype=np.float64),
                             np.arange(self.width, dtype=np.float64), indexing="ij")
        return np.stack([xs, ys], axis=-1)


def to_render_space(world: Ray, intr: Intrinsics) -> Tuple[Ray, Any]:
    """Rays in the space the field is sampled in, plus unit world view directions."""
    d = world.direction
    viewdirs = d / ad.sqrt(ad.dot(d, d))[..., None]
    if intr.ndc:
        return ndc_project(world, intr.focal, intr.width, intr.height, intr.near), viewdirs
    return Ray(world.origin, world.direction, intr.near, intr.far), viewdirs
