"""Rigid transforms, pinhole projection and C-arm pose parameterization.

Conventions used throughout the package:

* A :class:`RigidTransform` maps world coordinates to camera coordinates,
  ``x_c = R @ x_w + t``.
* The camera frame has +x to the right (increasing column), +y down
  (increasing row) and +z along the principal ray toward the detector.
* Pixel coordinates are continuous ``(u, v) = (column, row)``; the integer
  pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` and its center is
  ``(i + 0.5, j + 0.5)``.
* World axes follow the volume grid: x is the patient lateral axis, y the
  longitudinal axis and z the anterior-posterior axis, so the reference
  C-arm view (both angles zero) looks along +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, PixelOutOfBounds

MIN_DEPTH = 1e-9


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion keeps the result orthonormal to ~1e-16
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def rotation_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """World-to-camera rigid motion ``x -> R x + t`` (translation in mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("rigid transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> RigidTransform:
        return cls(so3_exp(rotvec), translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Map world points of shape ``(..., 3)`` into the camera frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    __call__ = apply

    def inverse(self) -> RigidTransform:
        return invert(self)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_record(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation_mm": [float(x) for x in self.translation],
        }

    @classmethod
    def from_record(cls, rec: dict) -> RigidTransform:
        return cls(np.reshape(rec["rotation"], (3, 3)), rec["translation_mm"])

    def __repr__(self) -> str:
        return (
            f"RigidTransform(rotvec={np.round(so3_log(self.rotation), 6).tolist()}, "
            f"translation={np.round(self.translation, 6).tolist()})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform ``x -> a(b(x))``."""
    R = a.rotation @ b.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
        R = orthonormalize(R)
    t = a.rotation @ b.translation + a.translation
    return RigidTransform(R, t)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the flat-panel detector geometry of a C-arm.

    The focal lengths are in pixels, so ``fx * pixel_pitch`` recovers the
    source-to-detector distance in mm.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pixel_pitch: float
    source_detector_distance: float

    def __post_init__(self):
        if min(self.fx, self.fy, self.pixel_pitch, self.source_detector_distance) <= 0:
            raise ValueError("focal lengths, pixel pitch and SDD must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        rel = abs(self.fx * self.pixel_pitch - self.source_detector_distance)
        if rel > 1e-6 * self.source_detector_distance:
            raise ValueError(
                "fx * pixel_pitch must equal source_detector_distance "
                f"({self.fx * self.pixel_pitch} vs {self.source_detector_distance})"
            )

    @classmethod
    def from_detector(
        cls, width: int, height: int, pixel_pitch: float, source_detector_distance: float
    ) -> CameraModel:
        """Square-pixel detector with the principal point at the image center."""
        f = source_detector_distance / pixel_pitch
        return cls(
            fx=f,
            fy=f,
            cx=width / 2.0,
            cy=height / 2.0,
            width=int(width),
            height=int(height),
            pixel_pitch=float(pixel_pitch),
            source_detector_distance=float(source_detector_distance),
        )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_centers(self) -> np.ndarray:
        """Continuous coordinates of every pixel center, shape ``(H, W, 2)``."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)

    def in_bounds(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=float)
        return (
            (p[..., 0] >= 0) & (p[..., 0] < self.width) & (p[..., 1] >= 0) & (p[..., 1] < self.height)
        )

    def to_record(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pixel_pitch": self.pixel_pitch,
            "source_detector_distance": self.source_detector_distance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> CameraModel:
        if "fx" not in rec:
            return cls.from_detector(
                rec["width"], rec["height"], rec["pixel_pitch"], rec["source_detector_distance"]
            )
        return cls(
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
            pixel_pitch=float(rec["pixel_pitch"]),
            source_detector_distance=float(rec["source_detector_distance"]),
        )


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin)
        d = _as_vec3(self.direction)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, s) -> np.ndarray:
        return self.origin + np.multiply.outer(s, self.direction)


@dataclass(frozen=True, eq=False)
class CArmPose:
    """C-arm angulation about an isocenter.

    ``alpha`` is the LAO/RAO angle about the longitudinal (world y) axis and
    ``beta`` the cranial/caudal angle about the lateral (world x) axis, both in
    degrees. ``offset`` shifts the isocenter in world coordinates (mm).
    """

    alpha: float
    beta: float
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    isocenter: np.ndarray = field(default_factory=lambda: np.zeros(3))
    source_isocenter_distance: float = 700.0

    def __post_init__(self):
        if not (-90.0 <= self.alpha <= 90.0 and -90.0 <= self.beta <= 90.0):
            raise ValueError("C-arm angles must lie in [-90, 90] degrees")
        if self.source_isocenter_distance <= 0:
            raise ValueError("source_isocenter_distance must be positive")
        object.__setattr__(self, "offset", _as_vec3(self.offset))
        object.__setattr__(self, "isocenter", _as_vec3(self.isocenter))


def carm_rotation(alpha: float, beta: float) -> np.ndarray:
    """Camera-to-world rotation of the C-arm: alpha first, then beta, about fixed world axes."""
    return rotation_x(beta) @ rotation_y(alpha)


def carm_to_extrinsic(pose: CArmPose) -> RigidTransform:
    """World-to-camera transform for a C-arm angulation.

    The source sits ``source_isocenter_distance`` before the (offset)
    isocenter along the rotated principal axis.
    """
    R_cw = carm_rotation(pose.alpha, pose.beta)
    iso = pose.isocenter + pose.offset
    center = iso - pose.source_isocenter_distance * R_cw[:, 2]
    R = R_cw.T
    return RigidTransform(R, -R @ center)


def _check_pixel(camera: CameraModel, pixel) -> np.ndarray:
    p = np.asarray(pixel, dtype=float)
    if not np.all(camera.in_bounds(p)):
        raise PixelOutOfBounds(f"pixel {p.tolist()} outside [0,{camera.width})x[0,{camera.height})")
    return p


def project_points(camera: CameraModel, pose: RigidTransform, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without depth checks.

    Returns ``(pixels, depth)``; callers decide what to do with non-positive depths.
    """
    Xc = pose.apply(points)
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * Xc[..., 0] / z + camera.cx
        v = camera.fy * Xc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1), z


def project(camera: CameraModel, pose: RigidTransform, point_world) -> np.ndarray:
    """Perspective projection of world points (``(3,)`` or ``(N, 3)``) to pixels."""
    px, z = project_points(camera, pose, point_world)
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth("point lies behind or at the X-ray source")
    return px


def backproject(camera: CameraModel, pose: RigidTransform, pixel, depth) -> np.ndarray:
    """World point at camera-frame depth ``depth`` along the ray through ``pixel``.

    Computes ``R^T (d K^-1 [u, v, 1] - t)``.
    """
    p = _check_pixel(camera, pixel)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be positive")
    xh = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    Xc = d[..., None] * (xh @ camera.K_inv.T)
    return (Xc - pose.translation) @ pose.rotation


def pixel_directions(camera: CameraModel, pose: RigidTransform, pixels) -> np.ndarray:
    """Unit world-frame directions of the rays through ``pixels`` (no bounds check)."""
    p = np.asarray(pixels, dtype=float)
    xh = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    d = (xh @ camera.K_inv.T) @ pose.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(camera: CameraModel, pose: RigidTransform, pixel) -> Ray:
    p = _check_pixel(camera, pixel).reshape(2)
    return Ray(pose.center, pixel_directions(camera, pose, p))


# --- pose manifest records -------------------------------------------------

def pose_record(view_id: str, carm: CArmPose, extrinsic: RigidTransform | None = None) -> dict:
    """One line of the pose manifest; stores both the angles and the derived extrinsic."""
    if extrinsic is None:
        extrinsic = carm_to_extrinsic(carm)
    rec = {
        "id": view_id,
        "alpha_deg": float(carm.alpha),
        "beta_deg": float(carm.beta),
        "offset_mm": [float(x) for x in carm.offset],
    }
    rec.update(extrinsic.to_record())
    return rec
