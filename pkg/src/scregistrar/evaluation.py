"""Registration metrics (mTRE, projected mTRE, gross failure rate) and overlays."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, LandmarkBehindCamera
from .geometry import CameraModel, RigidTransform, project_points

FAILURE_THRESHOLD_MM = 10.0


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    names: Sequence[str]
    points: np.ndarray  # (N, 3) world mm

    def __post_init__(self):
        names = [str(n) for n in self.names]
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(names) == 0:
            raise EmptyInput("a landmark set needs at least one landmark")
        if len(names) != len(pts):
            raise DimensionMismatch("landmark names and points differ in length")
        if len(set(names)) != len(names):
            raise ValueError("landmark names must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "names", tuple(names))
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.names)

    def to_json(self) -> str:
        return json.dumps(
            [{"name": n, "xyz_mm": [float(x) for x in p]} for n, p in zip(self.names, self.points)], indent=1
        )


def save_landmarks(lm: LandmarkSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(lm.to_json() + "\n")


def load_landmarks(path) -> LandmarkSet:
    with open(path) as fh:
        recs = json.load(fh)
    return LandmarkSet([r["name"] for r in recs], [r["xyz_mm"] for r in recs])


def mtre(landmarks: LandmarkSet, pose_true: RigidTransform, pose_est: RigidTransform) -> float:
    """Mean distance (mm) between landmarks mapped by the estimated and true poses."""
    d = pose_est.apply(landmarks.points) - pose_true.apply(landmarks.points)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def proj_mtre(
    landmarks: LandmarkSet, camera: CameraModel, pose_true: RigidTransform, pose_est: RigidTransform
) -> float:
    """Mean detector-plane distance (mm) between landmark projections under both poses."""
    p_true, z_true = project_points(camera, pose_true, landmarks.points)
    p_est, z_est = project_points(camera, pose_est, landmarks.points)
    if np.any(z_true <= 1e-9) or np.any(z_est <= 1e-9):
        raise LandmarkBehindCamera("a landmark has non-positive depth")
    return float(camera.pixel_pitch * np.mean(np.linalg.norm(p_est - p_true, axis=1)))


def gfr(mtres, failure_threshold: float = FAILURE_THRESHOLD_MM) -> float:
    """Fraction of registrations with error strictly greater than ``failure_threshold``.

    Unregistered views should be passed as ``inf`` so they count as failures.
    """
    a = np.asarray(list(mtres), dtype=float)
    if a.size == 0:
        raise EmptyInput("gfr needs at least one value")
    return float(np.mean(~(a <= failure_threshold)))


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics at rank ``q/100 * (n-1)``.

    Infinite values sort last; interpolating toward one yields ``inf``.
    """
    a = np.sort(np.asarray(values, dtype=float))
    if a.size == 0:
        raise EmptyInput("percentile of an empty list")
    pos = q / 100.0 * (a.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, a.size - 1)
    frac = pos - lo
    if frac == 0.0 or a[lo] == a[hi]:
        return float(a[lo])
    if not np.isfinite(a[hi]):
        return math.inf
    return float(a[lo] + frac * (a[hi] - a[lo]))


@dataclass(frozen=True)
class MetricReport:
    values: tuple[float, ...]
    p25: float
    p50: float
    p95: float
    gfr: float
    n_views: int
    n_failures: int
    metric: str = "mTRE"
    failure_threshold: float = FAILURE_THRESHOLD_MM

    def to_dict(self) -> dict:
        def clean(x):
            return x if math.isfinite(x) else None

        return {
            "metric": self.metric,
            "p25_mm": clean(self.p25),
            "p50_mm": clean(self.p50),
            "p95_mm": clean(self.p95),
            "gfr": self.gfr,
            "n_views": self.n_views,
            "n_failures": self.n_failures,
            "failure_threshold_mm": self.failure_threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, label: str = "all") -> str:
        def cell(x):
            return f"{x:>9.2f}" if math.isfinite(x) else f"{'inf':>9}"

        head = f"{'':<10}{self.metric + '[mm]':^27}{'':>9}"
        cols = f"{'Views':<10}{'25th':>9}{'50th':>9}{'95th':>9}{'GFR[%]':>9}"
        row = f"{label:<10}{cell(self.p25)}{cell(self.p50)}{cell(self.p95)}{100 * self.gfr:>9.2f}"
        return "\n".join([head, cols, row, f"n_views={self.n_views} unregistered={self.n_failures}"])


def report(mtres, failure_threshold: float = FAILURE_THRESHOLD_MM, metric: str = "mTRE") -> MetricReport:
    vals = tuple(float(x) for x in mtres)
    if not vals:
        raise EmptyInput("report needs at least one value")
    return MetricReport(
        values=vals,
        p25=percentile(vals, 25),
        p50=percentile(vals, 50),
        p95=percentile(vals, 95),
        gfr=gfr(vals, failure_threshold),
        n_views=len(vals),
        n_failures=int(sum(1 for x in vals if math.isinf(x))),
        metric=metric,
        failure_threshold=failure_threshold,
    )


# --- overlays ----------------------------------------------------------------------

DEPTH_EDGE_FACTOR = 0.02


def overlay_edges(v, iso, camera: CameraModel, pose: RigidTransform, step: float = 1.0,
                  depth_factor: float = DEPTH_EDGE_FACTOR) -> np.ndarray:
    """Boolean edge mask of the isosurface model projected under ``pose``.

    A pixel is an edge when it is valid and borders an invalid pixel (the
    silhouette), or when the entry depth jumps between neighbours by more than
    ``depth_factor`` times the median entry depth (occluding contours).
    """
    from .scene_coords import generate_gt_map

    scm = generate_gt_map(v, iso, camera, pose, step)
    valid = scm.valid
    edges = np.zeros_like(valid)
    if not valid.any():
        return edges
    pad = np.pad(valid, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    edges |= valid & ~interior

    depth = pose.apply(scm.entry.astype(float))[..., 2]
    depth = np.where(valid, depth, np.nan)
    limit = depth_factor * np.nanmedian(depth)
    with np.errstate(invalid="ignore"):
        dv = np.abs(np.diff(depth, axis=0)) > limit
        du = np.abs(np.diff(depth, axis=1)) > limit
    # mark the nearer pixel of each jump
    near_v = depth[:-1] < depth[1:]
    edges[:-1] |= dv & near_v
    edges[1:] |= dv & ~near_v
    near_u = depth[:, :-1] < depth[:, 1:]
    edges[:, :-1] |= du & near_u
    edges[:, 1:] |= du & ~near_u
    return edges & valid


def render_overlay(v, iso, camera: CameraModel, pose_est: RigidTransform, base_image,
                   alpha: float = 1.0, step: float = 1.0) -> np.ndarray:
    """Blend the model's projected edges over ``base_image`` at the image maximum."""
    base = np.asarray(base_image, dtype=float)
    if base.shape != camera.shape:
        raise DimensionMismatch(f"base image {base.shape} does not match camera {camera.shape}")
    edges = overlay_edges(v, iso, camera, pose_est, step)
    out = base.copy()
    hi = base.max() if base.size else 0.0
    out[edges] = (1 - alpha) * base[edges] + alpha * hi
    return out


def save_overlay_ppm(base_image, edges, path, color=(255, 40, 40)) -> None:
    """Write the grayscale base with colored edge pixels as binary PPM."""
    base = np.asarray(base_image, dtype=float)
    lo, hi = base.min(), base.max()
    g = np.zeros_like(base) if hi <= lo else (base - lo) / (hi - lo)
    rgb = np.repeat(np.rint(g * 255)[..., None], 3, axis=-1).astype(np.uint8)
    rgb[np.asarray(edges, bool)] = color
    h, w = base.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
