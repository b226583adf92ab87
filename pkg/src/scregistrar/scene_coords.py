"""Scene-coordinate maps: ground-truth generation, filtering and reference losses.

A scene-coordinate map stores, for every detector pixel, the world points
where the pixel's ray first enters and last leaves the bone model, each with
a log-variance (in mm^2). Pixels whose ray misses the model carry zero
coordinates and the sentinel log-variance ``SENTINEL_LOGVAR``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPositiveSigma, ParseError
from .geometry import CameraModel, RigidTransform, pixel_directions, project_points
from .volume import IsoSurfaceSpec, Volume, _read_header, intersect_isosurface_batch

SENTINEL_LOGVAR = 1e6
CHANNELS = ("entry_x", "entry_y", "entry_z", "entry_logvar", "exit_x", "exit_y", "exit_z", "exit_logvar")
ENTRY, EXIT = 0, 1


@dataclass(frozen=True, eq=False)
class SceneCoordMap:
    entry: np.ndarray  # (H, W, 3) float32, world mm
    entry_logvar: np.ndarray  # (H, W) float32
    exit: np.ndarray
    exit_logvar: np.ndarray
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        valid = np.asarray(self.valid, dtype=bool)
        if valid.ndim != 2:
            raise DimensionMismatch("valid mask must be 2-D")
        h, w = valid.shape
        arrays = {}
        for name, shape in (
            ("entry", (h, w, 3)),
            ("exit", (h, w, 3)),
            ("entry_logvar", (h, w)),
            ("exit_logvar", (h, w)),
        ):
            a = np.array(getattr(self, name), dtype=np.float32)
            if a.shape != shape:
                raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
            arrays[name] = a
        pts_ok = np.all(np.isfinite(arrays["entry"]), axis=-1) & np.all(np.isfinite(arrays["exit"]), axis=-1)
        valid = valid & pts_ok
        for name in ("entry", "exit"):
            arrays[name][~valid] = 0.0
        for name in ("entry_logvar", "exit_logvar"):
            arrays[name][~valid] = SENTINEL_LOGVAR
        for name, a in arrays.items():
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> SceneCoordMap:
        z3 = np.zeros((height, width, 3), np.float32)
        lv = np.full((height, width), SENTINEL_LOGVAR, np.float32)
        return cls(z3, lv, z3, lv, np.zeros((height, width), bool))

    def channels(self) -> np.ndarray:
        """The 8 planar channels, shape ``(8, H, W)``."""
        return np.concatenate(
            [
                np.moveaxis(self.entry, -1, 0),
                self.entry_logvar[None],
                np.moveaxis(self.exit, -1, 0),
                self.exit_logvar[None],
            ]
        )

    @classmethod
    def from_channels(cls, ch: np.ndarray) -> SceneCoordMap:
        """Inverse of :meth:`channels`; validity is derived from the log-variances."""
        ch = np.asarray(ch, dtype=np.float32)
        if ch.ndim != 3 or ch.shape[0] != 8:
            raise DimensionMismatch(f"expected (8, H, W) channels, got {ch.shape}")
        entry = np.moveaxis(ch[0:3], 0, -1)
        exit_ = np.moveaxis(ch[4:7], 0, -1)
        with np.errstate(invalid="ignore"):
            valid = (ch[3] < SENTINEL_LOGVAR) | (ch[7] < SENTINEL_LOGVAR)
        return cls(entry, ch[3], exit_, ch[7], valid)


def generate_gt_map(
    v: Volume,
    iso: IsoSurfaceSpec,
    camera: CameraModel,
    pose: RigidTransform,
    step: float = 1.0,
) -> SceneCoordMap:
    """Ground-truth entry/exit scene coordinates for every pixel of ``camera`` at ``pose``."""
    h, w = camera.shape
    pix = camera.pixel_centers().reshape(-1, 2)
    sel = _footprint(v, iso, camera, pose)
    entry = np.zeros((h * w, 3))
    exit_ = np.zeros((h * w, 3))
    hit = np.zeros(h * w, dtype=bool)
    if sel is None or sel.any():
        rows = np.arange(h * w) if sel is None else np.flatnonzero(sel)
        dirs = pixel_directions(camera, pose, pix[rows])
        origin = pose.center
        te, tx, ok = intersect_isosurface_batch(v, iso, np.broadcast_to(origin, dirs.shape), dirs, step)
        rows, te, tx, dirs = rows[ok], te[ok], tx[ok], dirs[ok]
        entry[rows] = origin + te[:, None] * dirs
        exit_[rows] = origin + tx[:, None] * dirs
        hit[rows] = True
    logvar = np.where(hit, 0.0, SENTINEL_LOGVAR).reshape(h, w)
    return SceneCoordMap(
        entry.reshape(h, w, 3), logvar, exit_.reshape(h, w, 3), logvar, hit.reshape(h, w)
    )


def _footprint(v: Volume, iso: IsoSurfaceSpec, camera: CameraModel, pose: RigidTransform):
    """Pixels whose rays can reach the region above the threshold, or None to keep all.

    Projects the corners of the active box; only valid when the whole box is
    in front of the source, otherwise every pixel is kept.
    """
    if iso.threshold <= 0:
        return None
    box = v.active_bounds(np.nextafter(iso.threshold, np.inf))
    if box is None:
        return np.zeros(camera.width * camera.height, dtype=bool)
    lo, hi = box
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    px, z = project_points(camera, pose, corners)
    if np.any(z <= 1e-6):
        return None
    # a projected box is convex, so its corner bbox (padded a pixel) covers every ray that meets it
    u0, v0 = np.floor(px.min(axis=0)) - 1
    u1, v1 = np.ceil(px.max(axis=0)) + 1
    c = camera.pixel_centers().reshape(-1, 2)
    return (c[:, 0] >= u0) & (c[:, 0] <= u1) & (c[:, 1] >= v0) & (c[:, 1] <= v1)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Parallel arrays of 2-D pixel / 3-D world point pairs."""

    pixels: np.ndarray  # (N, 2) continuous pixel coordinates
    points: np.ndarray  # (N, 3) world mm
    logvar: np.ndarray  # (N,)
    which: np.ndarray  # (N,) ENTRY or EXIT
    threshold: float = np.inf

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        lv = np.asarray(self.logvar, dtype=float).reshape(-1)
        which = np.asarray(self.which, dtype=np.int8).reshape(-1)
        if not (len(px) == len(pts) == len(lv) == len(which)):
            raise DimensionMismatch("correspondence arrays differ in length")
        if not np.all(np.isfinite(pts)):
            raise ValueError("correspondence points must be finite")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "logvar", lv)
        object.__setattr__(self, "which", which)

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, idx) -> CorrespondenceSet:
        return CorrespondenceSet(self.pixels[idx], self.points[idx], self.logvar[idx], self.which[idx], self.threshold)

    @classmethod
    def from_arrays(cls, pixels, points) -> CorrespondenceSet:
        n = len(pixels)
        return cls(pixels, points, np.zeros(n), np.zeros(n, np.int8))


def filter_map(
    scm: SceneCoordMap,
    logvar_threshold: float = 0.0,
    channels: tuple[str, ...] = ("entry", "exit"),
) -> CorrespondenceSet:
    """Keep the map's entry/exit points whose log-variance is at most ``logvar_threshold``.

    The two channels are filtered independently. Pass ``channels=("entry",)``
    to use first intersections only.
    """
    h, w = scm.valid.shape
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centers = np.stack([ii + 0.5, jj + 0.5], axis=-1)
    px, pts, lvs, which = [], [], [], []
    for name in channels:
        if name not in ("entry", "exit"):
            raise ValueError(f"unknown channel {name!r}")
        coords = getattr(scm, name)
        lv = getattr(scm, f"{name}_logvar")
        keep = scm.valid & (lv <= logvar_threshold)
        px.append(centers[keep])
        pts.append(coords[keep].astype(float))
        lvs.append(lv[keep].astype(float))
        which.append(np.full(int(keep.sum()), ENTRY if name == "entry" else EXIT, np.int8))
    return CorrespondenceSet(
        np.concatenate(px), np.concatenate(pts), np.concatenate(lvs), np.concatenate(which), logvar_threshold
    )


# --- reference losses -----------------------------------------------------------

def nll_loss_intersecting(pred_mean, pred_sigma, target):
    """Heteroscedastic Gaussian loss ``|target - mean|^2 / sigma^2 + 2 log sigma``.

    Works elementwise over leading batch dimensions.

    Returns
    -------
    loss, grad_mean, grad_sigma
    """
    mean = np.asarray(pred_mean, dtype=float)
    sigma = np.asarray(pred_sigma, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if np.any(sigma <= 0):
        raise NonPositiveSigma("sigma must be positive")
    r = tgt - mean
    r2 = np.sum(r * r, axis=-1)
    loss = r2 / sigma**2 + 2.0 * np.log(sigma)
    grad_mean = -2.0 * r / (sigma**2)[..., None]
    grad_sigma = -2.0 * r2 / sigma**3 + 2.0 / sigma
    return loss, grad_mean, grad_sigma


def nll_loss_nonexistent(pred_sigma):
    """Penalty ``1 / sigma`` pushing the variance of non-intersecting pixels up."""
    sigma = np.asarray(pred_sigma, dtype=float)
    if np.any(sigma <= 0):
        raise NonPositiveSigma("sigma must be positive")
    return 1.0 / sigma, -1.0 / sigma**2


# --- file format -------------------------------------------------------------------

def save_map(scm: SceneCoordMap, path) -> None:
    header = (
        f"WIDTH={scm.width}\n"
        f"HEIGHT={scm.height}\n"
        "CHANNELS=8\n"
        "TYPE=float32\n"
        "UNITS=mm\n"
        "DATA=raw little-endian\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(scm.channels().astype("<f4").tobytes())


def load_map(path) -> SceneCoordMap:
    """Read a map file; raises ParseError for malformed headers or truncated payloads."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"scene-coordinate map not found: {path}")
    with open(path, "rb") as fh:
        hdr = _read_header(fh, ("WIDTH", "HEIGHT", "CHANNELS", "TYPE", "DATA"))
        payload = fh.read()
    try:
        w, h, c = int(hdr["WIDTH"]), int(hdr["HEIGHT"]), int(hdr["CHANNELS"])
    except ValueError as exc:
        raise ParseError("WIDTH, HEIGHT and CHANNELS must be integers") from exc
    if c != 8:
        raise ParseError(f"expected CHANNELS=8, got {c}")
    if hdr["TYPE"] != "float32":
        raise ParseError(f"unsupported TYPE {hdr['TYPE']!r}")
    if w < 1 or h < 1:
        raise ParseError(f"invalid image size {w}x{h}")
    record = 8 * 4
    if len(payload) % record:
        raise ParseError("payload is truncated mid-pixel")
    if len(payload) != w * h * record:
        raise DimensionMismatch(f"payload holds {len(payload) // record} pixels, header declares {w * h}")
    ch = np.frombuffer(payload, dtype="<f4").reshape(8, h, w).astype(np.float32)
    return SceneCoordMap.from_channels(ch)
