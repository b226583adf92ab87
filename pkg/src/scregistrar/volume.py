"""CT volumes, trilinear sampling, isosurface ray casting and DRR rendering."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Optional

import numpy as np

from .errors import DimensionMismatch, NonFiniteValue, ParseError
from .geometry import CameraModel, Ray, RigidTransform, pixel_directions

# rays x samples evaluated per vectorized block
_BLOCK_SAMPLES = 1 << 21


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar CT grid in Hounsfield units.

    ``data`` is indexed ``[i, j, k]`` along the world x, y and z axes; voxel
    ``(i, j, k)`` has its center at ``origin + spacing * (i, j, k)``.
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DimensionMismatch(f"volume data must be 3-D, got shape {data.shape}")
        if min(data.shape) < 2:
            raise DimensionMismatch("every volume dimension needs at least 2 voxels")
        spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        if np.any(spacing <= 0):
            raise ValueError("voxel spacing must be positive")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "_cell_cache", {})

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box spanned by the voxel centers (world mm)."""
        lo = self.origin
        hi = self.origin + self.spacing * (np.array(self.dims) - 1)
        return lo, hi

    @cached_property
    def _flat(self) -> np.ndarray:
        # x-fastest so voxel (i, j, k) sits at i + nx * (j + ny * k)
        return np.asarray(self.data, dtype=float).ravel(order="F")

    def cell_state(self, level: float) -> np.ndarray:
        """Per-cell class against ``level``: 0 all corners <= level, 2 all > level, 1 mixed.

        Flat x-fastest array indexed by the cell's lowest corner voxel. Cached per level.
        """
        key = float(level)
        if key not in self._cell_cache:
            d = np.asarray(self.data, dtype=float)
            corners = [d[a:a + d.shape[0] - 1, b:b + d.shape[1] - 1, c:c + d.shape[2] - 1]
                       for a in (0, 1) for b in (0, 1) for c in (0, 1)]
            lo = np.minimum.reduce(corners)
            hi = np.maximum.reduce(corners)
            state = np.zeros(d.shape, dtype=np.int8)
            state[:-1, :-1, :-1] = np.where(lo > key, 2, np.where(hi > key, 1, 0))
            self._cell_cache[key] = state.ravel(order="F")
        return self._cell_cache[key]

    def active_bounds(self, level: float) -> Optional[tuple[np.ndarray, np.ndarray]]:
        """World box outside which every interpolated sample is strictly below ``level``.

        Returns None when no voxel reaches ``level``.
        """
        mask = np.asarray(self.data) >= level
        if not mask.any():
            return None
        idx = [np.flatnonzero(mask.any(axis=tuple(a for a in range(3) if a != ax))) for ax in range(3)]
        n = np.array(self.dims)
        lo = np.maximum(np.array([i[0] for i in idx]) - 1, 0)
        hi = np.minimum(np.array([i[-1] for i in idx]) + 1, n - 1)
        return self.origin + self.spacing * lo, self.origin + self.spacing * hi


@dataclass(frozen=True)
class IsoSurfaceSpec:
    threshold: float = 300.0
    refine_tolerance: float = 1e-3

    def __post_init__(self):
        if self.refine_tolerance <= 0:
            raise ValueError("refine_tolerance must be positive")


@dataclass(frozen=True)
class DrrConfig:
    step: float = 1.0
    mu_water: float = 0.02
    hu_air_cutoff: float = -900.0
    output: Literal["line_integral", "attenuated", "neglog"] = "line_integral"

    def __post_init__(self):
        if self.step <= 0 or self.mu_water <= 0:
            raise ValueError("step and mu_water must be positive")
        if self.output not in ("line_integral", "attenuated", "neglog"):
            raise ValueError(f"unknown DRR output mode {self.output!r}")


# --- file I/O ----------------------------------------------------------------

_TYPES = {"int16": np.dtype("<i2"), "float32": np.dtype("<f4")}


def _fmt(x: float) -> str:
    return repr(float(x))


def save_volume(v: Volume, path) -> None:
    """Write ``v`` as a text header followed by a little-endian raw block (x fastest)."""
    type_name = "int16" if v.data.dtype == np.int16 else "float32"
    header = (
        f"DIMS={' '.join(str(n) for n in v.dims)}\n"
        f"SPACING={' '.join(_fmt(s) for s in v.spacing)}\n"
        f"ORIGIN={' '.join(_fmt(o) for o in v.origin)}\n"
        f"TYPE={type_name}\n"
        "DATA=raw little-endian\n"
    )
    payload = np.asarray(v.data).astype(_TYPES[type_name]).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def _read_header(fh, required: tuple[str, ...]) -> dict[str, str]:
    fields: dict[str, str] = {}
    while True:
        line = fh.readline()
        if not line:
            raise ParseError("header ended before the DATA line")
        try:
            text = line.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise ParseError("header is not ASCII") from exc
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ParseError(f"malformed header line {text!r}")
        fields[key.strip().upper()] = value.strip()
        if key.strip().upper() == "DATA":
            break
    missing = [k for k in required if k not in fields]
    if missing:
        raise ParseError(f"header is missing {', '.join(missing)}")
    return fields


def _parse_numbers(value: str, count: int, kind=float) -> list:
    parts = value.split()
    if len(parts) != count:
        raise ParseError(f"expected {count} values, got {value!r}")
    try:
        return [kind(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"bad number in {value!r}") from exc


def load_volume(path) -> Volume:
    if not os.path.exists(path):
        raise FileNotFoundError(f"volume file not found: {path}")
    with open(path, "rb") as fh:
        hdr = _read_header(fh, ("DIMS", "SPACING", "ORIGIN", "TYPE", "DATA"))
        payload = fh.read()
    dims = _parse_numbers(hdr["DIMS"], 3, int)
    spacing = _parse_numbers(hdr["SPACING"], 3)
    origin = _parse_numbers(hdr["ORIGIN"], 3)
    if hdr["TYPE"] not in _TYPES:
        raise ParseError(f"unsupported TYPE {hdr['TYPE']!r}")
    if "raw" not in hdr["DATA"].lower():
        raise ParseError(f"unsupported DATA encoding {hdr['DATA']!r}")
    if min(dims) < 2:
        raise ParseError(f"invalid DIMS {dims}")
    dtype = _TYPES[hdr["TYPE"]]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise DimensionMismatch(f"data block has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F").astype(dtype.newbyteorder("="))
    return Volume(data, spacing, origin)


# --- sampling ----------------------------------------------------------------

def _sample_points(v: Volume, points: np.ndarray) -> np.ndarray:
    """Trilinear samples at world points ``(N, 3)``; zero outside the voxel-center box."""
    n = np.array(v.dims)
    q = (points - v.origin) / v.spacing
    # snap round-off so queries at voxel centres return stored values exactly
    r = np.rint(q)
    q = np.where(np.abs(q - r) < 1e-9, r, q)
    inside = np.all((q >= 0) & (q <= n - 1), axis=-1)
    q = np.clip(q, 0, n - 1)
    i0 = np.minimum(np.floor(q).astype(np.intp), n - 2)
    f = q - i0
    sy = n[0]
    sz = n[0] * n[1]
    base = i0[:, 0] + sy * i0[:, 1] + sz * i0[:, 2]
    flat = v._flat
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = flat[base] * (1 - fx) + flat[base + 1] * fx
    c10 = flat[base + sy] * (1 - fx) + flat[base + sy + 1] * fx
    c01 = flat[base + sz] * (1 - fx) + flat[base + sz + 1] * fx
    c11 = flat[base + sy + sz] * (1 - fx) + flat[base + sy + sz + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    out[~inside] = 0.0
    return out


def _above_points(v: Volume, points: np.ndarray, level: float) -> np.ndarray:
    """``_sample_points(v, points) > level`` without interpolating in uniform cells."""
    n = np.array(v.dims)
    q = (points - v.origin) / v.spacing
    r = np.rint(q)
    q = np.where(np.abs(q - r) < 1e-9, r, q)
    inside = np.all((q >= 0) & (q <= n - 1), axis=-1)
    i0 = np.minimum(np.floor(np.clip(q, 0, n - 1)).astype(np.intp), n - 2)
    base = i0[:, 0] + n[0] * (i0[:, 1] + n[1] * i0[:, 2])
    state = v.cell_state(level)[base]
    out = (state == 2) & inside
    mixed = np.flatnonzero((state == 1) & inside)
    if mixed.size:
        out[mixed] = _sample_points(v, points[mixed]) > level
    if level < 0:
        # zero outside the grid is above a negative level
        out[~inside] = True
    return out


def sample_trilinear(v: Volume, point_world) -> np.ndarray | float:
    """Trilinearly interpolated HU at ``point_world`` (``(3,)`` or ``(..., 3)``).

    Points outside the box of voxel centers read as 0 HU.
    """
    p = np.asarray(point_world, dtype=float)
    vals = _sample_points(v, p.reshape(-1, 3))
    if p.ndim == 1:
        return float(vals[0])
    return vals.reshape(p.shape[:-1])


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test. Returns ``(t_near, t_far, hit)`` with t_near clamped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (lo - origins) * inv
        t_b = (hi - origins) * inv
    t_lo = np.minimum(t_a, t_b)
    t_hi = np.maximum(t_a, t_b)
    # axis-parallel rays: inside the slab means unconstrained
    par = dirs == 0
    inside_slab = (origins >= lo) & (origins <= hi)
    t_lo = np.where(par, np.where(inside_slab, -np.inf, np.inf), t_lo)
    t_hi = np.where(par, np.where(inside_slab, np.inf, -np.inf), t_hi)
    t_near = np.maximum(t_lo.max(axis=-1), 0.0)
    t_far = t_hi.min(axis=-1)
    return t_near, t_far, t_far >= t_near


def _blocks(n_rays: int, n_samples: int):
    per = max(1, _BLOCK_SAMPLES // max(n_samples, 1))
    for s in range(0, n_rays, per):
        yield slice(s, min(s + per, n_rays))


# --- isosurface ----------------------------------------------------------------

def intersect_isosurface_batch(
    v: Volume,
    iso: IsoSurfaceSpec,
    origins: np.ndarray,
    dirs: np.ndarray,
    step: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First and last threshold crossings for many rays.

    Samples are placed at ``t0 - step + k * step`` where ``t0`` is the ray's
    entry into the volume box, so the march starts and ends one step in air.
    Crossings between consecutive samples are refined by bisection.

    Returns ``(entry_t, exit_t, hit)`` as distances along the unit directions.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(origins)
    entry_t = np.full(n, np.nan)
    exit_t = np.full(n, np.nan)
    hit = np.zeros(n, dtype=bool)
    if step <= 0:
        raise ValueError("step must be positive")

    lo, hi = v.bounds
    t0, t1, in_box = ray_box(origins, dirs, lo, hi)
    thr = iso.threshold
    if thr > 0:
        active = v.active_bounds(np.nextafter(thr, np.inf))
        if active is None:
            return entry_t, exit_t, hit
        s0, s1, in_active = ray_box(origins, dirs, *active)
        cand = in_box & in_active
    else:
        # air outside the grid already exceeds the threshold; march the whole box
        s0, s1, cand = t0, t1, in_box.copy()
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return entry_t, exit_t, hit

    T0 = np.maximum(t0[idx] - step, 0.0)
    k_last = np.ceil((t1[idx] + step - T0) / step)
    k_start = np.maximum(np.floor((s0[idx] - T0) / step) - 1, 0)
    k_end = np.minimum(np.ceil((s1[idx] - T0) / step) + 1, k_last)
    counts = (k_end - k_start + 1).astype(np.intp)
    max_count = int(counts.max())

    for blk in _blocks(idx.size, max_count):
        ridx = idx[blk]
        o = origins[ridx]
        d = dirs[ridx]
        kk = k_start[blk][:, None] + np.arange(max_count)[None, :]
        valid = np.arange(max_count)[None, :] < counts[blk][:, None]
        tt = T0[blk][:, None] + kk * step
        pts = o[:, None, :] + tt[..., None] * d[:, None, :]
        inside = _above_points(v, pts.reshape(-1, 3), thr).reshape(tt.shape) & valid
        change = inside[:, 1:] != inside[:, :-1]
        has = change.any(axis=1)
        if not has.any():
            continue
        first = np.argmax(change, axis=1)
        last = change.shape[1] - 1 - np.argmax(change[:, ::-1], axis=1)
        rows = np.flatnonzero(has)
        for which, kidx, out in ((0, first, entry_t), (1, last, exit_t)):
            a = tt[rows, kidx[rows]]
            b = tt[rows, kidx[rows] + 1]
            a_in = inside[rows, kidx[rows]]
            ts = _bisect(v, thr, o[rows], d[rows], a, b, a_in, iso.refine_tolerance)
            out[ridx[rows]] = ts
        hit[ridx[rows]] = True
    return entry_t, exit_t, hit


def _bisect(v, thr, o, d, a, b, a_inside, tol):
    """Shrink brackets ``[a, b]`` around a threshold crossing to width ``tol``."""
    width = float(np.max(b - a)) if a.size else 0.0
    iters = max(0, math.ceil(math.log2(width / tol))) if width > tol else 0
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = _sample_points(v, o + m[:, None] * d)
        m_inside = fm > thr
        same = m_inside == a_inside
        a = np.where(same, m, a)
        b = np.where(same, b, m)
    return 0.5 * (a + b)


def intersect_isosurface(
    v: Volume, iso: IsoSurfaceSpec, ray: Ray, step: float = 1.0
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Entry and exit points of ``ray`` on the ``iso.threshold`` level set, or None."""
    te, tx, hit = intersect_isosurface_batch(v, iso, ray.origin[None], ray.direction[None], step)
    if not hit[0]:
        return None
    return ray.at(te[0]), ray.at(tx[0])


# --- DRR ---------------------------------------------------------------------------

def attenuation(hu: np.ndarray, cfg: DrrConfig) -> np.ndarray:
    mu = cfg.mu_water * (1.0 + np.asarray(hu, dtype=float) / 1000.0)
    mu = np.maximum(mu, 0.0)
    return np.where(np.asarray(hu) < cfg.hu_air_cutoff, 0.0, mu)


def line_integrals(
    v: Volume, origins: np.ndarray, dirs: np.ndarray, cfg: DrrConfig
) -> np.ndarray:
    """Composite-trapezoid integral of attenuation along each ray inside the volume box."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(origins)
    out = np.zeros(n)
    lo, hi = v.bounds
    t0, t1, in_box = ray_box(origins, dirs, lo, hi)
    h = cfg.step

    # outside this box every interpolated sample is below the air cutoff (mu = 0)
    if cfg.hu_air_cutoff > -1000.0:
        active = v.active_bounds(cfg.hu_air_cutoff)
        if active is None:
            return out
        s0, s1, in_active = ray_box(origins, dirs, *active)
        cand = in_box & in_active
    else:
        s0, s1, cand = t0, t1, in_box.copy()
    idx = np.flatnonzero(cand & (t1 > t0))
    if idx.size == 0:
        return out

    T0 = t0[idx]
    L = t1[idx] - T0
    n_full = np.floor(L / h)
    rem = L - n_full * h
    k_start = np.clip(np.floor((s0[idx] - T0) / h) - 1, 0, n_full)
    k_end = np.clip(np.ceil((s1[idx] - T0) / h) + 1, 0, n_full)
    counts = (k_end - k_start + 1).astype(np.intp)
    max_count = int(counts.max())

    for blk in _blocks(idx.size, max_count + 1):
        ridx = idx[blk]
        o = origins[ridx]
        d = dirs[ridx]
        ar = np.arange(max_count)[None, :]
        valid = ar < counts[blk][:, None]
        tt = T0[blk][:, None] + (k_start[blk][:, None] + ar) * h
        pts = o[:, None, :] + tt[..., None] * d[:, None, :]
        mu = attenuation(_sample_points(v, pts.reshape(-1, 3)).reshape(tt.shape), cfg)
        mu = np.where(valid, mu, 0.0)
        # composite trapezoid over the full steps [0, n_full * h]
        kk = k_start[blk][:, None] + ar
        w = h - 0.5 * h * (kk == 0) - 0.5 * h * (kk == n_full[blk][:, None])
        total = (w * mu).sum(axis=1)
        # partial last interval [n_full * h, L]
        r = rem[blk]
        if np.any(r > 0):
            mu_end = attenuation(_sample_points(v, o + t1[ridx][:, None] * d), cfg)
            last = np.clip(counts[blk] - 1, 0, max_count - 1)
            mu_last = np.where(k_end[blk] == n_full[blk], mu[np.arange(len(ridx)), last], 0.0)
            total = total + 0.5 * r * (mu_last + mu_end)
        out[ridx] = total
    return out


def render_drr(
    v: Volume, camera: CameraModel, pose: RigidTransform, cfg: DrrConfig = DrrConfig()
) -> np.ndarray:
    """Digitally reconstructed radiograph of ``v`` seen through ``camera`` at ``pose``.

    Returns a ``(height, width)`` float image whose meaning depends on
    ``cfg.output``: the line integral of attenuation, the transmitted fraction
    ``exp(-integral)``, or ``-log`` of that fraction.
    """
    pix = camera.pixel_centers().reshape(-1, 2)
    dirs = pixel_directions(camera, pose, pix)
    origins = np.broadcast_to(pose.center, dirs.shape)
    integral = line_integrals(v, origins, dirs, cfg).reshape(camera.shape)
    if cfg.output == "line_integral":
        return integral
    transmitted = np.exp(-integral)
    if cfg.output == "attenuated":
        return transmitted
    return -np.log(transmitted)


# --- 2-D images ------------------------------------------------------------------

def save_image(img, path, format: Literal["pgm16", "csv"] = "pgm16") -> None:
    """Write a 2-D image as 16-bit binary PGM (min/max rescaled) or raw CSV."""
    a = np.asarray(img, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch("save_image expects a 2-D array")
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue("image contains NaN or infinite pixels")
    if format == "csv":
        np.savetxt(path, a, fmt="%.17g", delimiter=",")
        return
    if format != "pgm16":
        raise ValueError(f"unknown image format {format!r}")
    lo, hi = a.min(), a.max()
    if hi > lo:
        q = np.rint((a - lo) / (hi - lo) * 65535.0)
    else:
        q = np.zeros_like(a)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())


def load_pgm16(path) -> np.ndarray:
    """Read a binary 16-bit PGM written by :func:`save_image`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ParseError("not a binary PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    body = raw[pos:]
    need = w * h * np.dtype(dtype).itemsize
    if len(body) != need:
        raise DimensionMismatch(f"PGM body has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.uint16)
