"""Simulated C-arm dataset protocol and correspondence providers.

The providers stand in for a trained scene-coordinate regressor:
``oracle_exact`` returns ground truth, ``oracle_noisy`` corrupts it with
heteroscedastic isotropic Gaussian noise plus gross outliers, and
``load_external_map`` ingests maps predicted by an external network.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, ParseError
from .geometry import CameraModel, CArmPose, RigidTransform, carm_to_extrinsic, pose_record
from .scene_coords import SENTINEL_LOGVAR, SceneCoordMap, generate_gt_map, load_map, save_map
from .volume import DrrConfig, IsoSurfaceSpec, Volume, render_drr, save_image

log = logging.getLogger(__name__)

LOGVAR_FLOOR = -20.0
HONEST_OUTLIER_LOGVAR = 10.0


def _grid_values(rng: Sequence[float]) -> np.ndarray:
    start, stop, step = (float(x) for x in rng)
    if step <= 0:
        raise ValueError("angle step must be positive")
    count = int(round((stop - start) / step))
    return start + step * np.arange(count)


@dataclass(frozen=True)
class ProtocolSpec:
    """Pose-sampling protocol: a full (alpha, beta) angle grid, one view per grid point.

    Angle ranges are ``(start, stop, step)`` in degrees with ``stop``
    excluded. ``offset_sigma_mm`` is per world axis (x is lateral).
    """

    alpha_range: tuple[float, float, float] = (-45.0, 45.0, 1.0)
    beta_range: tuple[float, float, float] = (-45.0, 45.0, 1.0)
    offset_sigma_mm: tuple[float, float, float] = (90.0, 30.0, 30.0)
    total_views: int = 8100
    split: tuple[int, int, int] = (5184, 1296, 1620)
    seed: int = 0
    source_isocenter_distance: float = 700.0

    def __post_init__(self):
        for name in ("alpha_range", "beta_range", "offset_sigma_mm", "split"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.split) != 3 or sum(self.split) != self.total_views:
            raise ValueError(f"split {self.split} does not sum to total_views={self.total_views}")
        n_grid = len(self.alphas) * len(self.betas)
        if n_grid != self.total_views:
            raise ValueError(f"angle grid has {n_grid} points but total_views={self.total_views}")
        if min(self.offset_sigma_mm) < 0:
            raise ValueError("offset sigmas must be non-negative")

    @property
    def alphas(self) -> np.ndarray:
        return _grid_values(self.alpha_range)

    @property
    def betas(self) -> np.ndarray:
        return _grid_values(self.beta_range)

    @classmethod
    def scaled(cls, n_per_axis: int, seed: int = 0, **kw) -> ProtocolSpec:
        """Same angular span on an ``n x n`` grid; split keeps the 64/16/20 proportions."""
        step = 90.0 / n_per_axis
        total = n_per_axis * n_per_axis
        train = int(round(total * 0.64))
        val = int(round(total * 0.16))
        return cls(
            alpha_range=(-45.0, 45.0, step),
            beta_range=(-45.0, 45.0, step),
            total_views=total,
            split=(train, val, total - train - val),
            seed=seed,
            **kw,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def read_config(path) -> dict:
    """Parse a JSON object or ``key=value`` lines (``#`` comments, comma or space separated lists)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"bad config line {line!r}")
            value = value.strip()
            try:
                data[key.strip()] = json.loads(value)
            except json.JSONDecodeError:
                parts = value.replace(",", " ").split()
                try:
                    data[key.strip()] = [float(p) for p in parts] if len(parts) > 1 else value
                except ValueError as exc:
                    raise ParseError(f"bad value for {key.strip()!r}: {value!r}") from exc
    if not isinstance(data, dict):
        raise ParseError("config must be a JSON object or key=value lines")
    return data


def protocol_from_dict(data: dict, **overrides) -> ProtocolSpec:
    """Build a ProtocolSpec from config keys; unknown keys are ignored and overrides win."""
    data = data.get("protocol", data)
    known = set(ProtocolSpec.__dataclass_fields__)
    kwargs = {k: v for k, v in data.items() if k in known}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    if isinstance(kwargs.get("split"), dict):
        sp = kwargs["split"]
        kwargs["split"] = (sp["train"], sp["val"], sp["test"])
    return ProtocolSpec(**kwargs)


def load_protocol(path, **overrides) -> ProtocolSpec:
    """Read a ProtocolSpec from JSON or ``key=value`` lines; keyword overrides win."""
    return protocol_from_dict(read_config(path), **overrides)


def sample_poses(spec: ProtocolSpec, camera: CameraModel, isocenter=(0.0, 0.0, 0.0)) -> list[CArmPose]:
    """One C-arm pose per grid point (alpha outer, beta inner) with Gaussian isocenter offsets."""
    if spec.source_isocenter_distance >= camera.source_detector_distance:
        raise ValueError("the isocenter must lie between source and detector")
    rng = np.random.default_rng(spec.seed)
    alphas, betas = spec.alphas, spec.betas
    offsets = rng.standard_normal((len(alphas) * len(betas), 3)) * np.asarray(spec.offset_sigma_mm)
    poses = []
    k = 0
    for a in alphas:
        for b in betas:
            poses.append(CArmPose(float(a), float(b), offsets[k], isocenter, spec.source_isocenter_distance))
            k += 1
    return poses


def assign_splits(spec: ProtocolSpec) -> list[str]:
    """Split tag per view index from a seeded permutation with the spec's counts."""
    rng = np.random.default_rng([spec.seed, 1])
    perm = rng.permutation(spec.total_views)
    tags = np.empty(spec.total_views, dtype=object)
    n_train, n_val, _ = spec.split
    tags[perm[:n_train]] = "train"
    tags[perm[n_train : n_train + n_val]] = "val"
    tags[perm[n_train + n_val :]] = "test"
    return list(tags)


@dataclass(frozen=True, eq=False)
class ManifestRecord:
    id: str
    split: str
    carm: CArmPose
    pose: RigidTransform
    image_path: str
    map_path: str

    def to_dict(self) -> dict:
        rec = pose_record(self.id, self.carm, self.pose)
        rec = {
            "id": self.id,
            "split": self.split,
            **{k: v for k, v in rec.items() if k != "id"},
            "isocenter_mm": [float(x) for x in self.carm.isocenter],
            "source_isocenter_distance_mm": float(self.carm.source_isocenter_distance),
            "image_path": self.image_path,
            "map_path": self.map_path,
        }
        return rec

    @classmethod
    def from_dict(cls, rec: dict) -> ManifestRecord:
        carm = CArmPose(
            rec["alpha_deg"],
            rec["beta_deg"],
            rec["offset_mm"],
            rec.get("isocenter_mm", (0.0, 0.0, 0.0)),
            rec.get("source_isocenter_distance_mm", 700.0),
        )
        return cls(rec["id"], rec["split"], carm, RigidTransform.from_record(rec), rec["image_path"], rec["map_path"])


@dataclass(eq=False)
class DatasetManifest:
    records: list[ManifestRecord]
    root: Optional[Path] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        paths = [r.image_path for r in self.records] + [r.map_path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be distinct")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, view_id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == view_id:
                return r
        raise KeyError(view_id)

    def split(self, tag: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == tag]

    def resolve(self, rel: str) -> Path:
        return Path(rel) if self.root is None else Path(self.root) / rel

    @property
    def camera(self) -> CameraModel:
        return CameraModel.from_record(self.meta["camera"])

    def manifest_text(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    def poses_text(self) -> str:
        return "".join(json.dumps(pose_record(r.id, r.carm, r.pose)) + "\n" for r in self.records)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.jsonl").write_text(self.manifest_text())
        (out / "poses.jsonl").write_text(self.poses_text())
        (out / "dataset.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")


def load_manifest(dataset_dir) -> DatasetManifest:
    root = Path(dataset_dir)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {root}")
    records = [ManifestRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return DatasetManifest(records, root, meta)


def build_manifest(
    spec: ProtocolSpec, camera: CameraModel, isocenter=(0.0, 0.0, 0.0), meta: Optional[dict] = None
) -> DatasetManifest:
    """Poses, splits and file layout for ``spec`` without rendering anything."""
    poses = sample_poses(spec, camera, isocenter)
    tags = assign_splits(spec)
    width = max(5, len(str(len(poses) - 1)))
    records = []
    for k, (carm, tag) in enumerate(zip(poses, tags)):
        vid = f"view_{k:0{width}d}"
        records.append(
            ManifestRecord(vid, tag, carm, carm_to_extrinsic(carm), f"images/{vid}.pgm", f"maps/{vid}.scm")
        )
    full_meta = {"camera": camera.to_record(), "protocol": spec.to_dict()}
    full_meta.update(meta or {})
    return DatasetManifest(records, None, full_meta)


def _render_view(args):
    v, iso, camera, cfg, rec, out_dir, step = args
    try:
        img = render_drr(v, camera, rec.pose, cfg)
        save_image(img, Path(out_dir) / rec.image_path, "pgm16")
        scm = generate_gt_map(v, iso, camera, rec.pose, step)
        save_map(scm, Path(out_dir) / rec.map_path)
    except Exception as exc:
        raise RuntimeError(f"rendering view {rec.id} failed: {exc}") from exc
    return rec.id


def generate_dataset(
    v: Volume,
    iso: IsoSurfaceSpec,
    camera: CameraModel,
    spec: ProtocolSpec,
    cfg: DrrConfig,
    out_dir,
    isocenter=None,
    render: bool = True,
    workers: int = 1,
    extra_meta: Optional[dict] = None,
) -> DatasetManifest:
    """Render a DRR and a ground-truth scene-coordinate map for every protocol pose.

    The isocenter defaults to the center of the volume. With ``render=False``
    only ``manifest.jsonl``, ``poses.jsonl`` and ``dataset.json`` are written.
    ``extra_meta`` entries are added to ``dataset.json``.
    """
    out = Path(out_dir)
    lo, hi = v.bounds
    if isocenter is None:
        isocenter = 0.5 * (lo + hi)
    meta = {
        "iso_threshold_hu": float(iso.threshold),
        "iso_refine_tolerance_mm": float(iso.refine_tolerance),
        "drr": asdict(cfg),
        "volume_bounds_mm": [[float(x) for x in lo], [float(x) for x in hi]],
        "isocenter_mm": [float(x) for x in isocenter],
    }
    meta.update(extra_meta or {})
    manifest = build_manifest(spec, camera, isocenter, meta)
    manifest.root = out
    out.mkdir(parents=True, exist_ok=True)
    if render:
        (out / "images").mkdir(exist_ok=True)
        (out / "maps").mkdir(exist_ok=True)
        jobs = [(v, iso, camera, cfg, rec, str(out), cfg.step) for rec in manifest.records]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for vid in pool.map(_render_view, jobs, chunksize=4):
                    log.debug("rendered %s", vid)
        else:
            for job in jobs:
                log.debug("rendered %s", _render_view(job))
    manifest.write(out)
    return manifest


# --- correspondence providers -----------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Noise model of the noisy oracle.

    Each valid pixel draws ``sigma_p = sigma_mm * exp(sigma_jitter * g)``
    with ``g ~ N(0, 1)``; its entry and exit points get independent
    isotropic ``N(0, sigma_p^2)`` noise and log-variance ``2 ln sigma_p``.
    Each point is independently replaced by a uniform draw inside the volume
    box with probability ``outlier_rate``. Outliers keep the low log-variance
    unless ``honest_outliers`` is set.
    """

    sigma_mm: float = 1.0
    sigma_jitter: float = 0.0
    outlier_rate: float = 0.0
    seed: int = 0
    honest_outliers: bool = False

    def __post_init__(self):
        if self.sigma_mm < 0 or self.sigma_jitter < 0:
            raise ValueError("sigma_mm and sigma_jitter must be non-negative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")


def oracle_exact(record: ManifestRecord, root=None) -> SceneCoordMap:
    path = Path(record.map_path) if root is None else Path(root) / record.map_path
    return load_map(path)


def oracle_noisy(scm: SceneCoordMap, noise: NoiseSpec, bounds=None) -> SceneCoordMap:
    """Corrupt a ground-truth map; deterministic for a given ``noise.seed``.

    ``bounds`` is the ``(lo, hi)`` box for outlier draws; it defaults to the
    bounding box of the map's valid points.
    """
    rng = np.random.default_rng(noise.seed)
    valid = scm.valid
    rows = np.flatnonzero(valid.ravel())
    n = rows.size
    if bounds is None:
        pts = np.concatenate([scm.entry[valid], scm.exit[valid]]).astype(float)
        bounds = (pts.min(axis=0), pts.max(axis=0)) if len(pts) else (np.zeros(3), np.zeros(3))
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)

    # draws cover valid pixels only, in row-major order
    sigma = noise.sigma_mm * np.exp(noise.sigma_jitter * rng.standard_normal(n))
    with np.errstate(divide="ignore"):
        logvar = np.maximum(2.0 * np.log(sigma), LOGVAR_FLOOR)

    out = {}
    for name in ("entry", "exit"):
        pts = getattr(scm, name).reshape(-1, 3)[rows].astype(float)
        pts = pts + rng.standard_normal((n, 3)) * sigma[:, None]
        is_out = rng.random(n) < noise.outlier_rate
        n_out = int(is_out.sum())
        pts[is_out] = rng.uniform(lo, hi, (n_out, 3))
        lv = logvar.copy()
        if noise.honest_outliers:
            lv[is_out] = HONEST_OUTLIER_LOGVAR
        full = np.zeros((valid.size, 3))
        full[rows] = pts
        full_lv = np.full(valid.size, SENTINEL_LOGVAR)
        full_lv[rows] = lv
        out[name] = (full.reshape(valid.shape + (3,)), full_lv.reshape(valid.shape))
    return SceneCoordMap(out["entry"][0], out["entry"][1], out["exit"][0], out["exit"][1], valid)


def load_external_map(path, camera: Optional[CameraModel] = None) -> SceneCoordMap:
    """Read an externally predicted 8-channel map; optionally check its size against ``camera``."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"external map not found: {path}")
    scm = load_map(path)
    if camera is not None and scm.valid.shape != camera.shape:
        raise DimensionMismatch(f"map is {scm.width}x{scm.height}, camera is {camera.width}x{camera.height}")
    return scm
