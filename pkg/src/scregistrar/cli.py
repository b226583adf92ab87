"""Command-line entry point: ``scregistrar simulate | register | evaluate | overlay | phantom``.

Exit status is 0 when every declared output was written, 1 on I/O, parse or
configuration errors. Per-view solver failures are recorded in the results
file and do not change the exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyInput, LandmarkBehindCamera, ParseError, RegistrationError
from .evaluation import load_landmarks, mtre, overlay_edges, proj_mtre, report, save_landmarks, save_overlay_ppm
from .geometry import CameraModel, RigidTransform
from .phantoms import sphere_phantom, two_lobe_landmarks, two_lobe_phantom
from .pipeline import (
    NoiseSpec,
    ProtocolSpec,
    generate_dataset,
    load_external_map,
    load_manifest,
    oracle_exact,
    oracle_noisy,
    protocol_from_dict,
    read_config,
)
from .scene_coords import filter_map
from .solver import RansacConfig, register
from .volume import DrrConfig, IsoSurfaceSpec, load_pgm16, load_volume, save_image, save_volume

log = logging.getLogger("scregistrar")

# 256x256 detector, 2.5 mm pitch, 1020 mm source-detector distance
DEFAULT_CAMERA = {"width": 256, "height": 256, "pixel_pitch": 2.5, "source_detector_distance": 1020.0}
DEFAULT_ISO_HU = 300.0


class CliError(Exception):
    """Configuration or usage error reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _echo(command: str, resolved: dict) -> None:
    log.info("resolved config for %s: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- simulate ----------------------------------------------------------------------

def _resolve_simulate(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    camera_rec = dict(DEFAULT_CAMERA)
    camera_rec.update(cfg.get("camera", {}))
    if args.camera:
        camera_rec = read_config(args.camera)
    overrides = {"seed": args.seed}
    proto = cfg.get("protocol", cfg)
    if args.views_per_axis is not None:
        spec = ProtocolSpec.scaled(args.views_per_axis, seed=args.seed if args.seed is not None else proto.get("seed", 0),
                                   **{k: proto[k] for k in ("offset_sigma_mm", "source_isocenter_distance") if k in proto})
    else:
        spec = protocol_from_dict(cfg, **overrides)
    drr = DrrConfig(
        step=float(args.drr_step if args.drr_step is not None else cfg.get("drr_step", 1.0)),
        mu_water=float(cfg.get("mu_water", 0.02)),
        hu_air_cutoff=float(cfg.get("hu_air_cutoff", -900.0)),
        output=cfg.get("drr_output", "line_integral"),
    )
    iso_hu = args.iso_threshold if args.iso_threshold is not None else cfg.get("iso_threshold_hu", DEFAULT_ISO_HU)
    return {
        "volume": str(args.volume),
        "out": str(args.out),
        "camera": CameraModel.from_record(camera_rec).to_record(),
        "protocol": spec.to_dict(),
        "drr": asdict(drr),
        "iso_threshold_hu": float(iso_hu),
        "isocenter_mm": cfg.get("isocenter_mm"),
        "workers": int(args.workers if args.workers is not None else cfg.get("workers", 1)),
    }


def cmd_simulate(args) -> int:
    resolved = _resolve_simulate(args)
    _echo("simulate", resolved)
    v = load_volume(resolved["volume"])
    spec = protocol_from_dict(resolved["protocol"])
    manifest = generate_dataset(
        v,
        IsoSurfaceSpec(resolved["iso_threshold_hu"]),
        CameraModel.from_record(resolved["camera"]),
        spec,
        DrrConfig(**resolved["drr"]),
        resolved["out"],
        isocenter=resolved["isocenter_mm"],
        workers=resolved["workers"],
        extra_meta={"volume_path": str(Path(resolved["volume"]).resolve())},
    )
    log.info("wrote %d views to %s", len(manifest), resolved["out"])
    return 0


# --- register ----------------------------------------------------------------------

def _view_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _register_one(job):
    rec, root, source, noise, bounds, iso_lv, channels, ransac, camera = job
    if source == "gt":
        scm = oracle_exact(rec, root)
    elif source == "noisy":
        scm = oracle_noisy(oracle_exact(rec, root), noise, bounds)
    else:
        scm = load_external_map(source, camera)
    corr = filter_map(scm, iso_lv, channels)
    t0 = time.perf_counter()
    try:
        out = register(corr, camera, ransac).to_record(rec.id)
    except RegistrationError as exc:
        out = {
            "id": rec.id,
            "rotation": None,
            "translation_mm": None,
            "inlier_count": 0,
            "inlier_ratio": 0.0,
            "mean_reproj_error_px": None,
            "iterations_used": 0,
            "converged": False,
            "error": f"{type(exc).__name__}: {exc}",
        }
    out["wall_time_ms"] = 1000.0 * (time.perf_counter() - t0)
    return out


def cmd_register(args) -> int:
    manifest = load_manifest(args.dataset)
    camera = manifest.camera
    records = manifest.records if args.split == "all" else manifest.split(args.split)
    if args.view:
        records = [manifest.by_id(args.view)]
    source = args.source
    external = None
    if source.startswith("external:"):
        external = Path(source.split(":", 1)[1])
        if not external.exists():
            raise FileNotFoundError(f"external map source not found: {external}")
        if external.is_file() and len(records) != 1:
            raise CliError("an external map file needs --view; pass a directory of {id}.scm files otherwise")
    elif source not in ("gt", "noisy"):
        raise CliError(f"unknown source {source!r}; use gt, noisy or external:PATH")

    ransac = RansacConfig(
        max_iterations=args.ransac_iters,
        reproj_threshold_px=args.reproj_px,
        confidence=args.confidence,
        seed=args.seed,
        max_correspondences=args.max_correspondences,
    )
    channels = ("entry", "exit") if args.channels == "both" else (args.channels,)
    bounds = manifest.meta.get("volume_bounds_mm")
    resolved = {
        "dataset": str(args.dataset),
        "source": source,
        "split": args.split,
        "view": args.view,
        "ransac": asdict(ransac),
        "logvar_threshold": args.logvar_threshold,
        "channels": list(channels),
        "noise": {
            "sigma_mm": args.noise_sigma,
            "sigma_jitter": args.noise_jitter,
            "outlier_rate": args.outlier_rate,
            "honest_outliers": args.honest_outliers,
        },
        "out": str(args.out),
        "workers": args.workers,
    }
    _echo("register", resolved)

    jobs = []
    for rec in records:
        idx = manifest.records.index(rec)
        noise = NoiseSpec(args.noise_sigma, args.noise_jitter, args.outlier_rate, _view_seed(args.seed, idx),
                          args.honest_outliers)
        if external is None:
            src = source
        else:
            src = str(external if external.is_file() else external / f"{rec.id}.scm")
        jobs.append((rec, manifest.root, src, noise, bounds, args.logvar_threshold, channels, ransac, camera))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_register_one, jobs))
    else:
        results = [_register_one(j) for j in jobs]

    n_fail = sum(1 for r in results if not r["converged"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in results))
    log.info("registered %d views (%d failures) -> %s", len(results), n_fail, args.out)
    return 0


# --- evaluate ----------------------------------------------------------------------

def _read_results(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"results file not found: {p}")
    out = []
    for k, line in enumerate(p.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{p}:{k + 1}: {exc}") from exc
    return out


def _estimated_pose(rec: dict):
    if not rec.get("converged") or rec.get("rotation") is None:
        return None
    return RigidTransform.from_record(rec)


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.dataset)
    camera = manifest.camera
    landmarks = load_landmarks(args.landmarks)
    results = _read_results(args.results)
    if not results:
        raise EmptyInput(f"no registration results in {args.results}")
    _echo("evaluate", {k: str(v) for k, v in vars(args).items() if k != "func"})

    rows = []
    for rec in results:
        truth = manifest.by_id(rec["id"]).pose
        est = _estimated_pose(rec)
        if est is None:
            rows.append((rec["id"], math.inf, math.inf))
            continue
        try:
            p = proj_mtre(landmarks, camera, truth, est)
        except LandmarkBehindCamera:
            p = math.inf
        rows.append((rec["id"], mtre(landmarks, truth, est), p))

    rep = report([r[1] for r in rows], args.threshold, "mTRE")
    rep_proj = report([r[2] for r in rows], args.threshold, "proj. mTRE")
    out = rep.to_dict()
    out["proj_mtre"] = rep_proj.to_dict()
    _write_json(args.out, out)
    text = rep.to_text() + "\n\n" + rep_proj.to_text() + "\n"
    Path(args.out).with_suffix(".txt").write_text(text)
    print(text, end="")
    if args.csv:
        lines = ["id,mtre_mm,proj_mtre_mm"] + [f"{i},{a!r},{b!r}" for i, a, b in rows]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return 0


# --- overlay -----------------------------------------------------------------------

def cmd_overlay(args) -> int:
    manifest = load_manifest(args.dataset)
    rec = {r["id"]: r for r in _read_results(args.results)}.get(args.view)
    if rec is None:
        raise CliError(f"no registration result for view {args.view!r}")
    view = manifest.by_id(args.view)
    est = _estimated_pose(rec)
    if est is None:
        raise CliError(f"view {args.view!r} was not registered; nothing to overlay")
    camera = manifest.camera
    vol_path = args.volume or manifest.meta.get("volume_path")
    if not vol_path:
        raise CliError("dataset.json records no volume; pass --volume")
    v = load_volume(vol_path)
    iso = IsoSurfaceSpec(manifest.meta.get("iso_threshold_hu", DEFAULT_ISO_HU))
    base = load_pgm16(manifest.resolve(view.image_path)).astype(float)
    if base.shape != camera.shape:
        raise DimensionMismatch(f"image {base.shape} does not match camera {camera.shape}")
    _echo("overlay", {k: str(val) for k, val in vars(args).items() if k != "func"})
    edges = overlay_edges(v, iso, camera, est, manifest.meta.get("drr", {}).get("step", 1.0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".ppm":
        save_overlay_ppm(base, edges, out)
    else:
        img = base.copy()
        img[edges] = base.max() if base.size else 0.0
        save_image(img, out, "pgm16")
    log.info("overlay with %d edge pixels -> %s", int(edges.sum()), out)
    return 0


# --- phantom -----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    if args.kind == "sphere":
        v = sphere_phantom(args.dims, args.spacing, radius=args.radius)
    else:
        v = two_lobe_phantom(args.dims, args.spacing)
    save_volume(v, args.out)
    if args.landmarks:
        save_landmarks(two_lobe_landmarks(), args.landmarks)
    log.info("wrote %s phantom %s -> %s", args.kind, v.dims, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scregistrar", description="Scene-coordinate 2D/3D registration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--log", help="append the run log to this file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render DRRs and ground-truth maps for a pose protocol")
    s.add_argument("--volume", required=True)
    s.add_argument("--config", help="protocol/camera config (JSON or key=value)")
    s.add_argument("--camera", help="camera config file; overrides the config's camera section")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--views-per-axis", type=int, help="shrink the angle grid to N x N views")
    s.add_argument("--iso-threshold", type=float)
    s.add_argument("--drr-step", type=float)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("register", help="recover a pose per view from scene-coordinate maps")
    r.add_argument("--dataset", required=True)
    r.add_argument("--source", default="gt", help="gt | noisy | external:PATH")
    r.add_argument("--ransac-iters", type=int, default=1000)
    r.add_argument("--reproj-px", type=float, default=10.0)
    r.add_argument("--confidence", type=float, default=0.999)
    r.add_argument("--max-correspondences", type=int, default=4000)
    r.add_argument("--logvar-threshold", type=float, default=0.0)
    r.add_argument("--channels", choices=("both", "entry", "exit"), default="both")
    r.add_argument("--noise-sigma", type=float, default=1.0)
    r.add_argument("--noise-jitter", type=float, default=0.0)
    r.add_argument("--outlier-rate", type=float, default=0.2)
    r.add_argument("--honest-outliers", action="store_true")
    r.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    r.add_argument("--view", help="register a single view id")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="mTRE / projected mTRE / GFR report")
    e.add_argument("--dataset", required=True)
    e.add_argument("--results", required=True)
    e.add_argument("--landmarks", required=True)
    e.add_argument("--threshold", type=float, default=10.0)
    e.add_argument("--csv", help="optional per-view CSV")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("overlay", help="project the model edges under the estimated pose")
    o.add_argument("--dataset", required=True)
    o.add_argument("--results", required=True)
    o.add_argument("--view", required=True)
    o.add_argument("--volume", help="defaults to the volume recorded by simulate")
    o.add_argument("--out", required=True, help=".ppm for color, anything else writes 16-bit PGM")
    o.set_defaults(func=cmd_overlay)

    ph = sub.add_parser("phantom", help="write a synthetic CT phantom volume")
    ph.add_argument("--kind", choices=("sphere", "two-lobe"), default="two-lobe")
    ph.add_argument("--dims", type=int, default=128)
    ph.add_argument("--spacing", type=float, default=1.0)
    ph.add_argument("--radius", type=float, default=50.0)
    ph.add_argument("--landmarks", help="also write the 14-landmark JSON")
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"scregistrar: error: {exc}", file=sys.stderr)
        return 1
    handlers = [logging.StreamHandler(sys.stderr)]
    if args.log:
        handlers.append(logging.FileHandler(args.log))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, handlers=handlers,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except KeyError as exc:
        print(f"scregistrar: error: unknown view id {exc}", file=sys.stderr)
    except (OSError, ValueError, RuntimeError, CliError, RegistrationError) as exc:
        print(f"scregistrar: error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
