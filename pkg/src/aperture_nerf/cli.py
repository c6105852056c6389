"""Command-line interface.

Every command prints a one-line JSON summary on stdout; diagnostics go to
stderr.  Exit codes: 0 ok, 1 check failed, 2 input error, 3 render error,
4 divergence.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .fields import FieldConfig, NeuralField, save_checkpoint
from .geometry import ApertureCamera
from .metrics import depth_metrics, laplacian_variance
from .render import RenderSettings, render_image
from .scene import Scene, SceneError
from .training import (
    ApertureDistribution,
    DivergenceError,
    FitConfig,
    Observation,
    fit_field,
    gradient_check,
    half_normal_cdf,
    sample_aperture_size,
    synthesize_observations,
)

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_RENDER, EXIT_DIVERGED = 0, 1, 2, 3, 4
WORKERS_ENV = "APERTURE_NERF_WORKERS"


class InputError(Exception):
    pass


def _default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _emit(payload):
    print(json.dumps(payload, sort_keys=True, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _finite_json(value):
    return None if value is None or (isinstance(value, float) and not math.isfinite(value)) \
        else value


# ---------------------------------------------------------------------------
# render / sweep


def _load_scene(path):
    try:
        return Scene.load(path)
    except SceneError as exc:
        raise InputError(str(exc)) from exc


def _camera_and_settings(scene, args, **camera_overrides):
    camera = scene.camera(width=args.width, height=args.height,
                          aperture_radius=args.aperture, focus_distance=args.focus,
                          **camera_overrides)
    try:
        settings = scene.settings(n_rays=args.rays, scheme=args.scheme)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return camera, settings


def _write_outputs(prefix, image, depth, opacity, png=True):
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"ppm": f"{prefix}.ppm", "depth_pfm": f"{prefix}_depth.pfm",
             "depth_csv": f"{prefix}_depth.csv", "opacity_pfm": f"{prefix}_opacity.pfm"}
    io.write_ppm(paths["ppm"], image)
    if png:
        paths["png"] = f"{prefix}.png"
        io.write_png(paths["png"], image)
    io.write_pfm(paths["depth_pfm"], depth)
    io.write_csv_map(paths["depth_csv"], depth)
    io.write_pfm(paths["opacity_pfm"], opacity)
    return paths


def _render(scene, camera, settings, seed, workers):
    try:
        return render_image(scene.foreground, scene.background, camera, settings,
                            seed=seed, workers=workers)
    except (ValueError, RuntimeError) as exc:
        raise _RenderFailure(str(exc)) from exc


class _RenderFailure(Exception):
    pass


def cmd_render(args):
    scene = _load_scene(args.scene)
    try:
        camera, settings = _camera_and_settings(scene, args)
    except SceneError as exc:
        raise InputError(str(exc)) from exc
    start = time.perf_counter()
    image, depth, opacity = _render(scene, camera, settings, args.seed, args.workers)
    elapsed = time.perf_counter() - start
    paths = _write_outputs(args.out, image, depth, opacity)
    _emit({"command": "render", "paths": paths, "seconds": round(elapsed, 4),
           "aperture_radius": camera.aperture_radius, "focus_distance": camera.focus_distance,
           "n_rays": settings.n_rays, "scheme": settings.scheme, "seed": args.seed,
           "width": camera.width, "height": camera.height})
    return EXIT_OK


def _regions(h, w):
    return {
        "full": (slice(None), slice(None)),
        "left": (slice(None), slice(0, w // 2)),
        "right": (slice(None), slice(w // 2, None)),
        "top": (slice(0, h // 2), slice(None)),
        "bottom": (slice(h // 2, None), slice(None)),
        "center": (slice(h // 4, h - h // 4), slice(w // 4, w - w // 4)),
    }


def _parse_values(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"--values must be comma-separated numbers: {exc}") from exc
    if len(values) < 2:
        raise InputError("a sweep needs at least two values")
    return values


def cmd_sweep(args):
    values = _parse_values(args.values)
    scene = _load_scene(args.scene)
    if args.in_sigma:
        sigma_s = scene.sigma_s if scene.sigma_s is not None else args.sigma_s
        if args.sigma_s is not None and sigma_s != args.sigma_s:
            print(f"note: using stored sigma_s={sigma_s}, ignoring --sigma-s", file=sys.stderr)
        if sigma_s is None:
            raise InputError("--in-sigma needs sigma_s from --sigma-s, the scene or checkpoint")
        values = [v * sigma_s for v in values]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, paths = [], []
    for k, value in enumerate(values):
        override = {"aperture": value} if args.param == "aperture" else {"focus": value}
        ns = argparse.Namespace(**{**vars(args), **override})
        try:
            camera, settings = _camera_and_settings(scene, ns)
        except SceneError as exc:
            raise InputError(str(exc)) from exc
        image, depth, opacity = _render(scene, camera, settings, args.seed, args.workers)
        paths.append(_write_outputs(out / f"{args.param}_{k:02d}", image, depth, opacity))
        for name, region in _regions(camera.height, camera.width).items():
            rows.append((value, name, laplacian_variance(image, region)))
    csv_path = out / "sharpness.csv"
    with open(csv_path, "w") as fh:
        fh.write(f"{args.param},region,laplacian_variance\n")
        for value, name, score in rows:
            fh.write(f"{value!r},{name},{score!r}\n")
    _emit({"command": "sweep", "param": args.param, "values": values,
           "sharpness_csv": str(csv_path), "renders": paths})
    return EXIT_OK


# ---------------------------------------------------------------------------
# datasets and fitting

_MANIFEST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["observations"],
    "properties": {
        "sigma_s": {"type": "number", "minimum": 0},
        "observations": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["image", "camera"],
                "properties": {
                    "image": {"type": "string"},
                    "seed": {"type": "integer"},
                    "pose_jitter": {"type": "array", "items": {"type": "number"},
                                    "minItems": 2, "maxItems": 2},
                    "camera": {
                        "type": "object", "additionalProperties": False,
                        "required": ["origin", "rotation"],
                        "properties": {
                            "origin": {"type": "array", "items": {"type": "number"}},
                            "rotation": {"type": "array"},
                            "fov_degrees": {"type": "number"},
                            "width": {"type": "integer"}, "height": {"type": "integer"},
                            "aperture_radius": {"oneOf": [{"type": "number", "minimum": 0},
                                                          {"const": "unknown"}]},
                            "focus_distance": {"oneOf": [{"type": "number",
                                                          "exclusiveMinimum": 0},
                                                         {"const": "unknown"}]},
                            "t_near": {"type": "number"}, "t_far": {"type": "number"},
                        },
                    },
                },
            },
        },
    },
}


def load_manifest(dataset_dir):
    """Observations (and optional sigma_s) from ``dataset_dir/manifest.json``."""
    dataset_dir = Path(dataset_dir)
    path = dataset_dir / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        jsonschema.validate(manifest, _MANIFEST_SCHEMA)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc
    except jsonschema.ValidationError as exc:
        raise InputError(f"{path}: {exc.message}") from exc
    if not manifest["observations"]:
        raise InputError(f"{path}: dataset has no observations")
    observations = []
    for entry in manifest["observations"]:
        cam = dict(entry["camera"])
        aperture_known = cam.get("aperture_radius") != "unknown"
        focus_known = cam.get("focus_distance") != "unknown"
        if not aperture_known:
            cam["aperture_radius"] = 0.0
        if not focus_known:
            cam.pop("focus_distance")
        try:
            camera = ApertureCamera.from_dict(cam)
            image = io.read_image(dataset_dir / entry["image"])
            observations.append(Observation(image, camera, aperture_known, focus_known,
                                            entry.get("seed", 0),
                                            tuple(entry.get("pose_jitter", (0.0, 0.0)))))
        except (OSError, ValueError, TypeError) as exc:
            raise InputError(f"{path}: bad observation {entry['image']}: {exc}") from exc
    return observations, manifest.get("sigma_s")


def write_manifest(dataset_dir, observations, sigma_s=None, image_format="png"):
    dataset_dir = Path(dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, obs in enumerate(observations):
        name = f"view_{i:03d}.{image_format}"
        (io.write_png if image_format == "png" else io.write_ppm)(dataset_dir / name, obs.image)
        cam = obs.camera.to_dict()
        if not obs.aperture_known:
            cam["aperture_radius"] = "unknown"
        if not obs.focus_known:
            cam["focus_distance"] = "unknown"
        entries.append({"image": name, "camera": cam, "seed": obs.seed,
                        "pose_jitter": list(obs.pose_jitter)})
    manifest = {"observations": entries}
    if sigma_s is not None:
        manifest["sigma_s"] = sigma_s
    io.write_json(dataset_dir / "manifest.json", manifest)
    return dataset_dir / "manifest.json"


def cmd_dataset(args):
    scene = _load_scene(args.scene)
    try:
        camera = scene.camera(width=args.width, height=args.height)
        settings = scene.settings()
    except (SceneError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    sigma_s = args.sigma_s if args.sigma_s is not None else (scene.sigma_s or 0.0)
    observations = synthesize_observations(scene.foreground, scene.background, camera, args.n,
                                           sigma_s, args.pose_std, args.seed, settings)
    if args.unknown_aperture:
        for obs in observations:
            obs.aperture_known = False
    path = write_manifest(args.out, observations, sigma_s)
    _emit({"command": "dataset", "manifest": str(path), "n": args.n, "sigma_s": sigma_s})
    return EXIT_OK


def cmd_fit(args):
    observations, sigma_s = load_manifest(args.dataset)
    field_config = FieldConfig(n_layers=args.layers, width=args.width_units,
                               latent_dim=args.latent_dim, input_scale=args.input_scale,
                               seed=args.seed)
    settings = RenderSettings(n_coarse=args.coarse, n_fine=args.fine, n_rays=args.rays,
                              jitter=True)
    fit = FitConfig(steps=args.steps, learning_rate=args.lr,
                    final_lr_fraction=args.final_lr_fraction, batch_pixels=args.batch,
                    seed=args.seed, workers=args.workers, settings=settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    field = NeuralField(field_config)
    try:
        result = fit_field(observations, field, fit)
    except DivergenceError as exc:
        print(f"fit diverged: {exc}", file=sys.stderr)
        io.write_trace_csv(out / "trace.csv", [])
        _emit({"command": "fit", "status": "diverged", "error": str(exc)})
        return EXIT_DIVERGED
    elapsed = time.perf_counter() - start
    metadata = {"field_config": field_config.to_dict(), "latent": field.latent.tolist(),
                "sigma_s": sigma_s, "fitted_apertures": {str(k): v for k, v in
                                                         result.apertures.items()}}
    save_checkpoint(out / "checkpoint.bin", result.params, metadata)
    io.write_trace_csv(out / "trace.csv", result.trace)
    io.write_json(out / "config.json", {"field": field_config.to_dict(), "fit": fit.to_dict(),
                                        "dataset": str(args.dataset),
                                        "n_observations": len(observations)})
    _emit({"command": "fit", "status": "ok", "checkpoint": str(out / "checkpoint.bin"),
           "trace": str(out / "trace.csv"), "config": str(out / "config.json"),
           "final_loss": result.trace[-1]["loss"], "steps": fit.steps,
           "seconds": round(elapsed, 3)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation and checks


def cmd_eval(args):
    try:
        pred = io.read_depth(args.pred)
        gt = io.read_depth(args.gt)
        mask = None
        if args.mask:
            mask = io.read_depth(args.mask) > 0.5
        if args.opacity:
            opaque = io.read_depth(args.opacity) >= args.threshold
            mask = opaque if mask is None else mask & opaque
        image = reference = None
        if args.image and args.reference:
            image, reference = io.read_image(args.image), io.read_image(args.reference)
        record = depth_metrics(pred, gt, mask, image, reference)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    record["psnr"] = _finite_json(record["psnr"])
    if args.out:
        io.write_json(args.out, record)
    _emit({"command": "eval", **record})
    return EXIT_OK


def cmd_gradcheck(args):
    report = gradient_check(FieldConfig(n_layers=args.layers, width=args.width_units,
                                        seed=args.seed),
                            n_coordinates=args.coords, h=args.h, tolerance=args.tol,
                            seed=args.seed)
    _emit({"command": "gradcheck", **report.to_dict()})
    return EXIT_OK if report.passed else EXIT_FAILED


def distcheck(sigma_s, draws, seed):
    """Half-normal sampler check: sample mean and Kolmogorov-Smirnov statistic."""
    rng = np.random.default_rng(seed)
    samples = np.sort(sample_aperture_size(ApertureDistribution(sigma_s), rng, size=draws))
    if sigma_s == 0:
        return {"mean": float(samples.mean()), "expected_mean": 0.0, "ks": 0.0,
                "all_zero": bool(np.all(samples == 0)), "nonnegative": True}
    cdf = half_normal_cdf(samples, sigma_s)
    n = samples.size
    ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
    return {"mean": float(samples.mean()), "expected_mean": sigma_s * math.sqrt(2 / math.pi),
            "ks": float(ks), "nonnegative": bool(np.all(samples >= 0))}


def cmd_distcheck(args):
    stats = distcheck(args.sigma_s, args.draws, args.seed)
    if args.sigma_s == 0:
        passed = stats["all_zero"]
    else:
        rel = abs(stats["mean"] - stats["expected_mean"]) / stats["expected_mean"]
        stats["mean_rel_error"] = rel
        passed = stats["nonnegative"] and rel < args.mean_tol and stats["ks"] < args.ks_tol
    _emit({"command": "distcheck", "passed": passed, "sigma_s": args.sigma_s,
           "draws": args.draws, **stats})
    return EXIT_OK if passed else EXIT_FAILED


# ---------------------------------------------------------------------------
# argument parsing


def _add_camera_flags(p):
    p.add_argument("--aperture", type=float, help="aperture radius s (world units)")
    p.add_argument("--focus", type=float, help="focus distance f (world units)")
    p.add_argument("--rays", type=int, help="aperture rays per pixel (default 5)")
    p.add_argument("--scheme", choices=["stratified", "random"])
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=_default_workers())


def build_parser():
    parser = argparse.ArgumentParser(prog="aperture-nerf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render image, depth and opacity maps")
    p.add_argument("scene")
    _add_camera_flags(p)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sweep", help="render a series over aperture or focus values")
    p.add_argument("scene")
    _add_camera_flags(p)
    p.add_argument("--param", choices=["aperture", "focus"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--in-sigma", action="store_true",
                   help="interpret aperture values as multiples of sigma_s")
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dataset", help="synthesize observations of a scene")
    p.add_argument("scene")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--pose-std", type=float, default=0.1)
    p.add_argument("--unknown-aperture", action="store_true")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("fit", help="fit a neural field to a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--final-lr-fraction", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width-units", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--input-scale", type=float, default=1.0)
    p.add_argument("--coarse", type=int, default=32)
    p.add_argument("--fine", type=int, default=16)
    p.add_argument("--rays", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="depth metrics between two depth maps")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--mask", help="validity mask map (.pfm/.csv, >0.5 is valid)")
    p.add_argument("--opacity", help="opacity map; pixels below --threshold are masked")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image")
    p.add_argument("--reference")
    p.add_argument("--out", help="write the metrics JSON record here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width-units", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("distcheck", help="half-normal aperture sampler check")
    p.add_argument("--sigma-s", type=float, default=1.0)
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ks-tol", type=float, default=0.005)
    p.add_argument("--mean-tol", type=float, default=0.02)
    p.set_defaults(func=cmd_distcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _RenderFailure as exc:
        print(f"render failed: {exc}", file=sys.stderr)
        return EXIT_RENDER


if __name__ == "__main__":
    sys.exit(main())
