"""Aperture randomization, loss functions and the inverse-rendering fitting loop."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import erf

from .fields import (
    DTYPE,
    ConstantShellField,
    FieldConfig,
    GradientTape,
    NeuralField,
    ParamStore,
)
from .geometry import ApertureCamera, orbit_camera
from .render import (
    RenderSettings,
    _single_thread_torch,
    bundle_offsets,
    draw_uniforms,
    render_bundle,
    render_image,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the fitting loss becomes non-finite."""


@dataclass
class ApertureDistribution:
    """Half-normal prior over the aperture radius."""

    sigma_s: float

    def __post_init__(self):
        if self.sigma_s < 0:
            raise ValueError(f"sigma_s must be >= 0, got {self.sigma_s}")


def sample_aperture_size(dist: ApertureDistribution, rng: np.random.Generator, size=None):
    """``|normal(0, sigma_s)|``; a float, or an array when ``size`` is given."""
    draw = np.abs(rng.normal(0.0, 1.0, size=size)) * dist.sigma_s
    return float(draw) if size is None else draw


def half_normal_cdf(x, sigma_s):
    x = np.asarray(x, dtype=np.float64)
    if sigma_s == 0:
        return (x >= 0).astype(np.float64)
    return np.where(x < 0, 0.0, erf(x / (sigma_s * math.sqrt(2.0))))


def gan_losses(real_scores, fake_scores):
    """Discriminator loss plus the minimax and non-saturating generator losses.

    Scores are discriminator probabilities in (0, 1).
    """
    real = np.asarray(real_scores, dtype=np.float64).ravel()
    fake = np.asarray(fake_scores, dtype=np.float64).ravel()
    if real.size == 0 or fake.size == 0:
        raise ValueError("score lists must be nonempty")
    for name, scores in (("real", real), ("fake", fake)):
        if np.any(scores <= 0) or np.any(scores >= 1):
            raise ValueError(f"{name} scores must lie strictly inside (0, 1)")
    d_loss = -np.mean(np.log(real)) - np.mean(np.log1p(-fake))
    g_minimax = np.mean(np.log1p(-fake))
    g_nonsat = -np.mean(np.log(fake))
    return float(d_loss), float(g_minimax), float(g_nonsat)


def reconstruction_loss(rendered, target):
    """Mean squared error over pixels and channels; differentiable through ``rendered``."""
    rendered = torch.as_tensor(rendered, dtype=DTYPE)
    target = torch.as_tensor(np.asarray(target, dtype=np.float64))
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: rendered {tuple(rendered.shape)} "
                         f"vs target {tuple(target.shape)}")
    return torch.mean((rendered - target) ** 2)


# ---------------------------------------------------------------------------
# observations


@dataclass
class Observation:
    """One training image with the camera that produced it.

    ``aperture_known`` / ``focus_known`` flag whether the camera's aperture
    radius and focus distance may be trusted; unknown values are recovered
    during fitting.
    """

    image: np.ndarray
    camera: ApertureCamera
    aperture_known: bool = True
    focus_known: bool = True
    seed: int = 0
    pose_jitter: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        expected = (self.camera.height, self.camera.width, 3)
        if self.image.shape != expected:
            raise ValueError(f"image shape {self.image.shape} does not match camera {expected}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")
        if np.any(self.image < 0) or np.any(self.image > 1):
            raise ValueError("image values must lie in [0, 1]")


def synthesize_observations(fg, bg, base_camera: ApertureCamera, n: int, sigma_s: float,
                            pose_std: float = 0.1, seed: int = 0,
                            settings: RenderSettings | None = None,
                            randomize_aperture: bool = True, randomize_pose: bool = True):
    """Render ``n`` views of an oracle scene with half-normal apertures and jittered poses."""
    rng = np.random.default_rng(seed)
    dist = ApertureDistribution(sigma_s)
    out = []
    for i in range(n):
        cam = base_camera
        jitter = (0.0, 0.0)
        if randomize_pose and pose_std > 0:
            d_az, d_el = rng.normal(0.0, pose_std, size=2)
            cam = orbit_camera(cam, d_az, d_el)
            jitter = (float(d_az), float(d_el))
        if randomize_aperture:
            cam = cam.replace(aperture_radius=sample_aperture_size(dist, rng))
        image, _, _ = render_image(fg, bg, cam, settings, seed=seed * 100003 + i)
        out.append(Observation(np.clip(image, 0.0, 1.0), cam, seed=seed * 100003 + i,
                               pose_jitter=jitter))
    return out


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    final_lr_fraction: float = 1.0
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    batch_pixels: int = 256
    sub_batch_pixels: int = 64
    seed: int = 0
    workers: int = 1
    settings: RenderSettings = field(default_factory=lambda: RenderSettings(jitter=True))
    aperture_init: float | None = None
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_pixels < 1 or self.sub_batch_pixels < 1:
            raise ValueError("step and batch counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["settings"] = dict(self.settings.__dict__)
        d["betas"] = list(self.betas)
        return d


@dataclass
class FitResult:
    field: NeuralField
    params: ParamStore
    trace: list
    apertures: dict

    def __iter__(self):
        yield self.params
        yield self.trace


def _softplus_inverse(y):
    return y + math.log(-math.expm1(-y))


def fit_field(observations, field_config: FieldConfig | NeuralField | None = None,
              fit: FitConfig | None = None, background=None) -> FitResult:
    """Fit a neural field to the observations by pixel-minibatch Adam on MSE.

    Each step draws one observation and a pixel batch, renders the aperture
    bundles with that observation's camera, and steps on the reconstruction
    loss.  Unknown apertures become softplus-constrained parameters; unknown
    focus distances come from the field's focus head.  Returns the fitted
    parameters and a per-step trace ``{step, loss, s, pose_jitter}``.
    """
    observations = list(observations)
    if not observations:
        raise ValueError("need at least one observation")
    fit = fit or FitConfig()
    if isinstance(field_config, NeuralField):
        nf = field_config
    else:
        nf = NeuralField(field_config or FieldConfig())
    params = nf.params
    rng = np.random.default_rng(fit.seed)

    unknown = [i for i, o in enumerate(observations) if not o.aperture_known]
    aperture_store = ParamStore({"raw": (max(len(unknown), 1),)})
    if unknown:
        init = fit.aperture_init
        aperture_store.set("raw", [
            _softplus_inverse(max(init if init is not None else 0.01 * o.camera.focus_distance,
                                  1e-6))
            for o in (observations[i] for i in unknown)])
    slot = {obs_index: k for k, obs_index in enumerate(unknown)}

    leaves = [params.data] + ([aperture_store.data] if unknown else [])
    optimizer = torch.optim.Adam(leaves, lr=fit.learning_rate, betas=tuple(fit.betas),
                                 eps=fit.eps)
    settings = fit.settings
    trace = []

    def sub_batch_grad(cam, obs, idx, uniforms, offsets, s_param, focus_from_head):
        aperture = None
        if s_param is not None:
            aperture = F.softplus(aperture_store["raw"][s_param])
        focus = nf.focus_distance() if focus_from_head else None
        color, _, _ = render_bundle(nf, background, cam, idx, offsets, uniforms, settings,
                                    aperture=aperture, focus=focus)
        target = obs.image.reshape(-1, 3)[idx]
        loss_sum = torch.sum((color - torch.from_numpy(target)) ** 2)
        grads = torch.autograd.grad(loss_sum, leaves, allow_unused=True)
        return float(loss_sum.detach()), [torch.zeros_like(leaf) if g is None else g
                                          for g, leaf in zip(grads, leaves)]

    pool = ThreadPoolExecutor(max_workers=fit.workers) if fit.workers > 1 else None
    try:
        with _single_thread_torch(), GradientTape(params), GradientTape(aperture_store):
            for step in range(fit.steps):
                k = int(rng.integers(len(observations)))
                obs = observations[k]
                cam = obs.camera
                n_pix = cam.width * cam.height
                idx = rng.choice(n_pix, size=min(fit.batch_pixels, n_pix), replace=False)
                uniforms = draw_uniforms(settings, rng, len(idx))
                offsets = bundle_offsets(settings, len(idx), rng)
                s_param = slot.get(k)
                jobs = []
                for lo in range(0, len(idx), fit.sub_batch_pixels):
                    sl = slice(lo, lo + fit.sub_batch_pixels)
                    sub_uniforms = type(uniforms)(*(getattr(uniforms, f)[sl] for f in
                                                    ("coarse", "fine", "bg_coarse", "bg_fine")))
                    jobs.append((cam, obs, idx[sl], sub_uniforms, offsets[sl], s_param,
                                 not obs.focus_known))
                if pool is None:
                    results = [sub_batch_grad(*j) for j in jobs]
                else:
                    results = list(pool.map(lambda j: sub_batch_grad(*j), jobs))
                # ordered sum keeps the update independent of scheduling
                denom = 3.0 * len(idx)
                loss = sum(r[0] for r in results) / denom
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss {loss} at step {step} "
                                          f"(observation {k})")
                for leaf_i, leaf in enumerate(leaves):
                    total = results[0][1][leaf_i].clone()
                    for r in results[1:]:
                        total += r[1][leaf_i]
                    leaf.grad = total / denom
                if fit.final_lr_fraction != 1.0:
                    frac = fit.final_lr_fraction ** (step / max(fit.steps - 1, 1))
                    for group in optimizer.param_groups:
                        group["lr"] = fit.learning_rate * frac
                optimizer.step()
                optimizer.zero_grad(set_to_none=True)
                s_used = (float(F.softplus(aperture_store["raw"][s_param]).detach())
                          if s_param is not None else obs.camera.aperture_radius)
                trace.append({"step": step, "loss": loss, "s": s_used,
                              "pose_jitter": float(np.hypot(*obs.pose_jitter))})
                if fit.log_every and step % fit.log_every == 0:
                    log.info("step %d loss %.6f", step, loss)
    finally:
        if pool is not None:
            pool.shutdown()
    apertures = {i: float(F.softplus(aperture_store["raw"][slot[i]]).detach()) for i in unknown}
    return FitResult(nf, params, trace, apertures)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    coordinates: list
    rel_errors: list
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"passed": self.passed, "max_rel_error": self.max_rel_error,
                "tolerance": self.tolerance, "n_coordinates": len(self.coordinates),
                "failures": self.failures}


def _gradcheck_camera():
    return ApertureCamera.looking_at((0.0, 0.0, -4.0), width=4, height=4,
                                     aperture_radius=0.15, focus_distance=3.8)


def render_loss(field, background, camera, settings, pixels, weights):
    """Scalar test functional of a full bundle render: weighted color, depth and opacity."""
    uniforms = draw_uniforms(settings, None, len(pixels))
    offsets = bundle_offsets(settings, len(pixels))
    color, depth, opacity = render_bundle(field, background, camera, pixels, offsets,
                                          uniforms, settings)
    return (torch.sum(color * weights[:, :3]) + torch.sum(depth * weights[:, 3])
            + torch.sum(opacity * weights[:, 4]))


def gradient_check(field=None, n_coordinates=100, h=1e-5, tolerance=1e-4, seed=0,
                   background=None, settings=None, floor=1e-7) -> GradCheckReport:
    """Central differences vs reverse-mode gradients through a full pixel render.

    Hierarchical resampling is disabled (``n_fine = 0``) because its sample
    positions are not differentiated.  Relative error uses
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if field is None or isinstance(field, FieldConfig):
        field = NeuralField(field or FieldConfig(n_layers=4, seed=seed))
    if background is None:
        background = ConstantShellField(0.7, (0.2, 0.5, 0.8))
    settings = settings or RenderSettings(n_coarse=24, n_fine=0, bg_coarse=8, bg_fine=0,
                                          n_rays=5)
    camera = _gradcheck_camera()
    rng = np.random.default_rng(seed)
    pixels = np.arange(camera.width * camera.height)
    weights = torch.from_numpy(rng.normal(size=(len(pixels), 5)))
    params = field.params

    def loss_value():
        with torch.no_grad():
            return float(render_loss(field, background, camera, settings, pixels, weights))

    with GradientTape(params) as tape:
        tape.record(render_loss(field, background, camera, settings, pixels, weights))
        analytic = tape.gradient([(1.0,)])

    coords = rng.choice(params.size, size=min(n_coordinates, params.size), replace=False)
    base = params.vector()
    errors, failures = [], []
    try:
        for c in coords:
            v = base.copy()
            v[c] = base[c] + h
            params.load_vector(v)
            plus = loss_value()
            v[c] = base[c] - h
            params.load_vector(v)
            minus = loss_value()
            numeric = (plus - minus) / (2 * h)
            a = analytic[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            errors.append(rel)
            if rel > tolerance:
                failures.append({"coordinate": int(c), "analytic": float(a),
                                 "numeric": float(numeric), "rel_error": float(rel)})
    finally:
        params.load_vector(base)
    return GradCheckReport(float(max(errors)) if errors else 0.0, tolerance,
                           [int(c) for c in coords], errors, failures)
