"""Volume rendering along rays, aperture bundles and image rendering.

Quadrature follows the usual alpha-compositing rule::

    alpha_i = 1 - exp(-sigma_i * delta_i * |d|)
    T_i     = exp(-sum_{j<i} sigma_j * delta_j * |d|)
    w_i     = T_i * alpha_i

with ``t`` the axial depth.  A pixel is the mean of the renders of its
aperture rays.  Everything runs batched on float64 torch tensors; the small
public wrappers return numpy values.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np
import torch

from .fields import DTYPE, RadianceField
from .geometry import (
    ApertureCamera,
    Ray,
    aperture_offsets_random,
    aperture_offsets_stratified,
    pinhole_directions,
)

WEIGHT_FLOOR = 1e-5
BACKGROUND_LAST_DELTA = 1e10
SCHEMES = ("stratified", "random")


@dataclass
class QuadratureSamples:
    t_values: np.ndarray
    deltas: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        if len(self.t_values) == 0:
            raise ValueError("need at least one sample")
        if np.any(np.diff(self.t_values) <= 0):
            raise ValueError("sample positions must be strictly ascending")

    def __len__(self):
        return len(self.t_values)


@dataclass
class RayRender:
    color: object
    depth: object
    opacity: object
    weights: object
    residual_transmittance: object


@dataclass
class PixelRender:
    color: np.ndarray
    depth: float
    opacity: float


@dataclass
class RenderSettings:
    """Quadrature and aperture settings shared by every render entry point."""

    n_coarse: int = 32
    n_fine: int = 16
    bg_coarse: int = 16
    bg_fine: int = 8
    n_rays: int = 5
    scheme: str = "stratified"
    jitter: bool = False
    last_delta: float | None = None
    depth_mode: str = "mean"
    shared_resampling: bool = False
    chunk_pixels: int = 64
    workers: int = 1

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0 or self.bg_coarse < 1 or self.bg_fine < 0:
            raise ValueError("sample counts must be positive (fine counts may be 0)")
        if self.n_rays < 1:
            raise ValueError(f"n_rays must be >= 1, got {self.n_rays}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.depth_mode not in ("mean", "center"):
            raise ValueError("depth_mode must be 'mean' or 'center'")
        if self.chunk_pixels < 1 or self.workers < 1:
            raise ValueError("chunk_pixels and workers must be >= 1")

    def replace(self, **changes) -> "RenderSettings":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# quadrature primitives (batched over rays)


def _bin_edges(near, far, n):
    frac = torch.arange(n + 1, dtype=DTYPE) / n
    return near[:, None] + (far - near)[:, None] * frac


def _stratified(edges, u):
    """One sample per bin; ``u`` in [0, 1) per bin (0.5 gives bin centers)."""
    return edges[:, :-1] + (edges[:, 1:] - edges[:, :-1]) * u


def _deltas(t, far, last_delta=None):
    inner = t[:, 1:] - t[:, :-1]
    if last_delta is None:
        last = (far - t[:, -1])[:, None]
    else:
        last = torch.full_like(t[:, -1:], float(last_delta))
    return torch.cat([inner, last], dim=1)


def _composite(rgb, sigma, t, deltas, dir_norm):
    tau = sigma * deltas * dir_norm[:, None]
    cum = torch.cumsum(tau, dim=1)
    transmittance = torch.exp(-torch.cat([torch.zeros_like(cum[:, :1]), cum[:, :-1]], dim=1))
    alpha = -torch.expm1(-tau)
    weights = transmittance * alpha
    color = torch.sum(weights[..., None] * rgb, dim=1)
    depth = torch.sum(weights * t, dim=1)
    residual = torch.exp(-cum[:, -1])
    return RayRender(color, depth, torch.sum(weights, dim=1), weights, residual)


def _sample_pdf(edges, weights, u):
    """Inverse-CDF draws from the piecewise-constant density ``weights`` on ``edges``."""
    w = weights + WEIGHT_FLOOR
    pdf = w / torch.sum(w, dim=1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=1)], dim=1)
    cdf[:, -1] = 1.0
    u = u.contiguous()
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[1] - 1)
    lo, hi = idx - 1, idx
    cdf_lo, cdf_hi = torch.gather(cdf, 1, lo), torch.gather(cdf, 1, hi)
    e_lo, e_hi = torch.gather(edges, 1, lo), torch.gather(edges, 1, hi)
    span = torch.where(cdf_hi - cdf_lo > 0, cdf_hi - cdf_lo, torch.ones_like(cdf_lo))
    frac = ((u - cdf_lo) / span).clamp(0.0, 1.0)
    return e_lo + frac * (e_hi - e_lo)


def _query(field, points, dirs):
    rgb, sigma = field.query(points.reshape(-1, points.shape[-1]), dirs.reshape(-1, 3))
    return rgb.reshape(*points.shape[:-1], 3), sigma.reshape(points.shape[:-1])


def _unit(dirs):
    return dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)


def _render_segment(field, origins, dirs, edges, far, u_coarse, u_fine, last_delta,
                    to_points, t_from_param, group=1):
    """Coarse + hierarchical pass over one parameter interval for every ray.

    ``edges`` are bin edges in the sampling parameter (axial t for the
    foreground, ``1 - inverse radius`` for the background); ``t_from_param``
    maps parameters to ray depth and ``to_points`` maps (t) to field inputs.
    """
    dir_norm = torch.linalg.norm(dirs, dim=-1)
    unit = _unit(dirs)
    param = _stratified(edges, u_coarse)
    if u_fine is not None and u_fine.shape[1] > 0:
        with torch.no_grad():
            t = t_from_param(param)
            rgb, sigma = _query(field, to_points(t), unit[:, None, :].expand(*t.shape, 3))
            coarse = _composite(rgb, sigma, t, _deltas(t, t_from_param(edges[:, -1:])[:, 0],
                                                       last_delta), dir_norm)
            weights = coarse.weights
            if group > 1:
                # one importance distribution per bundle: the mean of its coarse weights
                n = weights.shape[1]
                weights = weights.reshape(-1, group, n).mean(1, keepdim=True)
                weights = weights.expand(-1, group, n).reshape(-1, n)
            fine = _sample_pdf(edges, weights, u_fine)
        param, _ = torch.sort(torch.cat([param, fine.detach()], dim=1), dim=1)
    t = t_from_param(param)
    rgb, sigma = _query(field, to_points(t), unit[:, None, :].expand(*t.shape, 3))
    return _composite(rgb, sigma, t, _deltas(t, far, last_delta), dir_norm)


def unit_sphere_exit(origins, dirs):
    """Axial t of the far unit-sphere crossing (closest approach when the ray misses)."""
    a = torch.sum(dirs * dirs, dim=-1)
    b = torch.sum(origins * dirs, dim=-1)
    c = torch.sum(origins * origins, dim=-1) - 1.0
    disc = torch.clamp(b * b - a * c, min=0.0)
    return (-b + torch.sqrt(disc)) / a


def _t_at_radius(origins, dirs, radius):
    a = torch.sum(dirs * dirs, dim=-1)[:, None]
    b = torch.sum(origins * dirs, dim=-1)[:, None]
    c = torch.sum(origins * origins, dim=-1)[:, None] - radius ** 2
    disc = torch.clamp(b * b - a * c, min=0.0)
    return (-b + torch.sqrt(disc)) / a


def invert_sphere(x):
    """Inverted-sphere coordinates ``(x / |x|, 1 / |x|)`` for ``|x| >= 1``."""
    x = np.asarray(x, dtype=np.float64)
    r = float(np.linalg.norm(x))
    if r < 1.0:
        raise ValueError(f"inverted-sphere coordinates need |x| >= 1, got {r}")
    return x / r, 1.0 / r


def _inverted_points(points):
    r = torch.linalg.norm(points, dim=-1, keepdim=True)
    return torch.cat([points / r, 1.0 / r], dim=-1)


def composite_fg_bg(fg: RayRender, bg: RayRender) -> RayRender:
    """Foreground over background: the background is attenuated by the foreground's
    residual transmittance."""
    t_fg = fg.residual_transmittance
    is_torch = isinstance(fg.color, torch.Tensor)
    scale = t_fg[..., None] if is_torch or np.ndim(t_fg) else np.asarray(t_fg)
    cat = torch.cat if is_torch else np.concatenate
    weights = cat([fg.weights, scale * bg.weights], -1)
    return RayRender(
        color=fg.color + scale * bg.color,
        depth=fg.depth + t_fg * bg.depth,
        opacity=fg.opacity + t_fg * bg.opacity,
        weights=weights,
        residual_transmittance=t_fg * bg.residual_transmittance,
    )


@dataclass
class RayUniforms:
    """Per-ray uniforms for the four quadrature passes (``None`` means bin centers)."""

    coarse: torch.Tensor
    fine: torch.Tensor
    bg_coarse: torch.Tensor
    bg_fine: torch.Tensor


def draw_uniforms(settings: RenderSettings, rng: np.random.Generator | None,
                  batch: int) -> RayUniforms:
    """Quadrature uniforms for ``batch`` pixels.

    Without jitter the coarse pass uses bin centers and the fine pass a fixed
    midpoint grid, so no randomness is consumed.
    """
    def fixed(n):
        return torch.full((batch, n), 0.5, dtype=DTYPE)

    def grid(n):
        return ((torch.arange(n, dtype=DTYPE) + 0.5) / n).expand(batch, n).clone()

    if not settings.jitter:
        return RayUniforms(fixed(settings.n_coarse), grid(settings.n_fine),
                           fixed(settings.bg_coarse), grid(settings.bg_fine))
    draw = rng.random((batch, settings.n_coarse + settings.n_fine
                       + settings.bg_coarse + settings.bg_fine))
    parts = np.split(draw, np.cumsum([settings.n_coarse, settings.n_fine, settings.bg_coarse]),
                     axis=1)
    fine = np.sort(parts[1], axis=1)
    bg_fine = np.sort(parts[3], axis=1)
    return RayUniforms(*(torch.from_numpy(np.ascontiguousarray(p))
                         for p in (parts[0], fine, parts[2], bg_fine)))


def _repeat_uniforms(uniforms: RayUniforms, n):
    return RayUniforms(*(torch.repeat_interleave(u, n, dim=0) for u in
                         (uniforms.coarse, uniforms.fine, uniforms.bg_coarse, uniforms.bg_fine)))


def render_rays(fg: RadianceField, bg: RadianceField | None, origins, dirs, t_near, t_far,
                settings: RenderSettings, uniforms: RayUniforms, group=1) -> RayRender:
    """Render a batch of rays (B, 3); returns batched torch tensors.

    Gradients flow to any parameter store that is being watched.  With
    ``group > 1`` consecutive runs of ``group`` rays share their hierarchical
    samples' importance distribution.
    """
    origins = torch.as_tensor(origins, dtype=DTYPE)
    dirs = torch.as_tensor(dirs, dtype=DTYPE)
    b = origins.shape[0]
    near = torch.full((b,), float(t_near), dtype=DTYPE)
    if bg is None:
        far = torch.full((b,), float(t_far), dtype=DTYPE)
    else:
        far = torch.maximum(unit_sphere_exit(origins, dirs).detach(), near * (1 + 1e-9))

    def fg_points(t):
        return origins[:, None, :] + t[..., None] * dirs[:, None, :]

    fg_render = _render_segment(
        fg, origins, dirs, _bin_edges(near, far, settings.n_coarse), far,
        uniforms.coarse, uniforms.fine, settings.last_delta,
        to_points=fg_points, t_from_param=lambda p: p, group=group)
    if bg is None:
        return fg_render

    def t_from_param(p):
        # p = 1 - inverse radius, ascending with t
        rho = torch.clamp(1.0 - p, min=1e-12)
        return _t_at_radius(origins, dirs, 1.0 / rho)

    def bg_points(t):
        return _inverted_points(origins[:, None, :] + t[..., None] * dirs[:, None, :])

    zeros, ones = torch.zeros(b, dtype=DTYPE), torch.ones(b, dtype=DTYPE)
    bg_render = _render_segment(
        bg, origins, dirs, _bin_edges(zeros, ones, settings.bg_coarse),
        None, uniforms.bg_coarse, uniforms.bg_fine, BACKGROUND_LAST_DELTA,
        to_points=bg_points, t_from_param=t_from_param, group=group)
    return composite_fg_bg(fg_render, bg_render)


# ---------------------------------------------------------------------------
# single-ray public API


def stratified_t_samples(t_near, t_far, n, jittered=False, rng=None,
                         last_delta=None) -> QuadratureSamples:
    """``n`` equal bins over ``[t_near, t_far]``, one sample per bin."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    if not t_near < t_far:
        raise ValueError(f"need t_near < t_far, got {t_near}, {t_far}")
    edges = t_near + (t_far - t_near) * np.arange(n + 1) / n
    u = rng.random(n) if jittered else np.full(n, 0.5)
    t = edges[:-1] + (edges[1:] - edges[:-1]) * u
    return QuadratureSamples(t, _np_deltas(t, t_far, last_delta), edges)


def _np_deltas(t, far, last_delta=None):
    last = far - t[-1] if last_delta is None else last_delta
    return np.append(np.diff(t), last)


def hierarchical_resample(coarse: QuadratureSamples, weights, n_fine, rng=None,
                          jittered=True, last_delta=None) -> QuadratureSamples:
    """Draw ``n_fine`` extra positions by inverse CDF over the coarse weights and merge."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(coarse),):
        raise ValueError("weights must match the coarse samples")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if jittered:
        u = np.sort(rng.random(n_fine))
    else:
        u = (np.arange(n_fine) + 0.5) / n_fine
    fine = _sample_pdf(torch.from_numpy(coarse.edges)[None], torch.from_numpy(weights)[None],
                       torch.from_numpy(u)[None])[0].numpy()
    t = np.unique(np.concatenate([coarse.t_values, fine]))
    far = coarse.edges[-1]
    return QuadratureSamples(t, _np_deltas(t, far, last_delta), coarse.edges)


def volume_render_ray(field: RadianceField, ray: Ray, samples: QuadratureSamples) -> RayRender:
    origin = torch.from_numpy(ray.origin)[None]
    direction = torch.from_numpy(ray.direction)[None]
    t = torch.from_numpy(samples.t_values)[None]
    points = origin[:, None, :] + t[..., None] * direction[:, None, :]
    with torch.no_grad():
        rgb, sigma = _query(field, points, _unit(direction)[:, None, :].expand(1, len(samples), 3))
        out = _composite(rgb, sigma, t, torch.from_numpy(samples.deltas)[None],
                         torch.linalg.norm(direction, dim=-1))
    return RayRender(out.color[0].numpy(), float(out.depth[0]), float(out.opacity[0]),
                     out.weights[0].numpy(), float(out.residual_transmittance[0]))


# ---------------------------------------------------------------------------
# aperture bundles and pixels


def bundle_offsets(settings: RenderSettings, batch: int, rng=None) -> np.ndarray:
    """Unit-radius lens offsets (batch, n_rays, 2); scale by the aperture radius."""
    if settings.scheme == "stratified":
        base = aperture_offsets_stratified(1.0, settings.n_rays)
        return np.broadcast_to(base, (batch, settings.n_rays, 2)).copy()
    if rng is None:
        raise ValueError("the random aperture scheme needs an rng")
    return np.stack([aperture_offsets_random(1.0, settings.n_rays, rng) for _ in range(batch)])


def render_bundle(fg, bg, camera: ApertureCamera, pixel_index, unit_offsets, uniforms,
                  settings: RenderSettings, aperture=None, focus=None):
    """Render the aperture bundle of every pixel in ``pixel_index``.

    ``unit_offsets`` is (P, R, 2) on the unit disk; ``aperture`` and ``focus``
    default to the camera's and may be torch scalars carrying gradients.
    Returns per-pixel ``(color (P,3), depth (P,), opacity (P,))`` tensors.
    """
    pixel_index = np.asarray(pixel_index)
    s = camera.aperture_radius if aperture is None else aperture
    f = camera.focus_distance if focus is None else focus
    base_dirs = torch.from_numpy(pinhole_directions(camera, pixel_index))
    p = base_dirs.shape[0]
    origin = torch.from_numpy(camera.origin)
    center_extra = settings.depth_mode == "center" and settings.scheme == "random"
    pinhole = not isinstance(s, torch.Tensor) and s == 0
    if pinhole:
        # every lens offset is zero, so one ray per pixel is exact
        origins = origin.expand(p, 3)
        render = render_rays(fg, bg, origins, base_dirs, camera.t_near, camera.t_far,
                             settings, uniforms)
        return render.color, render.depth, render.opacity
    offsets = torch.tensor(np.asarray(unit_offsets, dtype=np.float64))
    if center_extra:
        offsets = torch.cat([torch.zeros(p, 1, 2, dtype=DTYPE), offsets], dim=1)
    r = offsets.shape[1]
    right, up = torch.from_numpy(camera.right), torch.from_numpy(camera.up)
    u = s * (offsets[..., 0:1] * right + offsets[..., 1:2] * up)  # (P, R, 3)
    origins = origin + u
    dirs = base_dirs[:, None, :] - u / f
    render = render_rays(fg, bg, origins.reshape(-1, 3), dirs.reshape(-1, 3),
                         camera.t_near, camera.t_far, settings,
                         _repeat_uniforms(uniforms, r),
                         group=r if settings.shared_resampling else 1)
    color = render.color.reshape(p, r, 3)
    depth = render.depth.reshape(p, r)
    opacity = render.opacity.reshape(p, r)
    if center_extra:
        center_depth = depth[:, 0]
        color, depth, opacity = color[:, 1:], depth[:, 1:], opacity[:, 1:]
    color, depth, opacity = (_bundle_mean(color), _bundle_mean(depth), _bundle_mean(opacity))
    if settings.depth_mode == "center":
        depth = center_depth if center_extra else render.depth.reshape(p, r)[:, 0]
    return color, depth, opacity


def _bundle_mean(x):
    # mean of deviations from the first ray: exact when all rays agree
    return x[:, 0] + torch.mean(x - x[:, :1], dim=1)


def _pixel_draws(settings, rng, batch=1):
    uniforms = draw_uniforms(settings, rng, batch)
    offsets = bundle_offsets(settings, batch, rng)
    return uniforms, offsets


def render_pixel(fg, bg, camera: ApertureCamera, px, py, settings: RenderSettings | None = None,
                 rng=None, scheme=None, n_rays=None) -> PixelRender:
    settings = settings or RenderSettings()
    if scheme is not None or n_rays is not None:
        settings = settings.replace(scheme=scheme or settings.scheme,
                                    n_rays=n_rays or settings.n_rays)
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    uniforms, offsets = _pixel_draws(settings, rng)
    with torch.no_grad():
        color, depth, opacity = render_bundle(fg, bg, camera, [py * camera.width + px],
                                              offsets, uniforms, settings)
    return PixelRender(color[0].numpy().copy(), float(depth[0]), float(opacity[0]))


def pixel_rng(seed: int, pixel_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(pixel_index)])


@contextmanager
def _single_thread_torch():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _render_chunk(fg, bg, camera, settings, seed, indices):
    draws = [_pixel_draws(settings, pixel_rng(seed, i)) for i in indices]
    uniforms = RayUniforms(*(torch.cat([getattr(d[0], k) for d in draws])
                             for k in ("coarse", "fine", "bg_coarse", "bg_fine")))
    offsets = np.concatenate([d[1] for d in draws])
    with torch.no_grad():
        color, depth, opacity = render_bundle(fg, bg, camera, indices, offsets, uniforms, settings)
    return color.numpy(), depth.numpy(), opacity.numpy()


def render_image(fg, bg, camera: ApertureCamera, settings: RenderSettings | None = None,
                 seed: int = 0, workers: int | None = None):
    """Render every pixel; returns ``(image HxWx3, depth HxW, opacity HxW)`` numpy arrays.

    Pixels are rendered in fixed chunks with per-pixel random streams, so the
    output does not depend on the worker count.
    """
    settings = settings or RenderSettings()
    workers = workers or settings.workers
    n = camera.width * camera.height
    chunks = [np.arange(i, min(i + settings.chunk_pixels, n))
              for i in range(0, n, settings.chunk_pixels)]

    def job(indices):
        return _render_chunk(fg, bg, camera, settings, seed, indices)

    with _single_thread_torch():
        if workers == 1:
            results = [job(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(job, chunks))
    image = np.concatenate([r[0] for r in results]).reshape(camera.height, camera.width, 3)
    depth = np.concatenate([r[1] for r in results]).reshape(camera.height, camera.width)
    opacity = np.concatenate([r[2] for r in results]).reshape(camera.height, camera.width)
    return image, depth, opacity
