"""Rays, thin-lens cameras and aperture-disk sampling.

Rays are depth-parameterized: a pinhole ray's direction has a forward-axis
component of exactly 1, so the ray parameter ``t`` is the axial depth.
Aperture rays keep that property because the lens offset is orthogonal to
the forward axis.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(direction)) or not np.any(direction):
            raise ValueError("ray direction must be finite and nonzero")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, t):
        return self.origin + t * self.direction


def look_at_rotation(position, target=(0.0, 0.0, 0.0), world_up=(0.0, 1.0, 0.0)):
    """Rotation whose columns are (right, up, forward) for a camera aimed at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValueError("camera position coincides with its target")
    forward = forward / norm
    right = np.cross(np.asarray(world_up, dtype=np.float64), forward)
    if np.linalg.norm(right) < 1e-12:
        # looking straight along world_up; pick any perpendicular axis
        right = np.cross((1.0, 0.0, 0.0), forward)
    right = right / np.linalg.norm(right)
    up = np.cross(forward, right)
    return np.stack([right, up, forward], axis=1)


@dataclass(frozen=True)
class ApertureCamera:
    """Thin-lens camera.

    ``rotation`` holds the right, up and forward axes as columns.  The
    horizontal field of view is ``fov_degrees``; pixel centers sit at
    ``(px + 0.5) / width`` with image y pointing down.
    """

    origin: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -4.0]))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    fov_degrees: float = 12.0
    width: int = 32
    height: int = 32
    aperture_radius: float = 0.0
    focus_distance: float = 4.0
    t_near: float = 3.0
    t_far: float = 5.0

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "rotation", rotation)
        if not np.allclose(rotation.T @ rotation, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("camera rotation must be orthonormal")
        if self.aperture_radius < 0:
            raise ValueError(f"aperture radius must be >= 0, got {self.aperture_radius}")
        if self.focus_distance <= 0:
            raise ValueError(f"focus distance must be > 0, got {self.focus_distance}")
        if not 0 < self.t_near < self.t_far:
            raise ValueError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")
        if not 0 < self.fov_degrees < 180:
            raise ValueError(f"field of view must lie in (0, 180), got {self.fov_degrees}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @classmethod
    def looking_at(cls, position, target=(0.0, 0.0, 0.0), **kwargs):
        return cls(origin=position, rotation=look_at_rotation(position, target), **kwargs)

    @property
    def right(self):
        return self.rotation[:, 0]

    @property
    def up(self):
        return self.rotation[:, 1]

    @property
    def forward(self):
        return self.rotation[:, 2]

    def replace(self, **changes) -> "ApertureCamera":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "rotation": self.rotation.tolist(),
            "fov_degrees": self.fov_degrees,
            "width": self.width,
            "height": self.height,
            "aperture_radius": self.aperture_radius,
            "focus_distance": self.focus_distance,
            "t_near": self.t_near,
            "t_far": self.t_far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ApertureCamera":
        return cls(**data)


def _pixel_slopes(camera, px, py, jitter):
    half = math.tan(math.radians(camera.fov_degrees) / 2.0)
    jx, jy = jitter
    sx = half * (2.0 * (px + jx) / camera.width - 1.0)
    # vertical extent follows the aspect ratio so pixels stay square
    sy = half * (2.0 * (py + jy) / camera.height - 1.0) * (camera.height / camera.width)
    return sx, sy


def pinhole_ray(camera: ApertureCamera, px: int, py: int, jitter=(0.5, 0.5)) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    sx, sy = _pixel_slopes(camera, px, py, jitter)
    direction = camera.forward + sx * camera.right - sy * camera.up
    return Ray(camera.origin.copy(), direction)


def pinhole_directions(camera: ApertureCamera, pixel_index: np.ndarray) -> np.ndarray:
    """Vectorized pixel-center directions for flat pixel indices ``py * width + px``."""
    pixel_index = np.asarray(pixel_index)
    px = pixel_index % camera.width
    py = pixel_index // camera.width
    sx, sy = _pixel_slopes(camera, px, py, (0.5, 0.5))
    return (camera.forward[None, :]
            + np.asarray(sx)[:, None] * camera.right[None, :]
            - np.asarray(sy)[:, None] * camera.up[None, :])


def aperture_offsets_stratified(s: float, n: int) -> np.ndarray:
    """One center offset plus ``n - 1`` equally spaced on the rim, as an (n, 2) array."""
    if n < 1:
        raise ValueError(f"need at least one aperture ray, got {n}")
    if s < 0:
        raise ValueError(f"aperture radius must be >= 0, got {s}")
    offsets = np.zeros((n, 2))
    if n > 1:
        k = np.arange(n - 1)
        angle = 2.0 * np.pi * k / (n - 1)
        # exact zeros/ones on the axes keep the rim points exactly at radius s
        cos, sin = np.cos(angle), np.sin(angle)
        cos[np.isclose(cos, 0.0, atol=1e-15)] = 0.0
        sin[np.isclose(sin, 0.0, atol=1e-15)] = 0.0
        offsets[1:, 0] = s * cos
        offsets[1:, 1] = s * sin
    return _clamp_to_disk(offsets, s)


def _clamp_to_disk(offsets, s):
    """Pull offsets that the trig round trip left an ulp outside radius ``s`` back in."""
    for _ in range(8):
        over = np.hypot(offsets[:, 0], offsets[:, 1]) > s
        if not np.any(over):
            break
        offsets[over] = np.nextafter(offsets[over], 0.0)
    return offsets


def aperture_offsets_random(s: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` offsets uniform over the disk of radius ``s`` (area-uniform)."""
    if n < 1:
        raise ValueError(f"need at least one aperture ray, got {n}")
    if s < 0:
        raise ValueError(f"aperture radius must be >= 0, got {s}")
    radius = s * np.sqrt(rng.random(n))
    angle = 2.0 * np.pi * rng.random(n)
    offsets = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return _clamp_to_disk(offsets, s)


def offset_to_world(camera: ApertureCamera, offset) -> np.ndarray:
    offset = np.asarray(offset, dtype=np.float64)
    return offset[..., 0:1] * camera.right + offset[..., 1:2] * camera.up


def aperture_ray(camera: ApertureCamera, base: Ray, offset) -> Ray:
    """Thin-lens ray through lens point ``offset`` that meets ``base`` at the focal plane.

    The direction is left unnormalized so ``t`` stays the axial depth and
    ``ray.at(f) == base.at(f)`` for every offset.
    """
    f = camera.focus_distance
    if f <= 0:
        raise ValueError(f"focus distance must be > 0, got {f}")
    offset = np.asarray(offset, dtype=np.float64)
    if not np.any(offset):
        return base
    u = offset_to_world(camera, offset)
    origin = base.origin + u
    direction = (base.origin + f * base.direction - origin) / f
    return Ray(origin, direction)


def _spherical(position):
    r = float(np.linalg.norm(position))
    azimuth = math.atan2(position[0], -position[2])
    elevation = math.asin(np.clip(position[1] / r, -1.0, 1.0))
    return r, azimuth, elevation


def _cartesian(r, azimuth, elevation):
    return r * np.array([
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
        -math.cos(elevation) * math.cos(azimuth),
    ])


def camera_azimuth_elevation(camera: ApertureCamera):
    """Azimuth and elevation (radians) of the camera position about the scene origin."""
    _, azimuth, elevation = _spherical(camera.origin)
    return azimuth, elevation


def orbit_camera(camera: ApertureCamera, d_azimuth: float, d_elevation: float) -> ApertureCamera:
    """Move the camera on its sphere around the origin and re-aim it at the origin."""
    r, azimuth, elevation = _spherical(camera.origin)
    limit = math.pi / 2 - 1e-6
    elevation = min(max(elevation + d_elevation, -limit), limit)
    position = _cartesian(r, azimuth + d_azimuth, elevation)
    return camera.replace(origin=position, rotation=look_at_rotation(position))


def jitter_camera_pose(camera: ApertureCamera, std_radians: float,
                       rng: np.random.Generator) -> ApertureCamera:
    """Local viewpoint randomization: normal(0, std) azimuth/elevation steps about the origin."""
    if std_radians < 0:
        raise ValueError(f"std must be >= 0, got {std_radians}")
    if std_radians == 0:
        return camera
    d_azimuth, d_elevation = rng.normal(0.0, std_radians, size=2)
    return orbit_camera(camera, d_azimuth, d_elevation)
