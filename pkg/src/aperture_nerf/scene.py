"""Declarative JSON scene descriptions and their schema."""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

from .fields import (
    CompositeField,
    ConstantField,
    ConstantShellField,
    SlabField,
    SphereField,
    field_from_checkpoint,
    load_checkpoint,
)
from .geometry import ApertureCamera
from .render import RenderSettings

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_color = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
          "minItems": 3, "maxItems": 3}

_primitive = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "sphere"}, "center": _vec3,
                        "radius": {"type": "number", "exclusiveMinimum": 0},
                        "density": {"type": "number", "minimum": 0}, "color": _color}},
        {"type": "object", "additionalProperties": False, "required": ["type", "z0", "z1"],
         "properties": {"type": {"const": "slab"}, "z0": {"type": "number"},
                        "z1": {"type": "number"},
                        "density": {"type": "number", "minimum": 0},
                        "colors": {"type": "array", "items": _color, "minItems": 2,
                                   "maxItems": 2},
                        "cell_size": {"type": "number", "exclusiveMinimum": 0},
                        "bounds": {"type": "array", "items": {"type": "number"},
                                   "minItems": 4, "maxItems": 4}}},
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "constant"},
                        "density": {"type": "number", "minimum": 0}, "color": _color}},
    ]
}

_checkpoint = {"type": "object", "additionalProperties": False, "required": ["checkpoint"],
               "properties": {"checkpoint": {"type": "string"},
                              "latent": {"type": "array", "items": {"type": "number"}}}}

SCENE_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "Scene",
    "type": "object",
    "additionalProperties": False,
    "required": ["foreground"],
    "properties": {
        "foreground": {"oneOf": [
            {"type": "array", "items": _primitive, "minItems": 1},
            _checkpoint,
        ]},
        "background": {"oneOf": [
            {"type": "null"},
            {"type": "object", "additionalProperties": False, "required": ["type"],
             "properties": {"type": {"const": "shell"},
                            "density": {"type": "number", "minimum": 0}, "color": _color}},
            _checkpoint,
        ]},
        "camera": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "position": _vec3, "target": _vec3,
                "fov_degrees": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "aperture_radius": {"type": "number", "minimum": 0},
                "focus_distance": {"type": "number", "exclusiveMinimum": 0},
                "t_near": {"type": "number", "exclusiveMinimum": 0},
                "t_far": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "render": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_coarse": {"type": "integer", "minimum": 1},
                "n_fine": {"type": "integer", "minimum": 0},
                "bg_coarse": {"type": "integer", "minimum": 1},
                "bg_fine": {"type": "integer", "minimum": 0},
                "n_rays": {"type": "integer", "minimum": 1},
                "scheme": {"enum": ["stratified", "random"]},
                "jitter": {"type": "boolean"},
                "depth_mode": {"enum": ["mean", "center"]},
                "shared_resampling": {"type": "boolean"},
            },
        },
        "sigma_s": {"type": "number", "minimum": 0},
    },
}


class SceneError(ValueError):
    """Invalid scene description."""


def validate_scene(spec: dict):
    validator = jsonschema.Draft7Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(spec), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise SceneError("invalid scene:\n  " + "\n  ".join(lines))


def _primitive_field(p):
    kind = p["type"]
    if kind == "sphere":
        return SphereField(p.get("center", (0.0, 0.0, 0.0)), p.get("radius", 0.25),
                           p.get("density", 50.0), p.get("color", (0.9, 0.3, 0.2)))
    if kind == "slab":
        kwargs = {k: p[k] for k in ("density", "colors", "cell_size", "bounds") if k in p}
        return SlabField(p["z0"], p["z1"], **kwargs)
    return ConstantField(p.get("density", 0.0), p.get("color", (1.0, 1.0, 1.0)))


def _checkpoint_field(entry, base_dir):
    path = Path(entry["checkpoint"])
    if not path.is_absolute():
        path = base_dir / path
    field = field_from_checkpoint(path)
    if "latent" in entry:
        field.latent = np.asarray(entry["latent"], dtype=float)
    return field


class Scene:
    """Materialized scene: fields, camera defaults, render settings."""

    def __init__(self, spec: dict, base_dir="."):
        validate_scene(spec)
        self.spec = spec
        base_dir = Path(base_dir)
        fg = spec["foreground"]
        try:
            if isinstance(fg, list):
                fields = [_primitive_field(p) for p in fg]
                self.foreground = fields[0] if len(fields) == 1 else CompositeField(fields)
            else:
                self.foreground = _checkpoint_field(fg, base_dir)
            bg = spec.get("background")
            if bg is None:
                self.background = None
            elif "checkpoint" in bg:
                self.background = _checkpoint_field(bg, base_dir)
            else:
                self.background = ConstantShellField(bg.get("density", 1.0),
                                                     bg.get("color", (1.0, 1.0, 1.0)))
        except (OSError, ValueError, KeyError) as exc:
            raise SceneError(f"cannot build scene: {exc}") from exc
        self.sigma_s = spec.get("sigma_s")
        if self.sigma_s is None and not isinstance(fg, list):
            path = Path(fg["checkpoint"])
            meta = load_checkpoint(path if path.is_absolute() else base_dir / path)[1]
            self.sigma_s = meta.get("sigma_s")

    @classmethod
    def load(cls, path) -> "Scene":
        path = Path(path)
        try:
            spec = json.loads(path.read_text())
        except OSError as exc:
            raise SceneError(f"cannot read scene file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}: invalid JSON: {exc}") from exc
        return cls(spec, base_dir=path.parent)

    def camera(self, **overrides) -> ApertureCamera:
        cam = dict(self.spec.get("camera", {}))
        cam.update({k: v for k, v in overrides.items() if v is not None})
        position = cam.pop("position", (0.0, 0.0, -4.0))
        target = cam.pop("target", (0.0, 0.0, 0.0))
        try:
            return ApertureCamera.looking_at(position, target, **cam)
        except ValueError as exc:
            raise SceneError(f"invalid camera: {exc}") from exc

    def settings(self, **overrides) -> RenderSettings:
        opts = dict(self.spec.get("render", {}))
        opts.update({k: v for k, v in overrides.items() if v is not None})
        return RenderSettings(**opts)
