"""Radiance fields: analytic oracle scenes and a FiLM-SIREN neural field.

Every field maps batched positions and view directions to ``(rgb, sigma)``
torch tensors.  Neural fields keep all trainable scalars in one flat
:class:`ParamStore`; reverse-mode gradients come from a
:class:`GradientTape` recorded around forward passes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


@dataclass
class FieldSample:
    color: np.ndarray
    density: float


def positional_encoding(x, levels: int):
    """``concat(x, sin(2^k pi x), cos(2^k pi x))`` for k < levels, on the last axis.

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    if levels < 0:
        raise ValueError(f"levels must be >= 0, got {levels}")
    is_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)) if is_numpy else x
    parts = [t]
    for k in range(levels):
        scaled = (2.0 ** k) * math.pi * t
        parts += [torch.sin(scaled), torch.cos(scaled)]
    out = torch.cat(parts, dim=-1)
    return out.numpy() if is_numpy else out


class ParamStore:
    """Flat float64 parameter vector plus a ``name -> (offset, shape)`` layout."""

    def __init__(self, shapes):
        self.layout = {}
        offset = 0
        for name, shape in (shapes.items() if isinstance(shapes, dict) else shapes):
            shape = tuple(int(s) for s in shape)
            if name in self.layout:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.layout[name] = (offset, shape)
            offset += int(np.prod(shape, dtype=np.int64))
        self.data = torch.zeros(offset, dtype=DTYPE)

    @property
    def size(self) -> int:
        return self.data.numel()

    def __len__(self):
        return self.size

    def __contains__(self, name):
        return name in self.layout

    def __getitem__(self, name) -> torch.Tensor:
        offset, shape = self.layout[name]
        n = int(np.prod(shape, dtype=np.int64))
        return self.data[offset:offset + n].view(shape)

    def set(self, name, values):
        offset, shape = self.layout[name]
        values = torch.as_tensor(np.asarray(values, dtype=np.float64)).reshape(shape)
        with torch.no_grad():
            self.data[offset:offset + values.numel()] = values.reshape(-1)

    def vector(self) -> np.ndarray:
        return self.data.detach().numpy().copy()

    def load_vector(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {vector.shape}")
        with torch.no_grad():
            self.data.copy_(torch.from_numpy(vector))

    def copy(self) -> "ParamStore":
        other = ParamStore([(n, s) for n, (_, s) in self.layout.items()])
        other.load_vector(self.vector())
        return other

    def slice_of(self, name) -> slice:
        offset, shape = self.layout[name]
        return slice(offset, offset + int(np.prod(shape, dtype=np.int64)))


class GradientTape:
    """Records field outputs while the parameter vector is being watched.

    Use as a context manager around forward passes, then call
    :func:`field_backward` (or :meth:`gradient`) with upstream gradients.
    """

    def __init__(self, params: ParamStore):
        self.params = params
        self.records = []
        self._was_watching = False

    def __enter__(self):
        self._was_watching = self.params.data.requires_grad
        self.params.data.requires_grad_(True)
        return self

    def __exit__(self, *exc):
        self.params.data.requires_grad_(self._was_watching)
        return False

    def record(self, *outputs):
        self.records.append(tuple(outputs))
        return outputs

    def gradient(self, upstream) -> np.ndarray:
        if not self.records:
            raise RuntimeError("backward called before any forward pass was recorded")
        if len(self.records) == 1 and _is_single_pair(upstream):
            upstream = [upstream]
        if len(upstream) != len(self.records):
            raise ValueError(f"{len(upstream)} upstream gradients for {len(self.records)} records")
        outputs, grads = [], []
        for rec, up in zip(self.records, upstream):
            for out, g in zip(rec, up):
                g = torch.as_tensor(np.asarray(g, dtype=np.float64)).reshape(out.shape)
                if out.requires_grad:
                    outputs.append(out)
                    grads.append(g)
        if not outputs:
            return np.zeros(self.params.size)
        # the graph was recorded while watching; re-mark the leaf in case the
        # context has already exited
        watching = self.params.data.requires_grad
        self.params.data.requires_grad_(True)
        try:
            (grad,) = torch.autograd.grad(outputs, self.params.data, grads,
                                          retain_graph=True, allow_unused=True)
        finally:
            self.params.data.requires_grad_(watching)
        if grad is None:
            return np.zeros(self.params.size)
        return grad.detach().numpy().copy()


def _is_single_pair(upstream):
    return len(upstream) == 2 and not isinstance(upstream[0], (list, tuple))


def field_backward(params: ParamStore, tape: GradientTape, upstream) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. every trainable scalar in ``params``.

    ``upstream`` holds ``(d_loss/d_color, d_loss/d_density)`` per recorded
    sample; contributions from all records are summed.
    """
    if tape.params is not params:
        raise ValueError("tape was recorded against a different parameter store")
    return tape.gradient(upstream)


# ---------------------------------------------------------------------------
# field interface


class RadianceField:
    """Base class: ``query(points, directions) -> (rgb, sigma)`` on torch tensors."""

    input_dim = 3
    params: ParamStore | None = None

    def query(self, points: torch.Tensor, directions: torch.Tensor):
        raise NotImplementedError

    def __call__(self, x, d=(0.0, 0.0, 1.0)) -> FieldSample:
        points = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(1, -1)
        dirs = torch.as_tensor(np.asarray(d, dtype=np.float64)).reshape(1, 3)
        with torch.no_grad():
            rgb, sigma = self.query(points, dirs)
        return FieldSample(rgb[0].numpy().copy(), float(sigma[0]))


def _color_tensor(color):
    color = torch.as_tensor(np.asarray(color, dtype=np.float64)).reshape(3)
    if torch.any(color < 0) or torch.any(color > 1):
        raise ValueError("colors must lie in [0, 1]")
    return color


class ConstantField(RadianceField):
    """Uniform density and color everywhere."""

    def __init__(self, density: float, color=(1.0, 1.0, 1.0)):
        if density < 0:
            raise ValueError("density must be >= 0")
        self.density = float(density)
        self.color = _color_tensor(color)

    def query(self, points, directions):
        n = points.shape[0]
        return self.color.expand(n, 3), torch.full((n,), self.density, dtype=DTYPE)


class SphereField(RadianceField):
    """Solid ball (closed) of constant density and color."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius=0.25, density_inside=50.0,
                 color=(0.9, 0.3, 0.2)):
        if radius <= 0:
            raise ValueError("radius must be > 0")
        if density_inside < 0:
            raise ValueError("density must be >= 0")
        self.center = torch.as_tensor(np.asarray(center, dtype=np.float64)).reshape(3)
        self.radius = float(radius)
        self.density = float(density_inside)
        self.color = _color_tensor(color)

    def query(self, points, directions):
        inside = torch.sum((points - self.center) ** 2, dim=-1) <= self.radius ** 2
        sigma = torch.where(inside, self.density, 0.0).to(DTYPE)
        return self.color.expand(points.shape[0], 3), sigma


class SlabField(RadianceField):
    """Axial slab ``z0 <= z <= z1`` with a checkerboard in x, y.

    ``bounds`` optionally limits the slab laterally to
    ``(x_min, x_max, y_min, y_max)``.
    """

    def __init__(self, z0=0.4, z1=0.6, density=50.0,
                 colors=((0.9, 0.9, 0.9), (0.1, 0.1, 0.1)), cell_size=0.1, bounds=None):
        if not z0 < z1:
            raise ValueError("need z0 < z1")
        if density < 0:
            raise ValueError("density must be >= 0")
        if cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        self.z0, self.z1 = float(z0), float(z1)
        self.density = float(density)
        self.colors = torch.stack([_color_tensor(c) for c in colors])
        self.cell_size = float(cell_size)
        self.bounds = None if bounds is None else tuple(float(b) for b in bounds)

    def query(self, points, directions):
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        inside = (z >= self.z0) & (z <= self.z1)
        if self.bounds is not None:
            x0, x1, y0, y1 = self.bounds
            inside &= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        sigma = torch.where(inside, self.density, 0.0).to(DTYPE)
        parity = (torch.floor(x / self.cell_size) + torch.floor(y / self.cell_size)).long() % 2
        return self.colors[parity], sigma


class CompositeField(RadianceField):
    """Union of fields: densities add, colors mix by density."""

    def __init__(self, fields):
        self.fields = list(fields)
        if not self.fields:
            raise ValueError("need at least one field")

    def query(self, points, directions):
        rgbs, sigmas = zip(*(f.query(points, directions) for f in self.fields))
        sigma = sum(sigmas)
        weighted = sum(s[:, None] * c for s, c in zip(sigmas, rgbs))
        safe = torch.where(sigma > 0, sigma, 1.0)[:, None]
        rgb = torch.where(sigma[:, None] > 0, weighted / safe, rgbs[0])
        return rgb, sigma


class ConstantShellField(ConstantField):
    """Background field on inverted-sphere coordinates: uniform emissive shell."""

    input_dim = 4


class LinearColorField(RadianceField):
    """Toy field whose color is affine in its parameters: ``c = W x + b``, fixed density."""

    def __init__(self, density=1.0, seed=0):
        self.density = float(density)
        self.params = ParamStore({"weight": (3, 3), "bias": (3,)})
        rng = np.random.default_rng(seed)
        self.params.set("weight", rng.normal(0.0, 0.1, (3, 3)))
        self.params.set("bias", rng.uniform(0.3, 0.7, 3))

    def query(self, points, directions):
        rgb = points @ self.params["weight"].T + self.params["bias"]
        return rgb, torch.full((points.shape[0],), self.density, dtype=DTYPE)


class TwoParamField(RadianceField):
    """Toy field with two scalars: ``sigma = softplus(a)``, gray color ``sigmoid(b)``."""

    def __init__(self, a=0.0, b=0.0):
        self.params = ParamStore({"a": (1,), "b": (1,)})
        self.params.set("a", [a])
        self.params.set("b", [b])

    def query(self, points, directions):
        n = points.shape[0]
        sigma = F.softplus(self.params["a"]).expand(n)
        rgb = torch.sigmoid(self.params["b"]).expand(n, 3)
        return rgb, sigma


# ---------------------------------------------------------------------------
# FiLM-SIREN neural field


@dataclass
class FieldConfig:
    latent_dim: int = 32
    mapping_layers: int = 3
    mapping_width: int = 64
    n_layers: int = 8
    width: int = 32
    input_dim: int = 3
    encoding_levels: int = 0
    omega: float = 30.0
    input_scale: float = 1.0
    f_min: float = 3.0
    f_max: float = 5.0
    density_bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "mapping_layers", "mapping_width", "n_layers", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_dim not in (3, 4):
            raise ValueError("input_dim must be 3 (foreground) or 4 (inverted background)")
        if not 0 < self.f_min < self.f_max:
            raise ValueError("need 0 < f_min < f_max")

    @classmethod
    def full_scale(cls, **overrides):
        return cls(**{"latent_dim": 256, "mapping_width": 256, "n_layers": 8,
                      "width": 128, **overrides})

    @classmethod
    def background(cls, **overrides):
        return cls(**{"input_dim": 4, **overrides})

    @property
    def encoded_dim(self) -> int:
        return self.input_dim * (1 + 2 * self.encoding_levels)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FilmParams:
    frequencies: list
    phases: list

    def __len__(self):
        return len(self.frequencies)


def _field_layout(cfg: FieldConfig):
    shapes = []
    fan_in = cfg.latent_dim
    for i in range(cfg.mapping_layers):
        shapes += [(f"map{i}.weight", (cfg.mapping_width, fan_in)),
                   (f"map{i}.bias", (cfg.mapping_width,))]
        fan_in = cfg.mapping_width
    film_out = 2 * cfg.n_layers * cfg.width
    shapes += [("map_out.weight", (film_out, fan_in)), ("map_out.bias", (film_out,)),
               ("focus.weight", (1, fan_in)), ("focus.bias", (1,))]
    fan_in = cfg.encoded_dim
    for i in range(cfg.n_layers):
        shapes += [(f"film{i}.weight", (cfg.width, fan_in)), (f"film{i}.bias", (cfg.width,))]
        fan_in = cfg.width
    shapes += [("density.weight", (1, cfg.width)), ("density.bias", (1,)),
               ("color.weight", (3, cfg.width + 3)), ("color.bias", (3,))]
    return shapes


def init_field_params(cfg: FieldConfig, rng: np.random.Generator) -> ParamStore:
    """SIREN initialization for the synthesis layers, He-style for the mapping trunk."""
    params = ParamStore(_field_layout(cfg))
    fan_in = cfg.latent_dim
    for i in range(cfg.mapping_layers):
        std = math.sqrt(2.0 / (1 + 0.2 ** 2)) / math.sqrt(fan_in)
        params.set(f"map{i}.weight", rng.normal(0.0, std, (cfg.mapping_width, fan_in)))
        fan_in = cfg.mapping_width
    std = 0.25 * math.sqrt(2.0 / (1 + 0.2 ** 2)) / math.sqrt(fan_in)
    params.set("map_out.weight", rng.normal(0.0, std, params["map_out.weight"].shape))
    params.set("focus.weight", rng.normal(0.0, 0.01, (1, fan_in)))
    fan_in = cfg.encoded_dim
    for i in range(cfg.n_layers):
        bound = 1.0 / fan_in if i == 0 else math.sqrt(6.0 / fan_in) / cfg.omega
        params.set(f"film{i}.weight", rng.uniform(-bound, bound, (cfg.width, fan_in)))
        b = 1.0 / math.sqrt(fan_in)
        params.set(f"film{i}.bias", rng.uniform(-b, b, cfg.width))
        fan_in = cfg.width
    bound = math.sqrt(6.0 / cfg.width) / cfg.omega
    params.set("density.weight", rng.uniform(-bound, bound, (1, cfg.width)))
    params.set("density.bias", [cfg.density_bias])
    bound = math.sqrt(6.0 / (cfg.width + 3)) / cfg.omega
    params.set("color.weight", rng.uniform(-bound, bound, (3, cfg.width + 3)))
    return params


def mapping_network(params: ParamStore, z, cfg: FieldConfig):
    """Latent code -> (FiLM frequencies/phases per layer, focus distance)."""
    z = torch.as_tensor(np.asarray(z, dtype=np.float64)) if not isinstance(z, torch.Tensor) else z
    if z.shape != (cfg.latent_dim,):
        raise ValueError(f"latent code must have shape ({cfg.latent_dim},), got {tuple(z.shape)}")
    h = z
    for i in range(cfg.mapping_layers):
        h = F.leaky_relu(params[f"map{i}.weight"] @ h + params[f"map{i}.bias"], 0.2)
    film = params["map_out.weight"] @ h + params["map_out.bias"]
    half = cfg.n_layers * cfg.width
    freqs = (film[:half] * 15.0 + cfg.omega).view(cfg.n_layers, cfg.width)
    phases = film[half:].view(cfg.n_layers, cfg.width)
    logit = (params["focus.weight"] @ h + params["focus.bias"])[0]
    focus = cfg.f_min + (cfg.f_max - cfg.f_min) * torch.sigmoid(logit)
    return FilmParams(list(freqs), list(phases)), focus


def neural_field_forward(params: ParamStore, film: FilmParams, x, d, cfg: FieldConfig,
                         tape: GradientTape | None = None):
    """FiLM-SIREN forward pass on batched ``x`` (N, input_dim) and unit ``d`` (N, 3).

    Density depends on ``x`` only; the direction enters the color head.
    """
    if cfg.input_scale != 1.0:
        x = x * cfg.input_scale
    h = positional_encoding(x, cfg.encoding_levels) if cfg.encoding_levels else x
    for i in range(cfg.n_layers):
        pre = h @ params[f"film{i}.weight"].T + params[f"film{i}.bias"]
        h = torch.sin(film.frequencies[i] * pre + film.phases[i])
    sigma = F.softplus(h @ params["density.weight"].T + params["density.bias"])[:, 0]
    rgb = torch.sigmoid(torch.cat([h, d], dim=-1) @ params["color.weight"].T
                        + params["color.bias"])
    if tape is not None:
        tape.record(rgb, sigma)
    return rgb, sigma


class NeuralField(RadianceField):
    """Latent-conditioned FiLM-SIREN field with a focus-distance head."""

    def __init__(self, config: FieldConfig | None = None, params: ParamStore | None = None,
                 latent=None):
        self.config = config or FieldConfig()
        rng = np.random.default_rng(self.config.seed)
        self.params = params if params is not None else init_field_params(self.config, rng)
        if latent is None:
            latent = rng.standard_normal(self.config.latent_dim)
        self.latent = np.asarray(latent, dtype=np.float64)
        if self.latent.shape != (self.config.latent_dim,):
            raise ValueError("latent code does not match latent_dim")

    @property
    def input_dim(self):
        return self.config.input_dim

    def film(self):
        return mapping_network(self.params, self.latent, self.config)

    def focus_distance(self) -> torch.Tensor:
        return self.film()[1]

    def query(self, points, directions, tape=None):
        film, _ = self.film()
        return neural_field_forward(self.params, film, points, directions, self.config, tape)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"APFIELD\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamStore, metadata: dict | None = None):
    """Header (magic, version, JSON layout) followed by little-endian f64 values."""
    layout = [{"name": n, "offset": o, "shape": list(s)} for n, (o, s) in params.layout.items()]
    header = json.dumps({"layout": layout, "size": params.size, "metadata": metadata or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.vector().astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(ParamStore, metadata)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    entries = sorted(header["layout"], key=lambda e: e["offset"])
    params = ParamStore([(e["name"], e["shape"]) for e in entries])
    for e in entries:
        if params.layout[e["name"]][0] != e["offset"]:
            raise ValueError(f"{path}: layout table is not contiguous")
    values = np.frombuffer(raw[16 + header_len:], dtype="<f8")
    if values.size != header["size"] or values.size != params.size:
        raise ValueError(f"{path}: expected {params.size} values, found {values.size}")
    params.load_vector(values.astype(np.float64))
    return params, header["metadata"]


def field_from_checkpoint(path) -> NeuralField:
    params, meta = load_checkpoint(path)
    cfg = FieldConfig(**meta["field_config"])
    return NeuralField(cfg, params=params, latent=meta.get("latent"))
