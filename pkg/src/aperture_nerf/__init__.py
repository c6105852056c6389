"""Thin-lens volume rendering of radiance fields with a learnable aperture."""
from .estimator import ApertureFieldRegressor
from .fields import (
    CompositeField,
    ConstantField,
    ConstantShellField,
    FieldConfig,
    FieldSample,
    FilmParams,
    GradientTape,
    NeuralField,
    ParamStore,
    RadianceField,
    SlabField,
    SphereField,
    field_from_checkpoint,
    load_checkpoint,
    mapping_network,
    positional_encoding,
    save_checkpoint,
)
from .geometry import (
    ApertureCamera,
    Ray,
    aperture_offsets_random,
    aperture_offsets_stratified,
    aperture_ray,
    look_at_rotation,
    pinhole_ray,
)
from .metrics import depth_metrics, grad_diff, laplacian_variance, psnr, side
from .render import (
    QuadratureSamples,
    RenderSettings,
    composite_fg_bg,
    hierarchical_resample,
    invert_sphere,
    render_image,
    render_pixel,
    stratified_t_samples,
    volume_render_ray,
)
from .scene import Scene, SceneError
from .training import (
    ApertureDistribution,
    DivergenceError,
    FitConfig,
    Observation,
    fit_field,
    gan_losses,
    gradient_check,
    reconstruction_loss,
    sample_aperture_size,
    synthesize_observations,
)

__version__ = "0.1.0"

__all__ = [
    "ApertureCamera",
    "ApertureDistribution",
    "ApertureFieldRegressor",
    "CompositeField",
    "ConstantField",
    "ConstantShellField",
    "DivergenceError",
    "FieldConfig",
    "FieldSample",
    "FilmParams",
    "FitConfig",
    "GradientTape",
    "NeuralField",
    "Observation",
    "ParamStore",
    "QuadratureSamples",
    "RadianceField",
    "Ray",
    "RenderSettings",
    "Scene",
    "SceneError",
    "SlabField",
    "SphereField",
    "aperture_offsets_random",
    "aperture_offsets_stratified",
    "aperture_ray",
    "composite_fg_bg",
    "depth_metrics",
    "field_from_checkpoint",
    "fit_field",
    "gan_losses",
    "grad_diff",
    "gradient_check",
    "hierarchical_resample",
    "invert_sphere",
    "laplacian_variance",
    "load_checkpoint",
    "look_at_rotation",
    "mapping_network",
    "pinhole_ray",
    "positional_encoding",
    "psnr",
    "reconstruction_loss",
    "render_image",
    "render_pixel",
    "sample_aperture_size",
    "save_checkpoint",
    "side",
    "stratified_t_samples",
    "synthesize_observations",
    "volume_render_ray",
]
