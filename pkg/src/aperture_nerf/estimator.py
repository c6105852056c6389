"""Estimator wrapper around field fitting and rendering."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_cameras, check_observations
from .fields import (
    FieldConfig,
    NeuralField,
    field_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import psnr
from .render import RenderSettings, render_image
from .training import FitConfig, fit_field


class ApertureFieldRegressor(BaseEstimator):
    """Fit a neural radiance field to defocused views and render new ones.

    ``fit`` takes a list of observations, or cameras plus images.
    ``predict`` renders RGB images for cameras, ``transform`` renders their
    depth maps and ``score`` is mean PSNR against reference images.
    """

    def __init__(self, n_layers=4, width=32, latent_dim=32, input_scale=1.0, steps=2000,
                 learning_rate=1e-3, final_lr_fraction=1.0, batch_pixels=256, n_coarse=32,
                 n_fine=16, n_rays=5, scheme="stratified", background=None, seed=0, workers=1):
        self.n_layers = n_layers
        self.width = width
        self.latent_dim = latent_dim
        self.input_scale = input_scale
        self.steps = steps
        self.learning_rate = learning_rate
        self.final_lr_fraction = final_lr_fraction
        self.batch_pixels = batch_pixels
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.n_rays = n_rays
        self.scheme = scheme
        self.background = background
        self.seed = seed
        self.workers = workers

    def _settings(self, jitter):
        return RenderSettings(n_coarse=self.n_coarse, n_fine=self.n_fine, n_rays=self.n_rays,
                              scheme=self.scheme, jitter=jitter)

    def fit(self, X, y=None):
        observations = check_observations(X, y)
        config = FieldConfig(n_layers=self.n_layers, width=self.width,
                             latent_dim=self.latent_dim, input_scale=self.input_scale,
                             seed=self.seed)
        fit = FitConfig(steps=self.steps, learning_rate=self.learning_rate,
                        final_lr_fraction=self.final_lr_fraction,
                        batch_pixels=self.batch_pixels, seed=self.seed, workers=self.workers,
                        settings=self._settings(jitter=True))
        result = fit_field(observations, NeuralField(config), fit, self.background)
        self.field_ = result.field
        self.trace_ = result.trace
        self.apertures_ = result.apertures
        self.n_observations_ = len(observations)
        return self

    def render(self, camera):
        """``(image, depth, opacity)`` for one camera."""
        check_is_fitted(self, "field_")
        (camera,) = check_cameras(camera)
        return render_image(self.field_, self.background, camera, self._settings(jitter=False),
                            seed=self.seed, workers=self.workers)

    def predict(self, X):
        return np.stack([self.render(c)[0] for c in check_cameras(X)])

    def transform(self, X):
        return np.stack([self.render(c)[1] for c in check_cameras(X)])

    def score(self, X, y):
        images = self.predict(X)
        return float(np.mean([psnr(p, r) for p, r in zip(images, y)]))

    def save(self, path, **metadata):
        check_is_fitted(self, "field_")
        meta = {"field_config": self.field_.config.to_dict(),
                "latent": self.field_.latent.tolist(), "estimator": self.get_params(), **metadata}
        meta["estimator"].pop("background", None)
        save_checkpoint(path, self.field_.params, meta)

    @classmethod
    def load(cls, path, background=None):
        field = field_from_checkpoint(path)
        params = load_checkpoint(path)[1].get("estimator", {})
        est = cls(**params, background=background)
        est.field_ = field
        est.trace_ = []
        est.apertures_ = {}
        return est
