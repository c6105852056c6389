import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from aperture_nerf.fields import (
    FieldConfig,
    LinearColorField,
    NeuralField,
    SlabField,
    SphereField,
    TwoParamField,
)
from aperture_nerf.geometry import ApertureCamera
from aperture_nerf.render import RenderSettings, draw_uniforms, render_bundle
from aperture_nerf.training import (
    ApertureDistribution,
    DivergenceError,
    FitConfig,
    Observation,
    fit_field,
    gan_losses,
    gradient_check,
    half_normal_cdf,
    reconstruction_loss,
    sample_aperture_size,
    synthesize_observations,
)

TINY = FieldConfig(n_layers=2, width=16, latent_dim=8, mapping_width=16)
QUICK = RenderSettings(n_coarse=16, n_fine=8, n_rays=3, jitter=True)


# ---------------------------------------------------------------------------
# aperture prior


def test_zero_sigma_gives_zero_aperture():
    rng = np.random.default_rng(0)
    assert all(sample_aperture_size(ApertureDistribution(0.0), rng) == 0.0 for _ in range(100))


def test_half_normal_mean_and_sign():
    draws = sample_aperture_size(ApertureDistribution(1.0), np.random.default_rng(1), 10**6)
    assert np.all(draws >= 0)
    assert abs(draws.mean() / math.sqrt(2 / math.pi) - 1.0) < 0.02


def test_half_normal_sampler_is_reproducible():
    a = sample_aperture_size(ApertureDistribution(0.3), np.random.default_rng(7), 50)
    b = sample_aperture_size(ApertureDistribution(0.3), np.random.default_rng(7), 50)
    assert np.array_equal(a, b)


def test_half_normal_cdf_values():
    assert half_normal_cdf(-1.0, 1.0) == 0.0
    assert abs(half_normal_cdf(1.0, 1.0) - 0.6826894921370859) < 1e-12
    with pytest.raises(ValueError):
        ApertureDistribution(-1.0)


# ---------------------------------------------------------------------------
# loss formulas


def test_gan_equilibrium():
    d, g_mm, g_ns = gan_losses([0.5] * 4, [0.5] * 3)
    assert abs(d - 2 * math.log(2)) < 1e-12
    assert abs(g_mm + math.log(2)) < 1e-12
    assert abs(g_ns - math.log(2)) < 1e-12


def test_gan_hand_values():
    d, _, _ = gan_losses([0.9], [0.2])
    assert abs(d - (-math.log(0.9) - math.log(0.8))) < 1e-15


def test_nonsaturating_loss_vanishes_as_fake_score_approaches_one():
    losses = [gan_losses([0.5], [1 - eps])[2] for eps in (1e-2, 1e-4, 1e-8)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-7


def test_gan_domain_errors():
    with pytest.raises(ValueError):
        gan_losses([1.0], [0.5])
    with pytest.raises(ValueError):
        gan_losses([0.5], [0.0])
    with pytest.raises(ValueError):
        gan_losses([], [0.5])


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10),
       st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10), st.randoms())
def test_gan_losses_permutation_invariant(real, fake, rnd):
    a = gan_losses(real, fake)
    rnd.shuffle(real)
    rnd.shuffle(fake)
    assert np.allclose(a, gan_losses(real, fake), rtol=1e-12, atol=1e-12)


def test_reconstruction_loss_values():
    target = np.random.default_rng(0).random((10, 3))
    assert float(reconstruction_loss(target, target)) == 0.0
    assert abs(float(reconstruction_loss(target + 0.3, target)) - 0.09) < 1e-12
    with pytest.raises(ValueError):
        reconstruction_loss(target[:5], target)


def test_reconstruction_gradient_on_two_parameter_field():
    field = TwoParamField(a=0.3, b=-0.4)
    cam = ApertureCamera(width=3, height=3, aperture_radius=0.1, focus_distance=3.5)
    settings = RenderSettings(n_coarse=16, n_fine=0, n_rays=5)
    pixels = np.arange(9)
    target = np.random.default_rng(0).random((9, 3))
    uniforms = draw_uniforms(settings, None, 9)
    offsets = np.broadcast_to(np.array([(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)], float),
                              (9, 5, 2))

    def loss():
        color, _, _ = render_bundle(field, None, cam, pixels, offsets, uniforms, settings)
        return reconstruction_loss(color, target)

    field.params.data.requires_grad_(True)
    (grad,) = torch.autograd.grad(loss(), field.params.data)
    field.params.data.requires_grad_(False)
    base = field.params.vector()
    h = 1e-5
    for i in range(2):
        v = base.copy()
        v[i] += h
        field.params.load_vector(v)
        plus = float(loss())
        v[i] -= 2 * h
        field.params.load_vector(v)
        minus = float(loss())
        fd = (plus - minus) / (2 * h)
        assert abs(fd - float(grad[i])) / max(abs(fd), 1e-12) < 1e-4
    field.params.load_vector(base)


# ---------------------------------------------------------------------------
# gradient check


def test_gradient_check_on_default_neural_field():
    report = gradient_check(n_coordinates=100)
    assert report.passed, report.failures
    assert report.max_rel_error < 1e-4
    assert len(report.coordinates) == 100


def test_gradient_check_linear_field_is_exact():
    # the loss is affine in these parameters, so central differences carry no
    # truncation error and a large step keeps rounding error small
    report = gradient_check(LinearColorField(density=0.8), n_coordinates=12, h=1e-2,
                            tolerance=1e-10)
    assert report.passed and report.max_rel_error < 1e-10


def test_gradient_check_reports_failures():
    report = gradient_check(NeuralField(TINY), n_coordinates=10, tolerance=0.0)
    assert not report.passed
    assert {f["coordinate"] for f in report.failures} <= set(report.coordinates)
    assert report.to_dict()["passed"] is False


# ---------------------------------------------------------------------------
# observations and fitting


def test_observation_validation():
    cam = ApertureCamera(width=4, height=3)
    with pytest.raises(ValueError):
        Observation(np.zeros((4, 3, 3)), cam)
    with pytest.raises(ValueError):
        Observation(np.full((3, 4, 3), 1.5), cam)
    with pytest.raises(ValueError):
        Observation(np.full((3, 4, 3), np.nan), cam)


def test_synthesized_views_vary_pose_and_aperture():
    base = ApertureCamera.looking_at((0, 0, -4), width=6, height=6)
    obs = synthesize_observations(SphereField(), None, base, 5, 0.08, 0.1, seed=3)
    radii = [o.camera.aperture_radius for o in obs]
    assert len(set(radii)) == 5 and min(radii) >= 0
    for o in obs:
        assert abs(np.linalg.norm(o.camera.origin) - 4.0) < 1e-9
    again = synthesize_observations(SphereField(), None, base, 5, 0.08, 0.1, seed=3)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(obs, again))


def test_fit_black_target_from_empty_scene():
    cam = ApertureCamera(width=8, height=8)
    obs = [Observation(np.zeros((8, 8, 3)), cam)]
    cfg = FieldConfig(n_layers=2, width=16, latent_dim=8, mapping_width=16, density_bias=-8.0)
    result = fit_field(obs, cfg, FitConfig(steps=200, batch_pixels=32, settings=QUICK))
    assert len(result.trace) == 200
    assert result.trace[-1]["loss"] < 1e-6


def test_fit_is_deterministic_across_workers():
    base = ApertureCamera.looking_at((0, 0, -4), width=8, height=8)
    obs = synthesize_observations(SphereField(), None, base, 2, 0.08, seed=1)
    fit = FitConfig(steps=6, batch_pixels=24, sub_batch_pixels=8, settings=QUICK)
    a = fit_field(obs, TINY, fit)
    b = fit_field(obs, TINY, fit)
    c = fit_field(obs, TINY, FitConfig(**{**fit.__dict__, "workers": 3}))
    assert [r["loss"] for r in a.trace] == [r["loss"] for r in b.trace]
    assert [r["loss"] for r in a.trace] == [r["loss"] for r in c.trace]
    assert np.array_equal(a.params.vector(), c.params.vector())


def test_fit_reduces_loss():
    base = ApertureCamera.looking_at((0, 0, -4), width=8, height=8)
    obs = synthesize_observations(SphereField(), None, base, 3, 0.0, seed=2)
    result = fit_field(obs, TINY, FitConfig(steps=120, batch_pixels=32, settings=QUICK))
    losses = [r["loss"] for r in result.trace]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_unknown_aperture_becomes_trainable():
    base = ApertureCamera.looking_at((0, 0, -4), width=8, height=8, aperture_radius=0.15,
                                     focus_distance=3.5)
    slab = SlabField(0.4, 0.6, 50.0, cell_size=0.1)
    obs = synthesize_observations(slab, None, base, 2, 0.0, 0.0, seed=0,
                                  randomize_aperture=False)
    obs[1].aperture_known = False
    result = fit_field(obs, TINY, FitConfig(steps=10, batch_pixels=16, settings=QUICK,
                                            aperture_init=0.05))
    assert set(result.apertures) == {1}
    assert result.apertures[1] != pytest.approx(0.05, abs=1e-12)
    assert result.apertures[1] > 0


def test_unknown_focus_uses_focus_head():
    base = ApertureCamera.looking_at((0, 0, -4), width=6, height=6, aperture_radius=0.1)
    obs = synthesize_observations(SphereField(), None, base, 1, 0.0, 0.0, seed=0)
    obs[0].focus_known = False
    field = NeuralField(TINY)
    before = float(field.focus_distance())
    fit_field(obs, field, FitConfig(steps=5, batch_pixels=16, settings=QUICK))
    assert float(field.focus_distance()) != before


def test_divergence_is_reported():
    cam = ApertureCamera(width=4, height=4)
    field = NeuralField(TINY)
    field.params.load_vector(np.full(field.params.size, np.nan))
    with pytest.raises(DivergenceError):
        fit_field([Observation(np.zeros((4, 4, 3)), cam)], field,
                  FitConfig(steps=3, batch_pixels=8, settings=QUICK))


def test_fit_argument_errors():
    with pytest.raises(ValueError):
        fit_field([], TINY)
    with pytest.raises(ValueError):
        FitConfig(steps=0)
    with pytest.raises(ValueError):
        FitConfig(learning_rate=-1.0)
