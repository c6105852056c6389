import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aperture_nerf.fields import (
    CompositeField,
    ConstantField,
    FieldConfig,
    FilmParams,
    GradientTape,
    NeuralField,
    ParamStore,
    SlabField,
    SphereField,
    field_backward,
    field_from_checkpoint,
    init_field_params,
    load_checkpoint,
    mapping_network,
    neural_field_forward,
    positional_encoding,
    save_checkpoint,
)

SMALL = FieldConfig(n_layers=2, width=8, latent_dim=4, mapping_width=8, seed=3)


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# positional encoding


def test_encoding_zero_levels_is_identity():
    x = np.array([0.3, -0.2, 0.9])
    assert np.array_equal(positional_encoding(x, 0), x)


def test_encoding_at_origin():
    out = positional_encoding(np.zeros(3), 4)
    assert out.shape == (27,)
    assert not np.any(out[:3])
    sins = out[3:].reshape(4, 2, 3)[:, 0]
    coss = out[3:].reshape(4, 2, 3)[:, 1]
    assert not np.any(sins) and np.all(coss == 1.0)


def test_encoding_hand_value():
    out = positional_encoding(np.array([0.5, 0.0, 0.0]), 1)
    assert abs(out[3] - 1.0) < 1e-15  # sin(pi/2)
    assert abs(out[6]) < 1e-15  # cos(pi/2)


def test_encoding_rejects_negative_levels():
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(3), -1)


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), st.integers(0, 6))
def test_encoding_range(x, levels):
    out = positional_encoding(x, levels)
    assert out.shape == (3 + 6 * levels,)
    assert np.all(np.abs(out[3:]) <= 1.0)


def test_encoding_accepts_torch():
    x = torch.rand(5, 3, dtype=torch.float64)
    out = positional_encoding(x, 2)
    assert isinstance(out, torch.Tensor) and out.shape == (5, 15)


# ---------------------------------------------------------------------------
# parameter store and checkpoints


def test_param_store_layout_covers_vector_once():
    store = init_field_params(SMALL, np.random.default_rng(0))
    covered = np.zeros(store.size, dtype=int)
    for name in store.layout:
        covered[store.slice_of(name)] += 1
    assert np.all(covered == 1)


def test_param_store_views_share_memory():
    store = ParamStore({"a": (2, 2), "b": (3,)})
    store.set("b", [1.0, 2.0, 3.0])
    assert np.array_equal(store.vector(), [0, 0, 0, 0, 1, 2, 3])
    with pytest.raises(ValueError):
        store.load_vector(np.zeros(6))
    with pytest.raises(ValueError):
        ParamStore([("a", (1,)), ("a", (2,))])


def test_checkpoint_roundtrip(tmp_path):
    field = NeuralField(SMALL)
    path = tmp_path / "f.bin"
    save_checkpoint(path, field.params, {"field_config": SMALL.to_dict(),
                                         "latent": field.latent.tolist()})
    params, meta = load_checkpoint(path)
    assert np.array_equal(params.vector(), field.params.vector())
    assert params.layout == field.params.layout
    again = field_from_checkpoint(path)
    pts = _t(np.random.default_rng(0).uniform(-1, 1, (10, 3)))
    dirs = _t(np.tile([0.0, 0.0, 1.0], (10, 1)))
    a, b = field.query(pts, dirs), again.query(pts, dirs)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_data(tmp_path):
    field = NeuralField(SMALL)
    path = tmp_path / "f.bin"
    save_checkpoint(path, field.params)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# mapping network


def test_mapping_is_deterministic():
    field = NeuralField(SMALL)
    a_film, a_f = mapping_network(field.params, field.latent, SMALL)
    b_film, b_f = mapping_network(field.params, field.latent, SMALL)
    assert torch.equal(a_f, b_f)
    assert all(torch.equal(x, y) for x, y in zip(a_film.frequencies, b_film.frequencies))


def test_zero_weights_give_midpoint_focus():
    params = init_field_params(SMALL, np.random.default_rng(0))
    params.load_vector(np.zeros(params.size))
    _, focus = mapping_network(params, np.ones(SMALL.latent_dim), SMALL)
    assert float(focus) == (SMALL.f_min + SMALL.f_max) / 2


def test_default_config_has_eight_film_layers():
    cfg = FieldConfig()
    film, _ = mapping_network(init_field_params(cfg, np.random.default_rng(0)),
                              np.zeros(cfg.latent_dim), cfg)
    assert len(film) == 8
    assert all(f.shape == (cfg.width,) for f in film.frequencies)


def test_mapping_rejects_wrong_latent_size():
    field = NeuralField(SMALL)
    with pytest.raises(ValueError):
        mapping_network(field.params, np.zeros(SMALL.latent_dim + 1), SMALL)


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
@settings(max_examples=30, deadline=None)
def test_focus_stays_in_range(z):
    params = init_field_params(SMALL, np.random.default_rng(1))
    params.set("focus.weight", np.full((1, SMALL.mapping_width), 3.0))
    _, focus = mapping_network(params, np.array(z), SMALL)
    assert SMALL.f_min <= float(focus) <= SMALL.f_max


def test_full_scale_config_is_constructible():
    cfg = FieldConfig.full_scale()
    assert (cfg.latent_dim, cfg.n_layers, cfg.width, cfg.mapping_width) == (256, 8, 128, 256)
    assert init_field_params(cfg, np.random.default_rng(0)).size > 0


def test_siren_init_bounds():
    cfg = FieldConfig(n_layers=3, width=16)
    params = init_field_params(cfg, np.random.default_rng(0))
    assert params["film0.weight"].abs().max() <= 1.0 / 3
    later = math.sqrt(6.0 / 16) / 30.0
    assert params["film1.weight"].abs().max() <= later
    assert params["film2.weight"].abs().max() <= later


# ---------------------------------------------------------------------------
# neural forward pass


def test_one_layer_forward_matches_hand_computation():
    cfg = FieldConfig(n_layers=1, width=2, latent_dim=1, mapping_width=1, mapping_layers=1)
    params = init_field_params(cfg, np.random.default_rng(0))
    W = np.array([[0.1, -0.2, 0.3], [0.05, 0.4, -0.1]])
    b = np.array([0.2, -0.3])
    wd, bd = np.array([[0.7, -1.1]]), np.array([0.25])
    wc = np.arange(15, dtype=float).reshape(3, 5) / 20 - 0.3
    bc = np.array([0.1, 0.0, -0.1])
    for name, value in [("film0.weight", W), ("film0.bias", b), ("density.weight", wd),
                        ("density.bias", bd), ("color.weight", wc), ("color.bias", bc)]:
        params.set(name, value)
    freq, phase = np.array([30.0, 12.0]), np.array([0.5, -0.25])
    film = FilmParams([_t(freq)], [_t(phase)])
    x = np.array([0.3, -0.4, 0.2])
    d = np.array([0.0, 0.6, 0.8])
    rgb, sigma = neural_field_forward(params, film, _t(x[None]), _t(d[None]), cfg)

    h = np.sin(freq * (W @ x + b) + phase)
    pre = wd @ h + bd
    sigma_ref = math.log1p(math.exp(pre[0]))
    rgb_ref = 1.0 / (1.0 + np.exp(-(wc @ np.concatenate([h, d]) + bc)))
    assert abs(float(sigma[0]) - sigma_ref) < 1e-12
    assert np.max(np.abs(rgb[0].numpy() - rgb_ref)) < 1e-12


def test_density_independent_of_direction():
    field = NeuralField(FieldConfig(n_layers=3, width=16))
    pts = _t(np.random.default_rng(0).uniform(-1, 1, (50, 3)))
    d1 = _t(np.tile([0.0, 0.0, 1.0], (50, 1)))
    d2 = _t(np.tile([0.6, -0.8, 0.0], (50, 1)))
    rgb1, s1 = field.query(pts, d1)
    rgb2, s2 = field.query(pts, d2)
    assert torch.equal(s1, s2)
    assert not torch.equal(rgb1, rgb2)


def test_output_ranges_on_random_inputs():
    field = NeuralField(FieldConfig(n_layers=4, width=32))
    rng = np.random.default_rng(0)
    pts = _t(rng.uniform(-2, 2, (10**4, 3)))
    dirs = rng.normal(size=(10**4, 3))
    dirs = _t(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    rgb, sigma = field.query(pts, dirs)
    assert torch.all(sigma >= 0)
    assert torch.all((rgb >= 0) & (rgb <= 1))


def test_callable_returns_field_sample():
    sample = NeuralField(SMALL)((0.1, 0.2, 0.3))
    assert sample.color.shape == (3,)
    assert sample.density >= 0


# ---------------------------------------------------------------------------
# analytic fields


def test_sphere_field():
    field = SphereField(center=(0.1, 0, 0), radius=0.5, density_inside=7.0, color=(1, 0, 0))
    inside = field((0.1, 0.0, 0.0))
    assert inside.density == 7.0 and np.array_equal(inside.color, [1, 0, 0])
    assert field((0.7, 0.0, 0.0)).density == 0.0
    assert field((0.6, 0.0, 0.0)).density == 7.0  # closed ball


def test_slab_field_inside_outside_boundary():
    field = SlabField(0.4, 0.6, 20.0, ((1, 1, 1), (0, 0, 0)), cell_size=0.5)
    assert field((0.1, 0.1, 0.5)).density == 20.0
    assert field((0.1, 0.1, 0.7)).density == 0.0
    assert field((0.1, 0.1, 0.4)).density == 20.0
    assert field((0.1, 0.1, 0.6)).density == 20.0


def test_slab_checkerboard_parity():
    field = SlabField(0.0, 1.0, 1.0, ((1, 1, 1), (0, 0, 0)), cell_size=0.5)
    a = field((0.25, 0.25, 0.5)).color
    b = field((0.75, 0.25, 0.5)).color
    c = field((0.75, 0.75, 0.5)).color
    assert np.array_equal(a, c) and not np.array_equal(a, b)


def test_composite_field_mixes_by_density():
    field = CompositeField([ConstantField(1.0, (1, 0, 0)), ConstantField(3.0, (0, 0, 1))])
    sample = field((0, 0, 0))
    assert sample.density == 4.0
    assert np.allclose(sample.color, [0.25, 0, 0.75])


@given(arrays(np.float64, (20, 3), elements=st.floats(-3, 3)))
@settings(max_examples=30, deadline=None)
def test_all_fields_have_nonnegative_density(points):
    dirs = np.tile([0.0, 0.0, 1.0], (20, 1))
    for field in (SphereField(), SlabField(), ConstantField(0.0),
                  CompositeField([SphereField(), SlabField()]), NeuralField(SMALL)):
        _, sigma = field.query(_t(points), _t(dirs))
        assert torch.all(sigma >= 0)


# ---------------------------------------------------------------------------
# gradients


def _forward(field, pts, dirs, tape):
    film, _ = field.film()
    return neural_field_forward(field.params, film, pts, dirs, field.config, tape)


def _batch(n=6, seed=0):
    rng = np.random.default_rng(seed)
    pts = _t(rng.uniform(-1, 1, (n, 3)))
    d = rng.normal(size=(n, 3))
    return pts, _t(d / np.linalg.norm(d, axis=1, keepdims=True))


def test_backward_without_forward_is_an_error():
    field = NeuralField(SMALL)
    with GradientTape(field.params) as tape:
        pass
    with pytest.raises(RuntimeError):
        field_backward(field.params, tape, (np.zeros((1, 3)), np.zeros(1)))


def test_zero_upstream_gives_zero_gradient():
    field = NeuralField(SMALL)
    pts, dirs = _batch()
    with GradientTape(field.params) as tape:
        _forward(field, pts, dirs, tape)
    grad = field_backward(field.params, tape, (np.zeros((6, 3)), np.zeros(6)))
    assert grad.shape == (field.params.size,) and not np.any(grad)


def test_gradients_add_across_records():
    field = NeuralField(SMALL)
    (p1, d1), (p2, d2) = _batch(seed=1), _batch(seed=2)
    rng = np.random.default_rng(3)
    up1 = (rng.normal(size=(6, 3)), rng.normal(size=6))
    up2 = (rng.normal(size=(6, 3)), rng.normal(size=6))
    grads = []
    for batches, upstream in (([(p1, d1)], up1), ([(p2, d2)], up2),
                              ([(p1, d1), (p2, d2)], [up1, up2])):
        with GradientTape(field.params) as tape:
            for p, d in batches:
                _forward(field, p, d, tape)
        grads.append(field_backward(field.params, tape, upstream))
    assert np.allclose(grads[0] + grads[1], grads[2], rtol=0, atol=1e-12)


def test_backward_matches_central_differences():
    field = NeuralField(SMALL)
    pts, dirs = _batch()
    rng = np.random.default_rng(4)
    up_c, up_s = rng.normal(size=(6, 3)), rng.normal(size=6)

    def loss():
        with torch.no_grad():
            rgb, sigma = _forward(field, pts, dirs, None)
        return float(np.sum(rgb.numpy() * up_c) + np.sum(sigma.numpy() * up_s))

    with GradientTape(field.params) as tape:
        _forward(field, pts, dirs, tape)
    grad = field_backward(field.params, tape, (up_c, up_s))
    base = field.params.vector()
    h = 1e-5
    for i in rng.choice(base.size, 40, replace=False):
        v = base.copy()
        v[i] += h
        field.params.load_vector(v)
        plus = loss()
        v[i] -= 2 * h
        field.params.load_vector(v)
        minus = loss()
        field.params.load_vector(base)
        fd = (plus - minus) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * max(abs(fd), abs(grad[i]), 1e-6)


def test_tape_restores_watch_state():
    field = NeuralField(SMALL)
    with GradientTape(field.params):
        assert field.params.data.requires_grad
    assert not field.params.data.requires_grad
