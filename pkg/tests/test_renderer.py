import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featnsr import autodiff as ad
from featnsr.field import Field, FieldConfig
from featnsr.geometry import Ray, sphere_bounds
from featnsr.renderer import (alpha_from_sdf, composite, composite_values, locate_zero_crossing, ray_alphas,
                              render, render_rays, sample_depths, sample_pdf, sample_ray, stratified,
                              transmittance)

TINY = FieldConfig(geo_layers=3, geo_width=16, skip_layer=1, pos_freq=2, dir_freq=1, rad_layers=1, rad_width=8)


def sphere_sdf(x):
    return np.linalg.norm(x, axis=-1) - 0.5


def test_alpha_worked_example():
    expected = (1 / (1 + np.exp(-1.0)) - 1 / (1 + np.exp(1.0))) / (1 / (1 + np.exp(-1.0)))
    assert alpha_from_sdf(0.1, -0.1, 10.0) == pytest.approx(expected, abs=1e-12)
    assert alpha_from_sdf(0.1, -0.1, 10.0) == pytest.approx(0.63212, abs=1e-5)


def test_alpha_zero_cases():
    assert alpha_from_sdf(0.3, 0.3, 50.0) == 0.0
    assert alpha_from_sdf(-0.1, 0.2, 50.0) == 0.0
    # tiny Phi(sdf_i) short-circuits to zero
    assert alpha_from_sdf(-10.0, -10.5, 10.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=40), st.floats(1, 2000))
def test_alpha_and_weight_invariants(sdf, s):
    sdf = np.array(sdf)
    alpha = ray_alphas(sdf, s)
    T = transmittance(alpha)
    assert np.all((alpha >= 0) & (alpha <= 1))
    assert T[0] == 1.0 and np.all(np.diff(T) <= 1e-15)
    assert np.allclose(T[1:], T[:-1] * (1 - alpha[:-1]))
    w = T * alpha
    assert -1e-12 <= w.sum() <= 1 + 1e-12


def test_zero_crossing_examples():
    assert locate_zero_crossing([1.0, 1.2], [0.2, -0.1]) == pytest.approx((0.2 * 1.2 + 0.1 * 1.0) / 0.3)
    assert locate_zero_crossing([0.0, 1.0, 2.0], [0.3, 0.2, 0.1]) is None
    t = locate_zero_crossing([0, 1, 2, 3, 4], [1.0, -1.0, -1.0, 1.0, -1.0])
    assert t == pytest.approx(0.5)


def test_zero_crossing_exact_for_linear_sdf(rng):
    for _ in range(50):
        root = rng.uniform(1.2, 2.8)
        depths = np.sort(rng.uniform(1, 3, 16))
        assert locate_zero_crossing(depths, root - depths) == pytest.approx(root, abs=1e-12)


def test_sample_pdf_fallback_is_uniform():
    edges = np.linspace(1.0, 3.0, 9)[None]
    out = sample_pdf(edges, np.zeros((1, 8)), 64, np.random.default_rng(0))
    assert np.all((out >= 1) & (out <= 3))
    hist = np.histogram(out, bins=8, range=(1, 3))[0]
    assert np.all(hist == 8)


def test_sample_pdf_concentrates_in_heavy_bin():
    edges = np.linspace(0.0, 1.0, 65)[None]
    w = np.full((1, 64), 1e-4)
    w[0, 30] = 1.0
    hits = 0
    for seed in range(100):
        fine = sample_pdf(edges, w, 64, np.random.default_rng(seed))[0]
        bins = np.floor(fine * 64).astype(int)
        hits += np.sum(np.abs(bins - 30) <= 1)
    assert hits / (100 * 64) >= 0.8


def test_sample_ray_deterministic_sorted_and_bounded():
    field = Field(TINY)
    params = field.init_params(0, fit_steps=0)
    ray = Ray(np.array([0, 0, -2.0]), np.array([0, 0, 1.0]), 1.0, 3.0)
    a = sample_ray(ray, params, 11, field)
    b = sample_ray(ray, params, 11, field)
    assert a.shape == (128,) and np.array_equal(a, b)
    assert np.all(np.diff(a) > 0) and a[0] >= 1.0 and a[-1] <= 3.0


def analytic_rays(rng, n):
    o = rng.normal(size=(n, 3))
    o = 2.5 * o / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(-0.3, 0.3, size=(n, 3))
    v = target - o
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return o, v


def test_analytic_sphere_crossing_accuracy(rng):
    o, v = analytic_rays(rng, 1000)
    t_near, t_far, hit = sphere_bounds(o, v)
    depths = sample_depths(sphere_sdf, 200.0, o, v, t_near, t_far, rng)
    sdf = sphere_sdf(o[:, None] + depths[..., None] * v[:, None])
    _, _, _, _, t_star = composite_values(depths, sdf, 200.0)
    root, _, _ = sphere_bounds(o, v, radius=0.5)
    assert np.max(np.abs(t_star - root)) < 1e-3


def test_empty_space_has_no_weight():
    depths = np.linspace(1.0, 3.0, 128)[None]
    _, _, w, _, t_star = composite_values(depths, np.full((1, 128), 0.3), 500.0)
    assert w.sum() < 1e-3 and np.isnan(t_star[0])


def test_constant_radiance_limit():
    depths = np.linspace(1.0, 3.0, 128)[None]
    _, _, w, _, _ = composite_values(depths, 2.0 - depths, 1000.0)
    c0 = np.array([0.2, 0.5, 0.9])
    color = w.sum() * c0
    assert np.max(np.abs(color - c0)) < 1e-2


def test_render_fields_are_consistent():
    field = Field(TINY)
    params = field.init_params(0, fit_steps=30)
    ray = Ray(np.array([0, 0, -2.0]), np.array([0, 0, 1.0]), 1.0, 3.0)
    b = render(ray, params, 3, field)
    assert b.depths.shape == b.sdf.shape == b.alpha.shape == (128,)
    assert 0 <= b.weight_sum <= 1 + 1e-12
    assert np.all((b.color >= 0) & (b.color <= 1))
    assert b.t_star == pytest.approx(locate_zero_crossing(b.depths, b.sdf))
    assert np.allclose(b.p_star, ray.o + b.t_star * ray.v)


def test_taped_render_gradients(rng):
    """Color, depth and crossing depth are differentiable in the parameters."""
    field = Field(TINY)
    params = field.init_params(1, fit_steps=30)
    o, v = analytic_rays(rng, 3)
    t_near, t_far, _ = sphere_bounds(o, v)
    depths = stratified(t_near, t_far, 24, rng)
    w_col = rng.normal(size=(3, 3))

    def loss(vec):
        tape = ad.Tape()
        theta = tape.leaf(vec)
        out = render_rays(field, theta, o, v, depths, background=(0.1, 0.2, 0.3))
        total = ad.sum_(out.color * w_col) + ad.sum_(out.depth) * 0.3
        if out.t_star is not None:
            total = total + ad.sum_(out.t_star)
        return total, tape, theta

    val, tape, theta = loss(params.vector)
    g = ad.backward(tape, val, theta)
    h = 1e-6
    for i in rng.choice(field.size, 40, replace=False):
        e = np.zeros(field.size)
        e[i] = h
        fd = (loss(params.vector + e)[0].value - loss(params.vector - e)[0].value) / (2 * h)
        assert abs(g[i] - fd) <= 1e-6 + 1e-4 * abs(fd)


def test_taped_composite_matches_numpy(rng):
    sdf = rng.normal(scale=0.3, size=(4, 20))
    tape = ad.Tape()
    alpha, trans, w = composite(tape.leaf(sdf), tape.leaf(np.array([np.log(40.0)])))
    a2, t2, w2, _, _ = composite_values(np.tile(np.arange(20.0), (4, 1)), sdf, 40.0)
    assert np.allclose(alpha.value, a2) and np.allclose(trans.value, t2) and np.allclose(w.value, w2)
