import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from tvnerf import autodiff as ad
from tvnerf.encoding import HashGridConfig
from tvnerf.errors import ConfigError
from tvnerf.field import FieldConfig, FieldSample, NeuralField
from tvnerf.renderer import (Camera, Rays, clip_to_box, compute_weights, look_at, make_rays,
                             pixel_centers, render_image, render_pixel, render_rays,
                             sample_stratified)
from tvnerf.synthworld import AnalyticField, AnalyticScene, Primitive, oracle_render


def _camera(c2w=np.eye(4), w=8, h=6):
    return Camera(fx=10.0, fy=12.0, cx=4.0, cy=3.0, c2w=c2w, width=w, height=h, near=0.5, far=3.0)


class ConstantField:
    """Piecewise field used to build hand-checkable renders."""

    def __init__(self, sigma, ref=(0.5, 0.5, 0.5), ill=(0.8,), thermal=0.3):
        self.sigma, self.ref, self.ill, self.thermal = sigma, np.array(ref), np.array(ill), thermal

    def query(self, x, d=None, params=None):
        n = len(x)
        sig = self.sigma(x) if callable(self.sigma) else np.full(n, float(self.sigma))
        return FieldSample(sig, np.tile(self.ref, (n, 1)),
                           np.tile(self.ill[None, :, None], (n, 1, 1)), np.full(n, self.thermal))


# ---------------------------------------------------------------------------
# rays and sampling

def test_principal_point_ray_follows_forward_axis():
    c2w = look_at((2.0, 0.0, 0.5), (0.0, 0.0, 0.5))
    rays = make_rays(_camera(c2w), [[4.0, 3.0]])
    np.testing.assert_allclose(rays.dirs[0], [-1.0, 0.0, 0.0], atol=1e-12)


def test_identity_pose_pinhole_geometry():
    rays = make_rays(_camera(), [[14.0, 3.0]])
    np.testing.assert_allclose(rays.dirs[0], np.array([1.0, 0.0, 1.0]) / math.sqrt(2), atol=1e-12)


def test_all_directions_are_unit():
    cam = _camera(look_at((1.0, 2.0, 3.0), (0.0, 0.0, 0.0)), w=32, h=24)
    rays = make_rays(cam, pixel_centers(cam))
    assert len(rays) == 32 * 24
    np.testing.assert_allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-9)


def test_camera_validation():
    with pytest.raises(ConfigError):
        Camera(0.0, 1.0, 0, 0, np.eye(4), 2, 2, 0.1, 1.0)
    with pytest.raises(ConfigError):
        Camera(1.0, 1.0, 0, 0, np.eye(4), 2, 2, 1.0, 0.5)
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ConfigError):
        Camera(1.0, 1.0, 0, 0, bad, 2, 2, 0.1, 1.0)


def test_clip_to_box_shrinks_to_overlap():
    rays = Rays(np.array([[-1.0, 0.5, 0.5], [-1.0, 5.0, 0.5]]), np.array([[1.0, 0, 0]] * 2),
                np.array([0.1, 0.1]), np.array([10.0, 10.0]))
    out = clip_to_box(rays, (0, 0, 0), (1, 1, 1))
    np.testing.assert_allclose([out.near[0], out.far[0]], [1.0, 2.0])
    assert (out.near[1], out.far[1]) == (0.1, 10.0)


def test_deterministic_samples_are_bin_centers():
    t, delta = sample_stratified(0.0, 1.0, 4)
    np.testing.assert_allclose(t[0], [0.125, 0.375, 0.625, 0.875])
    assert delta.sum() == pytest.approx(1.0 - 0.125, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 10.0), st.integers(1, 64), st.integers(0, 1000))
def test_jittered_samples_sorted_inside_strata(near, length, n, seed):
    t, delta = sample_stratified(near, near + length, n, np.random.default_rng(seed))
    edges = near + length * np.arange(n + 1) / n
    assert np.all(np.diff(t[0]) >= 0)
    assert np.all((t[0] >= edges[:-1] - 1e-12) & (t[0] <= edges[1:] + 1e-12))
    assert delta.sum() == pytest.approx(near + length - t[0, 0], rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# weights

def test_weight_examples():
    assert compute_weights(np.array([1.0]), np.array([0.5]))[0] == pytest.approx(0.39347, abs=1e-5)
    assert np.all(compute_weights(np.zeros(5), np.ones(5)) == 0)
    w = compute_weights(np.array([1e6, 1.0, 5.0]), np.ones(3))
    assert w[0] == pytest.approx(1.0) and np.all(w[1:] < 1e-300)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=40), st.floats(1e-4, 2.0))
def test_weights_sum_within_unit_interval(sigmas, step):
    w = compute_weights(np.array(sigmas), np.full(len(sigmas), step))
    assert np.all(w >= 0) and -1e-12 <= w.sum() <= 1 + 1e-12


def _reference_render(sample_sigma, ref, ill, thermal, delta):
    # loop-by-loop transcription of the discrete quadrature, independent of the vectorized path
    out_ref, out_ill, out_h, trans = np.zeros(3), np.zeros(ill.shape[1:]), 0.0, 1.0
    for i in range(len(sample_sigma)):
        alpha = 1.0 - math.exp(-sample_sigma[i] * delta[i])
        w = alpha * trans
        out_ref += w * ref[i]
        out_ill += w * ill[i]
        out_h += w * thermal[i]
        trans *= math.exp(-sample_sigma[i] * delta[i])
    return out_ref, out_ill, out_h


def test_render_matches_straight_line_reference():
    fld = NeuralField(FieldConfig(grid=HashGridConfig(levels=2, log2_table_size=8),
                                  trunk_width=8, geo_features=4, head_width=8, heads=3),
                      seed=1, dtype=np.float64)
    fld.store["grid"][...] = np.random.default_rng(0).normal(size=fld.store["grid"].shape)
    rays = Rays(np.array([[0.5, 0.5, -0.5], [-0.2, 0.3, 0.4]]),
                np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]), np.array([0.5, 0.2]),
                np.array([1.5, 1.2]))
    out = render_rays(fld, rays, n_samples=16)
    t, delta = sample_stratified(rays.near, rays.far, 16)
    for r in range(2):
        x = rays.origins[r] + t[r, :, None] * rays.dirs[r]
        s = fld.query(x, np.tile(rays.dirs[r], (16, 1)))
        ref, ill, h = _reference_render(s.sigma, s.ref, s.ill, s.thermal, delta[r])
        np.testing.assert_allclose(out.ref[r], ref, atol=1e-12)
        np.testing.assert_allclose(out.ill[r], ill, atol=1e-12)
        assert out.thermal[r] == pytest.approx(h, abs=1e-12)


def test_color_is_exact_product_of_accumulations():
    fld = NeuralField(FieldConfig(grid=HashGridConfig(levels=2, log2_table_size=8), heads=4),
                      seed=2)
    rng = np.random.default_rng(3)
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rays = clip_to_box(Rays(np.full((50, 3), 0.5) - d, d, np.full(50, 0.1), np.full(50, 3.0)),
                       (0, 0, 0), (1, 1, 1))
    out = render_rays(fld, rays, 32, rng=rng)
    assert np.array_equal(out.color, out.ref[:, None, :] * out.ill)
    assert np.all((out.opacity >= 0) & (out.opacity <= 1 + 1e-6))


def test_empty_scene_renders_black():
    out = render_pixel(ConstantField(0.0), [0, 0, 0], [0, 0, 1], 0.1, 2.0, 32)
    for v in (out.ref, out.ill, out.color, out.thermal, out.opacity):
        assert np.all(v == 0)


def test_single_opaque_sample_returns_its_values():
    out = render_pixel(ConstantField(1e9, ref=(0.2, 0.4, 0.6), ill=(0.8, 3.0), thermal=0.7),
                       [0, 0, 0], [0, 0, 1], 0.1, 2.0, 8)
    np.testing.assert_allclose(out.ref[0], [0.2, 0.4, 0.6])
    np.testing.assert_allclose(out.ill[0, :, 0], [0.8, 3.0])
    np.testing.assert_allclose(out.color[0, 1], [0.6, 1.2, 1.8])
    assert out.thermal[0] == pytest.approx(0.7)


def test_homogeneous_slab_matches_quadrature_oracle():
    scene = AnalyticScene(primitives=(Primitive("box", (0, 0, 0, 10, 1, 1), 1.0, (1, 1, 1)),),
                          ambient=0.8, bounds=((0, 0, 0), (10, 1, 1)))
    o, d = np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0])
    C_oracle, _ = oracle_render(scene, o, d, 1.0, 11.0)
    assert C_oracle[0] == pytest.approx(0.8 * (1 - math.exp(-10)), abs=1e-6)
    errs = []
    for n in (16, 128, 2048):
        out = render_pixel(AnalyticField(scene), o, d, 1.0, 11.0, n)
        errs.append(abs(out.color[0, 0, 0] - C_oracle[0]))
    assert errs[-1] <= 1e-3 and errs == sorted(errs, reverse=True)


# ---------------------------------------------------------------------------
# convergence on a smooth field with a closed-form transmittance

BLOB_CENTER, BLOB_AMP, BLOB_WIDTH = np.array([0.5, 0.5, 0.5]), 8.0, 0.2


class GaussianBlob:
    def query(self, x, d=None, params=None):
        r2 = np.sum((x - BLOB_CENTER) ** 2, axis=-1)
        n = len(x)
        ref = np.stack([0.5 + 0.4 * np.sin(3 * x[:, 0]), np.full(n, 0.5), np.full(n, 0.5)], -1)
        return FieldSample(BLOB_AMP * np.exp(-r2 / BLOB_WIDTH ** 2), ref, np.ones((n, 1, 1)),
                           np.zeros(n))


def _blob_oracle(o, d, near, far):
    t0 = float((BLOB_CENTER - o) @ d)
    b2 = float(np.sum((o + t0 * d - BLOB_CENTER) ** 2))
    s = BLOB_WIDTH
    peak = BLOB_AMP * math.exp(-b2 / s ** 2)

    def depth(t):
        return peak * s * math.sqrt(math.pi) / 2 * (special.erf((t - t0) / s)
                                                  - special.erf((near - t0) / s))

    def integrand(t):
        return math.exp(-depth(t)) * peak * math.exp(-(t - t0) ** 2 / s ** 2) \
            * (0.5 + 0.4 * math.sin(3 * (o[0] + t * d[0])))

    return integrate.quad(integrand, near, far, epsabs=1e-12, epsrel=1e-12, limit=200)[0]


def test_error_nonincreasing_in_sample_count():
    # the oracle integrates reflectance; color adds the image-space product on top
    rng = np.random.default_rng(11)
    rays = []
    for _ in range(100):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        o = BLOB_CENTER + rng.normal(scale=0.1, size=3) - 1.5 * d
        rays.append((o, d, _blob_oracle(o, d, 0.2, 2.8)))
    batch = Rays(np.array([r[0] for r in rays]), np.array([r[1] for r in rays]),
                 np.full(100, 0.2), np.full(100, 2.8))
    truth = np.array([r[2] for r in rays])
    means = []
    for n in (64, 256, 1024, 2048):
        out = render_rays(GaussianBlob(), batch, n)
        means.append(np.mean(np.abs(out.ref[:, 0] - truth)))
    assert means == sorted(means, reverse=True) and means[-1] < 1e-3, means


def test_accumulation_smooths_per_point_noise():
    rng = np.random.default_rng(4)
    base = ConstantField(lambda x: np.full(len(x), 3.0), ill=(0.5,))
    noise_sd = 0.1

    class Noisy:
        def query(self, x, d=None, params=None):
            s = base.query(x)
            return FieldSample(s.sigma, s.ref, s.ill + rng.normal(scale=noise_sd, size=s.ill.shape),
                               s.thermal)

    o, d = np.zeros(3), np.array([0.0, 0.0, 1.0])
    ill = np.array([render_pixel(Noisy(), o, d, 0.0, 1.0, 32).ill[0, 0, 0] for _ in range(1000)])
    w = render_pixel(base, o, d, 0.0, 1.0, 32)
    opacity = float(w.opacity[0])
    # per-point variance weighted by the same (normalized) weights is noise_sd^2
    assert ill.var(ddof=1) < noise_sd ** 2 * opacity ** 2
    assert ill.mean() == pytest.approx(0.5 * opacity, abs=0.01)


def test_render_gradient_matches_finite_differences():
    fld = NeuralField(FieldConfig(grid=HashGridConfig(levels=2, log2_table_size=6),
                                  trunk_width=6, geo_features=4, head_width=5, heads=2),
                      seed=5, dtype=np.float64)
    rng = np.random.default_rng(6)
    fld.store.params[...] = rng.normal(scale=0.3, size=fld.store.params.shape)
    rays = Rays(np.array([[0.5, 0.5, -0.2]]), np.array([[0.1, 0.0, 1.0]]) / math.sqrt(1.01),
                np.array([0.2]), np.array([1.2]))
    proj = rng.normal(size=(1, 2, 3))

    def loss(t, v):
        out = render_rays(fld, rays, 4, params=fld.store.split(v))
        return ad.sum(out.color * proj) + ad.sum(out.thermal)

    first = ad.grad_check(loss, fld.store.params)
    rep = ad.grad_check(loss, fld.store.params,
                        floor=1e-3 * np.abs(first.analytic).max(), directional=True, rng=0)
    assert rep.max_rel_error <= 1e-6 and rep.directional_rel_error <= 1e-6


def test_render_image_shapes():
    cam = Camera(8.0, 8.0, 4.0, 3.0, look_at((0.5, -1.5, 0.5), (0.5, 0.5, 0.5)), 8, 6, 0.5, 3.0)
    out = render_image(ConstantField(0.5), cam, n_samples=8, chunk=10, bounds=((0, 0, 0), (1, 1, 1)))
    assert out.color.shape == (6, 8, 1, 3) and out.thermal.shape == (6, 8)
