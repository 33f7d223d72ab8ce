import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mishape import autodiff as ad
from mishape.field import Camera, FieldConfig, RayBatch, generate_rays, init_field, render_batched, render_pixel
from mishape.jacobian import (
    ColorCache,
    DegenerateJacobianError,
    JacobianError,
    PerturbationSpec,
    PixelJacobian,
    apply_perturbation,
    color_jacobians,
    cosine_abs,
    cosine_abs_matrix,
    jacobian_ad_batch,
    perturb,
    pixel_jacobian_ad,
    pixel_jacobian_fast,
    render_color_delta,
    sample_sphere,
    sample_sphere_direction,
)

SMALL = FieldConfig(n_freq_pos=3, n_freq_dir=2, depth=2, width=16, color_width=8)


def dense_field(config=FieldConfig(), seed=0):
    """Random field with a positive density offset, so rays see semi-opaque media."""
    params = init_field(config, seed).copy()
    params.tensors["sigma.bias"][:] = 0.5
    return params


def random_rays(n, seed):
    rng = np.random.default_rng(seed)
    cam = Camera.looking_at(rng.normal(size=3) * 0.2 + [0.0, -3.0, 0.5], 8, 8, 0.9, near=1.0, far=5.0)
    return generate_rays(cam)[rng.choice(64, n, replace=False)]


def gray(params, ray, n_samples):
    return render_pixel(params, ray, n_samples).gray


def test_ad_matches_finite_differences():
    worst, live = 0.0, 0
    for seed in range(100):
        params = dense_field(SMALL, seed)
        ray = random_rays(1, seed)[0]
        spec = PerturbationSpec.random_neurons(params, 2, seed) if seed % 2 else PerturbationSpec.single_layer(params)
        jac = pixel_jacobian_ad(params, ray, spec, 12).values
        live += np.abs(jac).max() > 1e-8  # a random unit may be dead on this ray
        pick = np.random.default_rng(seed).choice(spec.dim, 4, replace=False)
        for i in pick:
            e = np.zeros(spec.dim)
            e[i] = 1e-5
            fd = (gray(perturb(params, spec, e), ray, 12) - gray(perturb(params, spec, -e), ray, 12)) / 2e-5
            worst = max(worst, abs(fd - jac[i]) / max(np.abs(jac).max(), 1e-8))
    assert worst < 1e-4
    assert live >= 75


def test_fast_equals_ad():
    for seed in range(5):
        params = dense_field(seed=seed)
        spec = PerturbationSpec.single_layer(params)
        rays = random_rays(50, 100 + seed)
        ad_rows = jacobian_ad_batch(params, rays, spec, 16)
        assert np.all(np.abs(ad_rows).max(axis=1) > 1e-6)
        fast = color_jacobians(render_batched(params, rays, 16))
        scale = np.abs(ad_rows).max(axis=1, keepdims=True)
        assert np.max(np.abs(fast - ad_rows) / np.maximum(scale, 1e-300)) < 1e-10


def test_jacobian_independent_of_sigma():
    params = dense_field(SMALL, 1)
    ray = random_rays(1, 1)[0]
    a = pixel_jacobian_ad(params, ray, PerturbationSpec.single_layer(params, sigma=1e-3), 8)
    b = pixel_jacobian_ad(params, ray, PerturbationSpec.single_layer(params, sigma=0.5), 8)
    np.testing.assert_array_equal(a.values, b.values)


def test_zero_density_zero_color_jacobian():
    params = init_field(SMALL, 2).copy()
    params.tensors["sigma.bias"][:] = -1e3
    params.tensors["sigma.weight"][:] = 0.0
    jac = pixel_jacobian_ad(params, random_rays(1, 2)[0], PerturbationSpec.single_layer(params), 8)
    assert jac.degenerate and not jac.values.any()


def test_saturated_channel_has_zero_entries():
    params = dense_field(SMALL, 3)
    params.tensors["rgb.bias"][0] = 1e3
    out = render_pixel(params, random_rays(1, 3)[0], 8)
    jac = pixel_jacobian_fast(out, PerturbationSpec.single_layer(params)).values.reshape(3, -1)
    assert not jac[0].any()
    assert jac[1].any()


def test_single_opaque_sample():
    params = init_field(SMALL, 4).copy()
    params.tensors["sigma.weight"][:] = 0.0
    params.tensors["sigma.bias"][:] = 1e7
    out = render_pixel(params, random_rays(1, 4)[0], 8)
    s = ad._sigmoid(out.z[0])
    expect = np.outer(s * (1 - s), out.h[0]) / 3.0
    jac = pixel_jacobian_fast(out, PerturbationSpec.single_layer(params))
    np.testing.assert_allclose(jac.values, expect.ravel(), rtol=1e-12, atol=1e-300)


def test_fast_path_rejects_other_layers():
    params = init_field(SMALL, 0)
    out = render_pixel(params, random_rays(1, 0)[0], 8)
    with pytest.raises(JacobianError):
        pixel_jacobian_fast(out, PerturbationSpec.single_layer(params, "color.weight"))
    with pytest.raises(JacobianError):
        pixel_jacobian_fast(out, PerturbationSpec.layer_block(params), params)


def test_cosine_examples():
    assert cosine_abs([1.0, 2.0], [1.0, 2.0]) == 1.0
    assert cosine_abs([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_abs([1.0, 0.0], np.array([1.0, 1.0]) / np.sqrt(2)) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(DegenerateJacobianError):
        cosine_abs([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-3))
def test_cosine_symmetric_and_scale_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 7))
    assert cosine_abs(a, b) == cosine_abs(b, a)
    assert cosine_abs(a, lam * b) == pytest.approx(cosine_abs(a, b), abs=1e-12)
    assert 0.0 <= cosine_abs(a, b) <= 1.0


def test_cosine_matrix_marks_degenerate_rows():
    rows = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    m = cosine_abs_matrix(rows)
    assert np.isnan(m[1]).all() and np.isnan(m[:, 1]).all()
    assert m[0, 2] == pytest.approx(np.sqrt(0.5))


def test_pixel_jacobian_norm_cached():
    j = PixelJacobian(np.array([3.0, 4.0]))
    assert j.norm == 5.0
    with pytest.raises(JacobianError):
        PixelJacobian(np.array([np.nan, 1.0]))


def test_perturbation_inverse_and_untouched():
    params = init_field(SMALL, 5)
    spec = PerturbationSpec.single_layer(params, sigma=0.3)
    n = sample_sphere_direction(spec.dim, np.random.default_rng(0))
    moved = apply_perturbation(params, spec, n)
    back = apply_perturbation(moved, spec, -n)
    np.testing.assert_allclose(back.flat(), params.flat(), atol=1e-15)
    others = [k for k in params.tensors if k != "rgb.weight"]
    assert moved.digest(others) == params.digest(others)
    assert moved.digest(["rgb.weight"]) != params.digest(["rgb.weight"])
    same = apply_perturbation(params, spec.with_sigma(0.0), n)
    assert same.digest() == params.digest()


def test_perturbation_errors():
    params = init_field(SMALL, 0)
    spec = PerturbationSpec("layer-block", [0, params.size + 3])
    with pytest.raises(IndexError):
        perturb(params, spec, np.zeros(2))
    with pytest.raises(ValueError):
        apply_perturbation(params, PerturbationSpec.single_layer(params), np.ones(24))
    with pytest.raises(ValueError):
        PerturbationSpec("single-layer", [1, 1])
    with pytest.raises(ValueError):
        PerturbationSpec("everything", [1, 2])


def test_sphere_sampling_moments():
    rng = np.random.default_rng(0)
    n = sample_sphere(100_000, 8, rng)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    assert np.linalg.norm(n.mean(axis=0)) < 0.02
    np.testing.assert_allclose(n.var(axis=0), 1 / 8, rtol=0.1)
    with pytest.raises(ValueError):
        sample_sphere_direction(1, rng)


def test_pattern_dimensions():
    params = init_field(seed=0)
    assert PerturbationSpec.single_layer(params).dim == 192
    block = PerturbationSpec.layer_block(params)
    assert set(block.layers) == {"feature.weight", "feature.bias", "color.weight", "color.bias", "rgb.weight",
                                 "rgb.bias"}
    rn = PerturbationSpec.random_neurons(params, 3, seed=1)
    assert rn.dim >= 3 * 64


def test_color_cache_matches_rerender():
    params = dense_field(seed=7)
    rays = random_rays(10, 7)
    cache = ColorCache.from_render(render_batched(params, rays, 16))
    delta = np.random.default_rng(1).standard_normal((3, 64)) * 0.2
    moved = params.copy()
    moved.tensors["rgb.weight"] = moved["rgb.weight"] + delta
    np.testing.assert_allclose(render_color_delta(cache, delta), render_batched(moved, rays, 16).rgb, atol=1e-14)


def test_taylor_remainder_is_second_order():
    params = dense_field(seed=8)
    ray = random_rays(1, 8)
    ray = RayBatch.from_rays(ray[0])
    spec = PerturbationSpec.layer_block(params)
    jac = jacobian_ad_batch(params, ray, spec, 16)[0]
    n = sample_sphere_direction(spec.dim, np.random.default_rng(2))
    base = render_batched(params, ray, 16).gray[0]
    consts = []
    for sigma in (1e-3, 1e-4):
        moved = perturb(params, spec, sigma * n)
        rem = abs(render_batched(moved, ray, 16).gray[0] - base - sigma * n @ jac)
        consts.append(rem / sigma**2)
    assert consts[0] > 0
    assert 0.25 < consts[0] / consts[1] < 4.0
