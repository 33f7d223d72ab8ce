import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mishape import autodiff as ad
from mishape.experiment import SHAPE_KEYS
from mishape.field import Camera, FieldConfig, generate_rays, init_field, render_batched, render_rays
from mishape.jacobian import color_jacobians, cosine_abs_matrix
from mishape.scene import Dataset, View, generate_scene, make_dataset
from mishape.shaping import (
    FeatureAffinity,
    LabelAffinity,
    ShapingConfig,
    Trace,
    TrainConfig,
    TrainingError,
    jacobian_rows,
    load_trace,
    mig_loss,
    norm_penalty,
    select_pairs,
    shape,
    train_photometric,
    update_threshold,
)

CFG = ShapingConfig()


# ---------------------------------------------------------------- threshold schedule


@pytest.mark.parametrize("ratio,start,expect", [(0.03, 0.65, 0.649), (0.20, 0.65, 0.651), (0.02, 0.5, 0.5),
                                                (0.5, 0.8, 0.8), (0.10, 0.65, 0.65)])
def test_threshold_update(ratio, start, expect):
    assert update_threshold(start, ratio, CFG) == expect


@settings(max_examples=200, deadline=None)
@given(st.floats(0.5, 0.8), st.floats(0, 1))
def test_threshold_stays_in_interval(thr, ratio):
    new = update_threshold(thr, ratio, CFG)
    assert 0.5 <= new <= 0.8 and abs(new - thr) <= 0.001 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_pairs_partition_each_contrast_set(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(1, 5, 64)
    sim = LabelAffinity(labels)(np.arange(64))
    batch, _ = select_pairs(np.arange(64), sim, 0.65, CFG)
    assert not (batch.positive & batch.negative).any()
    np.testing.assert_array_equal((batch.positive | batch.negative).sum(axis=1), 63)
    assert not np.diag(batch.positive | batch.negative).any()
    np.testing.assert_array_equal(batch.positive, (labels[:, None] == labels[None]) & ~np.eye(64, dtype=bool))


def test_config_validation():
    with pytest.raises(ValueError):
        ShapingConfig(tau=0.0)
    with pytest.raises(ValueError):
        ShapingConfig(threshold_interval=(0.8, 0.5))
    with pytest.raises(ValueError):
        ShapingConfig(ratio_band=(0.2, 0.1))
    assert ShapingConfig().lam == 0.01 and ShapingConfig().gamma == 0.01 and ShapingConfig().steps == 10000
    assert TrainConfig().lr == 5e-4


# ---------------------------------------------------------------- losses


def contrast_rows(pos_rows, neg_rows, anchor):
    rows = np.vstack([anchor, pos_rows, neg_rows])
    n = len(rows)
    pos = np.zeros((n, n), bool)
    neg = np.zeros((n, n), bool)
    pos[0, 1:1 + len(pos_rows)] = True
    neg[0, 1 + len(pos_rows):] = True
    return rows, pos, neg


def test_infonce_analytic_case():
    eye = np.eye(64)
    rows, pos, neg = contrast_rows(eye[:1], eye[1:64], eye[0])
    loss = mig_loss(rows, pos, neg, tau=1.0)
    assert loss == pytest.approx(-math.log(math.e / (math.e + 63)), abs=1e-12)
    assert loss == pytest.approx(3.18538, abs=1e-5)


def test_infonce_uniform_case():
    a = np.random.default_rng(0).standard_normal(8)
    rows, pos, neg = contrast_rows(np.tile(a, (1, 1)), np.tile(2 * a, (63, 1)), a)
    assert mig_loss(rows, pos, neg, tau=0.1) == pytest.approx(math.log(64), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.95), st.floats(0.01, 0.04))
def test_infonce_decreases_with_positive_cosine(c, dc):
    def rows_for(cos):
        anchor = np.array([1.0, 0.0, 0.0])
        positive = np.array([cos, math.sqrt(1 - cos * cos), 0.0])
        negatives = np.array([[0.5, 0.0, math.sqrt(0.75)], [0.2, 0.1, 0.97]])
        return contrast_rows(positive[None], negatives, anchor)

    lo = mig_loss(*rows_for(c), tau=0.1)
    hi = mig_loss(*rows_for(c + dc), tau=0.1)
    assert hi < lo


def test_infonce_without_positives_is_zero_and_skips_degenerate():
    rows = np.random.default_rng(1).standard_normal((4, 6))
    assert mig_loss(rows, np.zeros((4, 4), bool), ~np.eye(4, dtype=bool), 0.1) == 0.0
    rows[2] = 0.0
    pos = np.zeros((4, 4), bool)
    pos[0, 1] = pos[1, 0] = True
    full = mig_loss(rows, pos, ~pos & ~np.eye(4, dtype=bool), 0.1)
    keep = [0, 1, 3]
    sub = mig_loss(rows[keep], pos[np.ix_(keep, keep)], (~pos & ~np.eye(4, dtype=bool))[np.ix_(keep, keep)], 0.1)
    assert full == pytest.approx(sub)


def test_norm_penalty_examples():
    assert norm_penalty(np.eye(3)) == 0.0
    assert norm_penalty(np.array([[0.5, 0.0]])) == pytest.approx(0.25)
    assert norm_penalty(np.array([[0.0, 0.0], [0.5, 0.0]])) == pytest.approx(0.25)


def _fd(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("which", ["norm", "mig"])
def test_loss_gradients_match_finite_differences(which):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 5))
    labels = np.array([1, 1, 2, 2, 3, 1])
    pos = (labels[:, None] == labels[None]) & ~np.eye(6, dtype=bool)
    neg = ~pos & ~np.eye(6, dtype=bool)

    def f(v):
        return norm_penalty(v) if which == "norm" else mig_loss(v, pos, neg, 0.5)

    tape = ad.Tape()
    g = ad.backward(f(tape.param("x", x)), tape)["x"]
    num = _fd(lambda v: float(f(v)), x)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-4


def test_taped_jacobian_rows_match_closed_form():
    params = init_field(seed=0).copy()
    params.tensors["sigma.bias"][:] = 0.5
    cam = Camera.looking_at([0.0, -3.0, 0.5], 4, 4, 0.9, near=1.0, far=5.0)
    rays = generate_rays(cam)
    tape = ad.Tape()
    rb = render_rays(tape.params_from(params.tensors), rays, params.config, 16)
    np.testing.assert_allclose(ad.value(jacobian_rows(rb)), color_jacobians(render_batched(params, rays, 16)),
                               rtol=1e-12, atol=1e-300)


def test_feature_affinity_is_cosine():
    feats = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    aff = FeatureAffinity(feats)
    np.testing.assert_array_equal(aff.eligible(), [0, 1, 2])
    np.testing.assert_allclose(aff(np.array([0, 1, 2])), [[1, 1, 0], [1, 1, 0], [0, 0, 1]])


def test_label_affinity_excludes_background():
    aff = LabelAffinity(np.array([0, 1, 1, 2]))
    np.testing.assert_array_equal(aff.eligible(), [1, 2, 3])


# ---------------------------------------------------------------- training loops


def single_ray_dataset():
    cam = Camera.looking_at([0.0, -3.0, 0.0], 1, 1, 0.5, near=1.0, far=5.0)
    scene = generate_scene(1, 0)
    view = View(cam, np.array([[[0.8, 0.3, 0.5]]]), np.ones((1, 1), int), np.ones((1, 1), int), np.ones((1, 1)))
    return Dataset(scene, [view], [view])


def test_single_ray_overfit():
    trace = Trace()
    cfg = TrainConfig(steps=2000, lr=5e-3, batch_rays=1, n_samples=16, seed=0)
    train_photometric(init_field(FieldConfig(width=32, color_width=16), 0), single_ray_dataset(), cfg, trace)
    assert trace.rows[-1].l_nerf < 1e-4


def test_nan_loss_reports_step():
    ds = single_ray_dataset()
    ds.train[0].image[:] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train_photometric(init_field(seed=0), ds, TrainConfig(steps=3, batch_rays=1, n_samples=4))


def test_empty_dataset_rejected():
    ds = single_ray_dataset()
    ds.train.clear()
    with pytest.raises(TrainingError):
        train_photometric(init_field(seed=0), ds, TrainConfig(steps=1))


@pytest.fixture(scope="module")
def tiny():
    ds = make_dataset(generate_scene(3, 1), 4, 1, seed=1, width=12, height=12)
    params = init_field(FieldConfig(width=32, color_width=16), 0)
    return ds, params


def test_zero_weights_reduce_to_photometric(tiny):
    ds, params = tiny
    a, b = Trace(), Trace()
    train_photometric(params, ds, TrainConfig(steps=6, lr=1e-3, lr_decay=0.5, batch_rays=32, n_samples=8, seed=3), a)
    out = shape(params, ds, None, ShapingConfig(lam=0.0, gamma=0.0, steps=6, lr=1e-3, lr_decay=0.5, photo_rays=32,
                                                batch_rays=16, n_samples=8, seed=3, validate_every=0), b)
    np.testing.assert_array_equal(a.column("l_nerf"), b.column("l_nerf"))
    ref = train_photometric(params, ds, TrainConfig(steps=6, lr=1e-3, lr_decay=0.5, batch_rays=32, n_samples=8, seed=3))
    assert out.digest() == ref.digest()


def test_shaping_is_seed_reproducible(tiny):
    ds, params = tiny
    cfg = ShapingConfig(steps=5, batch_rays=16, photo_rays=16, n_samples=8, seed=7, validate_every=2)
    a, b = Trace(), Trace()
    pa = shape(params, ds, None, cfg, a)
    pb = shape(params, ds, None, cfg, b)
    assert a.rows == b.rows and pa.digest() == pb.digest()
    assert all(gap < 1e-10 for _, gap in a.ad_check)


def test_trace_csv_roundtrip(tiny, tmp_path):
    ds, params = tiny
    trace = Trace()
    shape(params, ds, None, ShapingConfig(steps=3, batch_rays=8, photo_rays=8, n_samples=8, validate_every=0), trace)
    trace.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,l_nerf,l_mig,l_norm,threshold,pos_ratio"
    assert load_trace(tmp_path / "t.csv").rows == trace.rows


def test_too_few_eligible_pixels(tiny):
    ds, params = tiny
    with pytest.raises(TrainingError):
        shape(params, ds, LabelAffinity(np.zeros(len(ds.train_labels()))), ShapingConfig(steps=1))


# ---------------------------------------------------------------- shaped benchmark field


def _pairs_cos(params, data, n=200, seed=0):
    rng = np.random.default_rng(seed)
    jac = np.concatenate([color_jacobians(render_batched(params, generate_rays(v.camera), 32)) for v in data.test])
    lab = np.concatenate([v.labels.ravel() for v in data.test])
    fg = np.flatnonzero((lab > 0) & (np.linalg.norm(jac, axis=1) > 1e-12))
    same, cross = [], []
    while len(same) < n or len(cross) < n:
        i, j = rng.choice(fg, 2, replace=False)
        c = cosine_abs_matrix(jac[i:i + 1], jac[j:j + 1])[0, 0]
        (same if lab[i] == lab[j] else cross).append(c)
    return np.mean(same[:n]), np.mean(cross[:n])


def test_shaped_same_class_more_aligned(shaped, bench_data):
    same, cross = _pairs_cos(shaped, bench_data)
    assert same > cross


def test_shaping_loss_trend(bench, shaped):
    from mishape.experiment import _cache_dir

    key = bench.digest(SHAPE_KEYS)[:16]
    trace = load_trace(_cache_dir(bench) / f"shape-{key}.csv", bench.lam, bench.gamma)
    totals = trace.totals()
    # single batches are noisy, so compare means over 500-step windows
    means = totals[: len(totals) // 500 * 500].reshape(-1, 500).mean(axis=1)
    assert np.all(np.diff(means) <= 0), means
    assert means[-1] < 0.5 * means[0]
