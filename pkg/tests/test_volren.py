import math

import numpy as np
import pytest
import scipy.stats
from conftest import param_grad_error
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semrf import autodiff as ad
from semrf.encoder import encode_features, init_encoder
from semrf.field import FieldConfig, FieldOutputs, init_field
from semrf.geometry import generate_rays, look_at, pinhole
from semrf.train import semantic_loss
from semrf.volren import (
    RaySamples,
    RenderConfig,
    composite,
    importance_samples,
    quadrature_weights,
    render_rays,
    stratified_samples,
)

LN2 = math.log(2)


# ---------------------------------------------------------------- sampling


def test_single_stratum_is_uniform_draw():
    s = stratified_samples(0.1, 20.0, 1, np.random.default_rng(0))
    assert s.ts.shape == (1, 1)
    assert 0.1 <= s.ts[0, 0] <= 20.0


def test_stratified_bins():
    s = stratified_samples(0.1, 20.0, 64, np.random.default_rng(1), n_rays=50)
    i = np.arange(64)
    lo = 0.1 + i * (19.9 / 64)
    hi = 0.1 + (i + 1) * (19.9 / 64)
    assert np.all(s.ts >= lo) and np.all(s.ts < hi)
    assert np.all(np.diff(s.ts, axis=1) > 0)


def test_stratified_deterministic():
    a = stratified_samples(0.1, 20.0, 16, np.random.default_rng(5), 3).ts
    b = stratified_samples(0.1, 20.0, 16, np.random.default_rng(5), 3).ts
    assert np.array_equal(a, b)


def test_stratified_argument_checks():
    with pytest.raises(ValueError):
        stratified_samples(0.0, 1.0, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        stratified_samples(0.1, 1.0, 0, np.random.default_rng(0))


def test_deltas_end_at_far():
    s = RaySamples(np.array([[1.0, 2.0, 4.0]]), 0.1, 20.0)
    np.testing.assert_array_equal(s.deltas, [[1.0, 2.0, 16.0]])


# ---------------------------------------------------------------- quadrature


def test_empty_space():
    w, r = quadrature_weights(np.zeros(5), np.ones(5))
    np.testing.assert_array_equal(w.value, 0)
    assert r.value == 1.0


def test_single_sample_ln2():
    w, r = quadrature_weights(np.array([LN2]), np.array([1.0]))
    assert w.value[0] == pytest.approx(0.5, abs=1e-15)
    assert r.value == pytest.approx(0.5, abs=1e-15)


def test_two_samples_ln2():
    w, r = quadrature_weights(np.array([LN2, LN2]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(w.value, [0.5, 0.25], atol=1e-15)
    assert r.value == pytest.approx(0.25, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e3)),
    st.integers(0, 1000),
)
def test_partition_of_unity(sigmas, seed):
    deltas = np.random.default_rng(seed).uniform(1e-3, 2.0, len(sigmas))
    w, r = quadrature_weights(sigmas, deltas)
    assert np.all(w.value >= 0)
    assert abs(w.value.sum() + r.value - 1.0) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 50)),
    st.integers(0, 10_000),
    st.floats(1e-6, 10.0),
)
def test_monotone_in_single_density(sigmas, seed, bump):
    rng = np.random.default_rng(seed)
    deltas = rng.uniform(0.01, 1.0, len(sigmas))
    i = int(rng.integers(len(sigmas)))
    w0, r0 = quadrature_weights(sigmas, deltas)
    up = sigmas.copy()
    up[i] += bump
    w1, r1 = quadrature_weights(up, deltas)
    assert w1.value[i] >= w0.value[i] - 1e-15
    assert r1.value <= r0.value + 1e-15


# ---------------------------------------------------------------- compositing


def one_hot_outputs(cls, n, num_fg=7, rgb=1.0):
    sem = np.zeros((n, num_fg))
    sem[:, cls - 1] = 1.0
    return FieldOutputs(ad.constant(np.ones(n)), ad.constant(np.full((n, 3), rgb)), ad.constant(sem))


def test_composite_semantics_and_depth():
    w = ad.constant(np.array([[0.5, 0.25]]))
    r = ad.constant(np.array([0.25]))
    samples = RaySamples(np.array([[1.0, 2.0]]), 0.1, 20.0)
    out = composite(w, r, one_hot_outputs(3, 2), samples)
    S = out.S_hat.value[0]
    assert S[3] == 0.75
    assert S[0] == 0.25
    assert out.D_hat.value[0] == pytest.approx(6.0, abs=1e-12)
    np.testing.assert_allclose(out.C_hat.value[0], [0.75] * 3, atol=1e-15)


def test_composite_without_depth_residual():
    w = ad.constant(np.array([[0.5, 0.25]]))
    r = ad.constant(np.array([0.25]))
    samples = RaySamples(np.array([[1.0, 2.0]]), 0.1, 20.0)
    out = composite(w, r, one_hot_outputs(3, 2), samples, depth_residual=False)
    assert out.D_hat.value[0] == pytest.approx(1.0, abs=1e-12)


def test_composite_extent_mismatch():
    w = ad.constant(np.array([[0.5, 0.25]]))
    with pytest.raises(ad.ShapeError):
        composite(w, ad.constant(np.array([0.25])), one_hot_outputs(3, 3), RaySamples(np.array([[1.0, 2.0]]), 0.1, 20))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_rendered_ray_invariants(seed, scale):
    rng = np.random.default_rng(seed)
    R, S = 3, 12
    samples = stratified_samples(0.1, 20.0, S, rng, R)
    sig = rng.exponential(scale, size=(R, S)) * (rng.random((R, S)) < 0.5)
    w, r = quadrature_weights(sig, samples)
    logits = rng.normal(size=(R * S, 7))
    sem = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    out = composite(w, r, FieldOutputs(ad.constant(sig.ravel()), ad.constant(rng.random((R * S, 3))), ad.constant(sem)), samples)
    Sh = out.S_hat.value
    assert np.all(Sh >= 0)
    np.testing.assert_allclose(Sh.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((out.C_hat.value >= 0) & (out.C_hat.value <= 1))
    D = out.D_hat.value
    assert np.all(D >= 0.1 - 1e-9) and np.all(D <= 20.0 + 1e-9)


# ---------------------------------------------------------------- importance sampling


def test_degenerate_pdf_puts_fine_samples_in_bin():
    S, k = 64, 17
    coarse = stratified_samples(0.1, 20.0, S, np.random.default_rng(0))
    w = np.zeros((1, S))
    w[0, k] = 1.0
    merged = importance_samples(coarse, w, 128, None)
    edges = np.linspace(0.1, 20.0, S + 1)
    fine = np.setdiff1d(merged.ts[0], coarse.ts[0])
    assert len(fine) == 128
    assert np.all((fine >= edges[k]) & (fine <= edges[k + 1]))


def test_uniform_weights_give_uniform_fine_samples():
    S, n_fine, R = 64, 128, 100
    rng = np.random.default_rng(1)
    coarse = stratified_samples(0.1, 20.0, S, rng, R)
    merged = importance_samples(coarse, np.full((R, S), 1.0 / S), n_fine, rng)
    dists = []
    for r in range(R):
        fine = np.setdiff1d(merged.ts[r], coarse.ts[r])
        assert len(fine) == n_fine
        dists.append(scipy.stats.kstest(fine, scipy.stats.uniform(loc=0.1, scale=19.9).cdf).statistic)
    assert np.mean(dists) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 64), st.booleans())
def test_merged_samples_strictly_ascending(seed, n_fine, spiky):
    rng = np.random.default_rng(seed)
    coarse = stratified_samples(0.1, 20.0, 16, rng, 4)
    w = rng.random((4, 16)) ** (30 if spiky else 1)
    out = importance_samples(coarse, w, n_fine, rng)
    assert out.ts.shape == (4, 16 + n_fine)
    assert np.all(np.diff(out.ts, axis=1) > 0)
    assert np.all(out.ts >= 0.1) and np.all(out.ts < 20.0)


def test_ties_are_separated():
    coarse = RaySamples(np.array([[1.0, 2.0, 3.0, 4.0]]), 0.5, 4.5)
    w = np.array([[0.0, 1.0, 0.0, 0.0]])
    out = importance_samples(coarse, w, 1, None)
    assert np.all(np.diff(out.ts, axis=1) > 0)


# ---------------------------------------------------------------- full render

FCFG = FieldConfig(feature_dim=4, hidden=8, num_classes=5, octaves=2)


def tiny_scene(seed=0):
    rng = np.random.default_rng(seed)
    R, t = look_at([0.3, 0.5, -2.5], [0, 0, 0])
    src = pinhole(8, 8, 60, R, t)
    img = rng.uniform(size=(8, 8, 3))
    enc = init_encoder(rng, FCFG.feature_dim)
    # biases start at zero; a fully dead hidden row would then sit exactly on a
    # relu kink, so jitter them for the finite-difference checks
    coarse, fine = (
        {k: v + (0.05 * rng.normal(size=v.shape) if "_b" in k else 0) for k, v in init_field(rng, FCFG).items()}
        for _ in range(2)
    )
    R2, t2 = look_at([-0.5, 0.2, -2.0], [0, 0, 0])
    o, d = generate_rays(pinhole(8, 8, 60, R2, t2), np.array([[2.5, 3.5], [4.5, 4.5], [6.2, 1.1], [0.7, 7.3]]))
    return img, src, enc, coarse, fine, o, d


def test_render_gradient_matches_fd_with_frozen_samples():
    img, src, enc, coarse, fine, o, d = tiny_scene()
    cfg = RenderConfig(t_near=0.5, t_far=6.0, n_coarse=8, n_fine=8, octaves=2)
    labels = np.array([0, 2, 4, 1])
    first = render_rays(o, d, [encode_features(img, enc, src)], coarse, fine, cfg, np.random.default_rng(0))
    frozen = (first.coarse_samples, first.fine_samples)
    params = {f"c.{k}": v for k, v in coarse.items()} | {f"f.{k}": v for k, v in fine.items()}

    def loss(p):
        cp = {k[2:]: v for k, v in p.items() if k.startswith("c.")}
        fp = {k[2:]: v for k, v in p.items() if k.startswith("f.")}
        res = render_rays(o, d, [encode_features(img, enc, src)], cp, fp, cfg, None, samples=frozen)
        return ad.add(semantic_loss(res.coarse.S_hat, labels), semantic_loss(res.fine.S_hat, labels))

    assert param_grad_error(params, loss, per_param=4) < 1e-4


def test_render_gradient_reaches_encoder():
    img, src, enc, coarse, fine, o, d = tiny_scene(1)
    cfg = RenderConfig(t_near=0.5, t_far=6.0, n_coarse=8, n_fine=8, octaves=2)
    first = render_rays(o, d, [encode_features(img, enc, src)], coarse, fine, cfg, np.random.default_rng(0))
    frozen = (first.coarse_samples, first.fine_samples)

    def loss(p):
        res = render_rays(o, d, [encode_features(img, p, src)], coarse, fine, cfg, None, samples=frozen)
        return ad.add(ad.mean(res.fine.C_hat), semantic_loss(res.fine.S_hat, np.array([0, 1, 2, 3])))

    assert param_grad_error(enc, loss, per_param=6) < 1e-4


def test_same_seed_bit_identical():
    img, src, enc, coarse, fine, o, d = tiny_scene(2)
    cfg = RenderConfig(t_near=0.5, t_far=6.0, n_coarse=8, n_fine=16, octaves=2)
    fm = [encode_features(img, enc, src)]
    a = render_rays(o, d, fm, coarse, fine, cfg, np.random.default_rng(9))
    b = render_rays(o, d, fm, coarse, fine, cfg, np.random.default_rng(9))
    for x, y in ((a.fine.S_hat, b.fine.S_hat), (a.fine.C_hat, b.fine.C_hat), (a.fine.D_hat, b.fine.D_hat)):
        assert np.array_equal(x.value, y.value)
    assert a.fine_samples.ts.shape == (4, 24)


def test_zero_density_field_renders_background_at_far():
    img, src, enc, coarse, fine, o, d = tiny_scene(3)
    for p in (coarse, fine):
        p["rgb_out_w"][:, 3] = 0.0
        p["rgb_out_b"][3] = -60.0  # softplus(-60) ~ 1e-26
    cfg = RenderConfig(t_near=0.5, t_far=6.0, n_coarse=8, n_fine=8, octaves=2)
    res = render_rays(o, d, [encode_features(img, enc, src)], coarse, fine, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(res.fine.D_hat.value, 6.0, atol=1e-9)
    expect = np.zeros((4, 5))
    expect[:, 0] = 1.0
    np.testing.assert_allclose(res.fine.S_hat.value, expect, atol=1e-9)


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(t_near=2.0, t_far=1.0)
