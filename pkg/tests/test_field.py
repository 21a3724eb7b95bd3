import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semrf import autodiff as ad
from semrf.field import FieldConfig, field_eval, field_eval_batch, init_field

CFG = FieldConfig(feature_dim=6, hidden=16, num_classes=8, octaves=3)


@pytest.fixture(scope="module")
def params():
    p = init_field(np.random.default_rng(0), CFG)
    rng = np.random.default_rng(1)
    # perturb biases so the heads are not trivially symmetric
    return {k: v + (0.1 * rng.normal(size=v.shape) if "_b" in k else 0) for k, v in p.items()}


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def feats(rng, n, k=6):
    return [rng.normal(size=k) for _ in range(n)]


def outputs(out):
    return out.sigma.value, out.rgb.value, out.sem.value


def test_zero_params_forced_by_activations():
    zero = {k: np.zeros_like(v) for k, v in init_field(np.random.default_rng(0), CFG).items()}
    out = field_eval([0.3, 0.1, 2.0], unit([0, 0, 1]), feats(np.random.default_rng(0), 3), zero, octaves=3)
    assert out.sigma.value[0] == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_array_equal(out.rgb.value[0], [0.5, 0.5, 0.5])
    np.testing.assert_allclose(out.sem.value[0], np.full(7, 1 / 7), atol=1e-15)


def test_permutation_invariance_bitwise(params):
    rng = np.random.default_rng(2)
    f = feats(rng, 4)
    x, d = rng.normal(size=3), unit(rng.normal(size=3))
    ref = outputs(field_eval(x, d, f, params, octaves=3))
    for perm in ([3, 2, 1, 0], [1, 3, 0, 2]):
        got = outputs(field_eval(x, d, [f[i] for i in perm], params, octaves=3))
        for a, b in zip(ref, got):
            assert np.array_equal(a, b)


def test_duplicated_view_matches_single_bitwise(params):
    rng = np.random.default_rng(3)
    f = feats(rng, 1)
    x, d = rng.normal(size=3), unit(rng.normal(size=3))
    one = outputs(field_eval(x, d, f, params, octaves=3))
    four = outputs(field_eval(x, d, f * 4, params, octaves=3))
    for a, b in zip(one, four):
        assert np.array_equal(a, b)


def test_batch_matches_single_points(params):
    rng = np.random.default_rng(4)
    P, V = 16, 3
    pts = rng.normal(size=(P, 3))
    dirs = unit(rng.normal(size=(P, 3)))
    fb = [rng.normal(size=(P, 6)) for _ in range(V)]
    batch = outputs(field_eval_batch(pts, dirs, fb, params, octaves=3))
    for i in range(P):
        single = outputs(field_eval(pts[i], dirs[i], [f[i] for f in fb], params, octaves=3))
        for a, b in zip(batch, single):
            assert np.abs(a[i] - b[0]).max() == 0


def test_viewdir_off_ignores_direction(params):
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(8, 3))
    fb = [rng.normal(size=(8, 6)) for _ in range(2)]
    ref = outputs(field_eval_batch(pts, unit(rng.normal(size=(8, 3))), fb, params, use_viewdir=False, octaves=3))
    for _ in range(5):
        got = outputs(field_eval_batch(pts, unit(rng.normal(size=(8, 3))), fb, params, use_viewdir=False, octaves=3))
        for a, b in zip(ref, got):
            assert np.array_equal(a, b)


def test_viewdir_on_uses_direction(params):
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(4, 3))
    fb = [rng.normal(size=(4, 6))]
    a = field_eval_batch(pts, unit(rng.normal(size=(4, 3))), fb, params, octaves=3).rgb.value
    b = field_eval_batch(pts, unit(rng.normal(size=(4, 3))), fb, params, octaves=3).rgb.value
    assert not np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.floats(0.1, 30.0))
def test_output_ranges(seed, n_views, scale):
    p = init_field(np.random.default_rng(seed), CFG)
    p = {k: v * scale for k, v in p.items()}
    rng = np.random.default_rng(seed + 1)
    pts = rng.normal(size=(6, 3)) * 5
    fb = [rng.normal(size=(6, 6)) * scale for _ in range(n_views)]
    out = field_eval_batch(pts, unit(rng.normal(size=(6, 3))), fb, p, octaves=3)
    sem = out.sem.value
    assert np.all(sem >= 0)
    np.testing.assert_allclose(sem.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(out.sigma.value >= 0)
    assert np.all((out.rgb.value >= 0) & (out.rgb.value <= 1))


def test_empty_features_rejected(params):
    with pytest.raises(ValueError):
        field_eval([0, 0, 0], [0, 0, 1], [], params)


def test_extent_mismatch_rejected(params):
    with pytest.raises(ad.ShapeError):
        field_eval_batch(np.zeros((4, 3)), np.zeros((4, 3)), [np.zeros((3, 6))], params, octaves=3)
    with pytest.raises(ad.ShapeError):
        field_eval_batch(np.zeros((4, 3)), np.zeros((5, 3)), [np.zeros((4, 6))], params, octaves=3)


def test_hidden_width_configurable():
    p = init_field(np.random.default_rng(0), FieldConfig(feature_dim=4, hidden=512, num_classes=37, octaves=6))
    assert p["trunk0_w1"].shape == (512, 512)
    assert p["sem_out_w"].shape == (512, 36)
    assert p["in_x"].shape == (39, 512)
