import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relroute import tensor_math as tm
from relroute.relation import (FeatureGrid, MaskedTrdConfig, category_relation_error, decay_matrix,
                               masked_trd, masked_trd_grad, pair_weight_matrix, spatial_gram,
                               temporal_decay, temporal_gram, trd_loss, l2_normalize_tokens)
from relroute.routing import pair_weight


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v] if n > 1e-12 else [0.0] * len(v)


def cos(a, b):
    a, b = unit(a), unit(b)
    return sum(x * y for x, y in zip(a, b))


def loop_trd(vp, vy):
    """Per-pair loop oracle of the uniform relation loss."""
    B, T, N, _ = vp.shape
    total = 0.0
    for b in range(B):
        spa = tmp = 0.0
        for t in range(T):
            for u in range(T):
                for i in range(N):
                    for j in range(N):
                        d = abs(cos(vy[b, t, i], vy[b, u, j]) - cos(vp[b, t, i], vp[b, u, j]))
                        if t == u:
                            spa += d
                        else:
                            tmp += d
        spa /= T * N * N
        tmp = tmp / (T * (T - 1) * N * N) if T > 1 else 0.0
        total += spa + tmp
    return total / B


def loop_masked(vp, vy, w, op, lam=1.0, eps=1e-6, tau=math.inf):
    B, T, N, _ = vp.shape
    total = 0.0
    for b in range(B):
        ns = ds = nt = dt = 0.0
        for t in range(T):
            for u in range(T):
                om = 1.0 if math.isinf(tau) else math.exp(-abs(t - u) / tau)
                for i in range(N):
                    for j in range(N):
                        wt = 1.0 if op == "uniform" else pair_weight(op, w[b, t, i], w[b, u, j])
                        d = abs(cos(vy[b, t, i], vy[b, u, j]) - cos(vp[b, t, i], vp[b, u, j]))
                        if t == u:
                            ns += wt * d
                            ds += wt
                        else:
                            nt += om * wt * d
                            dt += om * wt
        total += ns / (ds + eps) + (lam * nt / (dt + eps) if T > 1 else 0.0)
    return total / B


def rand(seed, shape=(2, 3, 4, 3)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape), rng.normal(size=shape), rng.uniform(size=shape[:3])


@pytest.mark.parametrize("seed", range(3))
def test_trd_matches_loop_oracle(seed):
    vp, vy, _ = rand(seed)
    assert trd_loss(vp, vy).total == pytest.approx(loop_trd(vp, vy), rel=1e-12)


@pytest.mark.parametrize("op", ["uniform", "and", "or", "xor"])
@pytest.mark.parametrize("tau", [math.inf, 1.5])
def test_masked_matches_loop_oracle(op, tau):
    vp, vy, w = rand(11)
    cfg = MaskedTrdConfig(lambda_tmp=0.7, tau=tau)
    got = masked_trd(vp, vy, w, op, cfg).total
    assert got == pytest.approx(loop_masked(vp, vy, w, op, 0.7, 1e-6, tau), rel=1e-12)


def test_identical_features_give_zero_loss():
    vp, _, w = rand(2)
    # student and target Grams take different code paths, so zero holds to rounding
    assert trd_loss(vp, vp).total == pytest.approx(0.0, abs=1e-14)
    assert masked_trd(vp, vp, w, "and").total == pytest.approx(0.0, abs=1e-14)


def test_single_frame_has_no_temporal_term():
    vp, vy, w = rand(3, shape=(1, 1, 5, 4))
    terms = masked_trd(vp, vy, w, "or")
    assert terms.temporal == 0.0 and terms.total == terms.spatial


def test_zero_saliency_and_returns_zero_without_nan():
    vp, vy, _ = rand(4)
    terms = masked_trd(vp, vy, np.zeros(vp.shape[:3]), "and")
    assert terms.total == 0.0


def test_scale_invariance_of_student_tokens():
    vp, vy, w = rand(5)
    scales = np.random.default_rng(0).uniform(0.1, 10, size=vp.shape[:3] + (1,))
    assert masked_trd(vp * scales, vy, w, "or").total == pytest.approx(
        masked_trd(vp, vy, w, "or").total, rel=1e-12)


def test_batch_average_of_per_element_losses():
    vp, vy, w = rand(6)
    per = [masked_trd(vp[b:b + 1], vy[b:b + 1], w[b:b + 1], "xor").total for b in range(2)]
    assert masked_trd(vp, vy, w, "xor").total == pytest.approx(np.mean(per), rel=1e-13)


def test_gram_shapes_and_symmetry():
    vp, _, _ = rand(7)
    x = l2_normalize_tokens(vp)
    s = spatial_gram(x)
    c = temporal_gram(x)
    assert s.shape == (2, 3, 4, 4) and c.shape == (2, 3, 4, 3, 4)
    np.testing.assert_allclose(s, np.swapaxes(s, -1, -2), atol=1e-15)
    np.testing.assert_allclose(c[:, 1, :, 1, :], s[:, 1], atol=1e-15)


def test_decay():
    assert temporal_decay(0, 3, math.inf) == 1.0
    assert temporal_decay(1, 3, 2.0) == pytest.approx(math.exp(-1.0))
    np.testing.assert_allclose(np.diag(decay_matrix(4, 0.5)), 1.0)
    with pytest.raises(ValueError):
        temporal_decay(0, 1, 0.0)


def test_config_validation():
    for bad in (dict(lambda_tmp=-1.0), dict(epsilon=0.0), dict(tau=-2.0)):
        with pytest.raises(ValueError):
            MaskedTrdConfig(**bad)


def test_shape_and_range_errors():
    vp, vy, w = rand(8)
    with pytest.raises(ValueError):
        masked_trd(vp, vy[:, :2], w, "or")
    with pytest.raises(ValueError):
        masked_trd(vp, vy, w + 2.0, "or")
    with pytest.raises(ValueError):
        masked_trd(vp, vy, w[:, :, :2], "or")
    with pytest.raises(ValueError):
        masked_trd(vp, vy, w, "nand")


def test_feature_grid_validation():
    g = FeatureGrid(np.zeros((1, 2, 3, 4)), role="projected")
    assert g.values.shape == (1, 2, 3, 4) and g.values.dtype == np.float64
    with pytest.raises(ValueError):
        FeatureGrid(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        FeatureGrid(np.full((1, 1, 1, 1), np.nan))


def test_pair_weight_matrix_uniform_is_ones():
    w = np.random.default_rng(0).uniform(size=(2, 2, 3))
    np.testing.assert_array_equal(pair_weight_matrix(w, "uniform", 2, 3), 1.0)


def test_gradient_matches_finite_differences():
    vp, vy, w = rand(9, shape=(1, 2, 3, 3))
    g = masked_trd_grad(vp, vy, w, "or", MaskedTrdConfig(tau=1.0))
    f = lambda x: masked_trd(x, vy, w, "or", MaskedTrdConfig(tau=1.0)).total  # noqa: E731
    assert tm.relative_error(g, tm.finite_difference(f, vp, step=1e-6)) < 1e-5


def test_node_input_stays_on_tape():
    vp, vy, w = rand(10)
    tape = tm.Tape()
    x = tape.leaf(vp)
    out = masked_trd(x, vy, w, "and").total
    assert isinstance(out, tm.Node) and out.tape is tape


def test_category_errors_partition_pairs():
    vp, vy, _ = rand(12, shape=(1, 2, 6, 3))
    fg = np.array([[[1, 1, 0, 0, 0, 1], [0, 1, 0, 1, 0, 0]]], dtype=float)
    e = category_relation_error(vp, vy, fg)
    diff = np.abs(spatial_gram(l2_normalize_tokens(vy)) - spatial_gram(l2_normalize_tokens(vp)))
    counts = {}
    for t in range(2):
        a = fg[0, t] > 0.5
        counts.setdefault("fg_fg", []).append(diff[0, t][np.outer(a, a)])
        counts.setdefault("fg_bg", []).append(diff[0, t][np.logical_xor.outer(a, a)])
        counts.setdefault("bg_bg", []).append(diff[0, t][np.outer(~a, ~a)])
    total = sum(np.concatenate(v).size for v in counts.values())
    assert total == 2 * 6 * 6
    for k, v in counts.items():
        assert e[k] == pytest.approx(np.concatenate(v).mean(), rel=1e-13)


def test_category_error_empty_category_is_nan():
    vp, vy, _ = rand(13, shape=(1, 1, 4, 3))
    e = category_relation_error(vp, vy, np.ones((1, 1, 4)))
    assert math.isnan(e["bg_bg"]) and math.isnan(e["fg_bg"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["and", "or", "xor"]))
def test_masked_loss_is_bounded_and_nonnegative(seed, op):
    vp, vy, w = rand(seed, shape=(1, 2, 3, 2))
    v = masked_trd(vp, vy, w, op).total
    # each |dS| <= 2 and the normalised weighted means are convex combinations
    assert 0.0 <= v <= 2.0 * 2.0 + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_or_with_unit_saliency_equals_uniform(seed):
    vp, vy, _ = rand(seed, shape=(1, 2, 3, 2))
    ones = np.ones((1, 2, 3))
    assert masked_trd(vp, vy, ones, "or").total == masked_trd(vp, vy, ones, "uniform").total
