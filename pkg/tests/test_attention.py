import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headdiv.attention import (
    Favor,
    HeadParams,
    LayerParams,
    SoftmaxFull,
    SoftmaxWindow,
    TraceMismatchError,
    attention_scale,
    build_context_mask,
    favor_feature_map,
    favor_omega,
    head_forward,
    head_forward_favor,
    head_forward_softmax,
    layer_backward,
    layer_forward,
)
from headdiv.numkernel import ShapeError, fd_gradient, rel_error

from conftest import FD_RTOL, FD_STEP


def rand_head(r, d=3, h=2):
    return HeadParams(*(r.uniform(-1, 1, (d, h)) for _ in range(3)))


def naive_softmax_head(x, p, scale, left=None, right=None):
    q, k, v = x @ p.w_query, x @ p.w_key, x @ p.w_value
    t_len = x.shape[0]
    y = np.zeros_like(v)
    for t in range(t_len):
        allowed = [s for s in range(t_len)
                   if (left is None or s >= t - left) and (right is None or s <= t + right)]
        logits = [scale * float(np.dot(q[t], k[s])) for s in allowed]
        top = max(logits)
        w = [math.exp(l - top) for l in logits]
        total = sum(w)
        for s, wi in zip(allowed, w):
            y[t] += wi / total * v[s]
    return y


# ---- masks

def test_mask_diagonal_only():
    assert np.array_equal(build_context_mask(3, 0, 0), np.eye(3))


def test_mask_unbounded_sentinel_is_full():
    assert np.array_equal(build_context_mask(3, 3, 3), np.ones((3, 3)))
    assert np.array_equal(build_context_mask(3, 10, 99), np.ones((3, 3)))


def test_mask_left_one_enumerated():
    expected = np.zeros((4, 4))
    for t in range(4):
        for s in range(4):
            if t - 1 <= s <= t:
                expected[t, s] = 1
    assert np.array_equal(build_context_mask(4, 1, 0), expected)
    assert np.array_equal(expected, np.eye(4) + np.eye(4, k=-1))


def test_mechanism_validation():
    with pytest.raises(ValueError):
        SoftmaxWindow(-1, 0)
    with pytest.raises(ValueError):
        Favor(0)
    with pytest.raises(ValueError):
        attention_scale(4, "sqrt")


def test_scale_modes():
    assert attention_scale(8, "paper") == 1 / 8
    assert attention_scale(8, "standard") == 1 / math.sqrt(8)


# ---- softmax head

def test_identity_mask_gives_identity_attention(rng):
    x = rng.standard_normal((4, 3))
    tr = head_forward_softmax(x, rand_head(rng), np.eye(4), 0.5)
    assert np.array_equal(tr.a, np.eye(4))
    assert np.array_equal(tr.y, tr.v)


@pytest.mark.parametrize("scale", [1e-3, 0.5, 40.0])
def test_single_step_sequence(rng, scale):
    x = rng.standard_normal((1, 3))
    tr = head_forward_softmax(x, rand_head(rng), None, scale)
    assert np.array_equal(tr.a, [[1.0]])
    assert np.allclose(tr.y, tr.v, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_head_matches_naive_loop(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((4, 3))
    p = rand_head(r)
    tr = head_forward_softmax(x, p, None, 0.5)
    assert np.max(np.abs(tr.y - naive_softmax_head(x, p, 0.5))) <= 1e-12


@pytest.mark.parametrize("left,right", [(0, 0), (1, 0), (0, 2), (2, 1)])
def test_window_head_matches_naive_loop(left, right):
    r = np.random.default_rng(left * 10 + right)
    x = r.standard_normal((5, 3))
    p = rand_head(r)
    tr = head_forward(x, p, SoftmaxWindow(left, right), 0.5)
    assert np.max(np.abs(tr.y - naive_softmax_head(x, p, 0.5, left, right))) <= 1e-12


def test_shape_error_on_wrong_feature_count(rng):
    with pytest.raises(ShapeError):
        head_forward_softmax(rng.standard_normal((4, 5)), rand_head(rng), None, 1.0)


@settings(max_examples=40, deadline=None)
@given(t_len=st.integers(1, 7), left=st.integers(0, 8), right=st.integers(0, 8), seed=st.integers(0, 2**16))
def test_masked_entries_exactly_zero_and_rows_stochastic(t_len, left, right, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((t_len, 3)) * 3
    tr = head_forward(x, rand_head(r), SoftmaxWindow(left, right), 1.0)
    mask = build_context_mask(t_len, left, right)
    assert np.all(tr.a[mask == 0] == 0.0)
    assert np.all(tr.a >= 0)
    assert np.all(np.abs(tr.a.sum(axis=-1) - 1.0) <= 1e-9)


@settings(max_examples=30, deadline=None)
@given(t_len=st.integers(2, 7), seed=st.integers(0, 2**16))
def test_full_context_permutation_equivariance(t_len, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((t_len, 3))
    p = rand_head(r)
    perm = r.permutation(t_len)
    y = head_forward_softmax(x, p, None, 0.5).y
    y_perm = head_forward_softmax(x[perm], p, None, 0.5).y
    assert np.allclose(y_perm, y[perm], rtol=0, atol=1e-12)


# ---- FAVOR

def test_feature_map_at_zero_is_constant():
    omega = np.random.default_rng(0).standard_normal((3, 5))
    phi = favor_feature_map(np.zeros((2, 3)), omega)
    assert np.allclose(phi, 5 ** -0.5, rtol=0, atol=1e-15)


def test_feature_map_hand_value():
    phi = favor_feature_map(np.array([[1.0, 0.0]]), np.array([[1.0], [0.0]]))
    # exp(1 - 1/2)
    assert phi[0, 0] == pytest.approx(math.exp(0.5), rel=1e-15)


def test_feature_map_is_positive(rng):
    phi = favor_feature_map(rng.standard_normal((6, 4)) * 3, favor_omega(3, 4, 16))
    assert np.all(phi > 0)


def test_feature_map_kernel_is_unbiased_monte_carlo():
    q = np.array([[0.3, -0.2]])
    k = np.array([[0.5, 0.4]])
    est = np.mean([(favor_feature_map(q, favor_omega(s, 2, 1)) @ favor_feature_map(k, favor_omega(s, 2, 1)).T)[0, 0]
                   for s in range(10_000)])
    exact = math.exp(float((q @ k.T)[0, 0]))
    assert abs(est - exact) / exact <= 0.05


def test_omega_is_frozen_and_seeded():
    a = favor_omega(11, 2, 8)
    assert np.array_equal(a, favor_omega(11, 2, 8))
    assert not np.array_equal(a, favor_omega(12, 2, 8))
    with pytest.raises(ValueError):
        a[0, 0] = 1.0


def fixed_qkv_inputs(r):
    # X = I_3 makes Q, K, V equal to the weight matrices themselves.
    x = np.eye(3)
    return x, HeadParams(r.uniform(-1, 1, (3, 2)), r.uniform(-1, 1, (3, 2)), r.uniform(-1, 1, (3, 2)))


def favor_mse(x, p, r_features, seeds, scale=0.5):
    exact = head_forward_softmax(x, p, None, scale).y
    errs = [np.mean((head_forward_favor(x, p, Favor(r_features, s), scale=scale).y - exact) ** 2)
            for s in seeds]
    return float(np.median(errs))


def test_favor_error_shrinks_when_features_double():
    x, p = fixed_qkv_inputs(np.random.default_rng(5))
    assert favor_mse(x, p, 2048, range(20)) < favor_mse(x, p, 1024, range(20))


def test_favor_materialized_rows_stochastic_and_positive(rng):
    x = rng.standard_normal((6, 3))
    tr = head_forward_favor(x, rand_head(rng), Favor(32, 1), materialize_a=True, scale=0.5)
    assert np.all(tr.a > 0)
    assert np.all(np.abs(tr.a.sum(axis=-1) - 1.0) <= 1e-9)
    assert np.allclose(tr.a @ tr.v, tr.y, rtol=0, atol=1e-12)


def test_favor_fast_path_has_no_attention_matrix(rng):
    tr = head_forward_favor(rng.standard_normal((4, 3)), rand_head(rng), Favor(8))
    assert tr.a is None


def test_favor_all_ones_values_give_all_ones_output(rng):
    # A constant input column routed through w_value makes V exactly all-ones.
    x = np.concatenate([rng.standard_normal((5, 3)), np.ones((5, 1))], axis=1)
    w_value = np.zeros((4, 2))
    w_value[3] = 1.0
    p = HeadParams(rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, (4, 2)), w_value)
    tr = head_forward_favor(x, p, Favor(16, 2))
    assert np.array_equal(tr.v, np.ones((5, 2)))
    assert np.allclose(tr.y, 1.0, rtol=0, atol=1e-12)


# ---- layer

def make_layer(r, mechs, d=3, h=2):
    return LayerParams([(rand_head(r, d, h), m) for m in mechs], r.uniform(-1, 1, (len(mechs) * h, d)))


def test_single_head_identity_projection(rng):
    x = rng.standard_normal((4, 3))
    layer = LayerParams([(rand_head(rng, 3, 3), SoftmaxFull())], np.eye(3))
    y, traces = layer_forward(x, layer)
    assert np.array_equal(y, traces[0].y)


def test_zero_projection_gives_zero(rng):
    layer = make_layer(rng, [SoftmaxFull(), Favor(4)])
    layer.w_out = np.zeros_like(layer.w_out)
    y, _ = layer_forward(rng.standard_normal((4, 3)), layer)
    assert np.array_equal(y, np.zeros((4, 3)))


def test_two_heads_match_block_concat_oracle(rng):
    x = rng.standard_normal((4, 3))
    layer = make_layer(rng, [SoftmaxFull(), SoftmaxFull()])
    scale = attention_scale(2)
    y0 = naive_softmax_head(x, layer.heads[0][0], scale)
    y1 = naive_softmax_head(x, layer.heads[1][0], scale)
    cat = np.zeros((4, 4))
    cat[:, :2], cat[:, 2:] = y0, y1
    y, _ = layer_forward(x, layer)
    assert np.max(np.abs(y - cat @ layer.w_out)) <= 1e-12


def test_layer_forward_is_deterministic(rng):
    x = rng.standard_normal((5, 3))
    layer = make_layer(rng, [SoftmaxFull(), SoftmaxWindow(1, 1), Favor(8, 3)])
    a, _ = layer_forward(x, layer)
    b, _ = layer_forward(x, layer)
    assert a.tobytes() == b.tobytes()


def test_wout_row_count_checked(rng):
    with pytest.raises(ShapeError):
        LayerParams([(rand_head(rng), SoftmaxFull())], np.zeros((3, 3)))


def test_batched_forward_matches_per_sequence(rng):
    x = rng.standard_normal((3, 5, 3))
    layer = make_layer(rng, [SoftmaxFull(), SoftmaxWindow(1, 0), Favor(8, 1)])
    yb, _ = layer_forward(x, layer, materialize_a=True)
    for b in range(3):
        y1, _ = layer_forward(x[b], layer, materialize_a=True)
        assert np.allclose(yb[b], y1, rtol=0, atol=1e-13)


# ---- backward

def test_zero_upstream_gives_zero_gradients(rng):
    x = rng.standard_normal((4, 3))
    layer = make_layer(rng, [SoftmaxFull(), Favor(8)])
    y, traces = layer_forward(x, layer)
    grads, dx = layer_backward(np.zeros_like(y), x, layer, traces)
    assert not np.any(dx)
    assert not np.any(grads.w_out)
    for g in grads.heads:
        assert not (np.any(g.w_query) or np.any(g.w_key) or np.any(g.w_value))


def layer_fd_errors(x, layer, g_out, scale_mode="paper"):
    y, traces = layer_forward(x, layer, scale_mode)
    grads, dx = layer_backward(g_out, x, layer, traces)

    def loss():
        return float((layer_forward(x, layer, scale_mode)[0] * g_out).sum())

    errs = {}
    for i, (p, _) in enumerate(layer.heads):
        for name in ("w_query", "w_key", "w_value"):
            w = getattr(p, name)
            orig = w.copy()

            def f(v, w=w):
                w[...] = v
                return loss()

            errs[f"{i}.{name}"] = rel_error(getattr(grads.heads[i], name), fd_gradient(f, orig, FD_STEP))
            w[...] = orig
    orig = layer.w_out.copy()

    def f_out(v):
        layer.w_out[...] = v
        return loss()

    errs["w_out"] = rel_error(grads.w_out, fd_gradient(f_out, orig, FD_STEP))
    layer.w_out[...] = orig
    errs["x"] = rel_error(dx, fd_gradient(lambda v: float((layer_forward(v, layer, scale_mode)[0] * g_out).sum()),
                                          x, FD_STEP))
    return errs


@pytest.mark.parametrize("mechs", [
    [SoftmaxFull(), SoftmaxFull()],
    [SoftmaxWindow(1, 0), SoftmaxWindow(0, 1)],
    [SoftmaxFull(), Favor(16, 4)],
])
def test_layer_backward_vs_fd(mechs):
    r = np.random.default_rng(len(str(mechs)))
    x = r.uniform(-1, 1, (4, 3))
    layer = make_layer(r, mechs, d=3, h=2)
    g_out = r.uniform(-1, 1, (4, 3))
    errs = layer_fd_errors(x, layer, g_out)
    assert max(errs.values()) <= FD_RTOL, errs


def test_layer_backward_spec_size_n2_t4_d3_h2_standard_scale():
    r = np.random.default_rng(99)
    x = r.uniform(-1, 1, (4, 3))
    layer = make_layer(r, [SoftmaxFull(), SoftmaxWindow(1, 1)])
    errs = layer_fd_errors(x, layer, r.uniform(-1, 1, (4, 3)), scale_mode="standard")
    assert max(errs.values()) <= FD_RTOL, errs


@pytest.mark.parametrize("attr", ["q", "k", "v", "a", "y"])
def test_trace_gradients_vs_fd(attr):
    r = np.random.default_rng(7)
    x = r.uniform(-1, 1, (4, 3))
    layer = make_layer(r, [SoftmaxWindow(1, 2), Favor(16, 2)])
    gt = [r.uniform(-1, 1, (4, 4) if attr == "a" else (4, 2)) for _ in range(2)]

    def loss(v):
        _, traces = layer_forward(v, layer, materialize_a=True)
        return sum(float((getattr(tr, attr) * g).sum()) for tr, g in zip(traces, gt))

    y, traces = layer_forward(x, layer, materialize_a=True)
    _, dx = layer_backward(np.zeros_like(y), x, layer, traces, [{attr: g} for g in gt])
    assert rel_error(dx, fd_gradient(loss, x, FD_STEP)) <= FD_RTOL


def test_trace_mismatch_detected(rng):
    x = rng.standard_normal((4, 3))
    layer = make_layer(rng, [SoftmaxFull(), SoftmaxFull()])
    y, traces = layer_forward(x, layer)
    with pytest.raises(TraceMismatchError):
        layer_backward(y, x, layer, traces[:1])
    other = make_layer(rng, [SoftmaxFull(), Favor(4)])
    with pytest.raises(TraceMismatchError):
        layer_backward(y, x, other, traces)
    with pytest.raises(TraceMismatchError):
        layer_backward(y[:3], x[:3], layer, traces)
