"""Finite-difference checks of every differentiable op and layer (64-bit)."""

import numpy as np
import pytest

import oracles
from xsynth.nets import autodiff as ad
from xsynth.nets import layers as L

R = np.random.default_rng(2024)
TOL = 1e-6
M54 = R.normal(size=(5, 4))


def grad_error(fn, params):
    """Largest relative gap between reverse-mode and central-difference gradients of sum(fn(p) * w)."""
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out_shape = np.shape(ad.value(fn({k: v.copy() for k, v in params.items()})))
    w = R.normal(size=out_shape)

    def scalar(p):
        return ad.sum_(fn(p) * w)

    g = ad.grad(scalar, params)
    fd = oracles.finite_difference_grad(lambda p: ad.value(scalar(p)), params, h=1e-3)
    worst = 0.0
    for k in params:
        assert g[k].shape == params[k].shape
        worst = max(worst, oracles.relative_error(g[k], fd[k][0]))
    return worst


def _check(fn, params, tol=TOL):
    assert grad_error(fn, params) <= tol


def n(*shape):
    return R.normal(size=shape)


def test_scalar_square():
    assert ad.grad(lambda p: p["w"] * p["w"], {"w": np.array(3.0)})["w"] == pytest.approx(6.0)


def test_linear_map_gradient_is_input():
    x = n(4, 3)
    g = ad.grad(lambda p: ad.sum_(p["W"] * x), {"W": np.zeros((4, 3))})["W"]
    np.testing.assert_array_equal(g, x)


@pytest.mark.parametrize("name,fn,params", [
    ("add_broadcast", lambda p: p["a"] + p["b"], {"a": n(3, 4), "b": n(4)}),
    ("sub", lambda p: p["a"] - p["b"], {"a": n(2, 3), "b": n(2, 1)}),
    ("mul", lambda p: p["a"] * p["b"], {"a": n(3, 4), "b": n(1, 4)}),
    ("div", lambda p: p["a"] / (ad.square(p["b"]) + 1.0), {"a": n(3), "b": n(3)}),
    ("neg", lambda p: -p["a"], {"a": n(5)}),
    ("power", lambda p: ad.power(ad.square(p["a"]) + 0.5, 1.5), {"a": n(5)}),
    ("exp", lambda p: ad.exp(p["a"]), {"a": n(6)}),
    ("log", lambda p: ad.log(ad.square(p["a"]) + 1.0), {"a": n(6)}),
    ("sqrt", lambda p: ad.sqrt(ad.square(p["a"]) + 1.0), {"a": n(6)}),
    ("tanh", lambda p: ad.tanh(p["a"]), {"a": n(6)}),
    ("sigmoid", lambda p: ad.sigmoid(p["a"]), {"a": n(6)}),
    ("silu", lambda p: ad.silu(p["a"]), {"a": n(6)}),
    ("sum_axis", lambda p: ad.sum_(p["a"], axis=1, keepdims=True), {"a": n(3, 4, 2)}),
    ("mean_axes", lambda p: ad.mean(p["a"], axis=(0, 2)), {"a": n(3, 4, 2)}),
    ("softmax", lambda p: ad.softmax(p["a"], axis=-1), {"a": n(3, 5)}),
    ("reshape", lambda p: ad.reshape(p["a"], (6, 2)), {"a": n(3, 4)}),
    ("transpose", lambda p: ad.transpose(p["a"], (2, 0, 1)), {"a": n(2, 3, 4)}),
    ("swapaxes", lambda p: ad.swapaxes(p["a"], 0, 2), {"a": n(2, 3, 4)}),
    ("getitem", lambda p: p["a"][1:, ::2], {"a": n(4, 5)}),
    ("getitem_fancy", lambda p: p["a"][[0, 2, 2]], {"a": n(4, 3)}),
    ("concat", lambda p: ad.concat([p["a"], p["b"]], axis=1), {"a": n(2, 3), "b": n(2, 2)}),
    ("pad", lambda p: ad.pad(p["a"], [(1, 0), (2, 1)]), {"a": n(3, 3)}),
    ("matmul", lambda p: p["a"] @ p["b"], {"a": n(2, 3, 4), "b": n(4, 5)}),
    ("apply_matrix", lambda p: ad.apply_matrix(p["a"], M54, axis=1), {"a": n(2, 4, 3)}),
    ("pixel_unshuffle", lambda p: ad.pixel_unshuffle(p["a"], 2), {"a": n(1, 2, 4, 6)}),
    ("pixel_shuffle", lambda p: ad.pixel_shuffle(p["a"], 2), {"a": n(1, 8, 2, 3)}),
    ("space_to_depth", lambda p: ad.space_to_depth(p["a"], 2), {"a": n(1, 4, 6, 2)}),
    ("depth_to_space", lambda p: ad.depth_to_space(p["a"], 2), {"a": n(1, 2, 3, 8)}),
    ("conv2d_nchw", lambda p: ad.conv2d(p["x"], p["w"], p["b"]), {"x": n(2, 3, 5, 4), "w": n(4, 3, 3, 3), "b": n(4)}),
    ("conv2d_nhwc", lambda p: ad.conv2d_nhwc(p["x"], p["w"], p["b"]), {"x": n(2, 5, 4, 3), "w": n(4, 3, 3, 3), "b": n(4)}),
    ("conv2d_1x1", lambda p: ad.conv2d_nhwc(p["x"], p["w"], p["b"]), {"x": n(1, 3, 3, 2), "w": n(5, 2, 1, 1), "b": n(5)}),
    ("rms_norm", lambda p: ad.rms_norm(p["x"], p["s"]), {"x": n(3, 6), "s": n(6)}),
    ("attention_core", lambda p: ad.scaled_dot_attention(p["q"], p["k"], p["v"]),
     {"q": n(2, 2, 5, 3), "k": n(2, 2, 5, 3), "v": n(2, 2, 5, 3)}),
])
def test_op_gradient(name, fn, params):
    _check(fn, params)


def _layer_params(builder_calls):
    b = L.ParamBuilder()
    for call in builder_calls:
        call(b)
    p = b.materialize(0, np.float64)
    # perturb zero-initialised tensors so every path carries gradient
    return {k: v + 0.3 * R.normal(size=v.shape) for k, v in p.items()}


def test_layer_linear():
    p = _layer_params([lambda b: b.linear("fc", 4, 3)])
    x = n(2, 4)
    _check(lambda q: L.linear(q, "fc", x), p)


def test_layer_conv():
    p = _layer_params([lambda b: b.conv("c", 2, 3)])
    p["x"] = n(1, 5, 5, 2)
    _check(lambda q: L.conv(q, "c", q["x"]), p)


@pytest.mark.parametrize("axis", [-1, 1])
def test_layer_rmsnorm(axis):
    # 16 features keep mean(x^2) away from 0, where h = 1e-3 differences lose accuracy
    x = n(2, 16, 16)
    scale = n(x.shape[axis])
    _check(lambda q: L.rmsnorm(q["x"], q["s"], axis=axis), {"x": x, "s": scale})


def test_layer_group_norm():
    _check(lambda q: L.group_norm(q["x"], 2, q["s"], q["b"]), {"x": n(2, 3, 3, 4), "s": n(4), "b": n(4)})


def test_layer_swiglu():
    _check(lambda q: L.swiglu(q["x"], q["g"], q["v"], q["o"]), {"x": n(3, 4), "g": n(4, 6), "v": n(4, 6), "o": n(6, 4)})


def test_layer_attention():
    p = _layer_params([lambda b: b.linear("att/qkv", 8, 24), lambda b: b.linear("att/out", 8, 8)])
    p["x"] = n(2, 5, 8)
    _check(lambda q: L.attention(q, "att", q["x"], heads=2), p)


def test_layer_adaln():
    p = _layer_params([lambda b: b.linear("ada", 6, 3 * 4)])
    p["x"], p["e"] = n(2, 3, 4), n(2, 6)

    def f(q):
        y, gate = L.adaln_modulate(q, "ada", q["x"], q["e"])
        return y * gate

    _check(f, p)


def test_layer_patchify_round_trip_and_gradient():
    x = n(2, 3, 8, 4)
    seq = L.patchify(x, 2)
    assert seq.shape == (2, 8, 12)
    np.testing.assert_array_equal(L.unpatchify(seq, 2, 8, 4), x)
    _check(lambda q: L.unpatchify(L.patchify(q["x"], 2) * 2.0, 2, 8, 4), {"x": x})


def test_rmsnorm_examples():
    np.testing.assert_allclose(ad.value(L.rmsnorm(np.array([3.0, 4.0]), np.ones(2))),
                               [0.8485281374238570, 1.131370849898476], atol=1e-6)
    assert np.all(L.rmsnorm(np.zeros(4)) == 0)
    x = n(8)
    a, b = L.rmsnorm(x), L.rmsnorm(7.5 * x)
    np.testing.assert_allclose(np.linalg.norm(a), np.linalg.norm(b), rtol=1e-6)


def test_swiglu_examples():
    one = np.ones((1, 1))
    assert L.swiglu(one, one, one, one).item() == pytest.approx(oracles.SWISH_ONE, abs=1e-15)
    out = L.swiglu(np.array([[1.0, 2.0]]), np.array([[0.0], [0.0]]), np.ones((2, 1)), np.ones((1, 1)))
    assert out.item() == 0.0


def test_sinusoidal_embedding_examples():
    np.testing.assert_allclose(L.sinusoidal_embedding(0.5, 2), [0.479425538604203, 0.8775825618903727], atol=1e-15)
    e0 = L.sinusoidal_embedding(0.0, 16)
    assert np.all(e0[0::2] == 0) and np.all(e0[1::2] == 1)
    grid = L.sinusoidal_embedding(np.linspace(0.0005, 0.9995, 1000), 64)
    d = np.sum((grid[:, None] - grid[None]) ** 2, axis=-1)
    assert np.min(d + np.eye(1000) * 1e9) > 1e-12
    with pytest.raises(ValueError):
        L.sinusoidal_embedding(0.1, 5)


def test_pixel_shuffle_laws():
    x = n(1, 3, 8, 8)
    np.testing.assert_array_equal(ad.value(ad.pixel_unshuffle(x, 1)), x)
    u = ad.pixel_unshuffle(x, 2)
    assert u.shape == (1, 12, 4, 4)
    np.testing.assert_array_equal(ad.pixel_shuffle(u, 2), x)
    with pytest.raises(ValueError):
        ad.pixel_unshuffle(n(1, 1, 5, 4), 2)
    h = n(2, 6, 4, 3)
    np.testing.assert_array_equal(ad.depth_to_space(ad.space_to_depth(h, 2), 2), h)
    # channels-last rearrangement uses the same channel order as the NCHW one
    np.testing.assert_array_equal(np.moveaxis(ad.space_to_depth(np.moveaxis(x, 1, -1), 2), -1, 1), u)


def test_attention_single_position_returns_value_projection():
    p = _layer_params([lambda b: b.linear("att/qkv", 4, 12), lambda b: b.linear("att/out", 4, 4)])
    x = n(3, 1, 4)
    out = L.attention(p, "att", x, heads=2)
    v = (x @ p["att/qkv/w"] + p["att/qkv/b"])[..., 8:]
    np.testing.assert_allclose(out, v @ p["att/out/w"] + p["att/out/b"], atol=1e-12)


def test_softmax_rows_sum_to_one():
    s = ad.value(ad.softmax(n(4, 7) * 30, axis=-1))
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


def test_adaln_zero_projection_is_identity():
    b = L.ParamBuilder()
    b.linear("ada", 6, 12, zero=True)
    p = b.materialize(0, np.float64)
    x = n(2, 3, 4)
    y, gate = L.adaln_modulate(p, "ada", x, n(2, 6))
    np.testing.assert_array_equal(y, x)
    assert np.all(ad.value(gate) == 0)


def test_unsupported_numpy_call_is_rejected():
    with pytest.raises(ad.UnsupportedOpError):
        ad.grad(lambda p: np.sort(p["a"]).sum(), {"a": n(3)})
    with pytest.raises(ad.UnsupportedOpError):
        ad.grad(lambda p: np.maximum(p["a"], 0.0).sum(), {"a": n(3)})


def test_non_scalar_output_rejected():
    with pytest.raises(ValueError):
        ad.grad(lambda p: p["a"] * 2, {"a": n(3)})


def test_gradient_accumulates_over_reuse():
    g = ad.grad(lambda p: ad.sum_(p["a"] * p["a"] + p["a"]), {"a": np.array([1.0, -2.0])})["a"]
    np.testing.assert_allclose(g, [3.0, -3.0])
