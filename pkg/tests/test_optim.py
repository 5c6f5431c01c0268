import numpy as np
import pytest

from xsynth.nets.optim import AdamState, TreeMismatchError, adam_step


def _tree(v):
    return {"w": np.array([v], dtype=np.float64)}


def test_first_step_magnitude_is_lr():
    p, st = adam_step(_tree(0.0), _tree(1.0), AdamState.zeros_like(_tree(0.0)))
    # bias correction makes m_hat = g and v_hat = g^2 on step 1
    assert p["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert st.step == 1


def test_zero_gradient_keeps_params_and_decays_moments():
    params = _tree(2.0)
    st = AdamState({"w": np.array([0.5])}, {"w": np.array([0.25])}, 3)
    p, st2 = adam_step(params, _tree(0.0), st)
    m_hat = 0.9 * 0.5 / (1 - 0.9**4)
    v_hat = 0.999 * 0.25 / (1 - 0.999**4)
    assert p["w"][0] == pytest.approx(2.0 - 1e-4 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-14)
    assert st2.m["w"][0] == pytest.approx(0.45)
    assert st2.v["w"][0] == pytest.approx(0.24975)
    p0, _ = adam_step(params, _tree(0.0), AdamState.zeros_like(params))
    assert p0["w"][0] == 2.0


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_constant_gradient_steps_approach_lr(g):
    p, st = _tree(0.0), AdamState.zeros_like(_tree(0.0))
    deltas = []
    for _ in range(5000):
        new, st = adam_step(p, _tree(g), st, lr=1e-3)
        deltas.append(new["w"][0] - p["w"][0])
        p = new
    assert abs(deltas[-1]) == pytest.approx(1e-3, rel=1e-6)
    assert np.sign(deltas[-1]) == -np.sign(g)


def test_inputs_not_mutated():
    params, grads = _tree(1.0), _tree(0.5)
    st = AdamState.zeros_like(params)
    adam_step(params, grads, st)
    assert params["w"][0] == 1.0 and st.step == 0 and st.m["w"][0] == 0.0


def test_dtype_preserved():
    params = {"w": np.ones(3, np.float32)}
    p, st = adam_step(params, {"w": np.ones(3, np.float32)}, AdamState.zeros_like(params))
    assert p["w"].dtype == np.float32 and st.v["w"].dtype == np.float32


def test_tree_mismatch():
    params = {"a": np.zeros(2), "b": np.zeros(3)}
    st = AdamState.zeros_like(params)
    with pytest.raises(TreeMismatchError):
        adam_step(params, {"a": np.zeros(2)}, st)
    with pytest.raises(TreeMismatchError):
        adam_step(params, {"a": np.zeros(2), "b": np.zeros(4)}, st)
    with pytest.raises(TreeMismatchError):
        adam_step(params, {"a": np.zeros(2), "b": np.zeros(3)}, AdamState.zeros_like({"a": np.zeros(2)}))


def test_bitwise_reproducible(rng):
    params = {"w": rng.normal(size=(4, 4))}
    grads = [{"w": rng.normal(size=(4, 4))} for _ in range(5)]

    def run():
        p, st = params, AdamState.zeros_like(params)
        for g in grads:
            p, st = adam_step(p, g, st)
        return p["w"]

    assert np.array_equal(run(), run())
