import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from xsynth.diffusion import (
    LossWeightConfig,
    NonFiniteLossError,
    Target,
    eps_from_x,
    forward_marginal,
    loss_weight,
    posterior_params,
    prediction_triple,
    sample_training_noise,
    training_loss,
    transition_params,
    v_from_x,
    x_from_eps,
    x_from_v,
)
from xsynth.nets.model import DenoiserModel
from xsynth.schedule import NoiseSchedule, alpha_sigma, log_snr

COS = NoiseSchedule.cosine()
N_MC = 100_000


def _as(t, sch=COS):
    return alpha_sigma(log_snr(sch, t))


def _within_4se(samples, mean, var):
    n = samples.size
    m = samples.mean()
    v = samples.var(ddof=1)
    assert abs(m - mean) <= 4 * math.sqrt(var / n), (m, mean)
    assert abs(v - var) <= 4 * var * math.sqrt(2.0 / (n - 1)), (v, var)


@pytest.mark.parametrize("sch", [COS, NoiseSchedule.shifted_cosine(64), NoiseSchedule.sigmoid()])
def test_marginal_transition_consistency(sch, rng):
    for _ in range(200):
        s, t = sorted(rng.uniform(0.0, 1.0, 2))
        if s == t:
            continue
        tp = transition_params(s, t, sch)
        a_s, sg_s = _as(s, sch)
        a_t, sg_t = _as(t, sch)
        assert abs(tp.alpha_ts * a_s - a_t) <= 1e-12
        assert abs(tp.sigma_ts_sq + tp.alpha_ts**2 * sg_s**2 - sg_t**2) <= 1e-12


def test_forward_marginal_example():
    z = forward_marginal(np.array(1.0), 0.5, np.array(0.5), COS).z
    assert float(z) == pytest.approx(math.sqrt(0.5) * 1.5, abs=1e-15)


def test_transition_example():
    tp = transition_params(0.25, 0.5, COS)
    assert (tp.alpha_ts, tp.sigma_ts_sq) == pytest.approx(oracles.TRANSITION_Q_H, abs=1e-14)


def test_posterior_example():
    post = posterior_params(np.array(1.0), np.array(1.0), 0.25, 0.5, COS)
    assert float(post.mean) == pytest.approx(oracles.POSTERIOR_EXAMPLE[0], abs=1e-14)
    assert post.var == pytest.approx(oracles.POSTERIOR_EXAMPLE[1], abs=1e-14)


def test_posterior_matches_oracle_on_random_pairs(rng):
    for _ in range(20):
        s, t = sorted(rng.uniform(0.01, 0.99, 2))
        z, x = rng.normal(size=2)
        post = posterior_params(np.array(z), np.array(x), s, t, COS)
        ref_mean, ref_var = oracles.posterior_oracle(z, x, s, t)
        assert float(post.mean) == pytest.approx(ref_mean, abs=1e-12)
        assert post.var == pytest.approx(ref_var, abs=1e-12)


def test_posterior_degenerate_ends(rng):
    z, x = rng.normal(size=3), rng.normal(size=3)
    at_zero = posterior_params(z, x, 0.0, 0.4, COS)
    assert at_zero.var == 0.0
    np.testing.assert_array_equal(at_zero.mean, x)
    same = posterior_params(z, x, 0.4, 0.4, COS)
    assert same.var == 0.0
    np.testing.assert_array_equal(same.mean, z)
    assert posterior_params(z, x, 0.01, 0.4, COS).var > 0.0


def test_transition_requires_s_before_t():
    with pytest.raises(ValueError):
        transition_params(0.5, 0.5, COS)
    with pytest.raises(ValueError):
        transition_params(0.6, 0.5, COS)


def test_v_example():
    v = prediction_triple(np.array(1.0), np.array(0.0), 0.5, COS).v
    assert float(v) == pytest.approx(-math.sqrt(0.5), abs=1e-15)


@pytest.mark.parametrize("s,t", [(0.1, 0.4), (0.3, 0.9), (0.0, 0.5)])
def test_composed_transition_moments(s, t):
    rng = np.random.default_rng(7)
    x = np.full(N_MC, 0.8)
    z_s = forward_marginal(x, s, rng.standard_normal(N_MC), COS).z
    tp = transition_params(s, t, COS)
    z_t = tp.alpha_ts * z_s + math.sqrt(tp.sigma_ts_sq) * rng.standard_normal(N_MC)
    a_t, sg_t = _as(t)
    _within_4se(z_t, a_t * 0.8, sg_t**2)


@pytest.mark.parametrize("s,t", [(0.1, 0.4), (0.3, 0.9), (0.25, 0.5)])
def test_posterior_bayes_consistency(s, t):
    rng = np.random.default_rng(11)
    x = np.full(N_MC, -0.6)
    z_t = forward_marginal(x, t, rng.standard_normal(N_MC), COS).z
    post = posterior_params(z_t, x, s, t, COS)
    z_s = post.mean + math.sqrt(post.var) * rng.standard_normal(N_MC)
    a_s, sg_s = _as(s)
    _within_4se(z_s, a_s * -0.6, sg_s**2)


def test_prediction_round_trips_float32(rng):
    shape = (64, 1, 16, 16)
    x = rng.uniform(-1, 1, shape).astype(np.float32)
    eps = rng.standard_normal(shape).astype(np.float32)
    t = rng.uniform(0.0, 1.0, shape[0])
    z = forward_marginal(x, t, eps, COS).z
    trip = prediction_triple(x, eps, t, COS)
    assert z.dtype == trip.v.dtype == np.float32
    # x <-> v is a rotation of (z, v): well conditioned at every t
    assert np.max(np.abs(x_from_v(z, trip.v, t, COS) - x)) <= 1e-6
    # the others divide by alpha or sigma, so float32 rounding of z is amplified by 1/min(alpha, sigma)
    a, sg = _as(t)
    per_item = 4 * np.finfo(np.float32).eps * (np.abs(z).max(axis=(1, 2, 3)) + 1) / np.minimum(a, sg)
    bound = per_item.reshape(-1, 1, 1, 1)
    assert (np.abs(v_from_x(z, x, t, COS) - trip.v) <= bound).all()
    assert (np.abs(eps_from_x(z, x, t, COS) - eps) <= bound).all()
    assert (np.abs(x_from_eps(z, eps, t, COS) - x) <= bound).all()


def test_prediction_round_trips_float64(rng):
    shape = (64, 1, 16, 16)
    x = rng.normal(size=shape)
    eps = rng.standard_normal(shape)
    t = rng.uniform(0.0, 1.0, shape[0])
    z = forward_marginal(x, t, eps, COS).z
    v = prediction_triple(x, eps, t, COS).v
    for got, want in ((x_from_v(z, v, t, COS), x), (v_from_x(z, x, t, COS), v),
                      (eps_from_x(z, x, t, COS), eps), (x_from_eps(z, eps, t, COS), x)):
        assert np.max(np.abs(got - want)) <= 1e-6


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        forward_marginal(np.zeros((2, 3)), 0.5, np.zeros((3, 2)), COS)


def test_min_snr_examples():
    cfg = LossWeightConfig(gamma=5.0)
    assert loss_weight(cfg, 0.5, COS) == pytest.approx(0.5, abs=1e-15)
    t_at_5 = 2 / math.pi * math.atan(1 / math.sqrt(5))  # SNR = cot^2(pi t / 2) = 5
    assert loss_weight(cfg, t_at_5, COS) == pytest.approx(5 / 6, abs=1e-12)


def test_min_snr_grid_maximum():
    grid = np.linspace(0, 1, 10_000)
    w = loss_weight(LossWeightConfig(gamma=5.0), grid, COS)
    # w has a kink at SNR = gamma; above it |dw/dt| = gamma/(snr+1)^2 * |dsnr/dt| = 5/36 * 6 pi sqrt(5)
    slope = 5 / 36 * 6 * math.pi * math.sqrt(5)
    assert 0.0 <= 5 / 6 - w.max() <= slope * (grid[1] - grid[0]) / 2


@given(st.floats(0.0, 1.0), st.floats(0.1, 50.0))
def test_min_snr_bound(t, gamma):
    assert loss_weight(LossWeightConfig(gamma=gamma), t, COS) <= gamma / (gamma + 1) + 1e-15


def test_weight_variants():
    t = 0.25
    snr = math.exp(log_snr(COS, t))
    assert loss_weight(LossWeightConfig(Target.EPS, 5.0), t, COS) == pytest.approx(min(snr, 5) / snr)
    assert loss_weight(LossWeightConfig(Target.X, 5.0), t, COS) == pytest.approx(5.0)
    assert loss_weight(LossWeightConfig(enabled=False), t, COS) == 1.0
    with pytest.raises(ValueError):
        LossWeightConfig(gamma=0.0)


def _const_model(value):
    return DenoiserModel(None, {}, lambda p, z, t, c: np.full_like(np.asarray(z), value))


def test_loss_example_zero_model():
    batch = {"source": np.zeros((1, 1, 1, 1)), "target": np.ones((1, 1, 1, 1))}
    loss = training_loss(_const_model(0.0), batch, 0, COS, LossWeightConfig(enabled=False),
                         t=np.array([0.5]), eps=np.zeros((1, 1, 1, 1)))
    assert loss == pytest.approx(0.5, abs=1e-15)


def test_loss_is_deterministic_per_seed_and_step(rng):
    batch = {"source": rng.normal(size=(4, 1, 8, 8)), "target": rng.normal(size=(4, 1, 8, 8))}
    m = _const_model(0.1)
    cfg = LossWeightConfig()
    a = training_loss(m, batch, 3, COS, cfg, step=5)
    assert a == training_loss(m, batch, 3, COS, cfg, step=5)
    assert a != training_loss(m, batch, 4, COS, cfg, step=5)
    assert a != training_loss(m, batch, 3, COS, cfg, step=6)


def test_training_noise_is_keyed_per_item():
    t_a, e_a = sample_training_noise(9, 2, (4, 1, 4, 4))
    t_b, e_b = sample_training_noise(9, 2, (2, 1, 4, 4))
    np.testing.assert_array_equal(t_a[:2], t_b)
    np.testing.assert_array_equal(e_a[:2], e_b)
    assert np.all((t_a >= 0) & (t_a < 1))


def test_non_finite_loss_reports_time():
    batch = {"source": np.zeros((2, 1, 2, 2)), "target": np.zeros((2, 1, 2, 2))}
    with pytest.raises(NonFiniteLossError) as info:
        training_loss(_const_model(np.nan), batch, 0, COS, LossWeightConfig(), t=np.array([0.2, 0.7]),
                      eps=np.zeros((2, 1, 2, 2)))
    assert info.value.t == [0.2, 0.7]


@settings(max_examples=30)
@given(st.floats(0.001, 0.999), st.floats(-3, 3), st.floats(-3, 3))
def test_x_v_round_trip_property(t, x, eps):
    x, eps = np.array([x]), np.array([eps])
    z = forward_marginal(x, t, eps, COS).z
    v = prediction_triple(x, eps, t, COS).v
    assert x_from_v(z, v, t, COS) == pytest.approx(x, abs=1e-12)
