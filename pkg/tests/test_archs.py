import functools

import numpy as np
import pytest

import oracles
from xsynth.diffusion import LossWeightConfig, direct_loss, training_loss
from xsynth.nets import Arch, ArchConfig, build_model, param_count, param_shapes
from xsynth.nets import autodiff as ad
from xsynth.nets.layers import ParamBuilder
from xsynth.nets.model import with_params
from xsynth.nets.optim import AdamState, adam_step
from xsynth.schedule import NoiseSchedule

ARCHS = [a.value for a in Arch]
REFERENCE_COUNTS = {"unet": 15e6, "adm": 35e6, "uvit": 125e6, "dit": 558e6}
COS = NoiseSchedule.cosine()


@pytest.fixture(scope="module")
def lite_models():
    return {a: build_model(ArchConfig.lite(a), seed=0) for a in ARCHS}


@pytest.mark.parametrize("arch", ARCHS)
def test_shape_contract_all_even_sizes(arch, lite_models):
    m = lite_models[arch]
    r = np.random.default_rng(0)
    for size in range(16, 65, 2):
        z = r.normal(size=(1, 1, size, size)).astype(np.float32)
        out = m.apply(z, np.array([0.4]), z)
        assert out.shape == z.shape, size
        assert np.isfinite(out).all()


@pytest.mark.parametrize("arch", ARCHS)
def test_rectangular_input(arch, lite_models):
    z = np.zeros((2, 1, 20, 36), np.float32)
    assert lite_models[arch].apply(z, np.array([0.1, 0.9]), z).shape == z.shape


@pytest.mark.parametrize("arch", ARCHS)
def test_full_scale_parameter_counts(arch):
    n = param_count(param_shapes(ArchConfig.paper(arch)))
    assert abs(n / REFERENCE_COUNTS[arch] - 1) <= 0.15, n


def test_param_count_examples():
    b = ParamBuilder()
    b.conv("c", 1, 8)
    assert b.count() == 80
    assert param_count(b.materialize(0)) == 80
    assert param_count({}) == 0


@pytest.mark.parametrize("arch", ARCHS)
def test_initialization_deterministic(arch):
    a = build_model(ArchConfig.lite(arch), seed=3).params
    b = build_model(ArchConfig.lite(arch), seed=3).params
    c = build_model(ArchConfig.lite(arch), seed=4).params
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    assert all(np.isfinite(v).all() for v in a.values())


def test_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(arch="dit", channel_multipliers=(1, 2), hidden_size=64, transformer_depth=1, patch_size=4)
    with pytest.raises(ValueError):
        ArchConfig(arch="unet", base_channels=30, norm_groups=8)
    with pytest.raises(ValueError):
        ArchConfig(arch="adm", norm_groups=8)
    with pytest.raises(ValueError):
        ArchConfig(arch="vit")
    cfg = ArchConfig.lite("uvit")
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


def test_full_scale_presets_pin_published_values():
    assert ArchConfig.paper("unet").res_blocks_per_stage == 1
    assert ArchConfig.paper("unet").norm_groups == 32
    adm = ArchConfig.paper("adm")
    assert (adm.base_channels, adm.res_blocks_per_stage, adm.attention_heads) == (128, 2, 4)
    uvit = ArchConfig.paper("uvit")
    assert (uvit.transformer_depth, uvit.attention_heads) == (16, 4)
    dit = ArchConfig.paper("dit")
    assert (dit.patch_size, dit.hidden_size, dit.attention_heads, dit.transformer_depth) == (16, 1024, 16, 24)


def test_direct_baseline_ignores_noise_and_time(lite_models):
    m = lite_models["unet"]
    m = with_params(m, {k: v + 0.05 for k, v in m.params.items()})
    r = np.random.default_rng(1)
    cond = r.normal(size=(1, 1, 16, 16)).astype(np.float32)
    a = m.apply(r.normal(size=cond.shape).astype(np.float32), np.array([0.2]), cond)
    b = m.apply(np.zeros_like(cond), np.array([0.9]), cond)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("arch", ["adm", "uvit", "dit"])
def test_diffusion_nets_use_condition_noise_and_time(arch, lite_models):
    m = lite_models[arch]
    r = np.random.default_rng(2)
    m = with_params(m, {k: v + 0.05 * r.normal(size=v.shape).astype(v.dtype) for k, v in m.params.items()})
    z = r.normal(size=(1, 1, 16, 16)).astype(np.float32)
    c = r.normal(size=z.shape).astype(np.float32)
    base = m.apply(z, np.array([0.5]), c)
    assert not np.allclose(base, m.apply(z, np.array([0.5]), -c))
    assert not np.allclose(base, m.apply(-z, np.array([0.5]), c))
    assert not np.allclose(base, m.apply(z, np.array([0.6]), c))


def test_input_contract_errors(lite_models):
    m = lite_models["adm"]
    with pytest.raises(ValueError):
        m.apply(np.zeros((1, 1, 16, 16)), np.array([0.5]), np.zeros((1, 1, 16, 18)))
    with pytest.raises(ValueError):
        m.apply(np.zeros((1, 2, 16, 16)), np.array([0.5]), np.zeros((1, 2, 16, 16)))


def _loss_fn(model, batch, t, eps):
    if not model.config.is_diffusion:
        return lambda p: direct_loss(model, batch, params=p)
    return lambda p: training_loss(model, batch, 0, COS, LossWeightConfig(), params=p, t=t, eps=eps)


def _tiny_batch(size=16, n=2, dtype=np.float32):
    r = np.random.default_rng(0)
    src = r.uniform(-1, 1, (n, 1, size, size))
    batch = {"source": src.astype(dtype), "target": np.tanh(2 * src + 0.3).astype(dtype)}
    return batch, np.linspace(0.3, 0.7, n), r.standard_normal(src.shape).astype(dtype)


def end_to_end_grad_error(arch):
    """Worst relative error of float64 reverse-mode vs central differences on sampled entries."""
    model = build_model(ArchConfig.lite(arch), seed=0, dtype=np.float64)
    r = np.random.default_rng(5)
    # move zero-initialised layers off zero so every parameter receives gradient
    params = {k: v + 0.02 * r.normal(size=v.shape) for k, v in model.params.items()}
    batch, t, eps = _tiny_batch(8, 1, np.float64)
    f = _loss_fn(model, batch, t, eps)
    g = ad.grad(f, params)
    keys = sorted(params)[:: max(1, len(params) // 12)]
    fd = oracles.finite_difference_grad(f, params, h=1e-3, keys=keys, max_entries=4, rng=r)
    worst = 0.0
    for k in keys:
        vals, idx = fd[k]
        sel = np.unravel_index(idx, params[k].shape)
        worst = max(worst, oracles.relative_error(g[k][sel], vals[sel]))
    return worst


@pytest.mark.parametrize("arch", ARCHS)
def test_end_to_end_gradient_float64(arch):
    assert end_to_end_grad_error(arch) <= 1e-4


@functools.lru_cache(maxsize=None)
def overfit_losses(arch, steps=200):
    """Adam at lr 1e-4 on one fixed batch with fixed (t, eps); cached so the acceptance run can reuse it."""
    model = build_model(ArchConfig.lite(arch), seed=0)
    batch, t, eps = _tiny_batch()
    f = _loss_fn(model, batch, t, eps)
    params, opt = model.params, AdamState.zeros_like(model.params)
    losses = []
    for _ in range(steps):
        loss, g = ad.value_and_grad(f, params)
        params, opt = adam_step(params, g, opt)
        losses.append(float(loss))
    return tuple(losses)


@pytest.mark.parametrize("arch", ARCHS)
def test_overfit_tiny_batch(arch):
    losses = overfit_losses(arch)
    assert losses[-1] <= 0.5 * losses[0], (losses[0], losses[-1])


def test_training_pipeline_bitwise_reproducible():
    def run():
        model = build_model(ArchConfig.lite("dit"), seed=1)
        batch, t, eps = _tiny_batch(8)
        f = _loss_fn(model, batch, t, eps)
        p, opt = model.params, AdamState.zeros_like(model.params)
        for _ in range(3):
            _, g = ad.value_and_grad(f, p)
            p, opt = adam_step(p, g, opt)
        return p

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)
