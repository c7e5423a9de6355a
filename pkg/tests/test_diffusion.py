import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ute_toy.diffusion import (
    NonFiniteSampleError,
    UNet,
    UnetConfig,
    add_noise,
    attention,
    ddim_sample,
    ddim_timesteps,
    downsample_mask,
    initial_noise,
    make_schedule,
)

from conftest import TINY_UNET


def test_schedule_endpoints():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bars[0].item() == 1.0
    assert math.isclose(s.alpha_bars[1].item(), 1 - 1e-4, rel_tol=0, abs_tol=1e-15)
    assert s.alpha_bars[1000].item() < 0.01
    assert torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1])


def test_schedule_single_step():
    s = make_schedule(1, 0.1, 0.1)
    assert s.T == 1
    assert math.isclose(s.alpha_bars[1].item(), 0.9)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_invalid(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_add_noise_t0_is_identity():
    s = make_schedule(50, 1e-3, 0.2)
    z0 = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    assert torch.equal(add_noise(z0, torch.randn_like(z0), 0, s), z0)


def test_add_noise_zero_eps():
    s = make_schedule(50, 1e-3, 0.2)
    z0 = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    out = add_noise(z0, torch.zeros_like(z0), 17, s)
    assert torch.allclose(out, s.alpha_bars[17].sqrt() * z0, atol=1e-12)


def test_add_noise_variance():
    s = make_schedule(1000, 1e-4, 0.02)
    t = 500
    z0 = torch.full((100_000,), 0.7, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    z = add_noise(z0, torch.randn(z0.shape, generator=gen, dtype=torch.float64), t, s)
    expected = 1 - s.alpha_bars[t].item()
    assert abs(z.var().item() - expected) / expected < 0.02
    assert abs(z.mean().item() - s.alpha_bars[t].sqrt().item() * 0.7) < 0.01


def test_add_noise_shape_mismatch():
    s = make_schedule(10, 1e-3, 0.2)
    with pytest.raises(ValueError, match="shape"):
        add_noise(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 7), 1, s)


def test_add_noise_timestep_range():
    s = make_schedule(10, 1e-3, 0.2)
    with pytest.raises(ValueError, match="range"):
        add_noise(torch.zeros(1, 4), torch.zeros(1, 4), 11, s)


def test_attention_two_by_two():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    v = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    a = math.exp(1 / math.sqrt(2))
    expected = torch.tensor([[a / (a + 1), 1 / (a + 1)]], dtype=torch.float64)
    out = attention(q, k, v)
    assert torch.allclose(out, expected, atol=1e-6)
    assert torch.allclose(out, torch.tensor([[0.6698, 0.3302]], dtype=torch.float64), atol=1e-4)


def test_attention_single_token_returns_value():
    gen = torch.Generator().manual_seed(1)
    q, k, v = (torch.randn(3, 1, 5, generator=gen) for _ in range(3))
    assert torch.allclose(attention(q, k, v), v.expand(3, 1, 5))


def test_attention_zero_query_is_mean():
    gen = torch.Generator().manual_seed(2)
    k, v = torch.randn(6, 4, generator=gen), torch.randn(6, 3, generator=gen)
    out = attention(torch.zeros(2, 4), k, v)
    assert torch.allclose(out, v.mean(0).expand(2, 3), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), m=st.integers(1, 6), scale=st.floats(0.1, 30.0))
def test_attention_is_convex_combination(seed, n, m, scale):
    gen = torch.Generator().manual_seed(seed)
    q = scale * torch.randn(n, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(m, 4, generator=gen, dtype=torch.float64)
    v = torch.randn(m, 3, generator=gen, dtype=torch.float64)
    out = attention(q, k, v)
    assert torch.all(out <= v.max(0).values + 1e-9)
    assert torch.all(out >= v.min(0).values - 1e-9)
    # rows of the weight matrix sum to one
    assert torch.allclose(attention(q, k, torch.ones(m, 1, dtype=torch.float64)), torch.ones(n, 1, dtype=torch.float64))


def test_attention_shape_errors():
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 4), torch.zeros(3, 5), torch.zeros(3, 2))
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 4), torch.zeros(3, 4), torch.zeros(2, 2))


def _unet(**overrides):
    torch.manual_seed(0)
    return UNet(UnetConfig(**{**TINY_UNET, **overrides})).eval()


def _inputs(n=2, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, 4, 8, 8, generator=gen, dtype=dtype)
    xm = torch.randn(n, 4, 8, 8, generator=gen, dtype=dtype)
    m = torch.zeros(n, 1, 8, 8, dtype=dtype)
    m[:, :, 2:5, 1:7] = 1
    eg = torch.randn(n, 16, 16, generator=gen, dtype=dtype)
    return z, torch.full((n,), 5), xm, m, eg


def test_unet_output_shape():
    z, t, xm, m, eg = _inputs()
    assert _unet()(z, t, xm, m, eg).shape == z.shape
    assert UnetConfig().in_channels == 9


def test_unet_rejects_wrong_channels():
    z, t, xm, m, eg = _inputs()
    with pytest.raises(ValueError):
        _unet()(torch.cat([z, z[:, :1]], 1), t, torch.cat([xm, xm[:, :1]], 1), m, eg)


def test_unet_rejects_bad_mask_shape():
    z, t, xm, m, eg = _inputs()
    with pytest.raises(ValueError, match="mask"):
        _unet()(z, t, xm, m[:, :, :4], eg)


def test_unet_needs_cross_attention():
    with pytest.raises(ValueError):
        UnetConfig(attention_levels=())


def test_unet_sensitive_to_glyph_and_position():
    net = _unet()
    z, t, xm, m, eg = _inputs()
    base = net(z, t, xm, m, eg)
    assert not torch.allclose(base, net(z, t, xm, m, eg + 1.0))
    moved = torch.roll(m, shifts=2, dims=3)
    assert not torch.allclose(base, net(z, t, xm, moved, eg))


def test_unet_ablation_flags_remove_inputs():
    z, t, xm, m, eg = _inputs()
    no_glyph = _unet(use_glyph=False)
    assert torch.equal(no_glyph(z, t, xm, m, eg), no_glyph(z, t, xm, m, eg + 1.0))
    no_pos = _unet(use_position=False)
    assert torch.equal(no_pos(z, t, xm, m, eg), no_pos(z, t, xm * 2, torch.roll(m, 2, 3), eg))


def test_downsample_mask_any_pixel():
    mask = torch.zeros(1, 1, 16, 16)
    mask[0, 0, 9, 3] = 1
    lat = downsample_mask(mask, 8)
    assert lat.shape == (1, 1, 2, 2)
    assert lat[0, 0].tolist() == [[0, 0], [1, 0]]


def test_ddim_timesteps():
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))
    assert ddim_timesteps(10, 1) == [10]
    assert ddim_timesteps(100, 4) == [100, 75, 50, 25]
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_ddim_zero_predictor_closed_form():
    s = make_schedule(50, 1e-3, 0.2)
    z_T = initial_noise((3, 4, 8, 8), 4).double()

    def zero(z, t, *rest):
        return torch.zeros_like(z)

    out = ddim_sample(zero, torch.zeros_like(z_T), torch.zeros(3, 1, 8, 8, dtype=torch.float64),
                      torch.zeros(3, 2, 2, dtype=torch.float64), s, 50, z_T=z_T)
    assert torch.allclose(out, z_T / s.alpha_bars[50].sqrt(), atol=1e-5, rtol=0)


def test_ddim_single_step_inverts_forward_process():
    s = make_schedule(30, 1e-3, 0.2)
    gen = torch.Generator().manual_seed(3)
    z0 = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64)
    z_T = add_noise(z0, eps, 30, s)

    def oracle(z, t, *rest):
        return eps

    out = ddim_sample(oracle, z0, torch.zeros(2, 1, 8, 8, dtype=torch.float64),
                      torch.zeros(2, 1, 1, dtype=torch.float64), s, 1, z_T=z_T)
    assert torch.allclose(out, z0, atol=1e-10)


def test_ddim_is_deterministic_and_batch_independent():
    net = _unet()
    s = make_schedule(10, 1e-3, 0.2)
    _, _, xm, m, eg = _inputs(n=3)
    a = ddim_sample(net, xm, m, eg, s, 10, seed=[5, 6, 7])
    b = ddim_sample(net, xm, m, eg, s, 10, seed=[5, 6, 7])
    assert torch.equal(a, b)
    single = ddim_sample(net, xm[1:2], m[1:2], eg[1:2], s, 10, seed=[6])
    assert torch.allclose(single, a[1:2], atol=1e-5)


def test_ddim_aborts_on_nan():
    s = make_schedule(10, 1e-3, 0.2)

    def broken(z, t, *rest):
        return torch.full_like(z, float("nan"))

    with pytest.raises(NonFiniteSampleError, match="non-finite"):
        ddim_sample(broken, torch.zeros(1, 4, 8, 8), torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 1), s, 10)


def test_initial_noise_per_sample():
    a = initial_noise((2, 4, 8, 8), [1, 2])
    b = initial_noise((1, 4, 8, 8), [2])
    assert torch.equal(a[1], b[0])
    assert np.isclose(initial_noise((64, 4, 8, 8), 0).std().item(), 1.0, atol=0.05)
