import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from hsfuse.diffusion import (
    FUSION_STRATEGIES,
    AdaptiveFusion,
    DiffusionSchedule,
    Encoder,
    FusionUNet,
    ResBlock,
    Up,
    forward_diffuse,
    make_fusion,
    make_schedule,
    timestep_embedding,
)
from hsfuse.errors import ConfigError


# ---- schedule ------------------------------------------------------------


def test_single_step_schedule():
    s = make_schedule(1, 0.1, 0.5)
    assert s.beta.tolist() == [0.1]
    assert s.alpha_bar[0] == pytest.approx(0.9)


def test_default_schedule_against_product_loop():
    s = make_schedule(1000, 1e-4, 0.02)
    prod, ref = 1.0, []
    for i in range(1000):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
        ref.append(prod)
    assert np.allclose(s.alpha_bar, ref, rtol=1e-12)
    assert s.alpha_bar[999] < 0.01
    assert s.alpha_bar[0] == 1 - s.beta[0]
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.beta) >= 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


# ---- forward diffusion ---------------------------------------------------


def test_zero_beta_schedule_is_identity():
    s = DiffusionSchedule(beta=np.zeros(5), alpha_bar=np.ones(5))
    x0 = np.random.default_rng(0).random((3, 4))
    noise = np.random.default_rng(1).random((3, 4))
    for t in range(1, 6):
        assert np.array_equal(forward_diffuse(x0, t, noise, s), x0)


def test_zero_signal_gives_scaled_noise():
    s = make_schedule(50, 1e-4, 0.02)
    noise = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    t = np.array([7, 40])
    out = forward_diffuse(torch.zeros_like(noise), t, noise, s)
    scale = torch.from_numpy(np.sqrt(1 - s.alpha_bar[t - 1])).view(2, 1, 1, 1)
    assert torch.equal(out, scale * noise)


def test_forward_diffuse_errors():
    s = make_schedule(10, 1e-4, 0.02)
    with pytest.raises(ConfigError):
        forward_diffuse(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ConfigError):
        forward_diffuse(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ConfigError):
        forward_diffuse(np.zeros(3), 1, np.zeros(4), s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000))
def test_coefficients_partition_variance(t):
    s = make_schedule(1000, 1e-4, 0.02)
    a = s.alpha_bar[t - 1]
    assert math.isclose(math.sqrt(a) ** 2 + math.sqrt(1 - a) ** 2, 1.0, rel_tol=0, abs_tol=1e-15)


def test_timestep_embedding_shape_and_determinism():
    t = torch.tensor([1, 5, 1000])
    a, b = timestep_embedding(t, 17), timestep_embedding(t, 17)
    assert a.shape == (3, 17) and torch.equal(a, b)
    assert not torch.equal(a[0], a[1])


# ---- blocks --------------------------------------------------------------


def test_resblock_identity_when_residual_path_is_zeroed():
    block = ResBlock(6, 6).eval()
    for m in (block.conv2,):
        nn.init.zeros_(m.weight)
        nn.init.zeros_(m.bias)
    nn.init.zeros_(block.bn2.bias)
    x = torch.randn(2, 6, 7, 7)
    assert torch.equal(block(x), x)


def test_encoder_rejects_small_patches():
    enc = Encoder(3, (4, 8, 8), 8)
    with pytest.raises(ConfigError, match="spatial"):
        enc(torch.randn(1, 3, 3, 3), torch.zeros(1, 8))


def test_upsample_of_constants_stays_constant():
    up = Up(2, 2, 3, 4)
    with torch.no_grad():
        up.merge.weight.zero_()
        up.merge.bias.zero_()
        # merge = plain sum of all input channels at the centre tap
        up.merge.weight[:, :, 1, 1] = 1.0
        up.time.weight.zero_()
        up.time.bias.zero_()
    x = torch.full((1, 2, 4, 4), 2.0)
    skip = torch.full((1, 2, 7, 7), 3.0)
    out = up(x, skip, torch.zeros(1, 4))
    # centre tap only, so padding never enters: every pixel is 2*2 + 2*3
    assert out.shape == (1, 3, 7, 7)
    assert torch.allclose(out, torch.full_like(out, 10.0))


# ---- fusion --------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rdaf_masks_partition_unity(seed):
    torch.manual_seed(seed)
    fuse = AdaptiveFusion(8, 16).double()
    a, b = torch.randn(2, 2, 8, 3, 3, dtype=torch.float64) * 5
    fused, (mh, ml) = fuse(a, b)
    assert fused.shape == (2, 16, 3, 3)
    assert torch.all((mh > 0) & (mh < 1))
    assert torch.max(torch.abs(mh + ml - 1)) <= 1e-6


def test_rdaf_saturated_mask_matches_manual_softmax():
    fuse = AdaptiveFusion(4, 8).double()
    with torch.no_grad():
        fuse.mask_conv.weight.zero_()
        fuse.mask_conv.bias.copy_(torch.tensor([10.0, -10.0]))
    a = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    b = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    fused, (mh, _) = fuse(a, b)
    oracle = math.exp(10) / (math.exp(10) + math.exp(-10))
    assert torch.allclose(mh, torch.full_like(mh, oracle), rtol=0, atol=1e-15)
    assert mh.min() >= 0.9999
    ref = fuse.merge(torch.cat([a, torch.zeros_like(b)], dim=1))
    assert torch.allclose(fused, ref, atol=1e-6)


def test_mask_argmax_shift_invariance():
    logits = torch.randn(3, 2, 4, 4)
    a = torch.softmax(logits, 1).argmax(1)
    b = torch.softmax(logits + 7.5, 1).argmax(1)
    assert torch.equal(a, b)


def test_rdaf_shape_mismatch():
    with pytest.raises(ConfigError):
        AdaptiveFusion(4, 8)(torch.randn(1, 4, 3, 3), torch.randn(1, 4, 4, 4))


def test_unknown_fusion_strategy():
    with pytest.raises(ConfigError):
        make_fusion("attention", 4, 8)


# ---- full U-Net shape contract -------------------------------------------


def _ceil_half(n):
    return (n + 1) // 2


@pytest.mark.parametrize("patch", [9, 13, 25])
def test_shape_contract(patch):
    d, B = 15, 2
    net = FusionUNet(d).eval()
    x_h, x_l = torch.randn(B, d, patch, patch), torch.randn(B, 1, patch, patch)
    t = torch.tensor([1, 500])
    with torch.no_grad():
        out, trace = net(x_h, x_l, t)
    q = _ceil_half(_ceil_half(patch))
    assert [s.shape for s in trace.skips_hsi] == [(B, 32, patch, patch), (B, 64, _ceil_half(patch), _ceil_half(patch))]
    assert trace.x_hsi_enc.shape == (B, 64, q, q) == trace.x_lid_enc.shape
    assert trace.fused.shape == (B, 128, q, q)
    assert trace.masks[0].shape == (B, 1, q, q)
    assert out.x_hsi_dec.shape == (B, 32, patch, patch) == out.x_lid_dec.shape
    assert out.f_fus_de.shape == (B, 96, patch, patch)
    assert out.n_hsi_pred.shape == x_h.shape
    assert out.n_lid_pred.shape == x_l.shape


def test_default_bottleneck_for_25_is_7():
    net = FusionUNet(15).eval()
    with torch.no_grad():
        trace = net.encode(torch.randn(1, 15, 25, 25), torch.randn(1, 1, 25, 25), torch.tensor([3]))
    assert trace.x_hsi_enc.shape[-2:] == (7, 7)


@pytest.mark.parametrize("strategy", FUSION_STRATEGIES)
def test_every_fusion_strategy_runs(strategy):
    net = FusionUNet(3, (4, 8, 8), (8, 4, 4), 6, 8, strategy)
    out, trace = net(torch.randn(2, 3, 9, 9), torch.randn(2, 1, 9, 9), torch.tensor([1, 2]))
    assert out.f_fus_de.shape == (2, 12, 9, 9)
    assert (trace.masks is not None) == (strategy == "rdaf")
    out.f_fus_de.sum().backward()


def test_none_fusion_keeps_modalities_apart():
    torch.manual_seed(0)
    net = FusionUNet(3, (4, 8, 8), (8, 4, 4), 6, 8, "none").eval()
    x_h, x_l, t = torch.randn(1, 3, 9, 9), torch.randn(1, 1, 9, 9), torch.tensor([1])
    with torch.no_grad():
        a, _ = net(x_h, x_l, t)
        b, _ = net(x_h, x_l + 1.0, t)
    assert torch.equal(a.x_hsi_dec, b.x_hsi_dec)
    assert not torch.equal(a.x_lid_dec, b.x_lid_dec)


def test_inference_is_deterministic():
    net = FusionUNet(3, (4, 8, 8), (8, 4, 4), 6, 8).eval()
    x_h, x_l, t = torch.randn(2, 3, 9, 9), torch.randn(2, 1, 9, 9), torch.tensor([4, 9])
    with torch.no_grad():
        a, _ = net(x_h, x_l, t)
        b, _ = net(x_h, x_l, t)
    assert torch.equal(a.f_fus_de, b.f_fus_de)
