"""Timestep embedding, cross-attention conditioning, and U-Net contracts."""

import numpy as np
import pytest

from slotkit import tensor as tt
from slotkit.denoiser import (CrossAttention, TimeEmbedding, UNet, UNetConfig,
                              timestep_embedding)
from slotkit.rng import Rng
from slotkit.tensor import ContractError, DimensionError, Tensor


class TestTimestepEmbedding:
    def test_zero_step_sin_cos_pattern(self):
        emb = timestep_embedding([0], 16)[0]
        assert np.array_equal(emb[0::2], np.zeros(8))
        assert np.array_equal(emb[1::2], np.ones(8))

    def test_all_training_steps_distinct(self):
        embs = timestep_embedding(np.arange(1, 1001), 64)
        assert np.unique(embs, axis=0).shape[0] == 1000

    def test_deterministic(self):
        assert np.array_equal(timestep_embedding([3, 9], 32),
                              timestep_embedding([3, 9], 32))

    def test_odd_dim_rejected(self):
        with pytest.raises(ContractError):
            timestep_embedding([1], 7)

    def test_mlp_wrapper_shape(self):
        te = TimeEmbedding(16, Rng(0))
        assert te(np.array([1, 2, 3])).shape == (3, 16)


def tiny_cross(seed=0, channels=8, d_cond=6, heads=2):
    return CrossAttention(channels, d_cond, heads, Rng(seed))


class TestCrossAttention:
    def test_slot_order_invariance(self):
        ca = tiny_cross()
        rng = np.random.default_rng(1)
        cmap = Tensor(rng.normal(size=(2, 5, 8)).astype(np.float32))
        slots = Tensor(rng.normal(size=(2, 4, 6)).astype(np.float32))
        out = ca(cmap, slots)
        out_p = ca(cmap, Tensor(slots.data[:, [3, 0, 2, 1]]))
        np.testing.assert_allclose(out_p.data, out.data, atol=1e-5)

    def test_single_slot_closed_form(self):
        ca = tiny_cross(seed=2)
        rng = np.random.default_rng(3)
        cmap = Tensor(rng.normal(size=(1, 4, 8)).astype(np.float32))
        slots = Tensor(rng.normal(size=(1, 1, 6)).astype(np.float32))
        # softmax over a single key is exactly 1: output = residual + out(V(slot))
        v = ca.proj_v(ca.norm_c(slots))
        expect = cmap + ca.proj_out(tt.expand(v, (1, 4, 8)))
        np.testing.assert_allclose(ca(cmap, slots).data, expect.data, atol=1e-6)

    def test_zero_value_projection_is_identity(self):
        ca = tiny_cross(seed=4)
        ca.proj_v.w.data[:] = 0.0
        rng = np.random.default_rng(5)
        cmap = Tensor(rng.normal(size=(2, 5, 8)).astype(np.float32))
        slots = Tensor(rng.normal(size=(2, 3, 6)).astype(np.float32))
        np.testing.assert_allclose(ca(cmap, slots).data, cmap.data, atol=0)

    def test_empty_and_none_slots_pass_through(self):
        ca = tiny_cross(seed=6)
        cmap = Tensor(np.random.default_rng(7).normal(size=(2, 5, 8)).astype(np.float32))
        assert np.array_equal(ca(cmap, None).data, cmap.data)
        empty = Tensor(np.zeros((2, 0, 6), dtype=np.float32))
        assert np.array_equal(ca(cmap, empty).data, cmap.data)

    def test_variable_slot_count_accepted(self):
        ca = tiny_cross(seed=8)
        cmap = Tensor(np.random.default_rng(9).normal(size=(1, 5, 8)).astype(np.float32))
        for n in (1, 2, 7):
            slots = Tensor(np.random.default_rng(n).normal(size=(1, n, 6)).astype(np.float32))
            assert ca(cmap, slots).shape == (1, 5, 8)


def tiny_unet(seed=0, in_ch=2, width=8, mults=(1, 2), attn=(1,), d_cond=6,
              randomize_head=True):
    cfg = UNetConfig(in_channels=in_ch, base_width=width, channel_mults=mults,
                     attn_levels=attn, time_dim=16, heads=2, d_cond=d_cond, groups=2)
    net = UNet(cfg, rng=Rng(seed))
    if randomize_head:
        net.head.w.data = np.random.default_rng(seed + 1).normal(
            size=net.head.w.shape).astype(net.head.w.data.dtype) * 0.2
    return net


class TestUNet:
    def test_output_shape_matches_input(self):
        for mults, hw in (((1,), 4), ((1, 2), 8), ((1, 2, 2), 16)):
            net = tiny_unet(mults=mults, attn=(len(mults) - 1,))
            z = Tensor(np.random.default_rng(0).normal(size=(2, 2, hw, hw)).astype(np.float32))
            slots = Tensor(np.random.default_rng(1).normal(size=(2, 3, 6)).astype(np.float32))
            assert net(z, np.array([1, 2]), slots).shape == (2, 2, hw, hw)

    def test_zero_initialized_head_outputs_zero(self):
        net = tiny_unet(randomize_head=False)
        z = Tensor(np.random.default_rng(2).normal(size=(1, 2, 8, 8)).astype(np.float32))
        out = net(z, np.array([3]), None)
        assert np.array_equal(out.data, np.zeros_like(out.data))

    def test_slot_permutation_invariance(self):
        net = tiny_unet(seed=3)
        rng = np.random.default_rng(4)
        z = Tensor(rng.normal(size=(2, 2, 8, 8)).astype(np.float32))
        slots = rng.normal(size=(2, 4, 6)).astype(np.float32)
        out = net(z, np.array([5, 9]), Tensor(slots))
        out_p = net(z, np.array([5, 9]), Tensor(slots[:, [2, 3, 1, 0]]))
        np.testing.assert_allclose(out_p.data, out.data, atol=1e-5)

    def test_zero_slots_equal_no_conditioning(self):
        net = tiny_unet(seed=5)
        z = Tensor(np.random.default_rng(6).normal(size=(1, 2, 8, 8)).astype(np.float32))
        zero_slots = Tensor(np.zeros((1, 1, 6), dtype=np.float32))
        a = net(z, np.array([4]), zero_slots)
        b = net(z, np.array([4]), None)
        np.testing.assert_allclose(a.data, b.data, atol=0)

    def test_incompatible_latent_rejected(self):
        net = tiny_unet(mults=(1, 2))
        with pytest.raises(DimensionError):
            net(Tensor(np.zeros((1, 2, 5, 5), dtype=np.float32)), np.array([1]), None)
        with pytest.raises(DimensionError):
            net(Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32)), np.array([1]), None)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            UNetConfig(channel_mults=(1,), attn_levels=(1,)).validate()
        with pytest.raises(ContractError):
            UNetConfig(base_width=6, groups=4).validate()
        with pytest.raises(ContractError):
            UNetConfig(time_dim=15).validate()

    def test_full_gradient_check_on_tiny_latent(self, f64):
        # every parameter of a depth-1 denoiser against central differences
        net = tiny_unet(seed=7, width=4, mults=(1,), attn=(0,), d_cond=4)
        rng = np.random.default_rng(8)
        z = Tensor(rng.normal(size=(1, 2, 2, 2)))
        slots = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
        eps = Tensor(rng.normal(size=(1, 2, 2, 2)))
        params = [slots] + net.parameters()

        def loss(*_):
            diff = net(z, np.array([3]), slots) - eps
            return (diff * diff).mean()

        assert tt.grad_check(loss, params) < 1e-4
