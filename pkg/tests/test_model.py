import re

import numpy as np
import pytest

from riinterp import nd
from riinterp.layers import conv
from riinterp.flow import FlowConfig, FlowNet, downsample_mask, estimate_bidirectional, estimate_flow, normalize_stack
from riinterp.model import (InterpModel, ModelConfig, SAC_BLOCKS, extract_features, refine, sac_forward,
                            sac_gate, scale_flows, unet_forward)
from riinterp.nd import Tensor
from riinterp.projection import ProjectionConfig, range_image_from_range

CFG = ProjectionConfig(32, 64)
TOY = ModelConfig.scaled(8)


def random_ri(rng, cfg=CFG, hole=0.1):
    r = rng.uniform(2.0, 60.0, (cfg.h, cfg.w))
    return range_image_from_range(r, rng.random((cfg.h, cfg.w)) > hole, cfg)


def small_flow_net(seed=0):
    return FlowNet(TOY.flow, seed=seed)


class TestFlowNet:
    def test_pyramid_shapes(self):
        net = FlowNet(FlowConfig(), seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 64, 256)).astype(np.float32))
        pyr = net.build_pyramid(x)
        assert [p.shape for p in pyr] == [(16, 32, 128), (32, 16, 64), (64, 8, 32), (96, 4, 16)]

    def test_pyramid_constant_input_finite(self):
        pyr = small_flow_net().build_pyramid(Tensor(np.ones((4, 32, 64), np.float32)))
        assert all(np.all(np.isfinite(p.data)) for p in pyr)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            small_flow_net().build_pyramid(Tensor(np.ones((4, 24, 64), np.float32)))

    def test_output_shapes_finite(self):
        rng = np.random.default_rng(1)
        flows = estimate_flow(random_ri(rng), random_ri(rng), small_flow_net())
        assert [f.shape for f in flows] == [(2, 2, 4), (2, 4, 8), (2, 8, 16), (2, 16, 32)]
        assert all(np.all(np.isfinite(f.data)) for f in flows)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = random_ri(rng), random_ri(rng)
        net = small_flow_net()
        f01, f10 = estimate_bidirectional(a, b, net)
        g01, g10 = estimate_bidirectional(b, a, net)
        for x, y in zip(f01 + f10, g10 + g01):
            np.testing.assert_array_equal(x.data, y.data)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a, b = random_ri(rng), random_ri(rng)
        x = estimate_flow(a, b, small_flow_net(5))[-1].data
        y = estimate_flow(a, b, small_flow_net(5))[-1].data
        np.testing.assert_array_equal(x, y)

    def test_config_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            estimate_flow(random_ri(rng), random_ri(rng, ProjectionConfig(32, 128)), small_flow_net())

    def test_gradients_reach_all_params(self):
        rng = np.random.default_rng(5)
        net = small_flow_net()
        f01, f10 = estimate_bidirectional(random_ri(rng), random_ri(rng), net)
        loss = nd.tsum(nd.charbonnier(nd.concat([nd.reshape(f, (-1,)) for f in f01 + f10], axis=0) - 0.3))
        nd.backward(loss, net.params.values())
        for name, p in net.params.items():
            assert np.any(p.grad != 0), name

    def test_downsample_mask_strict(self):
        m = np.ones((4, 4), bool)
        m[0, 0] = False
        assert downsample_mask(m, 1).tolist() == [[False, True], [True, True]]
        assert downsample_mask(m, 2).tolist() == [[False]]


class TestSac:
    def test_saturated_gate_is_plain_conv(self):
        rng = np.random.default_rng(6)
        model = InterpModel(TOY, seed=0)
        ps = model.params
        name = "interp.extractor.sac0"
        ps[f"{name}.gate.bias"].data[:] = 50.0
        feats = Tensor(rng.normal(size=(TOY.features, 8, 8)).astype(np.float32))
        raw = Tensor(rng.normal(size=(4, 8, 8)).astype(np.float32) * 0.1)
        np.testing.assert_allclose(sac_forward(feats, raw, ps, name).data, conv(ps, f"{name}.conv", feats).data,
                                   rtol=1e-6, atol=1e-6)

    def test_zero_raw_half_gate(self):
        model = InterpModel(TOY, seed=0)
        gate = sac_gate(Tensor(np.zeros((4, 8, 8), np.float32)), model.params, "interp.extractor.sac1")
        np.testing.assert_allclose(gate.data, 0.5)

    def test_shape_mismatch(self):
        model = InterpModel(TOY, seed=0)
        with pytest.raises(ValueError):
            sac_forward(Tensor(np.zeros((TOY.features, 8, 8))), Tensor(np.zeros((4, 4, 4))), model.params,
                        "interp.extractor.sac0")

    def test_gradients_reach_both_branches(self):
        rng = np.random.default_rng(7)
        model = InterpModel(TOY, seed=0)
        raw = Tensor(rng.normal(size=(4, 8, 8)).astype(np.float32))
        out = extract_features(raw, model.params)
        assert out.shape == (TOY.features, 8, 8)
        nd.backward(nd.tsum(out), model.params.values())
        for b in range(SAC_BLOCKS):
            for part in ("gate", "conv"):
                assert np.any(model.params[f"interp.extractor.sac{b}.{part}.weight"].grad != 0)


class TestScaleFlows:
    def test_endpoints_and_midpoint(self):
        f = Tensor(np.random.default_rng(8).normal(size=(2, 4, 4)))
        a, b = scale_flows(f, f, 0.0)
        assert np.all(a.data == 0)
        a, b = scale_flows(f, f, 1.0)
        assert np.all(b.data == 0)
        a, b = scale_flows(f, f, 0.5)
        np.testing.assert_array_equal(a.data, f.data * 0.5)

    @pytest.mark.parametrize("t", [-0.1, 1.5])
    def test_out_of_range(self, t):
        f = Tensor(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            scale_flows(f, f, t)


class TestInterpModel:
    def test_structure(self):
        ps = InterpModel(ModelConfig(), seed=0).params
        names = list(ps)
        sac = {n.split(".")[2] for n in names if re.match(r"interp\.extractor\.sac\d+\.", n)}
        assert len(sac) == 3
        for net in ("presynth", "refine"):
            enc = {n.split(".")[2] for n in names if re.match(rf"interp\.{net}\.enc\d+\.", n)}
            dec = {n.split(".")[2] for n in names if re.match(rf"interp\.{net}\.dec\d+\.", n)}
            assert len(enc) == 6 and len(dec) == 5
        assert not [n for n in names if re.search(r"norm|bn|gamma|beta|running", n)]
        assert ps["interp.presynth.enc0.weight"].shape[1] == 74
        assert ps["interp.refine.enc0.weight"].shape[1] == 9
        assert ps["interp.extractor.conv.weight"].shape == (32, 4, 3, 3)
        assert ps["interp.extractor.sac0.gate.weight"].shape == (32, 4, 7, 7)

    def test_unets_share_architecture(self):
        ps = InterpModel(ModelConfig(), seed=0).params
        for name, p in ps.items():
            if name.startswith("interp.presynth.") and not name.startswith("interp.presynth.enc0."):
                assert ps[name.replace("presynth", "refine")].shape == p.shape

    def test_refine_zero_residual_at_init(self):
        rng = np.random.default_rng(9)
        model = InterpModel(TOY, seed=0)
        coarse = Tensor(rng.normal(size=(1, 32, 32)).astype(np.float32))
        stack = Tensor(rng.normal(size=(4, 32, 32)).astype(np.float32))
        np.testing.assert_array_equal(refine(coarse, stack, stack, model.params, TOY.unet).data, coarse.data)

    def test_unet_indivisible(self):
        model = InterpModel(TOY, seed=0)
        with pytest.raises(ValueError):
            unet_forward(Tensor(np.zeros((9, 16, 16))), model.params, "interp.refine", TOY.unet)

    def test_synthesize_shapes_and_grads(self):
        rng = np.random.default_rng(10)
        model = InterpModel(TOY, seed=0)
        r0, r1 = random_ri(rng), random_ri(rng)
        syn = model.synthesize(r0, r1, 0.5, train_flow=True)
        assert syn.coarse.shape == syn.fine.shape == (1, 32, 64)
        assert np.all(np.isfinite(syn.fine.data))
        params = list(model.params.values()) + list(model.flow.params.values())
        nd.backward(nd.tsum(nd.charbonnier(syn.coarse - 0.2)) + nd.tsum(nd.charbonnier(syn.fine - 0.2)), params)
        presynth = [n for n in model.params if n.startswith("interp.presynth")]
        assert all(np.any(model.params[n].grad != 0) for n in presynth)
        assert np.any(model.params["interp.refine.head.weight"].grad != 0)
        assert np.any(model.flow.params["flow.context.out.weight"].grad != 0)

    def test_frozen_flow_gets_no_gradient(self):
        rng = np.random.default_rng(11)
        model = InterpModel(TOY, seed=0)
        syn = model.synthesize(random_ri(rng), random_ri(rng), 0.5, train_flow=False)
        nd.backward(nd.tsum(syn.fine), list(model.params.values()) + list(model.flow.params.values()))
        assert all(np.all(p.grad == 0) for p in model.flow.params.values())

    def test_interpolate_output(self):
        rng = np.random.default_rng(12)
        model = InterpModel(TOY, seed=0)
        r0, r1 = random_ri(rng), random_ri(rng)
        out = model.interpolate(r0, r1, 0.3)
        assert out.config == r0.config
        assert np.all(out.range[~out.valid] == 0)
        a = model.interpolate(r0, r1, 0.3)
        np.testing.assert_array_equal(out.data, a.data)
        with pytest.raises(ValueError):
            model.interpolate(r0, r1, 1.2)

    def test_input_checks(self):
        rng = np.random.default_rng(13)
        model = InterpModel(TOY, seed=0)
        with pytest.raises(ValueError):
            model.interpolate(random_ri(rng), random_ri(rng, ProjectionConfig(32, 128)))
        bad = ProjectionConfig(16, 64)
        with pytest.raises(ValueError):
            model.interpolate(random_ri(rng, bad), random_ri(rng, bad))

    def test_normalized_input(self):
        rng = np.random.default_rng(14)
        ri = random_ri(rng)
        x = normalize_stack(ri).data
        assert np.all(x[:, ~ri.valid] == 0)
        np.testing.assert_allclose(x[0][ri.valid], ri.range[ri.valid] / 80.0, rtol=1e-6)
