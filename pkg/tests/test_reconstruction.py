import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cloudfuse import blocks
from cloudfuse import reconstruction as rc
from cloudfuse.errors import ShapeError
from cloudfuse.fusion_net import MICRO, FusionConfig

TOL = dict(atol=1e-6, rtol=0)


def conv_ref(layer, x):
    return F.conv2d(x, layer.weight, layer.bias, padding=layer.padding)


def randomize(module):
    with torch.no_grad():
        for p in module.parameters():
            p.normal_(0, 0.2)
    return module


class TestGff:
    def test_zero_weights_return_skip(self):
        gff = rc.GlobalFeatureFusion(8, 2)
        for p in gff.parameters():
            p.data.zero_()
        f0 = torch.randn(1, 8, 4, 4)
        assert torch.equal(gff([torch.randn(1, 8, 4, 4)] * 2, f0), f0)

    def test_single_depth_width(self):
        assert rc.GlobalFeatureFusion(8, 1).conv1x1.in_channels == 8

    def test_two_maps_match_composition(self):
        gff = randomize(rc.GlobalFeatureFusion(8, 2).double())
        a, b, f0 = torch.randn(3, 1, 8, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            expected = conv_ref(gff.conv3x3, conv_ref(gff.conv1x1, torch.cat([a, b], 1))) + f0
            torch.testing.assert_close(gff([a, b], f0), expected, **TOL)

    def test_inconsistent_shapes(self):
        gff = rc.GlobalFeatureFusion(8, 2)
        with pytest.raises(ShapeError):
            gff([torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 2, 2)], torch.zeros(1, 8, 4, 4))
        with pytest.raises(ShapeError):
            gff([torch.zeros(1, 8, 4, 4)], torch.zeros(1, 8, 4, 4))


class TestIrn:
    @pytest.mark.parametrize("s", [1, 2, 4])
    def test_output_scale(self, s):
        irn = rc.ImageReconstruction(8, s)
        assert irn.pre.out_channels == 13 * s * s
        assert irn(torch.randn(1, 8, 3, 5)).shape == (1, 13, 3 * s, 5 * s)

    def test_zero_post_weights_give_bias(self):
        irn = rc.ImageReconstruction(8, 2)
        with torch.no_grad():
            irn.post.weight.zero_()
            irn.post.bias.fill_(0.25)
        assert torch.equal(irn(torch.randn(1, 8, 4, 4)), torch.full((1, 13, 8, 8), 0.25))

    def test_matches_composition(self):
        irn = randomize(rc.ImageReconstruction(8, 2).double())
        x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            expected = conv_ref(irn.post, blocks.reformat_inv(conv_ref(irn.pre, x), 2))
            torch.testing.assert_close(irn(x), expected, **TOL)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            rc.ImageReconstruction(8, 2)(torch.zeros(1, 4, 4, 4))


class TestPredict:
    def test_zero_residual_is_input(self):
        x = torch.rand(1, 13, 4, 4)
        assert torch.equal(rc.predict(torch.zeros_like(x), x), x)

    def test_residual_reaches_ground_truth(self):
        x = torch.rand(1, 13, 4, 4, dtype=torch.float64)
        gt = torch.rand(1, 13, 4, 4, dtype=torch.float64)
        torch.testing.assert_close(rc.predict(gt - x, x), gt)

    def test_unclipped_until_export(self):
        x = torch.full((1, 13, 2, 2), 0.9)
        pred = rc.predict(torch.full_like(x, 0.4), x)
        assert pred.max() > 1.0
        out = rc.export(pred)
        assert out.dtype == np.float32
        assert out.max() == 1.0

    def test_export_clips_scalars(self):
        np.testing.assert_array_equal(rc.export(np.array([1.3, -0.2, 0.5])), np.array([1.0, 0.0, 0.5], np.float32))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rc.predict(torch.zeros(1, 13, 4, 4), torch.zeros(1, 13, 2, 2))


class TestModel:
    @pytest.mark.parametrize("cfg", [MICRO, dataclasses.replace(MICRO, s=1, N=2), dataclasses.replace(MICRO, s=4)])
    def test_output_shape(self, cfg):
        model = rc.build_model(cfg, zero_final=False)
        h = 2 * cfg.multiple
        assert model(torch.rand(1, 13, h, h), torch.rand(1, 2, h, h)).shape == (1, 13, h, h)

    def test_identity_at_init(self):
        model = rc.build_model(MICRO, seed=3)
        opt, sar = torch.rand(2, 13, 16, 16), torch.rand(2, 2, 16, 16)
        with torch.no_grad():
            assert torch.equal(model(opt, sar), opt)

    def test_zero_reconstruction_params_identity(self):
        model = rc.build_model(MICRO, zero_final=False)
        for p in list(model.gff.parameters()) + list(model.irn.parameters()):
            p.data.zero_()
        opt = torch.rand(1, 13, 16, 16)
        with torch.no_grad():
            assert torch.equal(model(opt, torch.rand(1, 2, 16, 16)), opt)

    def test_init_is_seeded(self):
        a = rc.build_model(MICRO, seed=1).state_dict()
        b = rc.build_model(MICRO, seed=1).state_dict()
        c = rc.build_model(MICRO, seed=2).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert any(not torch.equal(a[k], c[k]) for k in a)

    def test_fan_in_bounds(self):
        model = rc.build_model(FusionConfig(), zero_final=False)
        for name, p in model.named_parameters():
            if name.endswith("weight") and p.dim() > 1:
                assert p.abs().max() <= 1 / np.sqrt(p[0].numel()), name

    def test_full_pipeline_gradient(self):
        model = rc.build_model(MICRO, seed=0, dtype=torch.float64, zero_final=False)
        opt = torch.rand(1, 13, 16, 16, dtype=torch.float64)
        sar = torch.rand(1, 2, 16, 16, dtype=torch.float64)
        res = blocks.grad_check(model, [opt, sar], model, max_coords=5)
        assert res.max_rel_error < 1e-4, res.per_tensor
