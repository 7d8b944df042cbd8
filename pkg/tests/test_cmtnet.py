import numpy as np
import pytest
import torch
import torch.nn.functional as F

from busvid import cmtnet
from busvid.errors import ParameterError, ShapeError
from gradcheck import fd_gradient_check


class TestStem:
    def test_micro_shapes(self):
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro()).eval()
        x = net.embed(torch.rand(1, 3, 4, 32, 64))
        assert tuple(x.shape) == (1, 8, 2, 8, 16)

    def test_full_scale_catalogued_shapes(self):
        with torch.device("meta"):
            net = cmtnet.CmtNet(cmtnet.CmtConfig(table1_temporal=True)).eval()
            feats = net.forward_features(torch.zeros(1, 3, 32, 224, 448))
        assert tuple(feats["stem"].shape) == (1, 96, 8, 56, 112)
        stage_shapes = [tuple(t.shape) for t in feats["stage_tokens"]]
        assert stage_shapes == [(1, 8, 56, 112, 96), (1, 8, 28, 56, 192),
                                (1, 8, 14, 28, 384), (1, 8, 7, 14, 768)]
        down_shapes = [tuple(t.shape) for t in feats["downsampled_tokens"]]
        assert down_shapes == [(1, 8, 28, 56, 192), (1, 8, 14, 28, 384),
                               (1, 8, 7, 14, 768)]

    def test_stride_two_variant(self):
        with torch.device("meta"):
            net = cmtnet.CmtNet(cmtnet.CmtConfig()).eval()
            feats = net.forward_features(torch.zeros(1, 3, 32, 224, 448))
        assert tuple(feats["stem"].shape) == (1, 96, 16, 56, 112)

    def test_zero_input_zero_preactivation(self):
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro())
        with torch.no_grad():
            net.stem.bias.zero_()
        assert torch.all(net.stem(torch.zeros(1, 3, 4, 32, 64)) == 0)

    def test_batch_independence_in_eval(self):
        torch.manual_seed(0)
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro()).eval()
        a = torch.rand(1, 3, 4, 32, 64)
        b = torch.rand(1, 3, 4, 32, 64)
        with torch.no_grad():
            single = net(a)
            double = net(torch.cat([a, b]))
        assert torch.allclose(single[0], double[0], atol=1e-5)

    def test_wrong_input_rejected(self):
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro())
        with pytest.raises(ShapeError):
            net(torch.rand(1, 1, 4, 32, 64))


def reference_conv_block(block, x, shared=None):
    """Independent transcription of the seven-line bottleneck composition."""
    def cbr(layer, v):
        conv, bn = layer[0], layer[1]
        return F.relu(bn(conv(v)))

    def cb(layer, v):
        conv, bn = layer[0], layer[1]
        return bn(conv(v))

    fc1 = cbr(block.l1, x)
    fc2 = cbr(block.l2, fc1)
    fc3 = F.relu(cb(block.l3, fc2) + x)
    fc4 = F.relu(cb(block.l4, fc3))
    if shared is not None:
        fc4 = fc4 + shared
    fc5 = F.relu(cb(block.l5, fc4))
    fc6 = F.relu(cb(block.l6, fc5) + fc3)
    return fc6


class TestVideoConvBlock:
    def test_matches_reference_transcription(self):
        torch.manual_seed(1)
        block = cmtnet.VideoConvBlock(8, 4).eval()
        x = torch.rand(2, 8, 2, 4, 4)
        assert torch.allclose(block(x), reference_conv_block(block, x), atol=1e-6)

    def test_matches_reference_with_shared_input(self):
        torch.manual_seed(2)
        block = cmtnet.VideoConvBlock(8, 4).eval()
        x = torch.rand(1, 8, 2, 4, 4)
        shared = torch.rand(1, 4, 2, 4, 4)
        assert torch.allclose(block(x, shared),
                              reference_conv_block(block, x, shared), atol=1e-6)

    def test_shape_preserved(self):
        block = cmtnet.VideoConvBlock(16, 8).eval()
        x = torch.rand(1, 16, 3, 5, 7)
        assert block(x).shape == x.shape

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(3)
        block = cmtnet.VideoConvBlock(8, 4).double().eval()
        x = torch.rand(1, 8, 2, 4, 4, dtype=torch.float64)
        probe = torch.randn(1, 8, 2, 4, 4, dtype=torch.float64)

        def loss_fn():
            return (block(x) * probe).sum()

        worst, failures = fd_gradient_check(loss_fn, list(block.named_parameters()))
        assert not failures, failures


class TestWindowedAttention:
    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(4)
        attn = cmtnet.WindowedAttention3d(16, 2, (2, 4, 4), shifted=True)
        attn.store_attention = True
        attn(torch.rand(1, 4, 8, 8, 16))
        rows = attn.last_attention.sum(-1)
        assert float((rows - 1).abs().max()) < 1e-6

    def test_shift_composition_oracle(self):
        torch.manual_seed(5)
        w = cmtnet.WindowedAttention3d(16, 2, (2, 4, 4), shifted=False).double()
        sw = cmtnet.WindowedAttention3d(16, 2, (2, 4, 4), shifted=True).double()
        sw.load_state_dict(w.state_dict())
        sw.disable_mask = True
        x = torch.rand(1, 4, 8, 8, 16, dtype=torch.float64)
        shift = (1, 2, 2)
        expect = torch.roll(
            w(torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))),
            shifts=shift, dims=(1, 2, 3))
        assert torch.allclose(sw(x), expect, atol=1e-12)

    def test_window_periodic_equivalence(self):
        torch.manual_seed(6)
        w = cmtnet.WindowedAttention3d(8, 2, (2, 4, 4), shifted=False).double()
        sw = cmtnet.WindowedAttention3d(8, 2, (2, 4, 4), shifted=True).double()
        sw.load_state_dict(w.state_dict())
        sw.disable_mask = True
        tile = torch.rand(1, 2, 4, 4, 8, dtype=torch.float64)
        periodic = tile.repeat(1, 2, 2, 2, 1)
        assert torch.allclose(w(periodic), sw(periodic), atol=1e-12)

    def test_mask_blocks_cross_region_attention(self):
        torch.manual_seed(7)
        sw = cmtnet.WindowedAttention3d(8, 1, (2, 4, 4), shifted=True)
        sw.store_attention = True
        sw(torch.rand(1, 4, 8, 8, 8))
        # some window must contain tokens from different pre-shift regions,
        # whose attention weights are pushed to ~0 by the mask
        assert float(sw.last_attention.min()) < 1e-10

    def test_window_clamps_to_small_grids(self):
        attn = cmtnet.WindowedAttention3d(8, 2, (2, 7, 7), shifted=True)
        out = attn(torch.rand(1, 1, 2, 3, 8))
        assert out.shape == (1, 1, 2, 3, 8)

    def test_head_divisibility(self):
        with pytest.raises(ParameterError):
            cmtnet.WindowedAttention3d(9, 2, (2, 4, 4), shifted=False)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(8)
        attn = cmtnet.WindowedAttention3d(8, 2, (2, 2, 2), shifted=True).double()
        x = torch.rand(1, 2, 4, 4, 8, dtype=torch.float64)
        probe = torch.randn(1, 2, 4, 4, 8, dtype=torch.float64)

        def loss_fn():
            return (attn(x) * probe).sum()

        worst, failures = fd_gradient_check(loss_fn, list(attn.named_parameters()))
        assert not failures, failures


class TestTransformerBlock:
    def test_zeroed_projections_make_identity(self):
        torch.manual_seed(9)
        blk = cmtnet.VideoTransformerBlock(16, 2, (2, 4, 4), 2.0)
        with torch.no_grad():
            for mod in (blk.attn_w.proj, blk.attn_sw.proj,
                        blk.mlp1.fc2, blk.mlp2.fc2):
                mod.weight.zero_()
                mod.bias.zero_()
        x = torch.rand(2, 4, 8, 8, 16)
        assert torch.equal(blk(x), x)

    def test_shared_tokens_shift_output(self):
        torch.manual_seed(10)
        blk = cmtnet.VideoTransformerBlock(16, 2, (2, 4, 4), 2.0).eval()
        x = torch.rand(1, 2, 4, 4, 16)
        base = blk(x)
        shared = torch.rand(1, 2, 4, 4, 16)
        assert not torch.allclose(blk(x, shared), base)


class TestSharing:
    def test_zero_weights_are_noop(self):
        torch.manual_seed(11)
        layer = cmtnet.CmtLayer(8, 4, 16, 2, (2, 4, 4), 2.0).eval()
        conv_x = torch.rand(1, 8, 2, 4, 4)
        tokens = torch.rand(1, 2, 4, 4, 16)
        c1, t1 = layer(conv_x, tokens)
        with torch.no_grad():
            layer.share_c2t.weight.zero_(); layer.share_c2t.bias.zero_()
            layer.share_t2c.weight.zero_(); layer.share_t2c.bias.zero_()
        c2, t2 = layer(conv_x, tokens)
        base_conv = layer.vcb(conv_x)
        base_tokens = layer.vtb(tokens)
        assert torch.allclose(c2, base_conv, atol=1e-6)
        assert torch.allclose(t2, base_tokens, atol=1e-6)
        assert not torch.allclose(c1, base_conv, atol=1e-6)

    def test_projection_widths_match_catalogue(self):
        cfg = cmtnet.CmtConfig()
        net = cmtnet.CmtNet(cfg)
        into_trans = [stage[0].share_c2t.out_channels for stage in net.stages]
        into_conv = [stage[0].share_t2c.out_channels for stage in net.stages]
        assert into_trans == [96, 192, 384, 768]
        assert into_conv == [64, 128, 256, 256]

    def test_gradient_flows_through_sharing(self):
        torch.manual_seed(12)
        layer = cmtnet.CmtLayer(8, 4, 16, 2, (2, 4, 4), 2.0).double().eval()
        conv_x = torch.rand(1, 8, 2, 4, 4, dtype=torch.float64)
        tokens = torch.rand(1, 2, 4, 4, 16, dtype=torch.float64)
        probe_c = torch.randn(1, 8, 2, 4, 4, dtype=torch.float64)
        probe_t = torch.randn(1, 2, 4, 4, 16, dtype=torch.float64)

        def loss_fn():
            c, t = layer(conv_x, tokens)
            return (c * probe_c).sum() + (t * probe_t).sum()

        params = [(n, p) for n, p in layer.named_parameters() if "share" in n]
        worst, failures = fd_gradient_check(loss_fn, params, n_per_tensor=4)
        assert not failures, failures
        assert all(p.grad.abs().sum() > 0 for _, p in params)


class TestDownsampling:
    def test_catalogued_shapes(self):
        down = cmtnet.PatchDownsample(96, 192)
        assert tuple(down(torch.rand(1, 8, 56, 112, 96)).shape) == (1, 8, 28, 56, 192)
        down2 = cmtnet.PatchDownsample(384, 768)
        assert tuple(down2(torch.rand(1, 8, 14, 28, 384)).shape) == (1, 8, 7, 14, 768)

    def test_spatially_constant_stays_constant(self):
        torch.manual_seed(13)
        down = cmtnet.PatchDownsample(8, 16)
        x = torch.rand(1, 3, 1, 1, 8).expand(1, 3, 6, 10, 8)
        with torch.no_grad():
            out = down(x)
        spread = (out - out.mean(dim=(2, 3), keepdim=True)).abs().max()
        assert float(spread) < 1e-5

    def test_odd_dims_padded(self):
        down = cmtnet.PatchDownsample(8, 16)
        assert tuple(down(torch.rand(1, 2, 5, 7, 8)).shape) == (1, 2, 3, 4, 16)

    def test_conv_downsample_shapes(self):
        down = cmtnet.ConvDownsample(128, 256)
        assert tuple(down(torch.rand(1, 128, 8, 56, 112)).shape) == (1, 256, 8, 28, 56)


class TestCmtForward:
    def test_output_width(self):
        torch.manual_seed(14)
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro()).eval()
        with torch.no_grad():
            out = net(torch.rand(2, 3, 4, 32, 64))
        assert out.shape == (2, 512)

    def test_deterministic_in_eval(self):
        torch.manual_seed(15)
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro()).eval()
        x = torch.rand(1, 3, 4, 32, 64)
        with torch.no_grad():
            assert torch.equal(net(x), net(x))

    def test_end_to_end_gradients(self):
        torch.manual_seed(16)
        net = cmtnet.CmtNet(cmtnet.CmtConfig.micro()).double().eval()
        x = torch.rand(1, 3, 4, 32, 64, dtype=torch.float64)
        probe = torch.randn(1, 512, dtype=torch.float64)

        def loss_fn():
            return (net(x) * probe).sum()

        # a representative slice: stem, one layer per stage, heads, downsamples
        names = [n for n, _ in net.named_parameters()]
        keep = [n for n in names if any(tag in n for tag in (
            "stem", "conv_entry", "stages.0.0", "stages.3.0",
            "token_down.0", "conv_down.2", "conv_head", "trans_head"))]
        params = [(n, p) for n, p in net.named_parameters() if n in keep]
        worst, failures = fd_gradient_check(loss_fn, params, n_per_tensor=1)
        assert not failures, failures


class TestClassifier:
    def test_zero_weights_zero_logit(self):
        head = cmtnet.Classifier()
        with torch.no_grad():
            head.fc.weight.zero_()
            head.fc.bias.zero_()
        out = head(torch.rand(3, 512), torch.rand(3, 512))
        assert torch.all(out == 0)

    def test_symmetric_in_branches(self):
        torch.manual_seed(17)
        head = cmtnet.Classifier()
        a = torch.rand(2, 512)
        b = torch.rand(2, 512)
        assert torch.allclose(head(a, b), head(b, a))

    def test_linear_in_fused_features(self):
        torch.manual_seed(18)
        head = cmtnet.Classifier()
        a = torch.rand(1, 512)
        b = torch.rand(1, 512)
        with torch.no_grad():
            direct = head(a, b)
            doubled = head(2 * a, 2 * b)
            bias = head.fc.bias
        assert torch.allclose(doubled - bias, 2 * (direct - bias), atol=1e-5)

    def test_clinical_vector_contract(self):
        head = cmtnet.Classifier(clinical_dim=4)
        a = torch.rand(2, 512)
        out = head(a, a, torch.rand(2, 4))
        assert out.shape == (2,)
        with pytest.raises(ShapeError):
            head(a, a, torch.rand(2, 3))
        with pytest.raises(ShapeError):
            head(a, a, None)
        plain = cmtnet.Classifier()
        with pytest.raises(ShapeError):
            plain(a, a, torch.rand(2, 4))
