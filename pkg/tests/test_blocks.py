import numpy as np
import pytest

from ldfnet.blocks import (
    DecoderStage,
    DenseBlock,
    DenseModule,
    DownsamplerBlock,
    FusionAdapter,
    NonBottleneck1d,
    TransitionLayer,
    reset_default_init,
)
from ldfnet.errors import ConfigError, ShapeError
from ldfnet.gradcheck import check_gradients, random_tensor, randomize_parameters
from ldfnet.tensor import Tensor


def rand_input(rng, shape, dtype=np.float32, requires_grad=False):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


def zero_convs(module):
    for name, p in module.named_parameters():
        if name.endswith(("weight", "bias")):
            p.data[...] = 0.0


class TestDownsampler:
    def test_halves_resolution_shape_rule(self):
        blk = DownsamplerBlock(3, 16)
        assert blk.output_shape((1, 3, 512, 1024)) == (1, 16, 256, 512)
        blk2 = DownsamplerBlock(16, 64)
        assert blk2.output_shape((1, 16, 256, 512)) == (1, 64, 128, 256)

    def test_executes_and_matches_trace(self):
        rng = np.random.default_rng(0)
        blk = DownsamplerBlock(3, 16)
        x = rand_input(rng, (2, 3, 16, 24))
        out = blk(x)
        assert out.shape == blk.output_shape(x.shape)

    def test_rejects_nonincreasing_channels(self):
        with pytest.raises(ConfigError):
            DownsamplerBlock(16, 16)

    def test_rejects_odd_extent(self):
        rng = np.random.default_rng(1)
        blk = DownsamplerBlock(3, 8)
        with pytest.raises(ConfigError):
            blk(rand_input(rng, (1, 3, 7, 8)))
        with pytest.raises(ConfigError):
            blk.output_shape((1, 3, 7, 8))


class TestNonBottleneck1d:
    def test_zeroed_weights_give_relu_identity(self):
        rng = np.random.default_rng(2)
        blk = NonBottleneck1d(8).eval()
        zero_convs(blk)
        x = rand_input(rng, (1, 8, 6, 6))
        out = blk(x)
        np.testing.assert_array_equal(out.data, np.maximum(x.data, 0))

    @pytest.mark.parametrize("dilation", [1, 2, 4, 8, 16])
    def test_shape_preserved_for_any_dilation(self, dilation):
        rng = np.random.default_rng(3)
        blk = NonBottleneck1d(4, dilation=dilation).eval()
        for h, w in [(3, 3), (5, 9), (8, 4)]:
            x = rand_input(rng, (1, 4, h, w))
            assert blk(x).shape == (1, 4, h, w)
            assert blk.output_shape((1, 4, h, w)) == (1, 4, h, w)

    def test_conv_parameter_count_for_64_channels(self):
        blk = NonBottleneck1d(64)
        conv_params = sum(
            p.data.size for name, p in blk.named_parameters() if "conv" in name)
        assert conv_params == 4 * (64 * 64 * 3) + 4 * 64  # 49,408
        assert blk.param_count() == conv_params + 2 * 2 * 64

    def test_channel_mismatch(self):
        rng = np.random.default_rng(4)
        blk = NonBottleneck1d(8)
        with pytest.raises(ShapeError):
            blk(rand_input(rng, (1, 4, 6, 6)))


class TestDenseModule:
    def test_adds_growth_channels(self):
        rng = np.random.default_rng(5)
        mod = DenseModule(16, 42)
        x = rand_input(rng, (1, 16, 8, 10))
        out = mod(x)
        assert out.shape == (1, 58, 8, 10)
        assert mod.output_shape((1, 16, 8, 10)) == (1, 58, 8, 10)

    def test_zeroed_weights_preserve_input_and_emit_beta(self):
        rng = np.random.default_rng(6)
        mod = DenseModule(5, 3).eval()
        zero_convs(mod)
        mod.bn3.beta.data[:] = [0.25, 0.0, 1.5]
        x = rand_input(rng, (2, 5, 4, 4))
        out = mod(x)
        np.testing.assert_array_equal(out.data[:, :5], x.data)
        for k, beta in enumerate([0.25, 0.0, 1.5]):
            np.testing.assert_allclose(out.data[:, 5 + k], beta, atol=1e-6)

    def test_chain_of_three_from_64(self):
        rng = np.random.default_rng(7)
        blk = DenseBlock(64, 3, 42)
        assert blk.out_ch == 64 + 3 * 42
        x = rand_input(rng, (1, 64, 4, 6))
        assert blk(x).shape == (1, 190, 4, 6)


class TestDenseBlock:
    def test_zero_modules_rejected(self):
        with pytest.raises(ConfigError):
            DenseBlock(16, 0, 42)

    def test_first_module_sees_block_input_unchanged(self):
        rng = np.random.default_rng(8)
        blk = DenseBlock(6, 2, 4)
        x = rand_input(rng, (1, 6, 5, 5))
        out = blk(x)
        np.testing.assert_array_equal(out.data[:, :6], x.data)

    @pytest.mark.parametrize("zeroed", [0, 1, 2])
    def test_dense_connectivity_prefix_unchanged(self, zeroed):
        # Zeroing module j's learned contribution may only affect channels
        # from in_ch + j*growth onward.
        rng = np.random.default_rng(9)
        blk = DenseBlock(6, 3, 4).eval()
        x = rand_input(rng, (1, 6, 5, 5))
        before = blk(x).data.copy()
        zero_convs(blk.modules_list[zeroed])
        after = blk(x).data
        keep = 6 + zeroed * 4
        np.testing.assert_array_equal(after[:, :keep], before[:, :keep])
        assert not np.array_equal(after[:, keep:keep + 4], before[:, keep:keep + 4])


class TestTransition:
    def test_shape_rule(self):
        t = TransitionLayer(58, 64)
        assert t.output_shape((1, 58, 256, 512)) == (1, 64, 128, 256)
        rng = np.random.default_rng(10)
        x = rand_input(rng, (1, 58, 8, 12))
        assert t(x).shape == (1, 64, 4, 6)

    def test_identity_conv_reduces_to_average_pooling(self):
        t = TransitionLayer(3, 3).eval()
        t.conv.weight.data[...] = 0.0
        for i in range(3):
            t.conv.weight.data[i, i, 0, 0] = 1.0
        t.bn.running.var[:] = 1.0 - t.bn.eps  # make eval normalization exact
        rng = np.random.default_rng(11)
        x = Tensor(rng.uniform(0.1, 1.0, (1, 3, 6, 6)).astype(np.float32))
        out = t(x)
        ref = x.data.reshape(1, 3, 3, 2, 3, 2).mean(axis=(3, 5))
        np.testing.assert_allclose(out.data, ref, rtol=1e-6)

    def test_odd_extent_rejected(self):
        t = TransitionLayer(4, 4)
        rng = np.random.default_rng(12)
        with pytest.raises(ConfigError):
            t(rand_input(rng, (1, 4, 5, 6)))


class TestFusionAdapter:
    def test_zero_adapter_is_additive_identity(self):
        rng = np.random.default_rng(13)
        fuse = FusionAdapter(10, 6, index=3).eval()
        zero_convs(fuse)
        branch = rand_input(rng, (1, 10, 4, 4))
        dst = rand_input(rng, (1, 6, 4, 4))
        out = fuse(branch, dst)
        np.testing.assert_array_equal(out.data, dst.data)

    def test_channel_mapping_shape(self):
        fuse = FusionAdapter(58, 64)
        assert fuse.output_shape([(1, 58, 128, 256), (1, 64, 128, 256)]) \
            == (1, 64, 128, 256)

    def test_spatial_mismatch_names_fusion_point(self):
        rng = np.random.default_rng(14)
        fuse = FusionAdapter(4, 4, index=2)
        with pytest.raises(ShapeError, match="fusion point 2"):
            fuse(rand_input(rng, (1, 4, 4, 4)), rand_input(rng, (1, 4, 8, 8)))

    def test_gradient_reaches_both_branches(self):
        rng = np.random.default_rng(15)
        fuse = FusionAdapter(3, 5).train()
        branch = rand_input(rng, (2, 3, 4, 4), requires_grad=True)
        dst = rand_input(rng, (2, 5, 4, 4), requires_grad=True)
        fuse(branch, dst).sum().backward()
        assert np.abs(branch.grad).max() > 0
        assert np.abs(dst.grad).max() > 0


class TestDecoderStage:
    def test_doubles_resolution(self):
        stage = DecoderStage(128, 64, 2)
        assert stage.output_shape((1, 128, 64, 128)) == (1, 64, 128, 256)
        rng = np.random.default_rng(16)
        x = rand_input(rng, (1, 128, 4, 8))
        assert stage(x).shape == (1, 64, 8, 16)

    def test_zero_blocks_is_legal(self):
        stage = DecoderStage(16, 8, 0)
        rng = np.random.default_rng(17)
        x = rand_input(rng, (1, 16, 4, 4))
        assert stage(x).shape == (1, 8, 8, 8)


class TestShapeAlgebra:
    @pytest.mark.parametrize("case", range(50))
    def test_predicted_shape_equals_executed(self, case):
        rng = np.random.default_rng(600 + case)
        kind = case % 6
        h, w = 2 * int(rng.integers(2, 7)), 2 * int(rng.integers(2, 7))
        n = int(rng.integers(1, 3))
        if kind == 0:
            cin = int(rng.integers(1, 8))
            blk = DownsamplerBlock(cin, cin + int(rng.integers(1, 9)))
            args = ((n, cin, h, w),)
        elif kind == 1:
            c = int(rng.integers(1, 9))
            blk = NonBottleneck1d(c, dilation=int(rng.integers(1, 5)))
            args = ((n, c, h, w),)
        elif kind == 2:
            cin = int(rng.integers(1, 9))
            blk = DenseBlock(cin, int(rng.integers(1, 4)), int(rng.integers(1, 7)))
            args = ((n, cin, h, w),)
        elif kind == 3:
            cin = int(rng.integers(1, 9))
            blk = TransitionLayer(cin, int(rng.integers(1, 9)))
            args = ((n, cin, h, w),)
        elif kind == 4:
            src, dst = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            blk = FusionAdapter(src, dst)
            args = ([(n, src, h, w), (n, dst, h, w)],)
        else:
            cin = int(rng.integers(1, 9))
            blk = DecoderStage(cin, int(rng.integers(1, 9)), int(rng.integers(0, 3)))
            args = ((n, cin, h, w),)

        predicted = blk.output_shape(*args)
        if kind == 4:
            rng2 = np.random.default_rng(1)
            out = blk(rand_input(rng2, args[0][0]), rand_input(rng2, args[0][1]))
        else:
            out = blk(rand_input(np.random.default_rng(1), args[0]))
        assert out.shape == predicted


class TestBlockGradients:
    """End-to-end finite-difference checks on tiny shapes, float64.

    Weights are reseeded per test so results do not depend on suite order,
    and every block is moved to a generic parameter point first (fresh zero
    biases align activations exactly with ReLU kinks, where central
    differences cannot measure the recorded subgradient).
    """

    def _check(self, block, inputs, rng):
        randomize_parameters(block, rng)
        params = [p for _, p in block.named_parameters()]
        check_gradients(lambda: block(*inputs).sum(), list(inputs) + params,
                        rng=rng, max_coords=8)

    def test_downsampler(self):
        reset_default_init(720)
        rng = np.random.default_rng(20)
        blk = DownsamplerBlock(2, 5, dtype=np.float64)
        self._check(blk, [random_tensor(rng, (1, 2, 4, 4))], rng)

    def test_non_bottleneck_1d(self):
        reset_default_init(721)
        rng = np.random.default_rng(21)
        blk = NonBottleneck1d(3, dilation=2, dtype=np.float64)
        self._check(blk, [random_tensor(rng, (1, 3, 5, 5))], rng)

    def test_dense_module(self):
        reset_default_init(722)
        rng = np.random.default_rng(22)
        mod = DenseModule(3, 2, dtype=np.float64)
        self._check(mod, [random_tensor(rng, (1, 3, 4, 4))], rng)

    def test_transition(self):
        reset_default_init(723)
        rng = np.random.default_rng(23)
        t = TransitionLayer(3, 4, dtype=np.float64)
        self._check(t, [random_tensor(rng, (1, 3, 4, 4))], rng)

    def test_fusion_adapter(self):
        reset_default_init(724)
        rng = np.random.default_rng(24)
        fuse = FusionAdapter(2, 3, dtype=np.float64)
        self._check(fuse, [random_tensor(rng, (1, 2, 4, 4)),
                           random_tensor(rng, (1, 3, 4, 4))], rng)

    def test_decoder_stage(self):
        reset_default_init(725)
        rng = np.random.default_rng(25)
        stage = DecoderStage(3, 2, 1, dtype=np.float64)
        self._check(stage, [random_tensor(rng, (1, 3, 3, 3))], rng)
