"""Layers and the composite building blocks the network graph is wired from.

A ``Module`` owns named parameters, child modules, and running statistics;
attribute assignment registers them, so parameter names are stable paths like
``conv.weight``. Every module knows its output shape and multiply-accumulate
cost for a given input shape, which is what the static analyzer walks.

The composite blocks:

* ``DownsamplerBlock``   stride-2 conv concatenated with a 2x2 max pool,
  halving resolution while raising the channel count.
* ``NonBottleneck1d``    residual block of factorized 3x1 / 1x3 convolutions,
  optionally dilated in its second pair.
* ``DenseModule``        1x1 reduction then 3x3 feature extraction, output
  concatenated onto the module input (dense connectivity).
* ``DenseBlock``         a chain of dense modules.
* ``TransitionLayer``    1x1 conv then 2x2 average pool.
* ``FusionAdapter``      1x1 channel adapter followed by element-wise
  summation into the destination feature map.
* ``DecoderStage``       stride-2 transposed conv followed by residual blocks.
"""

from __future__ import annotations

import numpy as np

from . import tensor as F
from .errors import ConfigError, ShapeError
from .tensor import RunningStats, Tensor

# Construction-time weights come from one deterministic process-wide stream;
# model builds re-initialize every parameter from its registry name.
_init_rng = np.random.default_rng(0x1DF)


def reset_default_init(seed=0x1DF):
    global _init_rng
    _init_rng = np.random.default_rng(seed)


class Module:
    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_stats", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, RunningStats):
            self._stats[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):
        raise NotImplementedError

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._modules.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (name if not prefix else prefix + "." + name), p
        for name, child in self._modules.items():
            sub = name if not prefix else prefix + "." + name
            yield from child.named_parameters(sub)

    def named_stats(self, prefix=""):
        for name, s in self._stats.items():
            yield (name if not prefix else prefix + "." + name), s
        for name, child in self._modules.items():
            sub = name if not prefix else prefix + "." + name
            yield from child.named_stats(sub)

    def param_count(self):
        return sum(p.data.size for _, p in self.named_parameters())

    def output_shape(self, in_shape):
        raise NotImplementedError

    def macs(self, in_shape):
        """Multiply-accumulates for one forward pass at ``in_shape``.

        Counts convolutions only; pooling, normalization, and activations
        are zero by convention.
        """
        return 0


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, dilation=1,
                 bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = (kh, kw)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        self.dilation = (dilation, dilation) if isinstance(dilation, int) else tuple(dilation)
        fan_in = in_ch * kh * kw
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            (_init_rng.standard_normal((out_ch, in_ch, kh, kw)) * std).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError("conv expects %d channels, trace found %d" % (self.in_ch, c))
        ho = (h + 2 * self.padding[0] - self.dilation[0] * (self.kernel[0] - 1) - 1) \
            // self.stride[0] + 1
        wo = (w + 2 * self.padding[1] - self.dilation[1] * (self.kernel[1] - 1) - 1) \
            // self.stride[1] + 1
        return (n, self.out_ch, ho, wo)

    def macs(self, in_shape):
        n, _, ho, wo = self.output_shape(in_shape)
        return self.out_ch * self.in_ch * self.kernel[0] * self.kernel[1] * ho * wo


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0,
                 output_padding=0, bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = (kh, kw)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        self.output_padding = (output_padding, output_padding) \
            if isinstance(output_padding, int) else tuple(output_padding)
        std = np.sqrt(2.0 / (in_ch * kh * kw))
        self.weight = Tensor(
            (_init_rng.standard_normal((in_ch, out_ch, kh, kw)) * std).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding,
                                  output_padding=self.output_padding)

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError("deconv expects %d channels, trace found %d" % (self.in_ch, c))
        ho = (h - 1) * self.stride[0] - 2 * self.padding[0] + self.kernel[0] \
            + self.output_padding[0]
        wo = (w - 1) * self.stride[1] - 2 * self.padding[1] + self.kernel[1] \
            + self.output_padding[1]
        return (n, self.out_ch, ho, wo)

    def macs(self, in_shape):
        n, _, h, w = in_shape
        return self.in_ch * self.out_ch * self.kernel[0] * self.kernel[1] * h * w


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = RunningStats(channels, dtype=dtype)

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running,
                            training=self.training, momentum=self.momentum,
                            eps=self.eps)

    def output_shape(self, in_shape):
        return in_shape


class Dropout(Module):
    def __init__(self, rate, rng=None):
        super().__init__()
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        return F.dropout(x, self.rate, training=self.training, rng=self.rng)

    def output_shape(self, in_shape):
        return in_shape


def _even_or_config_error(h, w, what):
    if h % 2 or w % 2:
        raise ConfigError("%s needs even spatial extents, got %dx%d" % (what, h, w))


class DownsamplerBlock(Module):
    """Concat of a stride-2 3x3 conv (out-in channels) and a 2x2 max pool,
    then BN and ReLU; halves H and W."""

    def __init__(self, in_ch, out_ch, dtype=np.float32):
        super().__init__()
        if out_ch <= in_ch:
            raise ConfigError(
                "downsampler needs out_ch > in_ch, got %d -> %d" % (in_ch, out_ch))
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv = Conv2d(in_ch, out_ch - in_ch, 3, stride=2, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        _, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError("downsampler expects %d channels, got %d" % (self.in_ch, c))
        _even_or_config_error(h, w, "downsampler")
        out = F.concat_channels([self.conv(x), F.max_pool2d(x)])
        return F.relu(self.bn(out))

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        _even_or_config_error(h, w, "downsampler")
        return (n, self.out_ch, h // 2, w // 2)

    def macs(self, in_shape):
        return self.conv.macs(in_shape)


class NonBottleneck1d(Module):
    """Residual block with 3x3 kernels factorized into 3x1 and 1x3 pairs.

    The second pair applies the configured dilation; padding keeps the
    spatial size, so the input can be added back before the final ReLU.
    """

    def __init__(self, channels, dilation=1, dropout_rate=0.0, rng=None,
                 dtype=np.float32):
        super().__init__()
        d = dilation
        self.channels = channels
        self.dilation = d
        self.conv3x1_1 = Conv2d(channels, channels, (3, 1), padding=(1, 0), dtype=dtype)
        self.conv1x3_1 = Conv2d(channels, channels, (1, 3), padding=(0, 1), dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.conv3x1_2 = Conv2d(channels, channels, (3, 1), padding=(d, 0),
                                dilation=(d, 1), dtype=dtype)
        self.conv1x3_2 = Conv2d(channels, channels, (1, 3), padding=(0, d),
                                dilation=(1, d), dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)
        self.drop = Dropout(dropout_rate, rng=rng)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(
                "residual block expects %d channels, got %d" % (self.channels, x.shape[1]))
        out = F.relu(self.conv3x1_1(x))
        out = F.relu(self.bn1(self.conv1x3_1(out)))
        out = F.relu(self.conv3x1_2(out))
        out = self.drop(self.bn2(self.conv1x3_2(out)))
        return F.relu(F.elementwise_add(out, x))

    def output_shape(self, in_shape):
        if in_shape[1] != self.channels:
            raise ShapeError(
                "residual block expects %d channels, trace found %d"
                % (self.channels, in_shape[1]))
        return in_shape

    def macs(self, in_shape):
        return (self.conv3x1_1.macs(in_shape) + self.conv1x3_1.macs(in_shape)
                + self.conv3x1_2.macs(in_shape) + self.conv1x3_2.macs(in_shape))


class DenseModule(Module):
    """1x1 reduction, 3x3 extraction of ``growth`` new channels, then concat
    of the module input with the new features."""

    def __init__(self, in_ch, growth, bottleneck_width=None, dropout_rate=0.0,
                 rng=None, dtype=np.float32):
        super().__init__()
        width = bottleneck_width if bottleneck_width is not None else growth
        self.in_ch = in_ch
        self.growth = growth
        self.conv1 = Conv2d(in_ch, width, 1, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype=dtype)
        self.conv3 = Conv2d(width, growth, 3, padding=1, dtype=dtype)
        self.bn3 = BatchNorm2d(growth, dtype=dtype)
        self.drop = Dropout(dropout_rate, rng=rng)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ShapeError(
                "dense module expects %d channels, got %d" % (self.in_ch, x.shape[1]))
        new = F.relu(self.bn1(self.conv1(x)))
        new = F.relu(self.bn3(self.conv3(new)))
        new = self.drop(new)
        return F.concat_channels([x, new])

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(
                "dense module expects %d channels, trace found %d" % (self.in_ch, c))
        return (n, c + self.growth, h, w)

    def macs(self, in_shape):
        mid = self.conv1.output_shape(in_shape)
        return self.conv1.macs(in_shape) + self.conv3.macs(mid)


class DenseBlock(Module):
    """``n_modules`` dense modules in sequence; each sees every earlier
    feature via concatenation, so the output has in_ch + n*growth channels."""

    def __init__(self, in_ch, n_modules, growth, bottleneck_width=None,
                 dropout_rate=0.0, rng=None, dtype=np.float32):
        super().__init__()
        if n_modules < 1:
            raise ConfigError("dense block needs n_modules >= 1, got %d" % n_modules)
        self.in_ch = in_ch
        self.growth = growth
        self.modules_list = ModuleList(
            DenseModule(in_ch + i * growth, growth, bottleneck_width,
                        dropout_rate, rng=rng, dtype=dtype)
            for i in range(n_modules))

    @property
    def out_ch(self):
        return self.in_ch + len(self.modules_list) * self.growth

    def forward(self, x):
        for mod in self.modules_list:
            x = mod(x)
        return x

    def output_shape(self, in_shape):
        for mod in self.modules_list:
            in_shape = mod.output_shape(in_shape)
        return in_shape

    def macs(self, in_shape):
        total = 0
        for mod in self.modules_list:
            total += mod.macs(in_shape)
            in_shape = mod.output_shape(in_shape)
        return total


class TransitionLayer(Module):
    """1x1 conv (BN + ReLU) to ``out_ch`` followed by 2x2 average pooling."""

    def __init__(self, in_ch, out_ch, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv = Conv2d(in_ch, out_ch, 1, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        _, c, h, w = x.shape
        _even_or_config_error(h, w, "transition layer")
        return F.avg_pool2d(F.relu(self.bn(self.conv(x))))

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        _even_or_config_error(h, w, "transition layer")
        if c != self.in_ch:
            raise ShapeError(
                "transition expects %d channels, trace found %d" % (self.in_ch, c))
        return (n, self.out_ch, h // 2, w // 2)

    def macs(self, in_shape):
        return self.conv.macs(in_shape)


class FusionAdapter(Module):
    """Maps branch features to the destination channel count with a learned
    1x1 conv (BN + ReLU) and sums them into the destination feature map."""

    def __init__(self, src_ch, dst_ch, index=0, dtype=np.float32):
        super().__init__()
        self.src_ch, self.dst_ch = src_ch, dst_ch
        self.index = index
        self.conv = Conv2d(src_ch, dst_ch, 1, dtype=dtype)
        self.bn = BatchNorm2d(dst_ch, dtype=dtype)

    def forward(self, branch_feat, dst_feat):
        if branch_feat.shape[2:] != dst_feat.shape[2:]:
            raise ShapeError(
                "fusion point %d: spatial sizes %r and %r differ"
                % (self.index, branch_feat.shape[2:], dst_feat.shape[2:]))
        if dst_feat.shape[1] != self.dst_ch:
            raise ShapeError(
                "fusion point %d: destination has %d channels, adapter expects %d"
                % (self.index, dst_feat.shape[1], self.dst_ch))
        mapped = F.relu(self.bn(self.conv(branch_feat)))
        return F.elementwise_add(mapped, dst_feat)

    def output_shape(self, in_shapes):
        src, dst = in_shapes
        if src[2:] != dst[2:]:
            raise ShapeError(
                "fusion point %d: trace spatial sizes %r and %r differ"
                % (self.index, src[2:], dst[2:]))
        return dst

    def macs(self, in_shapes):
        return self.conv.macs(in_shapes[0])


class DecoderStage(Module):
    """Stride-2 3x3 transposed conv (doubling H and W exactly), BN + ReLU,
    then ``n_blocks`` undilated residual blocks."""

    def __init__(self, in_ch, out_ch, n_blocks, dropout_rate=0.0, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.deconv = ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1,
                                      output_padding=1, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.blocks = ModuleList(
            NonBottleneck1d(out_ch, dilation=1, dropout_rate=dropout_rate,
                            rng=rng, dtype=dtype)
            for _ in range(n_blocks))

    def forward(self, x):
        out = F.relu(self.bn(self.deconv(x)))
        for blk in self.blocks:
            out = blk(out)
        return out

    def output_shape(self, in_shape):
        return self.deconv.output_shape(in_shape)

    def macs(self, in_shape):
        total = self.deconv.macs(in_shape)
        mid = self.deconv.output_shape(in_shape)
        for blk in self.blocks:
            total += blk.macs(mid)
        return total
