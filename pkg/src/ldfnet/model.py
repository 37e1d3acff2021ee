"""Assembly of the fusion network and its eight ablation variants.

A built model is a ``ModelGraph``: a topologically ordered list of named
nodes over the blocks from :mod:`ldfnet.blocks`, plus named input slots.
Node names are stable across runs and variants, which gives three things for
free: checkpoint compatibility, deterministic per-parameter initialization
(each parameter is seeded from its registry name), and exact structural
sharing between variants (the RGB branch of the two-branch nets carries the
same names, and therefore the same initial weights, as the RGB-only net).

Input slots by variant:

====================  =========================================
LDFNet                rgb (3 ch), dy (depth + luminance, 2 ch)
ERFNet_RGB            rgb (3 ch)
ERFNet_Depth          depth (1 ch)
ERFNet_Stack          rgbd (4 ch)
LDF_non_Dense         rgb, dy (2 ch)
LDF_wo_Shallow        rgb, dy (2 ch)
LDF_58_wo_Shallow     rgb, dy (2 ch)
LDF_wo_Y              rgb, dy (depth only, 1 ch)
LDF_RGB_RGB           rgb, dy (duplicate rgb, 3 ch)
====================  =========================================
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .blocks import (
    ConvTranspose2d,
    DecoderStage,
    DenseBlock,
    DownsamplerBlock,
    FusionAdapter,
    Module,
    ModuleList,
    NonBottleneck1d,
    TransitionLayer,
)
from .errors import ArgumentError, CheckpointError, ConfigError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LDFN"
CHECKPOINT_VERSION = 1


class Variant(str, Enum):
    LDFNET = "LDFNet"
    ERFNET_RGB = "ERFNet_RGB"
    ERFNET_DEPTH = "ERFNet_Depth"
    ERFNET_STACK = "ERFNet_Stack"
    LDF_NON_DENSE = "LDF_non_Dense"
    LDF_WO_SHALLOW = "LDF_wo_Shallow"
    LDF_58_WO_SHALLOW = "LDF_58_wo_Shallow"
    LDF_WO_Y = "LDF_wo_Y"
    LDF_RGB_RGB = "LDF_RGB_RGB"


def parse_variant(text):
    """Accept any spelling that reduces to a known variant (ldfnet, erfnet-rgb, ...)."""
    key = "".join(ch for ch in str(text).lower() if ch.isalnum())
    for v in Variant:
        if key == "".join(ch for ch in v.value.lower() if ch.isalnum()):
            return v
    raise ConfigError("unknown variant %r (choose from %s)"
                      % (text, ", ".join(v.value for v in Variant)))


# Variants whose second branch consumes something.
TWO_BRANCH = {
    Variant.LDFNET, Variant.LDF_NON_DENSE, Variant.LDF_WO_SHALLOW,
    Variant.LDF_58_WO_SHALLOW, Variant.LDF_WO_Y, Variant.LDF_RGB_RGB,
}

_BRANCH_CHANNELS = {
    Variant.LDFNET: 2, Variant.LDF_NON_DENSE: 2, Variant.LDF_WO_SHALLOW: 2,
    Variant.LDF_58_WO_SHALLOW: 2, Variant.LDF_WO_Y: 1, Variant.LDF_RGB_RGB: 3,
}

_SINGLE_SLOT = {
    Variant.ERFNET_RGB: ("rgb", 3),
    Variant.ERFNET_DEPTH: ("depth", 1),
    Variant.ERFNET_STACK: ("rgbd", 4),
}


@dataclass(frozen=True)
class ModelConfig:
    """Structural knobs of a variant.

    The channel plan (16/64/128 with 64/128 transitions) and the dense-branch
    widths are validated only through the parameter-count gate, so they stay
    configurable. ``bottleneck_width`` of None means "equal to the growth
    rate"; ``shallow_modules`` applies only where a shallow block exists.
    """
    variant: Variant = Variant.LDFNET
    num_classes: int = 19
    growth_rate: int = 42
    shallow_modules: int = 5
    bottleneck_width: int | None = None
    dropout_rate: float = 0.05
    stem_channels: int = 16
    mid_channels: int = 64
    deep_channels: int = 128
    transition1_channels: int = 64
    transition2_channels: int = 128
    dense_blocks: tuple = (3, 4)
    mid_blocks: int = 5
    dilations: tuple = (2, 4, 8, 16, 2, 4, 8, 16)
    decoder_blocks: int = 2

    def resolved(self):
        cfg = self
        if cfg.variant == Variant.LDF_58_WO_SHALLOW:
            cfg = replace(cfg, dense_blocks=(5, 8), shallow_modules=0)
        elif cfg.variant == Variant.LDF_WO_SHALLOW:
            cfg = replace(cfg, shallow_modules=0)
        if cfg.bottleneck_width is None:
            cfg = replace(cfg, bottleneck_width=cfg.growth_rate)
        cfg.validate()
        return cfg

    def validate(self):
        if not 2 <= self.num_classes <= 254:
            raise ConfigError("num_classes must be in [2, 254], got %d" % self.num_classes)
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be positive")
        if len(self.dense_blocks) != 2 or min(self.dense_blocks) < 1:
            raise ConfigError("dense_blocks must be two positive counts")
        if len(self.dilations) < 1:
            raise ConfigError("dilations must be non-empty")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.variant == Variant.LDFNET and self.shallow_modules < 1:
            raise ConfigError("the full fusion variant requires a shallow block")

    def header_items(self):
        return [
            ("variant", self.variant.value),
            ("num_classes", str(self.num_classes)),
            ("growth_rate", str(self.growth_rate)),
            ("shallow_modules", str(self.shallow_modules)),
            ("bottleneck_width", str(self.bottleneck_width)),
            ("dropout_rate", repr(self.dropout_rate)),
            ("stem_channels", str(self.stem_channels)),
            ("mid_channels", str(self.mid_channels)),
            ("deep_channels", str(self.deep_channels)),
            ("transition1_channels", str(self.transition1_channels)),
            ("transition2_channels", str(self.transition2_channels)),
            ("dense_blocks", ",".join(map(str, self.dense_blocks))),
            ("mid_blocks", str(self.mid_blocks)),
            ("dilations", ",".join(map(str, self.dilations))),
            ("decoder_blocks", str(self.decoder_blocks)),
        ]

    @staticmethod
    def from_header_items(items):
        d = dict(items)
        return ModelConfig(
            variant=parse_variant(d["variant"]),
            num_classes=int(d["num_classes"]),
            growth_rate=int(d["growth_rate"]),
            shallow_modules=int(d["shallow_modules"]),
            bottleneck_width=None if d["bottleneck_width"] == "None" else int(d["bottleneck_width"]),
            dropout_rate=float(d["dropout_rate"]),
            stem_channels=int(d["stem_channels"]),
            mid_channels=int(d["mid_channels"]),
            deep_channels=int(d["deep_channels"]),
            transition1_channels=int(d["transition1_channels"]),
            transition2_channels=int(d["transition2_channels"]),
            dense_blocks=tuple(int(v) for v in d["dense_blocks"].split(",")),
            mid_blocks=int(d["mid_blocks"]),
            dilations=tuple(int(v) for v in d["dilations"].split(",")),
            decoder_blocks=int(d["decoder_blocks"]),
        )


@dataclass(frozen=True)
class GraphNode:
    name: str
    op: Module
    inputs: tuple


class _Stack(Module):
    """A named run of residual blocks executed in order."""

    def __init__(self, blocks):
        super().__init__()
        self.blocks = ModuleList(blocks)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x

    def output_shape(self, in_shape):
        for blk in self.blocks:
            in_shape = blk.output_shape(in_shape)
        return in_shape

    def macs(self, in_shape):
        total = 0
        for blk in self.blocks:
            total += blk.macs(in_shape)
            in_shape = blk.output_shape(in_shape)
        return total


class ModelGraph:
    """An immutable, topologically ordered network over named feature maps."""

    def __init__(self, config, nodes, input_channels, output, encoder_output, seed):
        self.config = config
        self.nodes = tuple(nodes)
        self.input_channels = dict(input_channels)
        self.output = output
        self.encoder_output = encoder_output
        self.seed = seed
        self._by_name = {n.name: n for n in self.nodes}
        produced = set(self.input_channels)
        for node in self.nodes:
            for src in node.inputs:
                if src not in produced:
                    raise ConfigError(
                        "node %r consumes %r before it is produced" % (node.name, src))
            produced.add(node.name)

    # -- execution ----------------------------------------------------------

    def train(self, mode=True):
        for node in self.nodes:
            node.op.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def _check_feeds(self, feeds):
        if set(feeds) != set(self.input_channels):
            raise ArgumentError(
                "variant %s expects input slots %s, got %s"
                % (self.config.variant.value, sorted(self.input_channels), sorted(feeds)))
        sizes = set()
        out = {}
        for name, value in feeds.items():
            t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
            if t.data.ndim != 4:
                raise ArgumentError("slot %r must be 4-d (N, C, H, W), got %r"
                                    % (name, t.shape))
            want = self.input_channels[name]
            if t.shape[1] != want:
                raise ArgumentError(
                    "slot %r expects %d channels, got %d" % (name, want, t.shape[1]))
            if t.shape[2] % 8 or t.shape[3] % 8:
                raise ArgumentError(
                    "slot %r resolution %dx%d is not divisible by 8"
                    % (name, t.shape[2], t.shape[3]))
            sizes.add((t.shape[0],) + t.shape[2:])
            out[name] = t
        if len(sizes) != 1:
            raise ArgumentError("input slots disagree on batch/resolution: %s" % sizes)
        return out

    def forward(self, feeds, upto=None):
        """Run the graph on the named input slots; returns the logits tensor.

        ``upto`` stops after the named node and returns its activation (used
        by encoder-only training).
        """
        acts = dict(self._check_feeds(feeds))
        for node in self.nodes:
            args = [acts[src] for src in node.inputs]
            acts[node.name] = node.op(*args)
            if node.name == upto:
                return acts[node.name]
        if upto is not None:
            raise ArgumentError("unknown node %r" % upto)
        return acts[self.output]

    # -- registry -----------------------------------------------------------

    def named_parameters(self):
        for node in self.nodes:
            yield from node.op.named_parameters(node.name)

    def named_stats(self):
        for node in self.nodes:
            yield from node.op.named_stats(node.name)

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def parameter_count(self):
        """Total trainable scalars, and the per-node breakdown."""
        per_node = {node.name: node.op.param_count() for node in self.nodes}
        return sum(per_node.values()), per_node

    @property
    def fusion_count(self):
        return sum(1 for n in self.nodes if isinstance(n.op, FusionAdapter))


def _param_rng(seed, name):
    digest = hashlib.sha256(("%d:%s" % (seed, name)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def init_named_parameter(name, p, seed):
    """He-normal weights, unit gammas, zero biases, keyed by (seed, name)."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "weight":
        shape = p.data.shape
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / max(1, fan_in))
        p.data[...] = (_param_rng(seed, name).standard_normal(shape) * std
                       ).astype(p.data.dtype)
    elif leaf == "gamma":
        p.data[...] = 1.0
    else:  # bias, beta
        p.data[...] = 0.0


def init_parameters(graph, seed):
    """Deterministic per-parameter init keyed by (seed, registry name)."""
    for name, p in graph.named_parameters():
        init_named_parameter(name, p, seed)
    for _, stats in graph.named_stats():
        stats.mean[...] = 0.0
        stats.var[...] = 1.0


def _build_erf_encoder(add, prefix, in_ch, cfg, rng, dtype, inp):
    """Stem + residual encoder; returns names of the per-stage outputs."""
    drop = cfg.dropout_rate
    cur = add("%s.down1" % prefix, DownsamplerBlock(in_ch, cfg.stem_channels, dtype=dtype), inp)
    stage1 = cur
    cur = add("%s.down2" % prefix, DownsamplerBlock(cfg.stem_channels, cfg.mid_channels,
                                                    dtype=dtype), cur)
    down2 = cur
    cur = add("%s.stage2" % prefix, _Stack(
        [NonBottleneck1d(cfg.mid_channels, 1, drop, rng=rng, dtype=dtype)
         for _ in range(cfg.mid_blocks)]), cur)
    stage2 = cur
    cur = add("%s.down3" % prefix, DownsamplerBlock(cfg.mid_channels, cfg.deep_channels,
                                                    dtype=dtype), cur)
    down3 = cur
    cur = add("%s.stage3" % prefix, _Stack(
        [NonBottleneck1d(cfg.deep_channels, d, drop, rng=rng, dtype=dtype)
         for d in cfg.dilations]), cur)
    return stage1, down2, stage2, down3, cur


def build_model(config, seed=0, dtype=np.float32):
    """Build a variant's graph with name-derived deterministic parameters."""
    cfg = config.resolved()
    variant = cfg.variant
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD209)))
    nodes = []

    def add(name, op, *inputs):
        nodes.append(GraphNode(name, op, tuple(inputs)))
        return name

    drop = cfg.dropout_rate
    k = cfg.growth_rate
    bw = cfg.bottleneck_width

    if variant in _SINGLE_SLOT:
        slot, in_ch = _SINGLE_SLOT[variant]
        inputs = {slot: in_ch}
        *_, enc = _build_erf_encoder(add, "rgb", in_ch, cfg, rng, dtype, slot)
        encoder_output = enc
    elif variant in TWO_BRANCH:
        inputs = {"rgb": 3, "dy": _BRANCH_CHANNELS[variant]}
        if variant == Variant.LDF_NON_DENSE:
            # Mirror of the color encoder on the depth branch.
            d_stage1, d_down2, d_stage2, d_down3, d_stage3 = _build_erf_encoder(
                add, "dy", inputs["dy"], cfg, rng, dtype, "dy")
            fusion_sources = [
                (d_stage1, cfg.stem_channels),
                (d_down2, cfg.mid_channels),
                (d_stage2, cfg.mid_channels),
                (d_down3, cfg.deep_channels),
                (d_stage3, cfg.deep_channels),
            ]
        else:
            d1 = add("dy.down1", DownsamplerBlock(inputs["dy"], cfg.stem_channels,
                                                  dtype=dtype), "dy")
            ch = cfg.stem_channels
            if cfg.shallow_modules:
                shallow = add("dy.shallow", DenseBlock(ch, cfg.shallow_modules, k, bw,
                                                       drop, rng=rng, dtype=dtype), d1)
                ch += cfg.shallow_modules * k
            else:
                shallow = d1
            t1 = add("dy.trans1", TransitionLayer(ch, cfg.transition1_channels,
                                                  dtype=dtype), shallow)
            b2 = add("dy.block2", DenseBlock(cfg.transition1_channels,
                                             cfg.dense_blocks[0], k, bw, drop,
                                             rng=rng, dtype=dtype), t1)
            b2_ch = cfg.transition1_channels + cfg.dense_blocks[0] * k
            t2 = add("dy.trans2", TransitionLayer(b2_ch, cfg.transition2_channels,
                                                  dtype=dtype), b2)
            b3 = add("dy.block3", DenseBlock(cfg.transition2_channels,
                                             cfg.dense_blocks[1], k, bw, drop,
                                             rng=rng, dtype=dtype), t2)
            b3_ch = cfg.transition2_channels + cfg.dense_blocks[1] * k
            fusion_sources = [
                (shallow, ch),
                (t1, cfg.transition1_channels),
                (b2, b2_ch),
                (t2, cfg.transition2_channels),
                (b3, b3_ch),
            ]

        # Color branch, interleaved with the five fusion points.
        cur = add("rgb.down1", DownsamplerBlock(3, cfg.stem_channels, dtype=dtype), "rgb")
        cur = add("fuse1", FusionAdapter(fusion_sources[0][1], cfg.stem_channels,
                                         index=1, dtype=dtype), fusion_sources[0][0], cur)
        cur = add("rgb.down2", DownsamplerBlock(cfg.stem_channels, cfg.mid_channels,
                                                dtype=dtype), cur)
        cur = add("fuse2", FusionAdapter(fusion_sources[1][1], cfg.mid_channels,
                                         index=2, dtype=dtype), fusion_sources[1][0], cur)
        cur = add("rgb.stage2", _Stack(
            [NonBottleneck1d(cfg.mid_channels, 1, drop, rng=rng, dtype=dtype)
             for _ in range(cfg.mid_blocks)]), cur)
        cur = add("fuse3", FusionAdapter(fusion_sources[2][1], cfg.mid_channels,
                                         index=3, dtype=dtype), fusion_sources[2][0], cur)
        cur = add("rgb.down3", DownsamplerBlock(cfg.mid_channels, cfg.deep_channels,
                                                dtype=dtype), cur)
        cur = add("fuse4", FusionAdapter(fusion_sources[3][1], cfg.deep_channels,
                                         index=4, dtype=dtype), fusion_sources[3][0], cur)
        cur = add("rgb.stage3", _Stack(
            [NonBottleneck1d(cfg.deep_channels, d, drop, rng=rng, dtype=dtype)
             for d in cfg.dilations]), cur)
        cur = add("fuse5", FusionAdapter(fusion_sources[4][1], cfg.deep_channels,
                                         index=5, dtype=dtype), fusion_sources[4][0], cur)
        encoder_output = cur
    else:  # pragma: no cover
        raise ConfigError("unhandled variant %r" % variant)

    cur = add("dec.stage1", DecoderStage(cfg.deep_channels, cfg.mid_channels,
                                         cfg.decoder_blocks, drop, rng=rng,
                                         dtype=dtype), encoder_output)
    cur = add("dec.stage2", DecoderStage(cfg.mid_channels, cfg.stem_channels,
                                         cfg.decoder_blocks, drop, rng=rng,
                                         dtype=dtype), cur)
    cur = add("dec.head", ConvTranspose2d(cfg.stem_channels, cfg.num_classes, 3,
                                          stride=2, padding=1, output_padding=1,
                                          dtype=dtype), cur)

    graph = ModelGraph(cfg, nodes, inputs, cur, encoder_output, seed)
    init_parameters(graph, seed)
    return graph


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout (little-endian): magic, u32 version, header string (u32 length +
# utf-8 "key=value;..." carrying the variant tag and channel plan), u32 record
# count, then per record: u16 name length, name, u8 ndim, u32 dims, float32
# payload. Records cover every parameter and every BN running statistic.


def _pack_record(out, name, arr):
    encoded = name.encode()
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _checkpoint_records(graph):
    for name, p in graph.named_parameters():
        yield name, p.data
    for name, stats in graph.named_stats():
        yield name + ".running_mean", stats.mean
        yield name + ".running_var", stats.var


def save_checkpoint(graph, path):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = ";".join("%s=%s" % kv for kv in graph.config.header_items()).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    records = list(_checkpoint_records(graph))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _pack_record(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint %s (needed %d bytes at offset %d)"
                                  % (self.path, n, self.pos))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_variant=None, dtype=np.float32):
    """Rebuild the model a checkpoint describes and load its exact state."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("%s is not a checkpoint (bad magic)" % path)
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            "checkpoint %s has format version %d, this build reads version %d"
            % (path, version, CHECKPOINT_VERSION))
    (hlen,) = reader.unpack("<I")
    header = reader.take(hlen).decode()
    items = [kv.split("=", 1) for kv in header.split(";") if kv]
    config = ModelConfig.from_header_items(items)
    if expect_variant is not None and config.variant != expect_variant:
        raise CheckpointError(
            "checkpoint %s holds variant %s, expected %s"
            % (path, config.variant.value, expect_variant.value))
    graph = build_model(config, seed=0, dtype=dtype)

    slots = {}
    for name, p in graph.named_parameters():
        slots[name] = p.data
    for name, stats in graph.named_stats():
        slots[name + ".running_mean"] = stats.mean
        slots[name + ".running_var"] = stats.var

    (count,) = reader.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode()
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack("<%dI" % ndim)
        payload = np.frombuffer(
            reader.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        if name not in slots:
            raise CheckpointError("checkpoint %s carries unknown record %r" % (path, name))
        if slots[name].shape != tuple(shape):
            raise CheckpointError(
                "record %r has shape %r, model expects %r"
                % (name, tuple(shape), slots[name].shape))
        slots[name][...] = payload.reshape(shape).astype(slots[name].dtype)
        seen.add(name)
    missing = set(slots) - seen
    if missing:
        raise CheckpointError(
            "checkpoint %s is missing records: %s" % (path, sorted(missing)[:5]))
    return graph
