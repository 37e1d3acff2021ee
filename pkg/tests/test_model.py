import numpy as np
import pytest

from ldfnet.errors import ArgumentError, ConfigError
from ldfnet.model import (
    ModelConfig,
    Variant,
    build_model,
    parse_variant,
)
from ldfnet.tensor import no_grad, weighted_cross_entropy

DY_CHANNELS = {
    Variant.LDFNET: 2,
    Variant.LDF_NON_DENSE: 2,
    Variant.LDF_WO_SHALLOW: 2,
    Variant.LDF_58_WO_SHALLOW: 2,
    Variant.LDF_WO_Y: 1,
    Variant.LDF_RGB_RGB: 3,
}

SINGLE_SLOTS = {
    Variant.ERFNET_RGB: ("rgb", 3),
    Variant.ERFNET_DEPTH: ("depth", 1),
    Variant.ERFNET_STACK: ("rgbd", 4),
}


def feeds_for(graph, rng, n=1, h=64, w=128):
    out = {}
    for slot, c in graph.input_channels.items():
        out[slot] = rng.random((n, c, h, w), dtype=np.float32)
    return out


def small_graph(variant, classes=4, seed=0):
    return build_model(ModelConfig(variant=variant, num_classes=classes), seed=seed)


class TestVariantStructure:
    def test_parse_variant_aliases(self):
        assert parse_variant("ldfnet") == Variant.LDFNET
        assert parse_variant("erfnet-rgb") == Variant.ERFNET_RGB
        assert parse_variant("LDF_58_wo_Shallow") == Variant.LDF_58_WO_SHALLOW
        assert parse_variant("ldf-rgb-rgb") == Variant.LDF_RGB_RGB
        with pytest.raises(ConfigError):
            parse_variant("resnet")

    def test_fusion_count_is_five(self):
        graph = small_graph(Variant.LDFNET)
        assert graph.fusion_count == 5

    def test_single_branch_has_no_fusion(self):
        for v in SINGLE_SLOTS:
            assert small_graph(v).fusion_count == 0

    def test_stack_variant_has_single_4ch_slot(self):
        graph = small_graph(Variant.ERFNET_STACK)
        assert graph.input_channels == {"rgbd": 4}

    def test_wo_y_consumes_depth_only_slot(self):
        graph = small_graph(Variant.LDF_WO_Y)
        assert graph.input_channels == {"rgb": 3, "dy": 1}

    def test_rgb_rgb_second_stem_takes_three_channels(self):
        graph = small_graph(Variant.LDF_RGB_RGB)
        assert graph.input_channels == {"rgb": 3, "dy": 3}

    def test_58_variant_has_5_and_8_modules_and_no_shallow(self):
        graph = small_graph(Variant.LDF_58_WO_SHALLOW)
        names = {n.name: n.op for n in graph.nodes}
        assert "dy.shallow" not in names
        assert len(names["dy.block2"].modules_list) == 5
        assert len(names["dy.block3"].modules_list) == 8

    def test_ldfnet_requires_shallow_block(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(variant=Variant.LDFNET, shallow_modules=0))


class TestForward:
    def test_output_shape_matches_input_resolution(self):
        rng = np.random.default_rng(0)
        graph = build_model(ModelConfig(variant=Variant.LDFNET), seed=0).eval()
        with no_grad():
            out = graph.forward(feeds_for(graph, rng))
        assert out.shape == (1, 19, 64, 128)

    def test_eval_forward_is_deterministic(self):
        rng = np.random.default_rng(1)
        graph = small_graph(Variant.LDFNET).eval()
        feeds = feeds_for(graph, rng)
        with no_grad():
            a = graph.forward(feeds).data
            b = graph.forward(feeds).data
        np.testing.assert_array_equal(a, b)

    def test_resolution_must_divide_by_8(self):
        rng = np.random.default_rng(2)
        graph = small_graph(Variant.ERFNET_RGB)
        with pytest.raises(ArgumentError):
            graph.forward({"rgb": rng.random((1, 3, 60, 128), dtype=np.float32)})

    def test_missing_slot_rejected(self):
        rng = np.random.default_rng(3)
        graph = small_graph(Variant.LDFNET)
        with pytest.raises(ArgumentError):
            graph.forward({"rgb": rng.random((1, 3, 64, 128), dtype=np.float32)})

    def test_wrong_channel_count_rejected(self):
        rng = np.random.default_rng(4)
        graph = small_graph(Variant.LDFNET)
        feeds = feeds_for(graph, rng)
        feeds["dy"] = rng.random((1, 3, 64, 128), dtype=np.float32)
        with pytest.raises(ArgumentError):
            graph.forward(feeds)

    @pytest.mark.parametrize("variant", list(Variant))
    def test_every_variant_trains_one_step(self, variant):
        # Build, run forward on 64x128, and check every parameter receives a
        # finite gradient.
        rng = np.random.default_rng(5)
        graph = small_graph(variant, seed=2).train()
        feeds = feeds_for(graph, rng)
        logits = graph.forward(feeds)
        labels = rng.integers(0, 4, size=(1, 64, 128))
        loss = weighted_cross_entropy(logits, labels, np.ones(4, dtype=np.float32))
        loss.backward()
        for name, p in graph.named_parameters():
            assert np.isfinite(p.grad).all(), name

    def test_encoder_output_at_eighth_resolution(self):
        rng = np.random.default_rng(6)
        graph = small_graph(Variant.LDFNET).eval()
        with no_grad():
            feat = graph.forward(feeds_for(graph, rng), upto=graph.encoder_output)
        assert feat.shape == (1, 128, 8, 16)


class TestFusionBehaviour:
    def test_depth_perturbation_changes_fusion_logits_only(self):
        rng = np.random.default_rng(7)
        fusion = small_graph(Variant.LDFNET, seed=3).eval()
        rgb_only = small_graph(Variant.ERFNET_RGB, seed=3).eval()
        rgb = rng.random((1, 3, 64, 128), dtype=np.float32)
        dy_a = rng.random((1, 2, 64, 128), dtype=np.float32)
        dy_b = dy_a + rng.normal(0, 0.2, dy_a.shape).astype(np.float32)
        with no_grad():
            fused_a = fusion.forward({"rgb": rgb, "dy": dy_a}).data
            fused_b = fusion.forward({"rgb": rgb, "dy": dy_b}).data
            plain_a = rgb_only.forward({"rgb": rgb}).data
            plain_b = rgb_only.forward({"rgb": rgb}).data
        assert np.abs(fused_a - fused_b).max() > 0
        np.testing.assert_array_equal(plain_a, plain_b)

    def test_zeroed_adapters_reduce_to_rgb_pipeline(self):
        # With every fusion adapter zeroed, the two-branch net must compute
        # exactly what the same-seed RGB-only net computes.
        rng = np.random.default_rng(8)
        fusion = small_graph(Variant.LDFNET, seed=4).eval()
        rgb_only = small_graph(Variant.ERFNET_RGB, seed=4).eval()
        for node in fusion.nodes:
            if node.name.startswith("fuse"):
                for _, p in node.op.named_parameters():
                    p.data[...] = 0.0
        rgb = rng.random((1, 3, 64, 128), dtype=np.float32)
        dy = rng.random((1, 2, 64, 128), dtype=np.float32)
        with no_grad():
            fused = fusion.forward({"rgb": rgb, "dy": dy}).data
            plain = rgb_only.forward({"rgb": rgb}).data
        np.testing.assert_array_equal(fused, plain)


class TestParameterCounts:
    def test_hand_counted_stem_conv(self):
        from ldfnet.blocks import Conv2d
        conv = Conv2d(3, 16, 3)
        assert conv.param_count() == 3 * 16 * 9 + 16  # 448

    def test_table_gates(self):
        ldf, _ = build_model(ModelConfig(variant=Variant.LDFNET)).parameter_count()
        erf, _ = build_model(ModelConfig(variant=Variant.ERFNET_RGB)).parameter_count()
        assert abs(ldf - 2.31e6) <= 0.10 * 2.31e6
        assert abs(erf - 1.97e6) <= 0.10 * 1.97e6

    def test_relative_ordering(self):
        counts = {v: build_model(ModelConfig(variant=v)).parameter_count()[0]
                  for v in Variant}
        assert counts[Variant.ERFNET_RGB] < counts[Variant.LDF_WO_SHALLOW]
        assert counts[Variant.LDF_WO_SHALLOW] < counts[Variant.LDFNET]
        assert counts[Variant.LDFNET] < counts[Variant.LDF_58_WO_SHALLOW]
        assert counts[Variant.LDF_58_WO_SHALLOW] < counts[Variant.LDF_NON_DENSE]
        # Structure-sharing variants agree to well under Table granularity.
        group = [counts[Variant.LDFNET], counts[Variant.LDF_WO_Y],
                 counts[Variant.LDF_RGB_RGB]]
        assert max(group) - min(group) < 1000

    def test_per_node_counts_sum_to_total(self):
        graph = small_graph(Variant.LDFNET)
        total, per_node = graph.parameter_count()
        assert total == sum(per_node.values())

    def test_shallow_block_delta_near_011m(self):
        ldf, _ = build_model(ModelConfig(variant=Variant.LDFNET)).parameter_count()
        wos, _ = build_model(
            ModelConfig(variant=Variant.LDF_WO_SHALLOW)).parameter_count()
        assert 0.08e6 <= ldf - wos <= 0.14e6
