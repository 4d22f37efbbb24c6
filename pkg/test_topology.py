#!/usr/bin/env python3
"""
Tests for the connectivity rule, LayerGraph elaboration, validation and presets.
"""

import pytest

from errors import SpecValidationError
from topology import (
    PRESETS,
    PUBLISHED,
    ConnectivityRule,
    NetworkSpec,
    Variant,
    build_layer_graph,
    count_connections,
    drop_patterns,
    input_sources,
    paper_depth,
    preset,
    reported_depth,
    validate_spec,
)


def rule(f, r):
    return ConnectivityRule(farthest=f, nearest=r)


def set_definition(i, f, r):
    """Predecessors j of layer i with j among the f earliest or the r most recent."""
    return tuple(j for j in range(i) if j < f or j >= i - r)


class TestInputSources:
    def test_all_previous_while_short(self):
        assert input_sources(5, rule(7, 7)) == (0, 1, 2, 3, 4)

    def test_farthest_and_nearest(self):
        assert input_sources(20, rule(7, 7)) == tuple(range(0, 7)) + tuple(range(13, 20))

    def test_nearest_only(self):
        assert input_sources(3, rule(0, 14)) == (0, 1, 2)

    def test_dense_rule(self):
        assert input_sources(10, ConnectivityRule.dense()) == tuple(range(10))

    def test_empty_rule_rejected(self):
        with pytest.raises(ValueError):
            input_sources(3, rule(0, 0))

    def test_matches_set_definition_exhaustively(self):
        for f in range(0, 33):
            for r in range(0, 33):
                if f + r == 0:
                    continue
                current = rule(f, r)
                for i in range(1, 65):
                    sources = input_sources(i, current)
                    assert sources == set_definition(i, f, r), (i, f, r)
                    assert len(sources) == min(i, f + r)

    @pytest.mark.parametrize("path", [1, 2, 7, 14, 21])
    def test_total_connections_invariant_across_splits(self, path):
        totals = {
            sum(len(input_sources(i, rule(f, path - f))) for i in range(1, 41))
            for f in range(path + 1)
        }
        assert len(totals) == 1

    def test_path_covering_block_equals_dense(self):
        spec = NetworkSpec(variant="bc", blocks=(6, 6, 6), growth_rate=8, rule=ConnectivityRule.from_path(6))
        dense = spec.with_rule(ConnectivityRule.dense())
        assert build_layer_graph(spec).blocks == build_layer_graph(dense).blocks


class TestConnectivityRule:
    def test_default_split(self):
        assert (ConnectivityRule.from_path(14).farthest, ConnectivityRule.from_path(14).nearest) == (7, 7)
        assert (ConnectivityRule.from_path(15).farthest, ConnectivityRule.from_path(15).nearest) == (8, 7)

    def test_labels(self):
        assert rule(10, 4).label() == "10-4"
        assert ConnectivityRule.dense().path_label() == "dense"

    def test_drop_patterns(self):
        assert [r.label() for r in drop_patterns(14, 7)] == ["14-0", "7-7", "0-14"]
        assert [r.label() for r in drop_patterns(14, 4)] == ["14-0", "10-4", "6-8", "2-12", "0-14"]
        assert all(r.path == 14 for r in drop_patterns(14, 3))


class TestLayerGraph:
    def test_basic_channel_accumulation(self):
        spec = NetworkSpec(variant="basic", blocks=(8, 12, 16), growth_rate=16,
                           rule=ConnectivityRule.from_path(14))
        graph = build_layer_graph(spec)
        assert [b.in_channels for b in graph.blocks] == [16, 144, 336]
        assert graph.classifier_in == 592

    def test_bc_channel_accumulation(self):
        spec = NetworkSpec(variant="bc", blocks=(2, 2, 2), growth_rate=4, stem_channels=8,
                           rule=ConnectivityRule.from_path(2))
        graph = build_layer_graph(spec)
        assert [b.out_channels for b in graph.blocks] == [16, 16, 16]
        assert [b.transition_out for b in graph.blocks] == [8, 8, None]
        assert [b.spatial for b in graph.blocks] == [32, 16, 8]

    def test_second_layer_sees_block_input_and_first_layer(self):
        spec = NetworkSpec(variant="bc", blocks=(4, 4), growth_rate=12, rule=ConnectivityRule.from_path(2))
        for block in build_layer_graph(spec).blocks:
            layer2 = block.layers[1]
            assert layer2.sources == (0, 1)
            assert layer2.in_channels == block.in_channels + 12

    def test_sparse_layer_without_block_input(self):
        spec = NetworkSpec(variant="basic", blocks=(5,), growth_rate=4, rule=rule(0, 2))
        layer5 = build_layer_graph(spec).blocks[0].layers[4]
        assert layer5.sources == (3, 4)
        assert layer5.in_channels == 8

    def test_basic_path_two_has_at_most_two_sources(self):
        spec = NetworkSpec(variant="basic", blocks=(8, 12, 16), growth_rate=16, rule=ConnectivityRule.from_path(2))
        assert all(len(layer.sources) <= 2 for _, layer in build_layer_graph(spec).layers())

    def test_bottleneck_width(self):
        spec = NetworkSpec(variant="abc", blocks=(2,), growth_rate=12, rule=ConnectivityRule.from_path(2))
        assert build_layer_graph(spec).blocks[0].layers[0].bottleneck_channels == 48

    def test_describe_lists_every_layer(self):
        spec = NetworkSpec(variant="bc", blocks=(2, 3), growth_rate=4, rule=ConnectivityRule.from_path(2))
        lines = build_layer_graph(spec).describe()
        assert sum(1 for line in lines if line.strip().startswith("layer")) == 5
        assert lines[-1] == "classifier: 20 -> 10"


class TestCountConnections:
    def test_sparse_block(self):
        spec = NetworkSpec(variant="basic", blocks=(4,), growth_rate=4, rule=rule(1, 1))
        assert count_connections(spec) == 7

    def test_dense_block(self):
        spec = NetworkSpec(variant="basic", blocks=(4,), growth_rate=4, rule=ConnectivityRule.dense())
        assert count_connections(spec) == 10

    def test_single_layer(self):
        spec = NetworkSpec(variant="basic", blocks=(1,), growth_rate=4, rule=rule(3, 5))
        assert count_connections(spec) == 1

    @staticmethod
    def total(blocks, f, r):
        return count_connections(NetworkSpec(variant="basic", blocks=blocks, growth_rate=4, rule=rule(f, r)))

    @pytest.mark.parametrize("blocks", [(1,), (5,), (3, 9), (8, 12, 16)])
    def test_non_decreasing_in_each_side(self, blocks):
        for f in range(8):
            for r in range(0 if f else 1, 8):
                here = self.total(blocks, f, r)
                assert self.total(blocks, f + 1, r) >= here
                assert self.total(blocks, f, r + 1) >= here

    @pytest.mark.parametrize("blocks", [(1,), (5,), (3, 9), (8, 12, 16)])
    def test_bounded_by_path_times_layers(self, blocks):
        for f in range(8):
            for r in range(0 if f else 1, 8):
                assert self.total(blocks, f, r) <= (f + r) * sum(blocks)


class TestValidateSpec:
    def test_table_row_is_valid(self):
        spec = NetworkSpec(variant="basic", blocks=(8, 12, 16), growth_rate=16, rule=ConnectivityRule.from_path(14))
        assert validate_spec(spec) == []

    def test_compression_inconsistent_with_basic(self):
        spec = NetworkSpec(variant="basic", blocks=(4,), growth_rate=4, rule=rule(1, 1), compression=0.7)
        assert any("compression" in p for p in validate_spec(spec))

    def test_zero_path(self):
        spec = NetworkSpec(variant="bc", blocks=(4,), growth_rate=4, rule=rule(0, 0))
        assert any("path" in p for p in validate_spec(spec))

    def test_reports_every_violation(self):
        spec = NetworkSpec(variant="basic", blocks=(4, 0), growth_rate=0, rule=rule(0, 0),
                           compression=0.5, stem_channels=4)
        problems = validate_spec(spec)
        assert len(problems) >= 4

    def test_spatial_divisibility(self):
        spec = NetworkSpec(variant="bc", blocks=(1, 1, 1), growth_rate=4, rule=rule(1, 1), input_size=6)
        assert any("input_size" in p for p in validate_spec(spec))

    def test_graph_rejects_invalid_spec(self):
        spec = NetworkSpec(variant="bc", blocks=(4,), growth_rate=4, rule=rule(0, 0))
        with pytest.raises(SpecValidationError) as err:
            build_layer_graph(spec)
        assert err.value.diagnostics


class TestPresets:
    def test_all_presets_valid(self):
        for name in PRESETS:
            assert validate_spec(preset(name)) == []

    def test_published_table_complete(self):
        assert set(PUBLISHED) == set(PRESETS)

    def test_densenet_depths(self):
        assert reported_depth(preset("densenet-bc-100-12")) == 100
        assert reported_depth(preset("densenet-bc-190-40")) == 190
        assert reported_depth(preset("densenet-40-12")) == 40

    def test_variant_defaults(self):
        spec = preset("sparsenet-abc-v1")
        assert spec.variant is Variant.ABC
        assert spec.compression == 0.5
        assert spec.stem_channels == 32
        assert preset("sparsenet-v1").stem_channels == 16

    def test_unknown_preset(self):
        with pytest.raises(SpecValidationError):
            preset("resnet-50")

    def test_paper_depth(self):
        assert all(paper_depth(name) == PUBLISHED[name][1] for name in PRESETS)
        for name in ("sparsenet-bc-v1", "sparsenet-abc-v1", "densenet-bc-100-12", "densenet-bc-190-40"):
            assert reported_depth(preset(name)) == paper_depth(name)
        with pytest.raises(SpecValidationError):
            paper_depth("resnet-50")

    def test_num_classes_override(self):
        assert preset("sparsenet-bc-v1", num_classes=100).num_classes == 100

    def test_blocks_parse_from_text(self):
        spec = NetworkSpec(variant="bc", blocks="8-12-16", growth_rate=16, rule=rule(7, 7))
        assert spec.blocks == (8, 12, 16)
