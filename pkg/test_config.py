#!/usr/bin/env python3
"""
Tests for INI configuration files and [model] section resolution.
"""

import pytest

from config import (
    load_config,
    network_spec_from_section,
    parse_config_text,
    parse_count,
    rule_from_fields,
    spec_to_text,
)
from errors import ConfigError
from topology import ConnectivityRule, Variant, preset

V1BC = """
[model]
variant = bc
blocks = 8-12-16
growth_rate = 16
path = 14   # default 7-7 split

[train]
epochs = 5
batch_size = 32
"""


class TestParseConfig:
    def test_sections(self):
        parsed = parse_config_text(V1BC)
        assert parsed.model["path"] == "14"
        assert parsed.train == {"epochs": "5", "batch_size": "32"}
        assert parsed.sweep == {}

    def test_spec_from_model_section(self):
        spec = network_spec_from_section(parse_config_text(V1BC).model)
        assert spec.variant is Variant.BC
        assert spec.blocks == (8, 12, 16)
        assert (spec.rule.farthest, spec.rule.nearest) == (7, 7)
        assert spec.stem_channels == 32

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse_config_text("[optimizer]\nlr = 0.1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("[model]\nvariant = bc\ndepth = 100\n")

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_config_text("variant = bc\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_load_from_disk(self, tmp_path):
        path = tmp_path / "v1bc.cfg"
        path.write_text(V1BC)
        assert load_config(path).source == str(path)


class TestModelSection:
    def test_preset(self):
        spec = network_spec_from_section({"preset": "sparsenet-abc-v1", "num_classes": "100"})
        assert spec == preset("sparsenet-abc-v1", num_classes=100)

    def test_preset_rejects_overrides(self):
        with pytest.raises(ConfigError):
            network_spec_from_section({"preset": "sparsenet-abc-v1", "growth_rate": "12"})

    def test_bad_field(self):
        with pytest.raises(ConfigError):
            network_spec_from_section({"variant": "wide", "blocks": "4", "growth_rate": "4", "path": "2"})

    def test_round_trip(self):
        for spec in (preset("sparsenet-bc-v1"), preset("densenet-bc-100-12"),
                     network_spec_from_section({"variant": "basic", "blocks": "5,5", "growth_rate": "4",
                                                "farthest": "3", "nearest": "1"})):
            text = spec_to_text(spec)
            assert network_spec_from_section(parse_config_text(text).model) == spec


class TestRuleFromFields:
    def test_dense(self):
        assert rule_from_fields("dense", None, None) == ConnectivityRule.dense()

    def test_default_split(self):
        assert rule_from_fields("15", None, None) == ConnectivityRule(farthest=8, nearest=7)

    def test_one_side_takes_remainder(self):
        assert rule_from_fields("14", 10, None) == ConnectivityRule(farthest=10, nearest=4)
        assert rule_from_fields("14", None, 14) == ConnectivityRule(farthest=0, nearest=14)

    def test_inconsistent(self):
        with pytest.raises(ConfigError):
            rule_from_fields("14", 10, 10)

    def test_missing(self):
        with pytest.raises(ConfigError):
            rule_from_fields(None, None, None)

    def test_not_a_number(self):
        with pytest.raises(ConfigError):
            rule_from_fields("many", None, None)


class TestParseCount:
    @pytest.mark.parametrize("text, expected", [
        ("1M", 1_000_000), ("850K", 850_000), ("1200000", 1_200_000), ("1.5m", 1_500_000),
    ])
    def test_values(self, text, expected):
        assert parse_count(text) == expected

    def test_invalid(self):
        with pytest.raises(ValueError):
            parse_count("lots")
