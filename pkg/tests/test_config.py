"""Tests for dfmoe.config: JSON/YAML loading, strict fields, validation, seeding."""

from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from dfmoe.config import (
    RNG_COMPONENTS,
    component_int,
    component_rng,
    config_from_dict,
    load_config,
)
from dfmoe.errors import ConfigInvalid


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

class TestLoadConfig:
    def test_json_and_yaml_agree(self, tmp_path, config_dict):
        (tmp_path / "c.json").write_text(json.dumps(config_dict))
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(config_dict))
        assert load_config(tmp_path / "c.json") == load_config(tmp_path / "c.yaml")

    def test_lists_become_tuples(self, small_config):
        assert small_config.equivalence.prefix_lengths == (0, 1)
        assert small_config.ablation.algorithms == ("balanced", "two_stage")

    def test_integer_accepted_for_float(self, config_dict):
        config_dict["router"]["temperature"] = 2
        assert config_from_dict(config_dict).router.temperature == 2.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigInvalid, match="cannot read"):
            load_config(tmp_path / "nope.json")

    def test_unparseable(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigInvalid, match="cannot parse"):
            load_config(tmp_path / "bad.json")

    def test_to_dict_round_trip(self, small_config):
        assert config_from_dict(small_config.to_dict()) == small_config


class TestStrictFields:
    def test_missing_field_named(self, config_dict):
        del config_dict["kmeans"]["n_init"]
        with pytest.raises(ConfigInvalid, match="kmeans.n_init"):
            config_from_dict(config_dict)

    def test_unknown_field_named(self, config_dict):
        config_dict["router"]["jitter"] = 0.1
        with pytest.raises(ConfigInvalid, match="router.jitter"):
            config_from_dict(config_dict)

    def test_wrong_type(self, config_dict):
        config_dict["seq_len"] = "3"
        with pytest.raises(ConfigInvalid, match="seq_len"):
            config_from_dict(config_dict)

    def test_bool_is_not_an_integer(self, config_dict):
        config_dict["num_experts"] = True
        with pytest.raises(ConfigInvalid):
            config_from_dict(config_dict)

    def test_top_level_must_be_mapping(self):
        with pytest.raises(ConfigInvalid):
            config_from_dict([1, 2])


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("path, value", [
    (("vocab_size",), 2),
    (("prefix_len",), 3),
    (("num_experts",), 0),
    (("router", "top_k"), 3),
    (("router", "temperature"), 0.0),
    (("kmeans", "algorithm"), "kmedoids"),
    (("kmeans", "k_fine"), 1),
    (("corpus", "heldout_fraction"), 0.0),
    (("corpus", "separation"), 1.5),
    (("equivalence", "prefix_lengths"), [5]),
    (("ablation", "algorithms"), ["spectral"]),
])
def test_invalid_values_rejected(config_dict, path, value):
    target = config_dict
    for key in path[:-1]:
        target = target[key]
    target[path[-1]] = value
    with pytest.raises(ConfigInvalid):
        config_from_dict(config_dict)


def test_state_space_limit(config_dict):
    config_dict["vocab_size"] = 11
    config_dict["seq_len"] = 6
    with pytest.raises(ConfigInvalid, match="exceeds"):
        config_from_dict(config_dict)


def test_vocab_reserves_last_token_as_mask(small_config):
    assert small_config.vocab.mask_id == 2
    assert small_config.state_count == 9


def test_with_overrides(small_config):
    changed = small_config.with_overrides(seed=3, output_dir="elsewhere")
    assert (changed.seed, changed.output_dir) == (3, "elsewhere")
    assert small_config.with_overrides() is small_config


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def test_component_streams_are_deterministic():
    a = component_rng(5, "kmeans").random(4)
    b = component_rng(5, "kmeans").random(4)
    np.testing.assert_array_equal(a, b)


def test_component_streams_are_independent():
    draws = {name: component_int(5, name) for name in RNG_COMPONENTS}
    assert len(set(draws.values())) == len(RNG_COMPONENTS)


def test_unknown_component():
    with pytest.raises(KeyError):
        component_rng(0, "dropout")
