import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from peqa import ConfigError
from peqa.accounting import (
    CATALOG_NAMES,
    LayerCatalog,
    bytes_per_param_for,
    count_learnable,
    format_size_table,
    load_catalog,
    lora_learnable,
    model_size_bytes,
    optimizer_state_bytes,
    size_reduction,
    size_table,
)

# (hidden, ffn, layers) of each shipped catalog, vocabulary 32000
SHAPES = {
    "llama7b": (4096, 11008, 32),
    "llama13b": (5120, 13824, 40),
    "llama30b": (6656, 17920, 60),
    "llama65b": (8192, 22016, 80),
}
COUNTS = {"llama7b": 1_359_872, "llama13b": 2_129_920, "llama30b": 4_147_200, "llama65b": 6_799_360}
SIZES_GB = {"llama7b": 3.77, "llama13b": 7.01, "llama30b": 16.92, "llama65b": 33.45}


@pytest.fixture(scope="module")
def catalogs():
    return {name: load_catalog(name) for name in CATALOG_NAMES}


@pytest.mark.parametrize("name", CATALOG_NAMES)
def test_learnable_counts(catalogs, name):
    assert count_learnable(catalogs[name]) == COUNTS[name] == oracles.llama_learnable(*SHAPES[name])


@pytest.mark.parametrize("name", CATALOG_NAMES)
def test_group_wise_counts_match_oracle(catalogs, name):
    for g in (64, 128, 256):
        assert count_learnable(catalogs[name], g) == oracles.llama_learnable(*SHAPES[name], group=g)


@pytest.mark.parametrize("name", CATALOG_NAMES)
def test_model_sizes(catalogs, name):
    got = model_size_bytes(catalogs[name], 4)
    assert got == pytest.approx(SIZES_GB[name] * 1e9, rel=0.02)
    assert got == pytest.approx(oracles.llama_size_bytes(*SHAPES[name], 32000, 4), abs=1)


def test_dense_7b_is_13_5_gb(catalogs):
    assert model_size_bytes(catalogs["llama7b"], 16) / 1e9 == pytest.approx(13.5, rel=0.01)


@pytest.mark.parametrize("name", CATALOG_NAMES)
def test_catalog_close_to_published_parameter_count(catalogs, name):
    cat = catalogs[name]
    assert cat.total_params == pytest.approx(cat.published_params, rel=0.02)


def test_lora_counts(catalogs):
    assert lora_learnable(catalogs["llama65b"]) == 10_485_760
    assert lora_learnable(catalogs["llama7b"], ("q_proj", "k_proj", "v_proj", "o_proj"), 16) == 16_777_216


def test_optimizer_state_conventions(catalogs):
    peqa = count_learnable(catalogs["llama65b"])
    assert optimizer_state_bytes(peqa) / 1e6 == pytest.approx(54.39488)
    lora = lora_learnable(catalogs["llama65b"])
    assert optimizer_state_bytes(lora) / 1e6 == pytest.approx(83.88608)
    assert optimizer_state_bytes(lora, convention="master") == 16 * lora
    assert optimizer_state_bytes(lora, bytes_per_param=5) / 1e6 == pytest.approx(52.4288)
    # implied bytes per parameter of a 52 MB figure for the same count
    assert bytes_per_param_for(52e6, lora) == pytest.approx(4.96, abs=0.01)
    with pytest.raises(ConfigError):
        optimizer_state_bytes(10, optimizer="sgd")
    with pytest.raises(ConfigError):
        optimizer_state_bytes(10, convention="half")


def test_halving_group_size_doubles_count(catalogs):
    cat = catalogs["llama13b"]
    for g in (256, 128):
        assert count_learnable(cat, g // 2) == 2 * count_learnable(cat, g)


def test_group_size_must_divide(catalogs):
    with pytest.raises(ConfigError):
        count_learnable(catalogs["llama7b"], 100)
    with pytest.raises(ConfigError):
        model_size_bytes(catalogs["llama7b"], 4, 100)


def test_unknown_catalog():
    with pytest.raises(ConfigError):
        load_catalog("llama1000b")


def test_catalog_from_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"name": "toy", "linear": [{"name": "fc", "n": 4, "m": 8, "count": 2}],'
                    ' "dense": [{"name": "emb", "size": 10}]}')
    cat = load_catalog(str(path))
    assert cat.total_params == 74 and count_learnable(cat) == 8 and count_learnable(cat, 4) == 16
    assert model_size_bytes(cat, 4) == 2 * (4 * 4 + 4 * 8) + 20


def test_size_table_rows(catalogs):
    rows = size_table([catalogs[n] for n in CATALOG_NAMES])
    assert [r["peqa"] for r in rows] == [COUNTS[n] for n in CATALOG_NAMES]
    text = format_size_table(rows)
    assert "1.36" in text and "6.80" in text and "3.77" in text


@given(st.sampled_from(CATALOG_NAMES), st.sampled_from([2, 3, 4, 8]), st.sampled_from([2, 3, 4, 8]))
def test_size_monotone_in_bits(name, b1, b2):
    cat = load_catalog(name)
    if b1 <= b2:
        assert model_size_bytes(cat, b1) <= model_size_bytes(cat, b2)


def test_layer_size_reduction():
    assert size_reduction(4096, 4096, 3) == pytest.approx(1 - (4096 * 4096 * 3 / 8 + 4096 * 8) / (4096 * 4096 * 2))
    assert size_reduction(4096, 4096, 4) > 0.74
    assert np.isnan(bytes_per_param_for(1, 0))


def test_layer_catalog_rejects_bad_dimension():
    with pytest.raises(ConfigError):
        LayerCatalog.from_dict({"name": "x", "linear": [{"name": "a", "n": 0, "m": 1, "count": 1}]})
