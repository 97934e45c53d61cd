from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lungct_gan.config import (ConfigError, GeneratorConfig, TrainConfig, config_hash, flatten_config,
                               format_config, parse_config_text, scale_channels, train_config_from_flat)


def test_parse_sections_and_comments():
    text = """
    # run settings
    epochs = 3
    [generator]
    family = biggan3d   # trailing comment
    width_multiplier = 1/8
    """
    assert parse_config_text(text) == {"epochs": "3", "generator.family": "biggan3d",
                                       "generator.width_multiplier": "1/8"}


def test_parse_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_config_text("epochs 3")


def test_flat_roundtrip():
    cfg = train_config_from_flat({"generator.family": "dcgan3d", "generator.width_multiplier": "1/4",
                                  "largeebs.enabled": "false", "epochs": "2", "fid.weights": "none"})
    again = train_config_from_flat(parse_config_text(format_config(flatten_config(cfg))))
    assert again == cfg
    assert cfg.generator.width_multiplier == Fraction(1, 4)


@pytest.mark.parametrize("values,key", [
    ({"generator.family": "vae"}, "generator.family"),
    ({"epochs": "many"}, "epochs"),
    ({"optimizer.lr": "1"}, "optimizer.lr"),
    ({"generator.depth": "3"}, "generator.depth"),
    ({"bogus": "1"}, "bogus"),
    ({"batch_size": "8"}, "patches_per_scan"),
    ({"largeebs.keep_count": "1"}, "largeebs.keep_count"),
    ({"discriminator.width_multiplier": "-1"}, "discriminator.width_multiplier"),
])
def test_errors_name_the_key(values, key):
    with pytest.raises(ConfigError) as info:
        train_config_from_flat(values)
    assert info.value.key == key


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.patches_per_scan, cfg.style_mixing_probability) == (48, 672, 0.9)
    assert (cfg.largeebs.candidate_count, cfg.largeebs.keep_count, cfg.largeebs.warmup_epochs) == (192, 48, 5)


@pytest.mark.parametrize("channels,mult,expected", [(512, 1, 512), (512, Fraction(1, 8), 64),
                                                    (3, Fraction(1, 2), 2), (8, "1/8", 1)])
def test_scale_channels(channels, mult, expected):
    assert scale_channels(channels, mult) == expected


@pytest.mark.parametrize("mult", [0, -1, Fraction(1, 16)])
def test_scale_channels_rejects(mult):
    with pytest.raises(ConfigError):
        scale_channels(8, mult)


@given(st.integers(1, 64), st.integers(1, 4096))
def test_scale_channels_monotone(num, channels):
    m = Fraction(num, 64)
    if channels * m < 1:
        return
    assert channels * m <= scale_channels(channels, m) < channels * m + 1


def test_hash_tracks_values():
    a = flatten_config(TrainConfig())
    b = dict(a, epochs=21)
    assert config_hash(a) == config_hash(dict(a)) != config_hash(b)


def test_unknown_family():
    with pytest.raises(ConfigError):
        GeneratorConfig("transformer")
