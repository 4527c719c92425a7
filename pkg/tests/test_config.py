import pytest

from spikedistill.config import ConfigError, DEFAULTS, RunConfig, load_config, parse_config_text


def test_defaults_cover_every_key():
    cfg = RunConfig()
    for key in DEFAULTS:
        assert cfg[key] == DEFAULTS[key][0]


def test_parsing_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ndistill.alpha = 0.5\nseed = 3  # trailing\n"
                    "distill.levels = low, high\ndistill.normalize = false\n")
    cfg = load_config(path, ["distill.alpha=0.25"], seed=9, out=tmp_path / "o")
    assert cfg["distill.alpha"] == 0.25
    assert cfg["seed"] == 9
    assert cfg["distill.levels"] == ("low", "high")
    assert cfg["distill.normalize"] is False
    assert cfg["dataset.image_shape"] == (1, 28, 28)


def test_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("distill.beta = 1")
    with pytest.raises(ConfigError, match="twice"):
        parse_config_text("seed = 1\nseed = 2")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("seed 1")
    with pytest.raises(ConfigError, match="parse"):
        load_config(overrides=["seed=abc"])
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")


def test_hash_ignores_output_directory():
    a = load_config(out="runs/a")
    b = load_config(out="runs/b")
    assert a.hash == b.hash and len(a.hash) == 64
    assert load_config(seed=1).hash != a.hash


def test_text_round_trip():
    cfg = load_config(overrides=["distill.lr=3e-4", "convert.percentile=99.9"])
    again = RunConfig(parse_config_text(cfg.to_text()))
    assert again == cfg and again.hash == cfg.hash
