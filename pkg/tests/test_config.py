import pytest

from radssl.config import KEYS, ConfigError, RunConfig, from_mapping, load_config, parse_text
from radssl.encoder import EncoderConfig
from radssl.pipeline import TrainConfig


def test_defaults_match_component_defaults():
    cfg = RunConfig()
    assert cfg.train == TrainConfig()
    assert cfg.encoder_config(100) == EncoderConfig()
    assert (cfg.folds, cfg.repetitions) == (10, 5)


def test_every_key_round_trips_through_text(tmp_path):
    cfg = from_mapping({"epochs": "7", "lambda": "0.25", "n_heads": "2", "k_fixed": "3", "folds": "4"})
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    again = load_config(path)
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert [k for k, _ in cfg.items()] == list(KEYS)


def test_parse_comments_and_blank_lines():
    assert parse_text("# header\n\nbeta = 0.2  # trailing\n") == {"beta": "0.2"}


@pytest.mark.parametrize("text, match", [
    ("gamma = 1\n", "unknown key"),
    ("beta = 1\nbeta = 2\n", "duplicate"),
    ("beta\n", "key = value"),
])
def test_parse_errors_name_the_line(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_text(text, "c.txt")


@pytest.mark.parametrize("values", [{"epochs": "many"}, {"epochs": "0"}, {"folds": "1"}, {"n_heads": "3", "d_model": "10"},
                                    {"use_position_encoding": "maybe"}])
def test_bad_values(values):
    with pytest.raises(ConfigError):
        from_mapping(values)


def test_overrides_win_and_change_the_hash():
    base = RunConfig()
    over = base.with_overrides({"beta": "0.7", "seed": 3})
    assert over.train.loss_weights.beta == 0.7 and over.train.seed == 3
    assert over.hash() != base.hash()
    assert base.with_overrides({}).hash() == base.hash()


def test_dataset_is_resolved_relative_to_the_config(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "run.txt").write_text("dataset = data/manifest.csv\n")
    assert load_config(sub / "run.txt").dataset == str(sub / "data" / "manifest.csv")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.txt")


def test_d_model_must_match_the_data():
    cfg = from_mapping({"d_model": "20", "n_heads": "2"})
    assert cfg.encoder_config(20).d_model == 20
    with pytest.raises(ConfigError, match="feature columns"):
        cfg.encoder_config(8)
    with pytest.raises(ConfigError, match="auto"):
        RunConfig().encoder_config()
