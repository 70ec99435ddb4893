import pytest

from lanerec.config import ConfigError, RunConfig, dump_config, load_config, parse_config


def test_empty_is_defaults():
    assert parse_config("") == RunConfig()
    assert load_config(None) == RunConfig()


def test_sections_apply():
    cfg = parse_config("""
road:
  road_length: 400
reward:
  alpha2: 2.5
traffic:
  lane_speed_range: [[5, 6], [7, 8], [12, 15], [12, 15]]
sim:
  max_steps: 90
train:
  episodes: 7
  optimizer: adam
baseline:
  seed: 3
eval:
  episodes: 12
run:
  out_dir: somewhere
""")
    assert cfg.env.road.road_length == 400.0
    assert cfg.env.weights.alpha2 == 2.5
    assert cfg.env.spawn.lane_speed_range[1] == (7, 8)
    assert cfg.env.max_steps == 90
    assert (cfg.train.episodes, cfg.train.optimizer) == (7, "adam")
    assert cfg.baseline.seed == 3
    assert cfg.eval.episodes == 12
    assert cfg.out_dir == "somewhere"


def test_round_trip():
    cfg = parse_config("train:\n  episodes: 11\nreward:\n  alpha1: 2.0\n")
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text, needle", [
    ("reward:\n  alpha1: -1\n", "line 1"),
    ("reward:\n  alpha1: 1\n  alpha9: 1\n", "line 3: reward.alpha9: unknown field"),
    ("bogus:\n  x: 1\n", "unknown section"),
    ("train:\n  episodes: many\n", "line 2: train.episodes: expected an integer"),
    ("eval:\n  episodes: 0\n", "episodes must be positive"),
    ("sim:\n  road_length: 3\n", "sim.road_length: unknown field"),
    ("[1, 2]\n", "top level must be a mapping"),
    ("road: [\n", "cfg.yaml"),
])
def test_errors_name_field_and_line(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "cfg.yaml")
    assert needle in str(info.value)
    assert str(info.value).startswith("cfg.yaml")


def test_negative_weight_message():
    with pytest.raises(ConfigError, match="alpha1 must be >= 0"):
        parse_config("reward:\n  alpha1: -1\n")


def test_load_from_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("eval:\n  seed: 5\n")
    assert load_config(p).eval.seed == 5
