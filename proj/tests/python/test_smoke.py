import pathlib

import pytest

import tsfed

SMOKE = pathlib.Path(__file__).resolve().parents[2] / "configs" / "smoke.ini"


@pytest.fixture(scope="module")
def config():
    return tsfed.Config.load(str(SMOKE))


@pytest.fixture(scope="module")
def result(config):
    return tsfed.train(config)


def test_config_round_trip(config):
    text = config.to_text()
    assert tsfed.Config.parse(text).to_text() == text
    c = tsfed.Config.parse(text)
    c.set("lr", "0.5")
    assert "lr = 0.5" in c.to_text()


def test_bad_config_raises():
    with pytest.raises(tsfed.ConfigError):
        tsfed.Config.parse("rounds = many\n")
    with pytest.raises(ValueError):
        tsfed.Config.parse("[nope]\nx = 1\n")


def test_train_reports(result, config):
    assert len(result.rounds) == config.rounds
    assert [r["round"] for r in result.rounds] == list(range(1, config.rounds + 1))
    assert len(result.bias_trajectory) == config.rounds + 1


def test_training_is_deterministic(result, config):
    assert tsfed.train(config).checkpoint == result.checkpoint


def test_evaluate(result, config):
    reports = tsfed.evaluate(result.checkpoint, config)
    assert [r["mask_ratio"] for r in reports] == [0.2, 0.35, 0.5, 0.75, 0.9]
    for r in reports:
        assert r["mse"] > 0.0
        assert r["mae"] <= r["mse"] ** 0.5 + 1e-12
    zero = tsfed.evaluate(result.checkpoint, config, [0.0])[0]
    assert zero["no_masked_positions"] and zero["mse"] == 0.0


def test_artifacts(tmp_path, config):
    tsfed.train(config, tmp_path)
    assert (tmp_path / "rounds.csv").exists()
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()


def test_scaling_sweep(config):
    rows = tsfed.scaling_sweep(config, "join_rate", [0.5, 1.0])
    assert [v for v, _ in rows] == [0.5, 1.0]
    with pytest.raises(tsfed.ConfigError):
        tsfed.scaling_sweep(config, "rounds", [1.0])
