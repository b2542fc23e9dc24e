import json

import pytest

from twinheat.cli import main

CONFIG_DOC = {
    "room": "bathroom",
    "trainDays": 7,
    "dtMinutes": 15,
    "evalEpisodes": 2,
    "mdp": {"episodeSteps": 48, "stepMinutes": 15},
    "dqn": {"learningRate": 2e-4, "epochs": 2, "episodesPerEpoch": 2},
    "seeds": {"data": 101, "fit": 5, "train": 7, "eval": 13},
    "serve": {"port": 0, "sweepIntervalSeconds": 0.1},
}


@pytest.fixture()
def config_file(tmp_path):
    doc = json.loads(json.dumps(CONFIG_DOC))
    doc["paths"] = {
        "dataDir": str(tmp_path / "data"),
        "twinDir": str(tmp_path / "twin"),
        "checkpointDir": str(tmp_path / "checkpoint"),
        "metricsDir": str(tmp_path / "metrics"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_generate_exit_zero_and_prints_artifacts(config_file, capsys):
    assert main(["generate", "--config", str(config_file)]) == 0
    out = capsys.readouterr().out
    assert "sensors" in out and "presence" in out


def test_missing_config_exit_two(tmp_path, capsys):
    code = main(["generate", "--config", str(tmp_path / "nope.json")])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_override_key_exit_two(config_file, capsys):
    code = main(["generate", "--config", str(config_file),
                 "--set", "trainingDays=14"])
    assert code == 2
    assert "trainingDays" in capsys.readouterr().err


def test_stage_failure_exit_three(config_file, capsys):
    code = main(["fit", "--config", str(config_file)])
    assert code == 3
    assert "stage failed: fit" in capsys.readouterr().err


def test_override_changes_room(config_file, tmp_path, capsys):
    code = main(["generate", "--config", str(config_file),
                 "--set", "room=bedroom"])
    assert code == 0
    sensors = tmp_path / "data" / "sensors.csv"
    assert "climate.bedroom" in sensors.read_text()[:2000]


def test_pipeline_prints_stage_summary(config_file, capsys):
    assert main(["pipeline", "--config", str(config_file)]) == 0
    out = capsys.readouterr().out
    for token in ("generate: ok", "fit: ok", "train: ok", "eval: ok",
                  "manifest:"):
        assert token in out


def test_subcommand_required():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
