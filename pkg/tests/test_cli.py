import json

import pytest

from dcaptcha import cli, experiment
from dcaptcha.experiment import InvariantViolation, _same_corpus, default_config

TINY = {"corpus": {"n_per_task": 10, "duration_s": 0.5}}


def _config(tmp_path, extra=None):
    d = default_config().to_dict()
    d["corpus"].update(TINY["corpus"])
    d.update(extra or {})
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(d))
    return str(path)


def test_gen_corpus_with_env_out(tmp_path, monkeypatch):
    monkeypatch.setenv("DCAPTCHA_OUT", str(tmp_path / "env"))
    assert cli.main(["gen-corpus", "--config", _config(tmp_path), "--seed", "3"]) == 0
    stage = json.loads((tmp_path / "env" / "corpus" / "stage.json").read_text())
    assert stage["corpus_hash"]
    # --out wins over the environment
    assert cli.main(["gen-corpus", "--config", _config(tmp_path),
                     "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "corpus" / "stage.json").exists()


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-corpus", "--config", _config(tmp_path, {"colour": 1}),
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-corpus", "--config", str(tmp_path / "none.json"),
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-corpus", "--out", str(tmp_path), "--jobs", "0"]) == 2


def test_missing_artifact_exit_3(tmp_path):
    for stage in ("train", "attack", "transfer-eval", "advtrain", "pipeline-sim", "report"):
        assert cli.main([stage, "--out", str(tmp_path / "empty")]) == 3


def test_invariant_violation_exit_4(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise InvariantViolation("stage-2 got worse")

    monkeypatch.setattr(cli, "run_stage", broken)
    assert cli.main(["attack", "--out", str(tmp_path)]) == 4


def test_mixed_corpora_are_refused():
    with pytest.raises(InvariantViolation):
        _same_corpus({"a": {"corpus_hash": "x"}, "b": {"corpus_hash": "y"}}, "report")


def test_default_config_round_trip(tmp_path, capsys):
    assert cli.main(["default-config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert experiment.ExperimentConfig.from_dict(d) == default_config()
