"""Command-line parsing and exit codes."""

import pytest

from app import main as cli
from app.core.error_handling import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, DatasetFormatError
from app.core.run_config import RunConfig

pytestmark = pytest.mark.unit


@pytest.fixture
def captured(mocker):
    """Replace the experiment runners; the captured RunConfig is what the command would have run with."""
    seen = {}

    def fake_eval(config):
        seen["config"] = config
        return mocker.Mock(to_frame=lambda: mocker.Mock(to_string=lambda **_: "report"))

    mocker.patch.object(cli.experiments, "run_evaluation", side_effect=fake_eval)
    return seen


def test_every_field_has_a_flag(capsys):
    args = cli.build_parser().parse_args(["train", "--lr-drop-epoch", "5", "--n-self", "3", "--model", "image-only"])
    assert args.command == "train"
    assert (args.lr_drop_epoch, args.n_self, args.model) == ("5", "3", "image-only")
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["train", "--help"])
    assert excinfo.value.code == 0
    help_text = capsys.readouterr().out
    for name in RunConfig.model_fields:
        assert "--" + name.replace("_", "-") in help_text


def test_missing_command_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.main([])
    assert excinfo.value.code == EXIT_USAGE


def test_flags_reach_the_runner(captured, tmp_path):
    config_file = tmp_path / "run.cfg"
    config_file.write_text("n_boot=50\nmetric=auprc\n")
    code = cli.main(["eval", "--config", str(config_file), "--n-boot", "20", "--run-dir", str(tmp_path)])
    assert code == EXIT_OK
    config = captured["config"]
    assert config.n_boot == 20
    assert config.metric == "auprc"
    assert config.run_dir == str(tmp_path)


def test_bad_flag_value_exits_with_usage(captured, capsys):
    assert cli.main(["eval", "--n-boot", "zero"]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err
    assert "config" not in captured


def test_missing_config_file_exits_with_usage(captured, tmp_path):
    assert cli.main(["eval", "--config", str(tmp_path / "absent.cfg")]) == EXIT_USAGE


def test_runtime_failures_exit_with_one(mocker, capsys):
    mocker.patch.object(cli.experiments, "run_training", side_effect=DatasetFormatError("manifest.jsonl line 3"))
    assert cli.main(["train"]) == EXIT_RUNTIME
    assert "manifest.jsonl line 3" in capsys.readouterr().err


def test_generate_prints_a_summary(mocker, capsys, tmp_path):
    manifest = mocker.Mock(entries=[1, 2, 3], root=tmp_path)
    runner = mocker.patch.object(cli.experiments, "run_generate", return_value=manifest)
    assert cli.main(["gen-data", "--n", "3", "--task", "2"]) == EXIT_OK
    config = runner.call_args.args[0]
    assert (config.n, config.task) == (3, 2)
    assert "wrote 3 records" in capsys.readouterr().out
