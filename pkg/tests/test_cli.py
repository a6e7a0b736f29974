import json
import tempfile
from pathlib import Path

import pytest
from click.testing import CliRunner

from smoothguard.checkpoint import calculate_checksum
from smoothguard.cli import cli, cli_main
from smoothguard.config import load_config, parse_config
from smoothguard.report import EVAL_COLUMNS

SMALL_RUN = [
    "dataset.source=blobs",
    "dataset.classes=3",
    "dataset.n=90",
    "model.hidden=8",
    "model.noise_target=weight",
    "train.mode=clean",
    "train.epochs=1",
    "train.batch_size=16",
    "train.val_attack=false",
    "attack.epsilon=0.05",
    "attack.k=1",
    "sweep.sigmas=0,0.1",
    "sweep.samples=1,2",
    "run.num_seeds=1",
]


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield Path(tmpdirname)


@pytest.fixture
def checkpoint(temp_dir):
    """Train a tiny model through the CLI and return its checkpoint path."""
    out = temp_dir / "train"
    assert cli_main(["train", "-o", str(out), *SMALL_RUN]) == 0
    return out / "model.json"


def test_help_lists_commands():
    """Top-level help lists every subcommand."""
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("train", "finetune", "attack", "evaluate", "sweep-sigma-m", "svm-demo"):
        assert command in result.output


def test_dump_config_roundtrips(capsys):
    """dump-config prints a config that parses back to the resolved one."""
    assert cli_main(["dump-config", "--seed", "3", "smoothing.samples=8"]) == 0
    printed = capsys.readouterr().out
    assert "run.seed=3\n" in printed
    assert "train.seed=3\n" in printed
    expected = load_config(None, ["smoothing.samples=8", "run.seed=3", "train.seed=3"])
    assert parse_config(printed) == expected


def test_missing_checkpoint_exits_with_config_error(temp_dir, capsys):
    """A missing run.checkpoint is a configuration error naming the field."""
    missing = temp_dir / "absent.json"
    code = cli_main(["evaluate", "-o", str(temp_dir / "out"), f"run.checkpoint={missing}"])
    assert code == 1
    assert "run.checkpoint" in capsys.readouterr().err


def test_unknown_option_is_usage_error(capsys):
    """Unknown flags exit with code 1."""
    assert cli_main(["evaluate", "--bogus"]) == 1


def test_unknown_config_key(capsys):
    """Unknown override keys exit with code 1 and name the key."""
    assert cli_main(["dump-config", "smoothing.votes=soft"]) == 1
    assert "smoothing.votes" in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(checkpoint):
    """Training writes a checkpoint, a training log and a summary with the checkpoint hash."""
    out = checkpoint.parent
    assert checkpoint.is_file()
    assert (out / "train_log.csv").read_text().splitlines()[0].startswith("epoch,train_loss")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checkpoint_sha256"] == calculate_checksum(checkpoint)


def test_sweep_output_is_reproducible(temp_dir, checkpoint):
    """The sigma/M sweep writes the fixed header, one row per cell, identically across runs."""
    outputs = []
    for name in ("first", "second"):
        out = temp_dir / name
        args = ["sweep-sigma-m", "-o", str(out), *SMALL_RUN, f"run.checkpoint={checkpoint}"]
        assert cli_main(args) == 0
        outputs.append((out / "sweep_sigma_m.csv").read_bytes())
    lines = outputs[0].decode("utf-8").splitlines()
    assert lines[0] == ",".join(EVAL_COLUMNS)
    assert len(lines) == 5
    assert outputs[0] == outputs[1]


def test_evaluate_with_tally(temp_dir, checkpoint):
    """evaluate writes its report and, on request, the first example's vote tally."""
    out = temp_dir / "eval"
    args = ["evaluate", "--dump-tally", "-o", str(out), *SMALL_RUN, f"run.checkpoint={checkpoint}"]
    assert cli_main(args) == 0
    assert (out / "evaluate.csv").read_text().splitlines()[0] == ",".join(EVAL_COLUMNS)
    assert (out / "tally.csv").read_text().startswith("sample_index,class,probability,rank")


def test_transfer_needs_source_checkpoint(temp_dir, checkpoint, capsys):
    """A transfer evaluation without run.source_checkpoint exits with code 1."""
    args = ["evaluate", "--threat", "transfer", "-o", str(temp_dir / "t")]
    args += [*SMALL_RUN, f"run.checkpoint={checkpoint}"]
    assert cli_main(args) == 1
    assert "run.source_checkpoint" in capsys.readouterr().err


def test_attack_saves_examples(temp_dir, checkpoint):
    """attack saves the crafted examples next to its report."""
    out = temp_dir / "attack"
    assert cli_main(["attack", "-o", str(out), *SMALL_RUN, f"run.checkpoint={checkpoint}"]) == 0
    assert (out / "adversarial.npy").is_file()
    assert (out / "attack.csv").is_file()


def test_svm_demo(temp_dir):
    """svm-demo writes one CSV row per repetition and a coverage summary."""
    out = temp_dir / "svm"
    args = ["svm-demo", "-o", str(out), "svm.dim=3", "svm.n=40", "svm.trials=1000"]
    args.append("svm.repetitions=2")
    assert cli_main(args) == 0
    assert len((out / "svm_demo.csv").read_text().splitlines()) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["expected_coverage"] == pytest.approx(0.9973, abs=1e-4)
    assert "separable" in summary
