import tempfile
from pathlib import Path

import pytest

from smoothguard.attacks import AttackFamily
from smoothguard.config import (
    ExperimentConfig,
    config_keys,
    dump_config,
    load_config,
    parse_config,
)
from smoothguard.data import DataSource
from smoothguard.exceptions import ConfigurationError
from smoothguard.noise import NoiseTarget
from smoothguard.smoothing import Voting
from smoothguard.training import TrainMode

TINY_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "tiny.conf"


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield Path(tmpdirname)


def test_defaults():
    """An empty config yields the documented defaults."""
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.attack.epsilon == 8 / 255
    assert cfg.run.seeds == [0, 1, 2]


def test_dump_parse_roundtrip():
    """Dumping a config and parsing it back gives an equal config."""
    cfg = parse_config(
        "train.attack.epsilon=4/255\nsweep.sigmas=0,0.12\nsmoothing.voting=weighted_top_c\n"
        "smoothing.top_c=0.3\nmodel.noise_target=activation\ndataset.feature_columns=a,b\n"
    )
    assert parse_config(dump_config(cfg)) == cfg


def test_dump_lists_every_key():
    """The dump has one line per leaf key."""
    lines = dump_config(ExperimentConfig()).splitlines()
    assert [line.split("=", 1)[0] for line in lines] == config_keys()


def test_values_are_typed():
    """Values are coerced to the declared field types; fractions are accepted."""
    cfg = parse_config(
        "train.mode=cni_iw\ntrain.q=1/4\nsmoothing.voting=soft\nrun.num_seeds=5\n"
        "sweep.km_families=pgd,epgd\ntrain.val_attack=no\n"
    )
    assert cfg.train.mode is TrainMode.CNI_IW
    assert cfg.train.q == 0.25
    assert cfg.smoothing.voting is Voting.SOFT
    assert cfg.run.num_seeds == 5
    assert cfg.sweep.km_families == [AttackFamily.PGD, AttackFamily.EPGD]
    assert cfg.train.val_attack is False


def test_comments_and_blank_lines():
    """Comment and blank lines are ignored."""
    cfg = parse_config("# heading\n\n   \nrun.seed=4\n  # indented comment\n")
    assert cfg.run.seed == 4


def test_overrides_win(temp_dir):
    """Command-line overrides replace file values."""
    path = temp_dir / "exp.conf"
    path.write_text("run.seed=1\nsmoothing.samples=8\n")
    cfg = load_config(path, ["smoothing.samples=16"])
    assert (cfg.run.seed, cfg.smoothing.samples) == (1, 16)


def test_unknown_key():
    """Unknown keys are rejected by name."""
    with pytest.raises(ConfigurationError, match="train.learning_rate"):
        parse_config("train.learning_rate=0.1")


def test_bad_value_names_key():
    """An unparsable value names its key."""
    with pytest.raises(ConfigurationError, match="train.epochs"):
        parse_config("train.epochs=many")


def test_line_without_equals():
    """A line that is not key=value names its line number."""
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_config("run.seed=1\nrun.seed\n")


@pytest.mark.parametrize(
    "text",
    [
        "train.w=1.5",
        "smoothing.samples=0",
        "smoothing.sigma=-0.1",
        "svm.trials=10",
        "sweep.samples=",
        "sweep.km_families=pgd,nes",
        "run.split=holdout",
        "attack.k=0",
    ],
)
def test_out_of_range_values(text):
    """Values outside their valid range are configuration errors."""
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_missing_file(temp_dir):
    """A config path that does not exist is a configuration error."""
    with pytest.raises(ConfigurationError):
        load_config(temp_dir / "absent.conf")


def test_tiny_config_parses():
    """The shipped tiny config loads."""
    cfg = load_config(TINY_CONFIG)
    assert cfg.dataset.source is DataSource.DIGITS
    assert cfg.model.noise_target.value == NoiseTarget.WEIGHT.value
    assert cfg.train.mode is TrainMode.ADVERSARIAL
    assert cfg.sweep.samples == [1, 2, 4]
    assert cfg.run.seeds == [0, 1]
