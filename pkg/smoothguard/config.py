"""
Experiment configuration.

Files are flat UTF-8 key=value lines; dotted keys address nested sections
(train.attack.epsilon=8/255). Lines starting with '#' and blank lines are ignored.
"""
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from .attacks import AttackConfig, AttackFamily
from .data import DatasetSpec
from .exceptions import ConfigurationError
from .models import ModelSpec
from .smoothing import SmoothingConfig, Voting
from .training import TrainConfig
from .values import coerce, render


@dataclass
class SmoothingSection:
    samples: int = 1
    sigma: float = 0.0
    voting: Voting = Voting.PREDICTION
    top_c: float = 0.0
    dump_tally: bool = False

    def __post_init__(self):
        self.voting = Voting(self.voting)
        self.config()

    def config(self, base_seed: int = 0) -> SmoothingConfig:
        return SmoothingConfig(self.samples, self.sigma, self.voting, self.top_c, base_seed)


@dataclass
class SweepSection:
    sigmas: List[float] = field(default_factory=lambda: [0.0, 0.1, 0.25, 0.5])
    samples: List[int] = field(default_factory=lambda: [1, 4, 16, 64])
    epsilons: List[float] = field(
        default_factory=lambda: [0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255]
    )
    km_families: List[AttackFamily] = field(
        default_factory=lambda: [AttackFamily.PGD, AttackFamily.EPGD, AttackFamily.SMOOTHADV]
    )
    km_iterations: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    km_backward_samples: List[int] = field(default_factory=lambda: [1, 2, 4, 8])

    def __post_init__(self):
        for name in (
            "sigmas",
            "samples",
            "epsilons",
            "km_families",
            "km_iterations",
            "km_backward_samples",
        ):
            if not getattr(self, name):
                raise ConfigurationError(f"sweep.{name} must not be empty")
        if min(self.sigmas) < 0 or min(self.epsilons) < 0:
            raise ConfigurationError("sweep.sigmas and sweep.epsilons must be non-negative")
        if min(self.samples + self.km_iterations + self.km_backward_samples) < 1:
            raise ConfigurationError("sweep sample and iteration counts must be at least 1")
        if AttackFamily.NES in self.km_families:
            raise ConfigurationError("sweep.km_families takes white-box families only")


@dataclass
class SVMSection:
    dim: int = 10
    n: int = 200
    separation: float = 8.0
    sigma: float = 0.1
    epsilon: float = 0.05
    trials: int = 10000
    z: float = 3.0
    repetitions: int = 1

    def __post_init__(self):
        if self.trials < 1000:
            raise ConfigurationError(f"svm.trials must be at least 1000, got {self.trials}")
        if self.dim < 1 or self.n < 2 or self.repetitions < 1:
            raise ConfigurationError("svm.dim, svm.n and svm.repetitions must be positive")
        if self.sigma < 0 or self.epsilon < 0 or self.z <= 0:
            raise ConfigurationError("svm.sigma and svm.epsilon must be >= 0 and svm.z > 0")


@dataclass
class RunSection:
    num_seeds: int = 3
    seed: int = 0
    out_dir: str = "runs"
    threads: int = 1
    split: str = "test"
    model_id: str = "model"
    checkpoint: str = ""
    source_checkpoint: str = ""
    log_file: str = ""

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ConfigurationError(f"run.num_seeds must be at least 1, got {self.num_seeds}")
        if self.threads < 1:
            raise ConfigurationError(f"run.threads must be at least 1, got {self.threads}")
        if self.seed < 0:
            raise ConfigurationError(f"run.seed must be non-negative, got {self.seed}")
        if self.split not in ("train", "val", "test"):
            raise ConfigurationError(f"run.split must be train, val or test, got {self.split!r}")

    @property
    def seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.num_seeds)]


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    svm: SVMSection = field(default_factory=SVMSection)
    run: RunSection = field(default_factory=RunSection)


def _hints(cls) -> Dict[str, Any]:
    return typing.get_type_hints(cls)


def config_keys(cls=ExperimentConfig, prefix: str = "") -> List[str]:
    """Every leaf key of a config class, in declaration order."""
    keys = []
    hints = _hints(cls)
    for f in fields(cls):
        hint = hints[f.name]
        if is_dataclass(hint):
            keys.extend(config_keys(hint, f"{prefix}{f.name}."))
        else:
            keys.append(f"{prefix}{f.name}")
    return keys


def _build(cls, values: Dict[str, str], prefix: str = ""):
    hints = _hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        hint = hints[f.name]
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, values, f"{key}.")
        elif key in values:
            kwargs[f.name] = coerce(values[key], hint, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid {prefix.rstrip('.') or 'config'}: {e}") from None


def _split_line(line: str, where: str):
    if "=" not in line:
        raise ConfigurationError(f"{where}: expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def parse_values(text: str, source: str = "config") -> Dict[str, str]:
    """Raw key -> text mapping from config file contents."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, value = _split_line(line, f"{source} line {lineno}")
        values[key] = value
    return values


def parse_config(text: str = "", overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Build a config from file text plus key=value overrides applied in order."""
    values = parse_values(text)
    for item in overrides:
        key, value = _split_line(item, "override")
        values[key] = value
    unknown = sorted(set(values) - set(config_keys()))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    return _build(ExperimentConfig, values)


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> ExperimentConfig:
    text = ""
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigurationError(f"config file not found: {config_path}")
        text = config_path.read_text(encoding="utf-8")
    return parse_config(text, overrides)


def flatten(cfg, prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            flat.update(flatten(value, f"{prefix}{f.name}."))
        else:
            flat[f"{prefix}{f.name}"] = value
    return flat


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every leaf, defaults included; parse_config(dump_config(cfg)) == cfg."""
    return "".join(f"{key}={render(value)}\n" for key, value in flatten(cfg).items())
