"""Run configuration: dataclass sections, INI load/save and command-line overrides."""

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Union

from .errors import ConfigError

PHASES = ("pretrain_text", "train_decouple", "eval")


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    phase: str = "pretrain_text"
    progress: bool = True
    record_wall_time: bool = True
    log_level: str = "INFO"


@dataclass
class DataSection:
    train_path: str = "data/train.dsva"
    eval_path: str = "data/eval.dsva"
    image_size: int = 64
    latent_dim: int = 64
    sigma_noise: float = 0.01
    train_scenes: int = 2000
    eval_scenes: int = 200
    mixing_seed: int = 0
    min_objects: int = 1
    max_objects: int = 4


@dataclass
class ModelSection:
    hidden_dim: int = 64
    embed_dim: int = 64
    patch_size: int = 8
    points: int = 4
    blocks: int = 2
    heads: int = 2
    disc_hidden: int = 64
    q_hidden: int = 64
    leaky_slope: float = 0.2


@dataclass
class LossSection:
    ce_variant: str = "bce"
    epsilon_dice: float = 1e-6
    lambda_ortho: float = 0.01
    gate_mode: str = "learned"
    gate_value: float = 0.5


@dataclass
class AdversarySection:
    lambda_adv: float = 0.1
    wiring: str = "cross"
    clamp_eps: float = 1e-6


@dataclass
class ClubSection:
    k: int = 5
    q_steps_per_update: int = 5
    lambda_club: float = 0.1
    mixture_components: int = 1
    q_learning_rate: float = 1e-3


@dataclass
class OptimSection:
    kind: str = "adam"
    learning_rate: float = 1e-3
    disc_learning_rate: float = 1e-3


@dataclass
class TrainSection:
    phase1_steps: int = 3000
    phase2_steps: int = 5000
    batch_size: int = 16
    eval_interval: int = 500
    reprompt_train: bool = True
    freeze_image_encoder: bool = False
    skip_pretrain: bool = False
    phase1_checkpoint: str = ""


@dataclass
class EvalSection:
    iterations: int = 1
    hard_reprompt: bool = False
    batch_size: int = 50
    checkpoint: str = ""
    dump_masks: str = ""


@dataclass
class RunConfig:
    """Full experiment configuration; one INI section per field."""
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    adversary: AdversarySection = field(default_factory=AdversarySection)
    club: ClubSection = field(default_factory=ClubSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def sections(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dataclasses.asdict(section) for name, section in self.sections().items()}

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    def validate(self) -> "RunConfig":
        """
        Check value ranges and cross-section consistency.

        Raises:
            ConfigError: On the first invalid value
        """
        checks = [
            (self.run.phase in PHASES, f"run.phase must be one of {PHASES}"),
            (self.data.image_size >= 32, "data.image_size must be >= 32"),
            (
                self.data.image_size % self.model.patch_size == 0,
                "data.image_size must be divisible by model.patch_size",
            ),
            (self.data.latent_dim >= 1, "data.latent_dim must be >= 1"),
            (self.data.sigma_noise >= 0, "data.sigma_noise must be >= 0"),
            (
                1 <= self.data.min_objects <= self.data.max_objects <= 4,
                "data object counts must satisfy 1 <= min <= max <= 4",
            ),
            (self.model.embed_dim % self.model.heads == 0, "model.embed_dim must divide by heads"),
            (self.model.points >= 1 and self.model.blocks >= 1, "model.points/blocks must be >= 1"),
            (self.loss.ce_variant in ("bce", "squared_error"), "loss.ce_variant is unknown"),
            (self.loss.epsilon_dice > 0, "loss.epsilon_dice must be > 0"),
            (self.loss.gate_mode in ("learned", "fixed"), "loss.gate_mode is unknown"),
            (0.0 <= self.loss.gate_value <= 1.0, "loss.gate_value must be in [0, 1]"),
            (self.adversary.wiring in ("cross", "confusion"), "adversary.wiring is unknown"),
            (
                min(self.loss.lambda_ortho, self.adversary.lambda_adv, self.club.lambda_club) >= 0,
                "loss weights must be >= 0",
            ),
            (self.club.k >= 1, "club.k must be >= 1"),
            (self.club.mixture_components >= 1, "club.mixture_components must be >= 1"),
            (self.optim.kind in ("sgd", "adam"), "optim.kind must be sgd or adam"),
            (self.train.batch_size >= 2, "train.batch_size must be >= 2"),
            (
                min(self.train.phase1_steps, self.train.phase2_steps) >= 0,
                "step budgets must be >= 0",
            ),
            (self.train.eval_interval >= 0, "train.eval_interval must be >= 0"),
            (self.eval.iterations >= 0, "eval.iterations must be >= 0"),
            (self.eval.batch_size >= 1, "eval.batch_size must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


def _coerce(raw: str, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {raw!r}") from None
    return raw


def set_value(config: RunConfig, section: str, key: str, raw: str) -> None:
    """
    Assign one value from text, coerced to the field's type.

    Raises:
        ConfigError: On an unknown section or key, or an uncoercible value
    """
    sections = config.sections()
    if section not in sections:
        raise ConfigError(f"unknown config section [{section}]")
    target = sections[section]
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(target, key, _coerce(raw, getattr(target, key), f"{section}.{key}"))


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply "section.key=value" strings in order."""
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        set_value(config, section, key.strip(), raw.strip())
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Read an INI file; absent keys keep their defaults.

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: On unknown sections, keys or bad values
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    config = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(config, section, key, raw)
    return config


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write every field; floats use repr so a reload is lossless."""
    parser = configparser.ConfigParser(interpolation=None)
    for name, section in config.sections().items():
        parser[name] = {
            key: (repr(value) if isinstance(value, float) else str(value).lower()
                  if isinstance(value, bool) else str(value))
            for key, value in dataclasses.asdict(section).items()
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path
