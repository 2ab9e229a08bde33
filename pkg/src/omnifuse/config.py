"""Run configuration: INI sections over dataclass defaults.

Precedence is command-line flag > ``OMNIFUSE_SEED`` (seed only) > file > default.
Every run writes the fully resolved file next to its outputs, and loading
that file back yields the same :class:`RunConfig`.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, get_type_hints

from .datacube import AugmentationSpec, SynthParams
from .decoder import AblationFlags, ModelConfig
from .encoders import EncoderConfig
from .errors import ParameterError
from .training import LossWeights, TrainConfig, config_hash

SEED_ENV = "OMNIFUSE_SEED"
# fields owned by another section: the encoder has its own section and the
# single run seed drives training
_HIDDEN = {"model": {"encoder"}, "train": {"seed"}}
INPUT_MODES = ("hsi", "pseudo_color")


@dataclass
class RunSettings:
    seed: int = 0
    input_mode: str = "hsi"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ParameterError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    flags: AblationFlags = field(default_factory=AblationFlags)
    synth: SynthParams = field(default_factory=SynthParams)

    def model_config(self) -> ModelConfig:
        """The model section with the encoder section spliced in."""
        return dataclasses.replace(self.model, encoder=self.encoder)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.run.seed)

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for f in dataclasses.fields(self):
            section = asdict(getattr(self, f.name))
            for key in _HIDDEN.get(f.name, ()):
                section.pop(key)
            out[f.name] = section
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.as_dict())


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, default: Any, hint: Any, key: str) -> Any:
    text = text.strip()
    try:
        if text.lower() == "none" and (default is None or "Optional" in str(hint)):
            return None
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) or (default is None and "int" in str(hint)):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(text)
            return tuple(type(d)(float(p)) for d, p in zip(default, parts))
        return text
    except ValueError:
        raise ParameterError(f"cannot parse {key} = {text!r}") from None


def _update(obj: Any, values: Mapping[str, str], section: str) -> Any:
    hints = get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)} - _HIDDEN.get(section, set())
    unknown = set(values) - names
    if unknown:
        raise ParameterError(f"unknown keys in [{section}]: {sorted(unknown)}")
    changes = {k: _coerce(v, getattr(obj, k), hints.get(k), f"{section}.{k}") for k, v in values.items()}
    return dataclasses.replace(obj, **changes)


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Mapping[str, str]]) -> RunConfig:
    """Apply ``{section: {key: text}}`` string overrides, validating every field."""
    for section, values in overrides.items():
        if section not in SECTIONS:
            raise ParameterError(f"unknown config section [{section}]")
        if values:
            cfg = dataclasses.replace(cfg, **{section: _update(getattr(cfg, section), values, section)})
    return cfg


def parse_dotted(items) -> Dict[str, Dict[str, str]]:
    """``["train.lr=0.01", ...]`` -> ``{"train": {"lr": "0.01"}}``."""
    out: Dict[str, Dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ParameterError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def read_config(path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParameterError(f"malformed config file {path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve(
    path: Optional[os.PathLike] = None,
    overrides: Optional[Mapping[str, Mapping[str, str]]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, read_config(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        cfg = apply_overrides(cfg, {"run": {"seed": env[SEED_ENV]}})
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def write_config(cfg: RunConfig, path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.as_dict().items():
        parser[section] = {k: _format(v) for k, v in values.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# config_hash = {cfg.hash}\n")
        parser.write(fh)
    return path
