"""Run configuration: one INI file, typed sections, flag overrides.

Every tunable in the toolkit lives on a dataclass somewhere; this module maps
those dataclasses onto named INI sections so a single file (plus repeatable
``--set section.key=value`` overrides) describes a full run. Precedence is
flags > file > defaults. Unknown sections and keys are rejected by name, and
``dump_ini`` emits the fully-resolved state so any run can be reproduced from
its saved config alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import EncoderConfig
from .consensus import ConsensusConfig
from .data import AugmentConfig, SynthConfig
from .losses import LossWeights
from .model import ModelConfig
from .semantics import MllmConfig
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "DataPaths",
    "RunConfig",
    "default_run_config",
    "load_run_config",
    "dump_ini",
]


class ConfigError(ValueError):
    """Bad configuration input; the message names the offending key or value."""


@dataclass
class DataPaths:
    """Filesystem locations for a run. Empty string means "not set".

    train_dir / val_dir point at dataset roots in the folder layout written
    by save_dataset (images/, masks/, embeddings/, manifest.jsonl). When a
    dir is unset the CLI falls back to on-the-fly synthetic data from the
    [synth] section. checkpoint defaults to <out_dir>/best.ckpt.
    """

    train_dir: str = ""
    val_dir: str = ""
    out_dir: str = "runs/latest"
    checkpoint: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataPaths = field(default_factory=DataPaths)
    mllm: MllmConfig = field(default_factory=MllmConfig)

    def resolved_checkpoint(self) -> Path:
        if self.data.checkpoint:
            return Path(self.data.checkpoint)
        return Path(self.data.out_dir) / "best.ckpt"


# section name -> (dataclass, fields handled elsewhere). The encoder lives
# inside ModelConfig and the loss weights inside TrainConfig, but both get
# their own INI section, so the parent sections skip those composite fields.
_SECTIONS: dict[str, tuple[type, frozenset[str]]] = {
    "encoder": (EncoderConfig, frozenset()),
    "model": (ModelConfig, frozenset({"encoder"})),
    "train": (TrainConfig, frozenset({"loss_weights"})),
    "loss": (LossWeights, frozenset()),
    "consensus": (ConsensusConfig, frozenset()),
    "synth": (SynthConfig, frozenset()),
    "augment": (AugmentConfig, frozenset()),
    "data": (DataPaths, frozenset()),
    "mllm": (MllmConfig, frozenset()),
}

# accepted spellings for keys whose canonical name differs ("lambda" is a
# Python keyword, so the dataclass field is lam)
_KEY_ALIASES: dict[str, dict[str, str]] = {"consensus": {"lambda": "lam"}}

_TRUE_WORDS = frozenset({"1", "true", "yes", "on"})
_FALSE_WORDS = frozenset({"0", "false", "no", "off"})


def _section_fields(section: str) -> dict[str, type]:
    cls, skip = _SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {
        f.name: hints[f.name]
        for f in dataclasses.fields(cls)
        if f.name not in skip
    }


def _parse_value(raw: str, hint, dotted: str):
    """Convert an INI string to the field's declared type."""
    raw = raw.strip()
    if isinstance(hint, types.UnionType):  # e.g. int | None
        inner = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        return _parse_value(raw, inner[0], dotted)
    if hint is bool:
        word = raw.lower()
        if word in _TRUE_WORDS:
            return True
        if word in _FALSE_WORDS:
            return False
        raise ConfigError(f"{dotted}: expected a boolean, got {raw!r}")
    if hint is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{dotted}: expected an integer, got {raw!r}") from None
    if hint is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{dotted}: expected a number, got {raw!r}") from None
    if typing.get_origin(hint) is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{dotted}: expected a comma-separated list, got {raw!r}")
        elem = typing.get_args(hint)[0]
        return tuple(_parse_value(p, elem, dotted) for p in parts)
    if hint is str:
        return raw
    raise ConfigError(f"{dotted}: unsupported value type {hint!r}")


def _render_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _default_values() -> dict[str, dict[str, object]]:
    out: dict[str, dict[str, object]] = {}
    for section, (cls, skip) in _SECTIONS.items():
        inst = cls()
        out[section] = {
            f.name: getattr(inst, f.name)
            for f in dataclasses.fields(cls)
            if f.name not in skip
        }
    return out


def _canonical_key(section: str, key: str) -> str:
    key = _KEY_ALIASES.get(section, {}).get(key, key)
    if key not in _section_fields(section):
        raise ConfigError(f"unknown key '{section}.{key}'")
    return key


def _apply_pair(values: dict, section: str, key: str, raw: str) -> None:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section '{section}'")
    key = _canonical_key(section, key)
    hint = _section_fields(section)[key]
    values[section][key] = _parse_value(raw, hint, f"{section}.{key}")


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#", ";")
    )
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string(text, source=str(path))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as e:
        raise ConfigError(f"could not parse {path}: {e}") from None
    if parser.defaults():
        first = next(iter(parser.defaults()))
        raise ConfigError(f"key '{first}' appears outside any section")
    return parser


def _build(values: dict[str, dict[str, object]]) -> RunConfig:
    def make(section: str, **extra):
        cls, _ = _SECTIONS[section]
        try:
            return cls(**values[section], **extra)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{section}] {e}") from None

    encoder = make("encoder")
    model = make("model", encoder=encoder)
    loss = make("loss")
    train = make("train", loss_weights=loss)
    return RunConfig(
        model=model,
        train=train,
        consensus=make("consensus"),
        synth=make("synth"),
        augment=make("augment"),
        data=make("data"),
        mllm=make("mllm"),
    )


def default_run_config() -> RunConfig:
    return _build(_default_values())


def load_run_config(path=None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    """Resolve defaults, then the INI file at path, then override strings.

    Each override is "section.key=value", the same grammar the CLI exposes
    through --set. Later overrides win over earlier ones.
    """
    values = _default_values()
    if path is not None:
        parser = _read_ini(path)
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section '{section}'")
            for key, raw in parser.items(section):
                _apply_pair(values, section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, key = dotted.split(".", 1)
        _apply_pair(values, section.strip(), key.strip(), raw)
    return _build(values)


def dump_ini(config: RunConfig) -> str:
    """Render the fully-resolved configuration as parseable INI text.

    load_run_config(dump) round-trips to an equal configuration, and the
    emitted text doubles as the reference list of every key and its value.
    """
    holders = {
        "encoder": config.model.encoder,
        "model": config.model,
        "train": config.train,
        "loss": config.train.loss_weights,
        "consensus": config.consensus,
        "synth": config.synth,
        "augment": config.augment,
        "data": config.data,
        "mllm": config.mllm,
    }
    buf = io.StringIO()
    for section, (cls, skip) in _SECTIONS.items():
        buf.write(f"[{section}]\n")
        inst = holders[section]
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            buf.write(f"{f.name} = {_render_value(getattr(inst, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()
