"""
Flat `key = value` run configurations and synthesis specs.

Keys mirror the dataclass field names. Comments start with `#`. Unknown,
duplicate or unparsable keys are rejected, and serialisation writes every key
in field order so parse -> serialize -> parse is a fixed point.
"""

import logging
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional, Type, TypeVar, Union

from .exceptions import ConfigurationError
from .model import ModelConfig
from .synthesis import SynthSpec

logger = logging.getLogger(__name__)

Record = TypeVar('Record', ModelConfig, SynthSpec)


def parse_pairs(text: str, source: Optional[str] = None) -> Dict[str, str]:
    where = f"{source}: " if source else ''
    pairs: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{where}line {number}: expected 'key = value'")
        if key in pairs:
            raise ConfigurationError(f"{where}line {number}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _coerce(key: str, raw: str, default, where: str):
    try:
        if key == 'joint_weights':
            if raw in ('', 'ones', 'none'):
                return None
            return tuple(float(v) for v in raw.split(','))
        if isinstance(default, bool):
            if raw.lower() not in ('true', 'false'):
                raise ValueError(raw)
            return raw.lower() == 'true'
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{where}cannot parse {key} = {raw!r}")


def _format(key: str, value) -> str:
    if key == 'joint_weights':
        return 'ones' if value is None else ','.join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_record(cls: Type[Record], text: str, source: Optional[str] = None,
                 seed_override: Optional[int] = None) -> Record:
    where = f"{source}: " if source else ''
    defaults = {f.name: f.default for f in fields(cls)}
    values = {}
    for key, raw in parse_pairs(text, source).items():
        if key not in defaults:
            raise ConfigurationError(f"{where}unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key], where)
    if seed_override is not None:
        logger.info("seed overridden from environment", extra={'seed': seed_override})
        values['seed'] = seed_override
    return cls(**values)


def serialize_record(record: Union[ModelConfig, SynthSpec]) -> str:
    return ''.join(f"{f.name} = {_format(f.name, getattr(record, f.name))}\n" for f in fields(record))


def parse_config(text: str, source: Optional[str] = None, seed_override: Optional[int] = None) -> ModelConfig:
    return parse_record(ModelConfig, text, source, seed_override)


def load_config(path: Union[str, Path], seed_override: Optional[int] = None) -> ModelConfig:
    return parse_config(Path(path).read_text(encoding='utf-8'), str(path), seed_override)


def save_config(config: ModelConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(serialize_record(config), encoding='utf-8')


def parse_synth_spec(text: str, source: Optional[str] = None, seed_override: Optional[int] = None) -> SynthSpec:
    return parse_record(SynthSpec, text, source, seed_override)


def load_synth_spec(path: Union[str, Path], seed_override: Optional[int] = None) -> SynthSpec:
    return parse_synth_spec(Path(path).read_text(encoding='utf-8'), str(path), seed_override)
