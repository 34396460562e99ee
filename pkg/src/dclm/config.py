"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values are coerced to the type
of the matching field; precedence is defaults < config file < CLI flags.
"""

from __future__ import annotations

import dataclasses
import typing

from dclm.models import ModelConfig
from dclm.trainer import TrainConfig

# keys that belong to neither dataclass
EXTRA_KEYS = {"vocab_cap": int, "ngram_order": int, "cross_turn": bool}
_SKIP_MODEL = {"vocab_size", "da_vocab_size"}   # derived from the vocabulary


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[f.name] = args[0] if args else t
    return out


def known_keys() -> dict[str, type]:
    keys = {k: t for k, t in _field_types(ModelConfig).items() if k not in _SKIP_MODEL}
    keys.update(_field_types(TrainConfig))
    keys.update(EXTRA_KEYS)
    return dict(sorted(keys.items()))


def coerce(key: str, raw: str):
    types = known_keys()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    t = types[key]
    raw = raw.strip()
    try:
        if t is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        return t(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {t.__name__}") from None


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def split_config(values: dict) -> tuple[dict, dict, dict]:
    """Partition flat settings into (model kwargs, train kwargs, extras)."""
    model_keys = set(_field_types(ModelConfig))
    train_keys = set(_field_types(TrainConfig))
    model, train, extra = {}, {}, {}
    for k, v in values.items():
        if k in train_keys:
            train[k] = v
        if k in model_keys:
            model[k] = v
        if k in EXTRA_KEYS:
            extra[k] = v
    return model, train, extra
