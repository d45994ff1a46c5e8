"""Flat ``dotted.key=value`` configuration text.

Values are ints, floats, booleans (``true``/``false``), ``none``, strings, or
comma-separated lists of numbers. Resolution order: defaults, then a config
file, then command-line overrides; keys absent from the defaults are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union


class ConfigError(ValueError):
    pass


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in t:
        return [parse_value(p) for p in t.split(",")]
    for kind in (int, float):
        try:
            return kind(t)
        except ValueError:
            pass
    return t


def coerce(value, like):
    """Bring a parsed value to the type of the default ``like``."""
    if like is None or value is None:
        return value
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            parsed = parse_value(value)
            if isinstance(parsed, bool):
                return parsed
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, (list, tuple)):
        items = value if isinstance(value, (list, tuple)) else [value]
        if like:
            items = [coerce(x, like[0]) for x in items]
        return list(items)
    if isinstance(like, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"expected an integer, got {value!r}")
    if isinstance(like, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"expected a number, got {value!r}")
    return str(value) if not isinstance(value, str) else value


def parse_flat(text: str) -> Dict[str, object]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def dump_flat(config: Mapping[str, object]) -> str:
    return "".join(f"{k}={format_value(config[k])}\n" for k in sorted(config))


def resolve(defaults: Mapping[str, object], file: Optional[Union[str, Path]] = None,
            overrides: Optional[Union[Mapping[str, object], Iterable[str]]] = None) -> Dict[str, object]:
    config = dict(defaults)
    layers = []
    if file is not None:
        path = Path(file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        layers.append(parse_flat(path.read_text()))
    if overrides:
        if isinstance(overrides, Mapping):
            layers.append(dict(overrides))
        else:
            layers.append(parse_flat("\n".join(overrides)))
    for layer in layers:
        unknown = sorted(k for k in layer if k not in defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in layer.items():
            config[k] = coerce(v, defaults[k])
    return config
