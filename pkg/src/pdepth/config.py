"""Plain-text ``key = value`` experiment configs.

Grammar: one assignment per line; ``#`` starts a comment; blank lines are
ignored; list values (``schedule``, ``ks``) are comma-separated. Keys not
declared on the target dataclass are rejected.
"""

import dataclasses
from pathlib import Path


def _coerce(field, raw):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "str")
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "tuple":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def parse_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build(cls, raw_values, overrides=None):
    """Instantiate dataclass ``cls`` from string values plus typed overrides."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in raw_values.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _coerce(fields[key], raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r}: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = value
    return cls(**kwargs)


def load(cls, path=None, overrides=None):
    raw = parse_text(Path(path).read_text()) if path else {}
    return build(cls, raw, overrides)


def dump(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
