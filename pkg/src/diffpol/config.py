"""Key-value config files mirroring the config dataclass field names.

Format: UTF-8 text, one ``key = value`` per line, ``#`` comments and blank
lines ignored. Keys must name a field of one of the target dataclasses;
anything unrecognized is an error. Values are coerced by the field's type
(bools accept true/false/1/0/yes/no; ``none`` clears an optional).
"""

from __future__ import annotations

import dataclasses

from .errors import ParameterError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_kv_file(path) -> dict:
    pairs = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ParameterError(f"{path}:{lineno}: empty key")
            if key in pairs:
                raise ParameterError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = val
    return pairs


def _coerce(key: str, val: str, typ):
    # unwrap X | None annotations
    opt = False
    if hasattr(typ, "__args__"):
        args = [a for a in typ.__args__ if a is not type(None)]
        if len(args) == 1:
            typ, opt = args[0], True
    if isinstance(typ, str):  # string annotations from __future__ imports
        opt = "None" in typ
        base = typ.replace("| None", "").strip()
        typ = {"float": float, "int": int, "str": str, "bool": bool}.get(base, str)
    if opt and val.lower() in ("none", ""):
        return None
    try:
        if typ is bool:
            low = val.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(val)
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        return val
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {val!r} as {typ.__name__}")


def apply_config(pairs: dict, *targets):
    """Assign each key to the first target dataclass that declares it.

    Raises on keys no target knows. Returns the set of keys consumed.
    """
    field_map = []
    for obj in targets:
        field_map.append({f.name: f for f in dataclasses.fields(obj)})
    used = set()
    for key, val in pairs.items():
        for obj, fields in zip(targets, field_map):
            if key in fields:
                setattr(obj, key, _coerce(key, val, fields[key].type))
                used.add(key)
                break
        else:
            known = sorted({name for fm in field_map for name in fm})
            raise ParameterError(f"unknown config key {key!r}; known keys: {', '.join(known)}")
    return used


def dump_config(*targets) -> str:
    """Render the targets' fields back as config-file text."""
    lines = []
    for obj in targets:
        lines.append(f"# {type(obj).__name__}")
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val):
                continue  # nested configs are flattened by their own section
            lines.append(f"{f.name} = {'none' if val is None else val}")
        lines.append("")
    return "\n".join(lines)
