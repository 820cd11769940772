"""Flat structured-text configuration: `section.key = value` lines.

UTF-8, `#` comments, blank lines ignored. Values stay strings until a
consumer coerces them; helper coercers live here so every command parses
numbers the same way. A run's effective configuration round-trips through
`write_config` into its manifest.
"""

from __future__ import annotations

__all__ = ["ConfigError", "parse_config", "parse_config_text", "write_config",
           "get_str", "get_int", "get_float", "get_bool", "get_list"]


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def write_config(path, cfg: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def get_str(cfg, key, default=None):
    if key in cfg:
        return cfg[key]
    if default is None:
        raise ConfigError(f"missing config key '{key}'")
    return default


def get_int(cfg, key, default=None):
    raw = get_str(cfg, key, None if default is None else str(default))
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': not an integer: {raw!r}") from exc


def get_float(cfg, key, default=None):
    raw = get_str(cfg, key, None if default is None else str(default))
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': not a number: {raw!r}") from exc


def get_bool(cfg, key, default=None):
    raw = get_str(cfg, key, None if default is None else str(default)).lower()
    if raw in ("1", "true", "yes", "on"):
        return True
    if raw in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key '{key}': not a boolean: {raw!r}")


def get_list(cfg, key, default=None):
    raw = get_str(cfg, key, default)
    return [item.strip() for item in raw.split(",") if item.strip()]
