"""Config files, schema validation with line numbers, and run manifests.

Configs are YAML with an explicit schema_version; unknown keys are hard
errors that name the offending line.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import yaml

from .errors import ConfigError

CONFIG_SCHEMA_VERSION = 1

_REQUIRED = object()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _key_lines(text: str) -> dict[str, int]:
    """Map of dotted key paths to 1-based line numbers."""
    lines: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}{key_node.value}"
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path + ".")

    if root is not None:
        walk(root, "")
    return lines


def load_config(path, schema: dict) -> dict:
    """Parse and validate a config file against a nested schema.

    Schema leaves are (type, default) pairs; the default _REQUIRED marks
    a mandatory field. Nested dicts validate recursively. Unknown keys
    raise ConfigError with the file and line number.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML ({exc})") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(text)
    cfg = _validate(data, schema, lines, "", path)
    if cfg.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version must be {CONFIG_SCHEMA_VERSION}, "
            f"got {cfg.get('schema_version')!r}")
    return cfg


def _validate(data: dict, schema: dict, lines: dict, prefix: str, path) -> dict:
    out = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            line = lines.get(dotted, "?")
            raise ConfigError(f"{path}:{line}: unknown key {dotted!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            if value is None:
                value = {}
            if not isinstance(value, dict):
                line = lines.get(dotted, "?")
                raise ConfigError(f"{path}:{line}: {dotted!r} must be a mapping")
            out[key] = _validate(value, spec, lines, dotted + ".", path)
        else:
            typ, _default = spec
            out[key] = _coerce(value, typ, dotted, lines, path)
    for key, spec in schema.items():
        if key in out:
            continue
        if isinstance(spec, dict):
            out[key] = _validate({}, spec, lines, f"{prefix}{key}.", path)
            continue
        typ, default = spec
        if default is _REQUIRED:
            raise ConfigError(
                f"{path}: missing required field {prefix}{key!r}")
        out[key] = default
    return out


def _coerce(value, typ, dotted, lines, path):
    line = lines.get(dotted, "?")
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{path}:{line}: {dotted!r} must be an integer")
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}:{line}: {dotted!r} must be a list")
        return value
    if value is None or not isinstance(value, typ):
        raise ConfigError(
            f"{path}:{line}: {dotted!r} must be {typ.__name__}, "
            f"got {type(value).__name__}")
    return value


def required(typ):
    return (typ, _REQUIRED)


def optional(typ, default):
    return (typ, default)


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

def write_manifest(out_dir, command: str, config_path, seeds: dict,
                   artifacts: list, started: float, version: str) -> Path:
    """Record what a command ran on and what it produced.

    The timestamp and duration fields are exempt from the byte-identical
    reproducibility contract; everything else must match across reruns.
    """
    out_dir = Path(out_dir)
    entries = []
    for rel in sorted(str(a) for a in artifacts):
        p = out_dir / rel
        entries.append({"path": rel, "sha256": sha256_file(p)})
    manifest = {
        "command": command,
        "tool_version": version,
        "config_sha256": sha256_file(config_path) if config_path else None,
        "seeds": seeds,
        "artifacts": entries,
        "duration_s": round(time.time() - started, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
