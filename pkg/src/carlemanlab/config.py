"""INI-style experiment configuration with typed, strict validation.

Sections and keys are declared in :data:`SCHEMA`.  Values may be
overridden from the environment with ``CARLAB_<SECTION>__<KEY>``, where dots
in section names become underscores (``CARLAB_MEDIA_MU__VALUE``).
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
import re
from dataclasses import dataclass, field

ENV_PREFIX = "CARLAB_"
EXPERIMENTS = ("check-media", "run-forward", "verify-carleman", "run-stability")


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        loc = ""
        if path or line:
            loc = f"{path or '<config>'}:{line}: " if line else f"{path}: "
        super().__init__(loc + message)
        self.line = line


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _int_or_triple(text):
    vals = _ints(text)
    if len(vals) == 1:
        return vals * 3
    if len(vals) != 3:
        raise ValueError("expected one integer or three comma-separated integers")
    return vals


def _triple(text):
    vals = _floats(text)
    if len(vals) != 3:
        raise ValueError("expected three comma-separated numbers")
    return vals


_TYPE_NAMES = {int: "integer", float: "number", str: "string", _bool: "boolean",
               _floats: "list of numbers", _ints: "list of integers", _opt_float: "number or auto",
               _int_or_triple: "integer or three integers", _triple: "three numbers"}

_PROFILE = {
    "profile": (str, "constant", False),
    "value": (float, 1.0, False),
    "a": (_triple, (0.0, 0.0, 0.0), False),
    "origin": (_triple, (0.0, 0.0, 0.0), False),
    "amp": (float, 0.0, False),
    "center": (_triple, (0.5, 0.5, 0.5), False),
    "radius": (float, 0.25, False),
    "path": (str, "", False),
}

# section -> key -> (parser, default, required)
SCHEMA = {
    "experiment": {
        "name": (str, None, True),
        "seed": (int, 0, False),
        "out": (str, "out", False),
    },
    "grid": {
        "n": (_int_or_triple, (32, 32, 32), False),
        "lo": (_triple, (0.0, 0.0, 0.0), False),
        "hi": (_triple, (1.0, 1.0, 1.0), False),
        "collar_width": (_opt_float, None, False),
    },
    "media": {
        "mu0": (float, None, True),
        "lambda0": (float, None, True),
        "M0": (float, 100.0, False),
    },
    "media.mu": _PROFILE,
    "media.lam": _PROFILE,
    "carleman": {
        "x0": (_triple, (-0.5, 0.5, 0.5), False),
        "rho": (float, None, True),
        "gamma": (float, 0.3, False),
        "delta": (float, 0.25, False),
        "beta0": (float, 1.0, False),
        "beta": (_opt_float, None, False),
        "T": (_opt_float, None, False),
        "eps": (_opt_float, None, False),
        "s_min": (float, 5.0, False),
        "s_max": (float, 60.0, False),
        "s_count": (int, 12, False),
        "s_spacing": (str, "log", False),
    },
    "run": {
        "T": (_opt_float, None, False),
        "safety": (float, 0.9, False),
        "stride": (int, 1, False),
        "trace_stride": (int, 1, False),
        "initial": (str, "reference", False),
        "experiment_k": (int, 1, False),
    },
    "stability": {
        "amplitudes": (_floats, (0.01, 0.02, 0.04, 0.08), False),
        "peak": (float, 0.2, False),
        "radius": (float, 0.11, False),
        "noise": (float, 0.0, False),
        "mode": (str, "direct", False),
        "rows": (_ints, (2, 3, 4, 9, 10, 12), False),
    },
}

REQUIRED_SECTIONS = {
    "check-media": ("experiment", "media", "carleman"),
    "run-forward": ("experiment", "media"),
    "verify-carleman": ("experiment", "media", "carleman"),
    "run-stability": ("experiment", "media", "carleman"),
}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    out: str
    sections: dict = field(default_factory=dict)
    path: str | None = None

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def canonical(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed,
                "sections": {s: {k: _jsonable(v) for k, v in sorted(kv.items())}
                             for s, kv in sorted(self.sections.items())}}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for s, kv in self.sections.items():
            cp[s] = {k: _emit(v) for k, v in kv.items() if v is not None}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _emit(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            if re.match(rf"\s*{re.escape(key)}\s*[=:]", line, flags=re.IGNORECASE):
                return i
    return None


def _env_overrides(env) -> dict:
    out = {}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name[len(ENV_PREFIX):]:
            continue
        sec, key = name[len(ENV_PREFIX):].split("__", 1)
        out[(sec.lower(), key)] = value
    return out


def parse_config_text(text: str, path: str | None = None, strict: bool = True,
                      env=None, overrides: dict | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}",
                          line, path) from None
    env_over = _env_overrides(os.environ if env is None else env)
    for (sec, key), value in env_over.items():
        target = next((s for s in SCHEMA if s.replace(".", "_") == sec), None)
        if target is None:
            if strict:
                raise ConfigError(f"environment override names unknown section {sec!r}")
            continue
        real_key = next((k for k in SCHEMA[target] if k.lower() == key.lower()), key)
        if not cp.has_section(target):
            cp.add_section(target)
        cp[target][real_key] = value
    for (sec, key), value in (overrides or {}).items():
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][key] = str(value)

    for sec in cp.sections():
        if sec not in SCHEMA:
            if strict:
                raise ConfigError(f"unknown section [{sec}]", _locate(text, sec), path)
            continue
        for key in cp[sec]:
            if key not in SCHEMA[sec] and strict:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", _locate(text, sec, key), path)

    if not cp.has_section("experiment") or "name" not in cp["experiment"]:
        raise ConfigError("missing required block [experiment] with key 'name'", None, path)
    name = cp["experiment"]["name"].strip()
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose one of {', '.join(EXPERIMENTS)}",
                          _locate(text, "experiment", "name"), path)
    for sec in REQUIRED_SECTIONS[name]:
        if not cp.has_section(sec):
            raise ConfigError(f"experiment {name!r} needs a [{sec}] block", None, path)

    sections = {}
    for sec, keys in SCHEMA.items():
        present = cp.has_section(sec)
        vals = {}
        for key, (parser, default, required) in keys.items():
            if present and key in cp[sec]:
                raw = cp[sec][key]
                try:
                    vals[key] = parser(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(
                        f"[{sec}] {key} = {raw!r}: expected {_TYPE_NAMES.get(parser, parser)} ({exc})",
                        _locate(text, sec, key), path) from None
            elif required and present:
                raise ConfigError(f"[{sec}] is missing required key {key!r}",
                                  _locate(text, sec), path)
            else:
                vals[key] = default
        if present or sec not in ("media", "carleman", "experiment"):
            sections[sec] = vals
    exp = sections["experiment"]
    return ExperimentConfig(experiment=exp["name"], seed=int(exp["seed"]), out=exp["out"],
                            sections=sections, path=path)


def parse_config(path, strict: bool = True, env=None, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(path)) from None
    return parse_config_text(text, str(path), strict, env, overrides)
