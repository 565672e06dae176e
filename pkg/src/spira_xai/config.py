"""Flat ``key=value`` configuration with experiment presets.

Precedence, lowest first: built-in defaults, experiment preset, config file,
``SPIRA_*`` environment variables, command-line overrides. Environment names
map to keys by dropping the prefix, lower-casing and turning ``__`` into a
dot, so ``SPIRA_NOISE_COUNTS__PATIENT=2`` sets ``noise_counts.patient``.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "SPIRA_"


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _layout(text) -> str:
    if text not in ("spec_only", "meta_only", "full"):
        raise ValueError(f"unknown layout {text!r}")
    return text


def _choice(*options):
    def parse(text):
        v = type(options[0])(text)
        if v not in options:
            raise ValueError(f"{text!r} not in {options}")
        return v
    return parse


def _int_list(text) -> tuple:
    if isinstance(text, tuple):
        return text
    vals = tuple(int(v) for v in str(text).split(",") if v.strip())
    if not vals or min(vals) < 1:
        raise ValueError(f"expected a comma-separated list of positive ints, got {text!r}")
    return vals


SCHEMA = {
    "exp": (_choice(1, 2, 3, 5), 1),
    "set": (_choice(1, 2), 1),
    "layout": (_layout, "spec_only"),
    "mode": (_choice("train", "eval"), "train"),
    "noise_counts.patient": (int, 3),
    "noise_counts.control": (int, 4),
    "specaugment.enabled": (_bool, False),
    "mixup.enabled": (_bool, False),
    "mixup.alpha": (float, 0.2),
    "specaug.F": (int, 8),
    "specaug.T": (int, 20),
    "specaug.n_freq_masks": (int, 1),
    "specaug.n_time_masks": (int, 1),
    "f0.min": (float, 60.0),
    "f0.max": (float, 500.0),
    "seed": (int, 0),
    "epochs": (int, 50),
    "batch_size": (int, 16),
    "lr": (float, 0.01),
    "momentum": (float, 0.9),
    "patience": (int, 10),
    "workers": (int, 1),
    "model.channels": (_int_list, (16, 32, 64, 64)),
    "model.dense_units": (int, 32),
    "model.dropout": (float, 0.2),
}

EXPERIMENTS = {
    1: {"set": 1, "layout": "spec_only", "specaugment.enabled": False, "mixup.enabled": False},
    2: {"set": 1, "layout": "meta_only", "specaugment.enabled": False, "mixup.enabled": False},
    3: {"set": 1, "layout": "full", "specaugment.enabled": False, "mixup.enabled": False},
    5: {"set": 2, "layout": "spec_only", "specaugment.enabled": True, "mixup.enabled": True},
}

UNSUPPORTED_EXPERIMENTS = {
    4: "experiment 4 (transfer from pretrained AudioSet weights) is out of scope",
    6: "experiment 6 is the resynthesis path; use the `explain` or `resynth` command",
}


def parse_value(key: str, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    conv = SCHEMA[key][0]
    try:
        return conv(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_lines(lines, origin: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        # keys whose suffix carries capitals (specaug.F / specaug.T)
        for known in SCHEMA:
            if known.lower() == key:
                key = known
        out[key] = parse_value(key, value)
    return out


def resolve(path=None, overrides=(), environ=None, base: dict | None = None) -> dict:
    """Effective configuration as a flat dict with every schema key present."""
    user = dict(base or {})
    if path is not None:
        user.update(read_config_file(path))
    user.update(env_overrides(environ))
    user.update(parse_lines(overrides, "<overrides>"))
    exp = user.get("exp", SCHEMA["exp"][1])
    effective = {k: default for k, (_, default) in SCHEMA.items()}
    effective.update(EXPERIMENTS[exp])
    effective.update(user)
    return effective


def dump(config: dict) -> str:
    return "".join(f"{k}={_fmt(config[k])}\n" for k in sorted(config))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)
