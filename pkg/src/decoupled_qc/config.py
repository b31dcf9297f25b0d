"""Run configuration: one INI file with sections, overridable from flags.

Every key has a typed default. Unknown sections or keys are rejected so a
typo never silently falls back to a default. The fully resolved config is
written next to every run's outputs; its hash goes into provenance records.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from pathlib import Path

from . import __version__

OUT_ENV = "DECOUPLED_QC_OUT"

DEFAULTS: dict[str, dict[str, object]] = {
    "io": {
        "out_dir": "runs",
    },
    "run": {
        "seed": 0,
        "single_thread": True,
    },
    "artefact": {
        "rate": 0.5,
        "probability": 0.35,
        "geometric": 0.5,
        "bias_field": 0.5,
    },
    "training": {
        "n_train": 500,
        "data_seed": 1,
        "iterations": 2000,
        "learning_rate": 3e-3,
        "batch_size": 4,
        "width": 8,
        "epsilon": 0.05,
        "epsilon_floor": 1e-3,
        "plateau_window": 200,
        "plateau_threshold": 0.01,
        "consistency_lambda": 0.1,
    },
    "evaluation": {
        "n_test": 150,
        "n_control": 50,
        "data_seed": 2,
    },
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw) -> object:
    default = DEFAULTS[section][key]
    if isinstance(raw, type(default)) and not (isinstance(default, int) and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as "
                          f"{type(default).__name__}") from None
    return text


class RunConfig:
    """Resolved configuration values, accessed as ``cfg["training"]["width"]``."""

    def __init__(self, values: dict[str, dict[str, object]]):
        self.values = values

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {s: dict(d) for s, d in DEFAULTS.items()}
        if os.environ.get(OUT_ENV):
            values["io"]["out_dir"] = os.environ[OUT_ENV]
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                if section not in DEFAULTS:
                    raise ConfigError(f"{path}: unknown section [{section}]")
                for key, raw in parser.items(section):
                    if key not in DEFAULTS[section]:
                        raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                    values[section][key] = _coerce(section, key, raw)
        for dotted, raw in (overrides or {}).items():
            if raw is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown setting {dotted!r}")
            values[section][key] = _coerce(section, key, raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        a, t, e = self["artefact"], self["training"], self["evaluation"]
        for key in ("rate", "probability", "geometric", "bias_field"):
            if not 0.0 <= a[key] <= 1.0:
                raise ConfigError(f"[artefact] {key} must lie in [0, 1]")
        if t["n_train"] < 1 or t["iterations"] < 0 or t["batch_size"] < 1 or t["width"] < 1:
            raise ConfigError("[training] sizes must be positive")
        if t["learning_rate"] <= 0 or t["epsilon"] <= 0:
            raise ConfigError("[training] learning_rate and epsilon must be positive")
        if e["n_test"] < 1 or not 0 <= e["n_control"] < e["n_test"]:
            raise ConfigError("[evaluation] need n_test >= 1 and 0 <= n_control < n_test")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in DEFAULTS:
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                               for k, v in self.values[section].items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        """Hash of everything except the output location."""
        values = {s: dict(d) for s, d in self.values.items()}
        values["io"] = {}
        return hashlib.sha256(RunConfig(values).to_ini().encode()).hexdigest()[:16]

    def provenance(self, **extra) -> dict:
        out = {"tool": "decoupled_qc", "version": __version__, "config_hash": self.digest(),
               "seed": self["run"]["seed"]}
        out.update(extra)
        return out

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved_config.ini"
        path.write_text(self.to_ini(), encoding="utf-8")
        return path
