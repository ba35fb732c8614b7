"""Run configuration: sectioned INI files (values written as JSON) or a JSON tree.

Every section has a fixed set of keys with defaults; unknown sections or keys
are errors.  Regimes in configuration files are 1-based.
"""

from __future__ import annotations

import configparser
import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError


class ConfigError(ValidationError):
    """The run configuration is malformed or refers to something unknown."""


MODEL_DEFAULTS = {
    "ou": {"theta": [1.0, 2.0], "sigma": [1.0, 1.5], "Q": [[0.0, 1.0], [1.0, 0.0]]},
    "logistic": {"a": [1.0, 2.0], "b": [1.0, 1.0], "sigma": [0.3, 0.5],
                 "Q": [[0.0, 1.0], [1.0, 0.0]]},
    "meanfield": {"N": 2, "alpha": [1.0, 1.0], "beta": [1.0, 1.0], "sigma": "unit",
                  "lambda0": 1.0, "lam": None, "H": 1.0},
    "zero-noise": {"dim": 1},
}

SCHEMA = {
    "run": {"model": "ou", "seed": 0, "workers": 1, "out": "out"},
    "model": {},
    "simulate": {"dt": 0.01, "horizon": 5.0, "delay": 0.5, "x0": -2.0, "regime": 1,
                 "n_paths": 1, "sample_times": []},
    "couple": {"dt": 0.01, "horizon": 30.0, "delay": 0.5, "x0": -2.0, "regime_x": 1,
               "y0": 2.0, "regime_y": 2, "n_paths": 1000, "meet_eps": None},
    "bounds": {"H": 1.0, "M": 2.0, "r": 1.0, "alpha": 1.0, "n_max": 4,
               "lambdas": [], "gamma": None, "polylog_n": 8},
    "meanfield": {"regime": 1, "rho": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
                  "radii": [0.1, 0.5, 1.0, 2.0, 4.0, 8.0], "n_dirs": 10,
                  "pairs": [[[0.5, 0.0], [0.0, 0.0]], [[0.5, 0.0], [-0.5, 0.0]],
                            [[1.0, 0.5], [-1.0, -0.5]]],
                  "n_paths": 500, "dt": 0.01, "horizon": 60.0,
                  "lambda_grid": [0.25, 0.5, 0.75]},
    "validate": {"n_samples": 200, "n_pairs": 1000, "inject": None},
}

INJECTIONS = (None, "rate-corruption")


@dataclass
class RunConfig:
    """Parsed configuration.  ``explicit`` records which keys the file set."""

    sections: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def __getitem__(self, name: str) -> dict:
        return self.sections[name]

    @property
    def model_name(self) -> str:
        return self.sections["run"]["model"]


def _decode(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _model_defaults(name: str) -> dict:
    if name not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {name!r}; known: {', '.join(MODEL_DEFAULTS)}")
    return copy.deepcopy(MODEL_DEFAULTS[name])


def build_config(tree: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a section tree against the schema and fill in defaults."""
    if not isinstance(tree, dict):
        raise ConfigError("configuration root must be a mapping of sections")
    unknown = set(tree) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    out = {name: copy.deepcopy(defaults) for name, defaults in SCHEMA.items()}
    explicit = set()
    for name, values in tree.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section [{name}] must be a mapping")
        if name == "model":
            continue
        for key, value in values.items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            out[name][key] = value
            explicit.add((name, key))
    model = out["run"]["model"]
    model_tree = dict(tree.get("model", {}))
    if isinstance(model, str) and model.endswith(".json"):
        path = Path(model)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            loaded = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read model file {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict) or "name" not in loaded:
            raise ConfigError("a model file needs a 'name' entry")
        model = loaded.pop("name")
        model_tree = {**loaded, **model_tree}
    if not isinstance(model, str):
        raise ConfigError("run.model must be a model name")
    out["run"]["model"] = model
    params = _model_defaults(model)
    for key, value in model_tree.items():
        if key not in params:
            raise ConfigError(f"unknown key {key!r} for model {model!r}")
        params[key] = value
        explicit.add(("model", key))
    out["model"] = params
    _check_types(out)
    return RunConfig(out, explicit)


def _check_types(sec: dict) -> None:
    run = sec["run"]
    if not isinstance(run["seed"], int) or not 0 <= run["seed"] < 2**64:
        raise ConfigError("run.seed must be an unsigned 64-bit integer")
    if not isinstance(run["workers"], int) or run["workers"] < 1:
        raise ConfigError("run.workers must be a positive integer")
    for name in ("simulate", "couple", "meanfield"):
        s = sec[name]
        for key in ("dt", "horizon"):
            if not isinstance(s[key], (int, float)) or not s[key] > 0:
                raise ConfigError(f"{name}.{key} must be a positive number")
        if not isinstance(s["n_paths"], int) or s["n_paths"] < 1:
            raise ConfigError(f"{name}.n_paths must be a positive integer")
    for name, key in (("simulate", "regime"), ("couple", "regime_x"), ("couple", "regime_y"),
                      ("meanfield", "regime")):
        if not isinstance(sec[name][key], int) or sec[name][key] < 1:
            raise ConfigError(f"{name}.{key} must be a regime id >= 1")
    for key in ("H", "M", "r", "alpha"):
        if not isinstance(sec["bounds"][key], (int, float)):
            raise ConfigError(f"bounds.{key} must be a number")
    if sec["validate"]["inject"] not in INJECTIONS:
        raise ConfigError(f"validate.inject must be one of {INJECTIONS}")


def parse_ini(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    tree = {s: {k: _decode(v) for k, v in cp.items(s)} for s in cp.sections()}
    return build_config(tree, base_dir)


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI or ``.json`` configuration; ``None`` gives all defaults."""
    if path is None:
        return build_config({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            tree = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return build_config(tree, path.parent)
    return parse_ini(text, path.parent)


def serialize_ini(cfg: RunConfig) -> str:
    """Write every section with JSON-encoded values; ``parse_ini`` reads it back unchanged."""
    lines = []
    for name in SCHEMA:
        lines.append(f"[{name}]")
        for key, value in cfg.sections[name].items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
