"""Layered experiment configuration.

Configs are JSON documents merged in order (base, then dataset overlays,
then command-line ``key=value`` overrides); later sources win per key.
Every key is checked against a schema as soon as its source is read, so
error messages can name both the offending key and where it came from.
The fully resolved document is echoed into each run directory and can be
fed back in unchanged to reproduce the run.
"""

import json
import os
from dataclasses import dataclass

from . import nn
from .data import NOISE_KINDS, PARTITION_SCHEMES
from .errors import ConfigError
from .protocol import AblationFlags, STRATEGIES, StrategyConfig, resolve_flags

SEED_ENV_VAR = "HETFED_SEED"

DATA_SOURCES = ("blobs", "idx", "csv")

_MISSING = object()


@dataclass(frozen=True)
class _Field:
    kind: type | tuple
    default: object = _MISSING
    required: bool = False
    choices: tuple | None = None


# Leaf types are checked loosely: ints are accepted where floats are
# expected, and None is allowed whenever the default is None.
SCHEMA = {
    "seed": _Field(int, required=True),
    "strategy": _Field(str, required=True, choices=STRATEGIES),
    "rounds": _Field(int, 10),
    "local_epochs": _Field(int, 1),
    "collab_epochs": _Field(int, 1),
    "batch_size": _Field(int, 32),
    "participation": _Field(float, 1.0),
    "hyperparams": {
        "lambda": _Field(float, 0.4),
        "gamma": _Field(float, 0.9),
        "temperature": _Field(float, 4.0),
        "lr": _Field(float, 0.001),
        "zeta": _Field(float, 10.0),
        "eta_conf": _Field(float, 1.2),
        "rce_log_floor": _Field(float, -4.0),
    },
    "flags": {
        "hfl": _Field(bool, None),
        "sl": _Field(bool, None),
        "dlr": _Field(bool, None),
        "reweight": _Field(str, None, choices=("none", "ccr", "eccr")),
    },
    "data": {
        "source": _Field(str, "blobs", choices=DATA_SOURCES),
        "classes": _Field(int, 3),
        "dims": _Field(int, 2),
        "per_class": _Field(int, 800),
        "spread": _Field(float, 0.55),
        "idx_images": _Field(str, None),
        "idx_labels": _Field(str, None),
        "csv_path": _Field(str, None),
        "clients": _Field(int, 4),
        "shard_size": _Field(int, 400),
        "scheme": _Field(str, "iid-equal", choices=PARTITION_SCHEMES),
        "concentration": _Field(float, None),
        "n_public": _Field(int, 150),
        "test_size": _Field(int, 600),
        "noise": {
            "kind": _Field(str, "none", choices=NOISE_KINDS),
            "rate": _Field(float, 0.0),
            "random_range": _Field(list, None),
        },
    },
    "archs": {
        "hidden_layers": _Field(list, ((16,), (24,), (32,), (8,))),
    },
}


def _walk_keys(doc: dict, schema: dict, source: str, path: str = ""):
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key {here!r} in {source}")
        node = schema[key]
        if isinstance(node, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"key {here!r} in {source} must be an object")
            _walk_keys(value, node, source, here)
        else:
            _check_leaf(value, node, here, source)


def _check_leaf(value, field: _Field, path: str, source: str):
    if value is None:
        if field.default is None or field.required:
            return
        raise ConfigError(f"key {path!r} in {source} may not be null")
    kind = field.kind
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"key {path!r} in {source} must be an integer")
    if kind is list and isinstance(value, (list, tuple)):
        return
    if not isinstance(value, kind):
        raise ConfigError(
            f"key {path!r} in {source} must be {getattr(kind, '__name__', kind)}"
        )
    if field.choices is not None and value not in field.choices:
        raise ConfigError(
            f"key {path!r} in {source} must be one of {list(field.choices)}"
        )


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _fill_defaults(doc: dict, schema: dict, path: str = "") -> dict:
    out = {}
    for key, node in schema.items():
        here = f"{path}.{key}" if path else key
        if isinstance(node, dict):
            out[key] = _fill_defaults(doc.get(key, {}), node, here)
        elif key in doc:
            value = doc[key]
            if node.kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if node.kind is list and isinstance(value, tuple):
                value = list(value)
            out[key] = value
        elif node.required:
            raise ConfigError(f"missing required key {here!r}")
        else:
            default = node.default
            if isinstance(default, tuple):
                default = json.loads(json.dumps([list(v) for v in default]))
            out[key] = default
    return out


def parse_set_override(item: str) -> tuple[str, object]:
    """Parse one ``dotted.key=value`` override; value is JSON when it parses."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _nest(dotted: str, value) -> dict:
    parts = dotted.split(".")
    doc: dict = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        doc = {part: doc}
    return doc


def parse_config(paths, overrides=()) -> dict:
    """Merge config files in order, apply overrides, and resolve defaults.

    Returns the fully resolved plain-dict document (the form that is
    hashed, echoed to the run directory, and accepted back as input).
    """
    merged: dict = {}
    for path in paths:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _walk_keys(doc, SCHEMA, str(path))
        merged = _deep_merge(merged, doc)
    for item in overrides:
        key, value = parse_set_override(item) if isinstance(item, str) else item
        patch = _nest(key, value)
        _walk_keys(patch, SCHEMA, "<cli>")
        merged = _deep_merge(merged, patch)
    if "seed" not in merged and SEED_ENV_VAR in os.environ:
        try:
            merged["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from None
    return _fill_defaults(merged, SCHEMA)


def resolve_dict(doc: dict, source: str = "<dict>") -> dict:
    """Validate a plain config dict and fill in schema defaults."""
    _walk_keys(doc, SCHEMA, source)
    return _fill_defaults(doc, SCHEMA)


@dataclass(frozen=True)
class NoiseConfig:
    kind: str
    rate: float
    random_range: tuple[float, float] | None


@dataclass(frozen=True)
class DataConfig:
    source: str
    classes: int
    dims: int
    per_class: int
    spread: float
    idx_images: str | None
    idx_labels: str | None
    csv_path: str | None
    clients: int
    shard_size: int
    scheme: str
    concentration: float | None
    n_public: int
    test_size: int
    noise: NoiseConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    strategy: str
    rounds: int
    local_epochs: int
    collab_epochs: int
    batch_size: int
    participation: float
    hyperparams: nn.Hyperparams
    flags: AblationFlags
    data: DataConfig
    hidden_layers: tuple[tuple[int, ...], ...]
    resolved: dict

    @staticmethod
    def from_dict(resolved: dict) -> "ExperimentConfig":
        hp_doc = resolved["hyperparams"]
        hp = nn.Hyperparams(
            lam=hp_doc["lambda"],
            gamma=hp_doc["gamma"],
            temperature=hp_doc["temperature"],
            lr=hp_doc["lr"],
            zeta=hp_doc["zeta"],
            eta_conf=hp_doc["eta_conf"],
            rce_log_floor=hp_doc["rce_log_floor"],
        )
        flag_doc = {k: v for k, v in resolved["flags"].items() if v is not None}
        flags = resolve_flags(resolved["strategy"], flag_doc)
        noise_doc = resolved["data"]["noise"]
        rng_range = noise_doc["random_range"]
        if rng_range is not None:
            if len(rng_range) != 2:
                raise ConfigError("noise.random_range must be [lo, hi]")
            lo, hi = float(rng_range[0]), float(rng_range[1])
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"invalid noise range [{lo}, {hi}]")
            rng_range = (lo, hi)
        noise = NoiseConfig(noise_doc["kind"], float(noise_doc["rate"]), rng_range)
        d = resolved["data"]
        data = DataConfig(
            d["source"], d["classes"], d["dims"], d["per_class"], d["spread"],
            d["idx_images"], d["idx_labels"], d["csv_path"], d["clients"],
            d["shard_size"], d["scheme"], d["concentration"], d["n_public"],
            d["test_size"], noise,
        )
        hidden = tuple(tuple(int(w) for w in layer) for layer in resolved["archs"]["hidden_layers"])
        if not hidden:
            raise ConfigError("archs.hidden_layers must list at least one architecture")
        if resolved["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        return ExperimentConfig(
            seed=resolved["seed"],
            strategy=resolved["strategy"],
            rounds=resolved["rounds"],
            local_epochs=resolved["local_epochs"],
            collab_epochs=resolved["collab_epochs"],
            batch_size=resolved["batch_size"],
            participation=resolved["participation"],
            hyperparams=hp,
            flags=flags,
            data=data,
            hidden_layers=hidden,
            resolved=resolved,
        )

    def strategy_config(self, fail_round=None, fail_client=None) -> StrategyConfig:
        return StrategyConfig(
            strategy=self.strategy,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            collab_epochs=self.collab_epochs,
            batch_size=self.batch_size,
            hyperparams=self.hyperparams,
            flags=self.flags,
            participation=self.participation,
            fail_round=fail_round,
            fail_client=fail_client,
        )


def echo_config(cfg: ExperimentConfig) -> dict:
    """The resolved document with the ablation flags made explicit."""
    doc = json.loads(json.dumps(cfg.resolved))
    doc["flags"] = {
        "hfl": cfg.flags.hfl,
        "sl": cfg.flags.sl,
        "dlr": cfg.flags.dlr,
        "reweight": cfg.flags.reweight,
    }
    return doc


def load_config(paths, overrides=()) -> ExperimentConfig:
    return ExperimentConfig.from_dict(parse_config(paths, overrides))
