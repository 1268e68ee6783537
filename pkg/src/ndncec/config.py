"""Experiment config files (YAML) and their mapping onto ExperimentSpec.

Durations carry their unit in the key: ``t_us``, ``freshness_ms`` and so on.
Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import os
from typing import Any, Mapping, Optional

import yaml

from .covert import Technique
from .engine import MS, US
from .harness import ExperimentSpec

SEED_ENV = "NDN_CEC_SEED"


class ConfigError(ValueError):
    pass


_TOP_KEYS = {
    "seed", "technique", "m", "n", "trials", "bits_per_point", "topology", "t_us", "t_ms",
    "t_recv_us", "t_thresh_us", "params", "freshness_ms", "read_delay_ms", "background",
    "calibration_names",
}
_PARAM_KEYS = {
    "delta_us", "t0_us", "retransmit", "scope2", "verify_writes", "pair_spacing_us",
    "intra_pair_us", "max_retries",
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"bad YAML in {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping at the top level")
    return dict(data)


def _list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _ns(value, unit: int, what: str) -> int:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a number, got {value!r}") from None
    return int(round(x * unit))


def parse_seed(value) -> int:
    try:
        seed = int(str(value), 0)
    except ValueError:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed {seed} outside the u64 range")
    return seed


def resolve_seed(flag: Optional[str], config_value=None, environ: Optional[Mapping] = None) -> int:
    """The command-line flag wins over the environment, which wins over the config file."""
    env = os.environ if environ is None else environ
    if flag is not None:
        return parse_seed(flag)
    if env.get(SEED_ENV):
        return parse_seed(env[SEED_ENV])
    if config_value is not None:
        return parse_seed(config_value)
    return 0


def spec_from_config(cfg: Mapping[str, Any], **overrides) -> ExperimentSpec:
    """Build an ExperimentSpec; ``overrides`` (already parsed) beat config values."""
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw: dict = {}
    try:
        if "technique" in cfg:
            kw["technique"] = Technique.parse(cfg["technique"])
        for key in ("m", "n", "trials", "calibration_names"):
            if key in cfg:
                kw[key] = int(cfg[key])
        if "seed" in cfg:
            kw["seed"] = parse_seed(cfg["seed"])
        if "topology" in cfg:
            topo = cfg["topology"]
            if not isinstance(topo, (str, Mapping)):
                raise ConfigError("topology must be a preset name or a mapping")
            kw["topology"] = topo if isinstance(topo, str) else dict(topo)
        if "t_us" in cfg:
            kw["t_values"] = [_ns(v, US, "t_us") for v in _list(cfg["t_us"])]
        elif "t_ms" in cfg:
            kw["t_values"] = [_ns(v, MS, "t_ms") for v in _list(cfg["t_ms"])]
        if cfg.get("t_recv_us") is not None:
            kw["t_recv"] = _ns(cfg["t_recv_us"], US, "t_recv_us")
        if "t_thresh_us" in cfg:
            kw["t_thresh_values"] = [None if v in (None, "auto") else _ns(v, US, "t_thresh_us")
                                     for v in _list(cfg["t_thresh_us"])]
        if "freshness_ms" in cfg:
            kw["freshness"] = _ns(cfg["freshness_ms"], MS, "freshness_ms")
        if "read_delay_ms" in cfg:
            kw["read_delay"] = _ns(cfg["read_delay_ms"], MS, "read_delay_ms")
        if cfg.get("background"):
            if not isinstance(cfg["background"], Mapping):
                raise ConfigError("background must be a mapping")
            kw["background"] = dict(cfg["background"])
        params = dict(cfg.get("params") or {})
        bad = set(params) - _PARAM_KEYS
        if bad:
            raise ConfigError(f"unknown params keys: {sorted(bad)}")
        pk = {}
        for key, val in params.items():
            if key.endswith("_us"):
                pk[key[:-3]] = _ns(val, US, key)
            elif key == "max_retries":
                pk[key] = int(val)
            else:
                pk[key] = bool(val)
        kw["params"] = pk
        kw.update({k: v for k, v in overrides.items() if v is not None})
        spec = ExperimentSpec(**kw)
        if "bits_per_point" in cfg and "trials" not in overrides:
            spec = spec.with_bits(int(cfg["bits_per_point"]))
        return spec
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
