"""Run configuration: INI-style file with one section per engine stage.

Every key is validated against its domain before any computation, and the
fully resolved mapping is embedded in score outputs for provenance.
"""

import configparser
from dataclasses import dataclass, replace

from .errors import ConfigurationError
from .matching import DISTANCES, LOOP_ORDERS, VOTE_MODES


@dataclass
class RunConfig:
    # alignment
    tau: float = 100.0
    lambda_: float = 1.10        # config key "lambda": odds threshold for the initial mask
    # matching
    scales: tuple = (1, 3, 5)
    stage_layers: tuple = ()     # empty = every stage layer in the bundle
    mu: float = 0.57
    vote_mode: str = "or"
    pool_floor_fraction: float = 0.1
    distance: str = "l2"
    loop_order: str = "ri"
    attn_source: str = "inter"
    # postprocess
    sigma: float = 4.0
    fusion_weight: float = 0.5
    # metrics
    fpr_cap: float = 0.3
    # engine
    batch_size: int = 0          # 0 = the whole bundle forms one batch

    def validate(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not self.lambda_ > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lambda_}")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError(f"mu must lie in [0,1], got {self.mu}")
        if not self.scales:
            raise ConfigurationError("scales must not be empty")
        for r in self.scales:
            if not isinstance(r, int) or r < 1 or r % 2 == 0:
                raise ConfigurationError(f"scales must be positive odd integers, got {r}")
        if any(not isinstance(i, int) or i < 0 for i in self.stage_layers):
            raise ConfigurationError(f"stage_layers must be non-negative integers, "
                                     f"got {self.stage_layers}")
        if any(b <= a for a, b in zip(self.stage_layers, self.stage_layers[1:])):
            raise ConfigurationError(f"stage_layers must be strictly increasing, "
                                     f"got {self.stage_layers}")
        if self.vote_mode not in VOTE_MODES:
            raise ConfigurationError(f"vote_mode must be one of {VOTE_MODES}, "
                                     f"got {self.vote_mode!r}")
        if not 0.0 < self.pool_floor_fraction <= 1.0:
            raise ConfigurationError(f"pool_floor_fraction must lie in (0,1], "
                                     f"got {self.pool_floor_fraction}")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"distance must be one of {DISTANCES}, "
                                     f"got {self.distance!r}")
        if self.loop_order not in LOOP_ORDERS:
            raise ConfigurationError(f"loop_order must be one of {LOOP_ORDERS}, "
                                     f"got {self.loop_order!r}")
        ok_attn = self.attn_source in ("inter", "v-v", "q-q", "k-k")
        if not ok_attn and self.attn_source.startswith("inter:"):
            ok_attn = self.attn_source[len("inter:"):].isdigit()
        if not ok_attn:
            raise ConfigurationError(f"attn_source must be inter, inter:<layer>, "
                                     f"v-v, q-q or k-k, got {self.attn_source!r}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be non-negative, got {self.sigma}")
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ConfigurationError(f"fusion_weight must lie in [0,1], "
                                     f"got {self.fusion_weight}")
        if not 0.0 < self.fpr_cap <= 1.0:
            raise ConfigurationError(f"fpr_cap must lie in (0,1], got {self.fpr_cap}")
        if not isinstance(self.batch_size, int) or self.batch_size < 0:
            raise ConfigurationError(f"batch_size must be a non-negative integer, "
                                     f"got {self.batch_size}")
        return self

    def resolved(self):
        """Flat provenance mapping using the external key names."""
        return {
            "tau": self.tau,
            "lambda": self.lambda_,
            "scales": list(self.scales),
            "stage_layers": list(self.stage_layers),
            "mu": self.mu,
            "vote_mode": self.vote_mode,
            "pool_floor_fraction": self.pool_floor_fraction,
            "distance": self.distance,
            "loop_order": self.loop_order,
            "attn_source": self.attn_source,
            "sigma": self.sigma,
            "fusion_weight": self.fusion_weight,
            "fpr_cap": self.fpr_cap,
            "batch_size": self.batch_size,
        }


_SCHEMA = {
    "alignment": {"tau": "float", "lambda": "float"},
    "matching": {"scales": "ints", "stage_layers": "ints", "mu": "float",
                 "vote_mode": "str", "pool_floor_fraction": "float",
                 "distance": "str", "loop_order": "str", "attn_source": "str"},
    "postprocess": {"sigma": "float", "fusion_weight": "float"},
    "metrics": {"fpr_cap": "float"},
    "engine": {"batch_size": "int"},
}

_FIELD_BY_KEY = {"lambda": "lambda_"}


def _parse_value(section, key, raw, kind):
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "ints":
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigurationError(
            f"[{section}] {key} = {raw!r} is not a valid {kind}") from None


def load_config(path=None):
    """Parse and validate a config file; None yields validated defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg.validate()
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    updates = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            kind = _SCHEMA[section].get(key)
            if kind is None:
                raise ConfigurationError(f"unknown config key [{section}] {key}")
            updates[_FIELD_BY_KEY.get(key, key)] = _parse_value(section, key, raw, kind)
    return replace(cfg, **updates).validate()
