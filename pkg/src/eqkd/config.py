"""Run configuration: TOML file + command-line overrides over built-in defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .distill import DistillationParams
from .sim_link import (
    ChannelLosses,
    ClockModel,
    CoherenceParams,
    ConfigError,
    DetectorParams,
    SourceParams,
    validate_config,
)


class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


@dataclass
class NetworkParams:
    host: str = "127.0.0.1"
    port: int = 47100
    queue_depth: int = 8
    block_s: float = 0.1
    # Clock tracking cadence in acquisition blocks (10 x 100 ms = 1 s).
    track_every_blocks: int = 10
    connect_timeout_s: float = 10.0


@dataclass
class SecurityParams:
    # Pre-shared MAC key (hex). The default is for simulations only.
    mac_key_hex: str = "6571b0d5" * 8

    @property
    def mac_key(self) -> bytes:
        return bytes.fromhex(self.mac_key_hex)


@dataclass
class Config:
    source: SourceParams = field(default_factory=SourceParams)
    coherence: CoherenceParams = field(default_factory=CoherenceParams)
    losses: ChannelLosses = field(default_factory=ChannelLosses)
    detectors: DetectorParams = field(default_factory=DetectorParams)
    clock: ClockModel = field(default_factory=ClockModel)
    distillation: DistillationParams = field(default_factory=DistillationParams)
    network: NetworkParams = field(default_factory=NetworkParams)
    security: SecurityParams = field(default_factory=SecurityParams)
    seed: int = 0

    def validate(self) -> "Config":
        validate_config(self)
        self.distillation.validate()
        try:
            self.security.mac_key
        except ValueError as exc:
            raise TypeMismatch(f"security.mac_key_hex is not hex: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


SECTIONS = [f.name for f in dataclasses.fields(Config) if f.name != "seed"]
# Short command-line aliases for frequently changed keys.
ALIASES = {
    "mu": "source.mu",
    "k": "distillation.k",
    "window": "source.window_ps",
    "visibility": "source.visibility",
    "seed": "seed",
}


def _field_type(section_obj, key):
    for f in dataclasses.fields(section_obj):
        if f.name == key:
            return type(getattr(section_obj, key))
    return None


def _coerce(value, typ, where):
    if isinstance(value, str) and typ is not str:
        try:
            if typ is bool:
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            if typ is int:
                f = float(value)
                if not f.is_integer():
                    raise ValueError(value)
                return int(f)
            return typ(value)
        except ValueError:
            raise TypeMismatch(f"{where}: cannot parse {value!r} as {typ.__name__}") from None
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, typ) or (typ is not bool and isinstance(value, bool)):
        raise TypeMismatch(f"{where}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def _assign(cfg: Config, dotted: str, value, provenance: dict, source: str):
    if dotted == "seed":
        cfg.seed = _coerce(value, int, "seed")
        provenance["seed"] = source
        return
    if "." not in dotted:
        raise UnknownKey(f"unknown key {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise UnknownKey(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    typ = _field_type(obj, key)
    if typ is None:
        raise UnknownKey(f"unknown key {key!r} in [{section}]")
    setattr(obj, key, _coerce(value, typ, dotted))
    provenance[dotted] = source


def parse_config(path=None, overrides: dict | None = None, validate: bool = True) -> tuple[Config, dict]:
    """Build a Config with precedence flags > file > defaults.

    ``overrides`` maps dotted keys (or an alias such as ``mu``) to values,
    typically strings from the command line. Returns (config, provenance),
    provenance mapping every dotted key to "default", "file" or "flag".
    """
    cfg = Config()
    provenance = {"seed": "default"}
    for section in SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            provenance[f"{section}.{f.name}"] = "default"
    if path is not None:
        text = Path(path).read_text()
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise TypeMismatch(f"{path}: {exc}") from None
        for section, body in data.items():
            if section == "seed":
                _assign(cfg, "seed", body, provenance, "file")
                continue
            if not isinstance(body, dict):
                raise UnknownKey(f"unknown top-level key {section!r}")
            for key, value in body.items():
                _assign(cfg, f"{section}.{key}", value, provenance, "file")
    for key, value in (overrides or {}).items():
        _assign(cfg, ALIASES.get(key, key), value, provenance, "flag")
    if validate:
        cfg.validate()
    return cfg, provenance


def format_provenance(cfg: Config, provenance: dict) -> str:
    """One line per key: dotted name, value, origin."""
    flat = {"seed": cfg.seed}
    for section in SECTIONS:
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            flat[f"{section}.{k}"] = v
    width = max(len(k) for k in flat)
    return "\n".join(f"{k:<{width}}  {flat[k]!r:<24} [{provenance.get(k, 'default')}]" for k in sorted(flat))


def replace(cfg: Config, **dotted) -> Config:
    """Copy of ``cfg`` with dotted-key updates, e.g. replace(cfg, **{"source.mu": 1e-3})."""
    new = Config(**{s: dataclasses.replace(getattr(cfg, s)) for s in SECTIONS}, seed=cfg.seed)
    prov: dict = {}
    for k, v in dotted.items():
        _assign(new, k, v, prov, "flag")
    return new
