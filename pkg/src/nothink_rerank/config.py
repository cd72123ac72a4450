"""Layered configuration: defaults < JSON config file < environment < flags.

Environment variables are named ``NOTHINK_<SECTION>_<FIELD>``, e.g.
``NOTHINK_BACKEND_ENDPOINT`` or ``NOTHINK_RERANK_CONCURRENCY_LIMIT``. Values
are parsed as JSON when possible, so lists and numbers work unquoted.
"""

from __future__ import annotations

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .backend import BackendConfig
from .datagen import SamplingConfig
from .errors import DataError
from .ranking import RerankConfig
from .scoring import FusionConfig

ENV_PREFIX = "NOTHINK_"


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    max_in_flight: int = 16  # concurrent /v1/rerank requests before 503
    max_top_k: int = 200
    backend_concurrency: int = 32  # backend calls shared across all requests

    def __post_init__(self):
        if self.max_in_flight < 1 or self.max_top_k < 1 or self.backend_concurrency < 1:
            raise DataError("service limits must be >= 1")
        if not 0 <= self.port < 65536:
            raise DataError(f"invalid port {self.port}")


@dataclass(frozen=True)
class RunSettings:
    concurrency_limit: int = 8
    top_k: int = 100
    tag: str = "nothink-rerank"


SECTIONS = {
    "backend": BackendConfig,
    "fusion": FusionConfig,
    "sampling": SamplingConfig,
    "rerank": RunSettings,
    "service": ServiceConfig,
}


@dataclass(frozen=True)
class CliConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    rerank: RunSettings = field(default_factory=RunSettings)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def rerank_config(self) -> RerankConfig:
        return RerankConfig(self.backend, self.fusion, self.rerank.concurrency_limit, self.rerank.top_k, self.rerank.tag)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: _jsonable(asdict(getattr(self, name))) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    try:
        if origin is tuple:
            if not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(v, args[0], where) for v in value)
            return tuple(_coerce(v, a, where) for v, a in zip(value, args))
        if hint is bool:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value}")
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config {where}: {exc}") from None
    return value


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> Dict[str, Dict[str, Any]]:
    out: Dict[str, Dict[str, Any]] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        for section, cls in SECTIONS.items():
            if rest.startswith(section + "_"):
                name = rest[len(section) + 1:]
                if name in {f.name for f in fields(cls)}:
                    out.setdefault(section, {})[name] = _parse_env_value(raw)
                break
    return out


def load_config_file(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: top level must be an object")
    return data


def resolve_config(
    config_file: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
    flags: Optional[Mapping[str, Any]] = None,
) -> CliConfig:
    """Merge the layers and validate every section.

    ``flags`` maps ``"section.field"`` to a value; None means the flag was not
    given. Unknown sections or fields in any layer are errors.
    """
    merged: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    layers = []
    if config_file is not None:
        layers.append(("config file", load_config_file(config_file)))
    layers.append(("environment", env_overrides(os.environ if environ is None else environ)))
    flag_layer: Dict[str, Dict[str, Any]] = {}
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        section, _, name = dotted.partition(".")
        flag_layer.setdefault(section, {})[name] = value
    layers.append(("flags", flag_layer))

    for origin, layer in layers:
        for section, values in layer.items():
            if section not in SECTIONS:
                raise DataError(f"{origin}: unknown config section {section!r}")
            if not isinstance(values, dict):
                raise DataError(f"{origin}: section {section!r} must be an object")
            known = {f.name for f in fields(SECTIONS[section])}
            for name, value in values.items():
                if name not in known:
                    raise DataError(f"{origin}: unknown field {section}.{name}")
                merged[section][name] = value

    built = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in merged[section].items()}
        try:
            built[section] = cls(**kwargs)
        except DataError as exc:
            raise DataError(f"config {section}: {exc}") from None
    return CliConfig(**built)
