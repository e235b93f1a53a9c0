"""Run configuration: one dataclass tree, one JSON file, one hash.

Defaults match the reference operating point: top-50 rerank with window 20
and stride 10, 6-turn episodes with 4 tool calls, and the standard reward
constants. The config hash (sha256 over the canonical JSON form) is stamped
into every output record so results stay traceable to their settings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .eapo import EapoConfig
from .episode import EpisodeLimits


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TemplateConfig:
    system: str | None = None
    user: str | None = None


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "scripted"  # scripted | replay | http
    path: str | None = None
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 1024
    auth_token_env: str = "EVRANK_API_TOKEN"
    retries: int = 2
    observation_role: str = "user"  # user | tool

    def __post_init__(self):
        if self.kind not in ("scripted", "replay", "http"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.observation_role not in ("user", "tool"):
            raise ConfigError("observation_role must be 'user' or 'tool'")


@dataclass(frozen=True)
class RerankConfig:
    k_top: int = 50
    window: int = 20
    stride: int = 10
    retries: int = 0

    def __post_init__(self):
        if self.k_top < 1 or self.window < 1 or self.stride < 1:
            raise ConfigError("k_top, window, and stride must be positive")
        if self.stride > self.window:
            raise ConfigError("stride must not exceed window")
        if self.retries < 0:
            raise ConfigError("retries must be nonnegative")


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple[str, ...] = ("recall@1", "recall@5", "map@5")
    count_failures_as_zero: bool = True


@dataclass(frozen=True)
class EngineConfig:
    pool_manifest: str | None = None
    pool_embeddings: str | None = None
    query_manifest: str | None = None
    query_embeddings: str | None = None
    templates: TemplateConfig = field(default_factory=TemplateConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    limits: EpisodeLimits = field(default_factory=EpisodeLimits)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    eapo: EapoConfig = field(default_factory=EapoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    parallelism: int = 1
    output_dir: str = "out"
    seed: int = 0

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["eval"]["metrics"] = list(self.eval.metrics)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "templates": TemplateConfig,
    "policy": PolicyConfig,
    "limits": EpisodeLimits,
    "rerank": RerankConfig,
    "eapo": EapoConfig,
    "eval": EvalConfig,
}


def _build_section(cls, data: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} config fields: {sorted(unknown)}")
    if cls is EvalConfig and "metrics" in data:
        data = dict(data, metrics=tuple(data["metrics"]))
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name} config: {exc}") from None


def config_from_dict(data: dict) -> EngineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(EngineConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return EngineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from None


def load_config(path: str | Path) -> EngineConfig:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    return config_from_dict(data)
