"""Service configuration: a JSON file overlaid with environment variables."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

ENV_OVERRIDES = {
    "RR_STORE_PATH": "store_path",
    "RR_POLICY_PATH": "policy_path",
    "RR_SCENARIO_PATH": "scenario_path",
}


@dataclass(frozen=True)
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    store_path: str | None = None
    policy_path: str | None = None
    scenario_path: str | None = None
    retention: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_json(cls, d: Mapping) -> "GatewayConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None = None, environ: Mapping[str, str] | None = None) -> "GatewayConfig":
        environ = os.environ if environ is None else environ
        path = path or environ.get("RR_CONFIG")
        config = cls.from_json(json.loads(Path(path).read_text("utf-8"))) if path else cls()
        updates: dict = {attr: environ[var] for var, attr in ENV_OVERRIDES.items() if environ.get(var)}
        listen = environ.get("RR_LISTEN")
        if listen:
            host, _, port = listen.rpartition(":")
            updates["host"] = host or config.host
            updates["port"] = int(port)
        return replace(config, **updates)
