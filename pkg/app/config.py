"""
Configuration management for the service.
"""

from __future__ import annotations

import json
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from workflow_runtime.broker import BrokerLimits
from workflow_runtime.controller import ControllerOptions, PollPolicy


class TokenEntry(BaseModel):
    """A static bearer token issued to one user."""

    user_id: str = Field(min_length=1)
    token: str = Field(min_length=1)


class Settings(BaseSettings):
    """Environment-driven application settings."""

    model_config = SettingsConfigDict(env_prefix="CWM_", case_sensitive=False)

    host: str = "127.0.0.1"
    port: int = 8080
    data_dir: Optional[Path] = None

    tokens: list[TokenEntry] = []
    allowlist: list[str] = []

    reply_queue: str = "cwm.replies"
    document_base_uri: str = "http://example.org/documents/"
    max_payload_bytes: int = 64 * 1024 * 1024
    visibility_timeout_seconds: float = 5.0
    max_attempts: int = 3
    priority_size_threshold: Optional[int] = None
    max_finished_executions: Optional[int] = 1000

    async_controllers: list[str] = []
    poll_interval_seconds: float = 0.5
    poll_max_wait_seconds: float = 60.0
    request_timeout_seconds: float = 30.0
    endpoint_variables: dict[str, str] = {}
    consumer_poll_seconds: float = 0.1

    event_log_path: Optional[Path] = None
    log_level: str = "INFO"

    def broker_limits(self) -> BrokerLimits:
        return BrokerLimits(
            visibility_timeout=self.visibility_timeout_seconds,
            max_attempts=self.max_attempts,
            max_payload_bytes=self.max_payload_bytes,
        )

    def controller_options(self, controller_id: str) -> ControllerOptions:
        return ControllerOptions(
            request_timeout=self.request_timeout_seconds,
            poll=PollPolicy(
                interval=self.poll_interval_seconds, max_wait=self.poll_max_wait_seconds
            ),
            asynchronous=controller_id in self.async_controllers,
            max_attempts=self.max_attempts,
            endpoint_variables=dict(self.endpoint_variables),
            consumer_poll=self.consumer_poll_seconds,
        )


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML (``.yaml``/``.yml``) or JSON config file into a dict."""

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in {".yaml", ".yml"}:
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: configuration must be a mapping")
    return data


def load_settings(path: str | Path | None = None) -> Settings:
    """Settings from ``path`` (file values win over environment variables)."""

    if path is None:
        return Settings()  # type: ignore[call-arg]
    return Settings(**read_config_file(path))


@lru_cache
def get_settings() -> Settings:
    """Return cached settings instance."""

    return load_settings(os.environ.get("CWM_CONFIG_FILE") or None)
