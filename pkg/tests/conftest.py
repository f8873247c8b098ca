from __future__ import annotations

import sys
from collections.abc import Callable
from pathlib import Path
from typing import TYPE_CHECKING, Any

import pytest


PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

if TYPE_CHECKING:  # pragma: no cover - hints only
    from fastapi.testclient import TestClient

FIXTURES = PROJECT_ROOT / "tests" / "fixtures"
SENTENCE = "Monteux was born in Paris"
PER = "http://dkt.dfki.de/ontologies/nif#PER"
LOC = "http://dkt.dfki.de/ontologies/nif#LOC"
GND_MONTEUX = "http://d-nb.info/gnd/122700198"
GEONAMES_PARIS = "http://www.geonames.org/2988507"
TOKEN = "alice-token"
AUTH = {"Authorization": f"Bearer {TOKEN}"}


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


@pytest.fixture
def anyio_backend() -> str:
    return "asyncio"


@pytest.fixture
def ner_config():
    from workflow_runtime.mocks import GazetteerEntry, MockServiceConfig

    return MockServiceConfig(
        name="ner",
        gazetteer=[GazetteerEntry(surface="Monteux", entity_class=PER, ident_ref=GND_MONTEUX)],
    )


@pytest.fixture
def geo_config():
    from workflow_runtime.mocks import GazetteerEntry, MockServiceConfig

    return MockServiceConfig(
        name="geo",
        gazetteer=[GazetteerEntry(surface="Paris", entity_class=LOC, ident_ref=GEONAMES_PARIS)],
    )


@pytest.fixture
def registry_with_elements():
    """A memory registry holding the NER and GEO controllers/tasks and ML_GLK."""

    from workflow_runtime.registry import ElementRegistry

    registry = ElementRegistry()
    for kind, name in (
        ("controllers", "ner_controller.json"),
        ("controllers", "geo_controller.json"),
        ("tasks", "ner_task.json"),
        ("tasks", "geo_task.json"),
        ("templates", "ml_glk_template.json"),
    ):
        registry.create(kind, fixture_text(name))
    return registry


@pytest.fixture
def make_settings(tmp_path: Path) -> Callable[..., Any]:
    """Factory for fast test settings; keyword arguments override fields."""

    def factory(**overrides: Any):
        from app.config import Settings

        values: dict[str, Any] = {
            "tokens": [
                {"user_id": "alice", "token": TOKEN},
                {"user_id": "mallory", "token": "mallory-token"},
            ],
            "allowlist": ["alice"],
            "endpoint_variables": {"host": "ner.test", "geo_host": "geo.test"},
            "poll_interval_seconds": 0.01,
            "poll_max_wait_seconds": 2.0,
            "consumer_poll_seconds": 0.01,
            "event_log_path": tmp_path / "events.jsonl",
        }
        values.update(overrides)
        return Settings(**values)

    return factory


@pytest.fixture
def make_client(
    monkeypatch: pytest.MonkeyPatch,
    make_settings: Callable[..., Any],
    ner_config,
    geo_config,
) -> Callable[..., TestClient]:
    """Factory fixture building a TestClient wired to in-process mock services."""

    def factory(settings=None, *, ner=None, geo=None) -> TestClient:
        import httpx
        from fastapi.testclient import TestClient

        from app import config as app_config
        from app.main import create_app
        from workflow_runtime.mocks import RequestLog, create_mock_app

        monkeypatch.delenv("CWM_CONFIG_FILE", raising=False)
        app_config.get_settings.cache_clear()

        log = RequestLog()
        ner_app = create_mock_app(ner or ner_config, log)
        geo_app = create_mock_app(geo or geo_config, log)
        http_client = httpx.AsyncClient(
            mounts={
                "http://ner.test": httpx.ASGITransport(app=ner_app),
                "http://geo.test": httpx.ASGITransport(app=geo_app),
            }
        )
        app = create_app(settings or make_settings(), http_client=http_client)
        app.state.mocks = {"ner": ner_app.state.mock, "geo": geo_app.state.mock}
        app.state.request_log = log
        return TestClient(app)

    return factory
