"""
Deterministic mock annotation services.

Each mock accepts a NIF document over HTTP, annotates every occurrence of its
gazetteer entries in the context text and returns the annotated document,
either directly (sync mode) or through a ``202 Accepted`` job that has to be
polled (async mode). Failures can be injected with ``fail_next_n``. Every
request and response is recorded in a :class:`RequestLog`; several mocks may
share one log so that sequence numbers are comparable across services.
"""

from __future__ import annotations

import asyncio
import hashlib
import itertools
import logging
import threading
import time
import uuid
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Literal, Optional

import uvicorn
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from .controller import EXECUTION_HEADER, NODE_HEADER
from .errors import WorkflowError
from .nif import MEDIA_TYPE, NifDocument, annotate, parse_nif, serialize_nif

logger = logging.getLogger(__name__)


class GazetteerEntry(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    surface: str = Field(min_length=1)
    entity_class: str = Field(alias="entityClass", min_length=1)
    ident_ref: Optional[str] = Field(default=None, alias="identRef")


class MockServiceConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    name: str = "mock"
    gazetteer: list[GazetteerEntry] = Field(default_factory=list)
    mode: Literal["sync", "async"] = "sync"
    latency: float = Field(default=0.0, ge=0)
    fail_next_n: int = Field(default=0, ge=0, alias="failNextN")
    host: str = "127.0.0.1"
    port: int = Field(default=0, ge=0, le=65535)


def annotate_with_gazetteer(doc: NifDocument, gazetteer: Iterable[GazetteerEntry]) -> NifDocument:
    """Leftmost, non-overlapping exact matches of each entry; no tokenisation."""

    text = doc.context_text
    for entry in gazetteer:
        start = 0
        while (found := text.find(entry.surface, start)) >= 0:
            end = found + len(entry.surface)
            doc = annotate(doc, found, end, entry.entity_class, entry.ident_ref)
            start = end
    return doc


class RequestLog:
    """Thread-safe invocation log with one monotonic sequence counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._seq = itertools.count(1)
        self._entries: list[dict] = []

    def record(
        self,
        service: str,
        event: str,
        body: bytes,
        *,
        execution_id: str | None = None,
        node_id: str | None = None,
    ) -> dict:
        with self._lock:
            entry = {
                "seq": next(self._seq),
                "ts": time.time(),
                "bodyHash": hashlib.sha256(body).hexdigest(),
                "service": service,
                "event": event,
            }
            if execution_id is not None:
                entry["executionId"] = execution_id
            if node_id is not None:
                entry["nodeId"] = node_id
            self._entries.append(entry)
        return entry

    def entries(self, service: str | None = None) -> list[dict]:
        with self._lock:
            return [dict(e) for e in self._entries if service is None or e["service"] == service]


@dataclass
class _Job:
    ready_at: float
    body: bytes
    delivered: bool = False


class MockState:
    """Mutable runtime state of one mock; tests use it to pause or inject failures."""

    max_jobs = 1024

    def __init__(self, config: MockServiceConfig, log: RequestLog) -> None:
        self.config = config
        self.log = log
        self.fail_remaining = config.fail_next_n
        self.jobs: dict[str, _Job] = {}
        self.calls = 0
        self._resume = asyncio.Event()
        self._resume.set()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.config.name

    def fail_next(self, count: int) -> None:
        with self._lock:
            self.fail_remaining = count

    def take_failure(self) -> bool:
        with self._lock:
            if self.fail_remaining > 0:
                self.fail_remaining -= 1
                return True
            return False

    def add_job(self, job: _Job) -> str:
        job_id = uuid.uuid4().hex
        self.jobs[job_id] = job
        while len(self.jobs) > self.max_jobs:
            del self.jobs[next(iter(self.jobs))]
        return job_id

    def _in_loop(self, callback) -> None:
        loop = self._loop
        if loop is None or loop.is_closed():
            callback()
            return
        try:
            running = asyncio.get_running_loop()
        except RuntimeError:
            running = None
        if running is loop:
            callback()
        else:
            loop.call_soon_threadsafe(callback)

    def pause(self) -> None:
        """Hold every request after it is logged until :meth:`resume`; callable from any thread."""

        self._in_loop(self._resume.clear)

    def resume(self) -> None:
        self._in_loop(self._resume.set)

    async def wait_resumed(self) -> None:
        self._loop = asyncio.get_running_loop()
        await self._resume.wait()


def create_mock_app(config: MockServiceConfig, log: RequestLog | None = None) -> FastAPI:
    state = MockState(config, log or RequestLog())
    app = FastAPI(title=f"Mock service {config.name}")
    app.state.mock = state

    def correlation(request: Request) -> dict[str, str | None]:
        return {
            "execution_id": request.headers.get(EXECUTION_HEADER),
            "node_id": request.headers.get(NODE_HEADER),
        }

    def turtle(request: Request, body: bytes, status_code: int = 200) -> Response:
        state.log.record(state.name, "response", body, **correlation(request))
        return Response(content=body, status_code=status_code, media_type=MEDIA_TYPE)

    @app.post("/")
    @app.post("/{path:path}")
    async def process(request: Request) -> Response:
        body = await request.body()
        state.calls += 1
        state.log.record(state.name, "request", body, **correlation(request))
        content_type = request.headers.get("content-type", "").split(";", 1)[0].strip()
        if content_type != MEDIA_TYPE:
            return JSONResponse({"error": f"expected {MEDIA_TYPE}"}, status_code=415)
        await state.wait_resumed()
        if state.take_failure():
            logger.info("mock_injected_failure", extra={"service": state.name})
            return JSONResponse({"error": "injected failure"}, status_code=500)
        try:
            doc = parse_nif(body)
        except WorkflowError as exc:
            return JSONResponse({"error": exc.detail}, status_code=400)
        result = serialize_nif(annotate_with_gazetteer(doc, config.gazetteer)).encode("utf-8")

        if config.mode == "async":
            job_id = state.add_job(_Job(ready_at=time.monotonic() + config.latency, body=result))
            return Response(status_code=202, headers={"Location": f"/jobs/{job_id}"})
        if config.latency:
            await asyncio.sleep(config.latency)
        return turtle(request, result)

    @app.get("/jobs/{job_id}")
    async def job(job_id: str, request: Request) -> Response:
        found = state.jobs.get(job_id)
        if found is None:
            return JSONResponse({"error": f"unknown job {job_id}"}, status_code=404)
        if time.monotonic() < found.ready_at:
            return Response(status_code=202, headers={"Location": f"/jobs/{job_id}"})
        if found.delivered:
            return Response(content=found.body, media_type=MEDIA_TYPE)
        found.delivered = True
        return turtle(request, found.body)

    @app.get("/log")
    async def request_log() -> list[dict]:
        return state.log.entries(state.name)

    return app


class MockServer:
    """A mock served by uvicorn on a background thread."""

    def __init__(self, config: MockServiceConfig, log: RequestLog | None = None) -> None:
        self.config = config
        self.app = create_mock_app(config, log)
        self._server = uvicorn.Server(
            uvicorn.Config(self.app, host=config.host, port=config.port, log_level="warning")
        )
        self._thread = threading.Thread(target=self._server.run, name=f"mock-{config.name}", daemon=True)

    @property
    def port(self) -> int:
        sockets = self._server.servers[0].sockets
        return sockets[0].getsockname()[1]

    @property
    def url(self) -> str:
        return f"http://{self.config.host}:{self.port}/"

    def start(self, timeout: float = 10.0) -> "MockServer":
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                raise RuntimeError(f"mock {self.config.name} failed to start")
            time.sleep(0.01)
        logger.info("mock_started", extra={"service": self.config.name, "port": self.port})
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        """Block until the server exits or the process is interrupted."""

        try:
            while self._thread.is_alive():
                self._thread.join(timeout=0.5)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()


def serve_mock(config: MockServiceConfig, log: RequestLog | None = None) -> MockServer:
    return MockServer(config, log).start()
