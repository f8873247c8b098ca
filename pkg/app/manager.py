"""Workflow manager coordinating the registry, broker, engine and controller workers."""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

import httpx

from workflow_runtime.broker import InMemoryBroker, Priority
from workflow_runtime.controller import ControllerWorker
from workflow_runtime.cwdl import CONTROLLERS, ControllerSpec
from workflow_runtime.engine import EventLog, WorkflowEngine
from workflow_runtime.errors import IllegalStateError, UnknownElementError
from workflow_runtime.nif import NifDocument
from workflow_runtime.registry import ElementRegistry
from workflow_runtime.reports import ValidationReport

from .config import Settings

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class _RunningWorker:
    worker: ControllerWorker
    stop: asyncio.Event
    task: asyncio.Task


class WorkflowManager:
    """
    Facade the REST layer talks to.

    Elements can be registered at any time; executing workflows requires
    :meth:`init`, which starts the reply consumer and one worker per registered
    controller. While running, workers follow controller create/modify/delete.
    """

    def __init__(self, settings: Settings, *, http_client: httpx.AsyncClient | None = None) -> None:
        self.settings = settings
        self.registry = ElementRegistry(settings.data_dir)
        self.broker = InMemoryBroker(settings.broker_limits())
        self.engine = WorkflowEngine(
            self.registry,
            self.broker,
            reply_queue=settings.reply_queue,
            base_uri=settings.document_base_uri,
            priority_size_threshold=settings.priority_size_threshold,
            event_log=EventLog(settings.event_log_path) if settings.event_log_path else None,
            max_finished_executions=settings.max_finished_executions,
        )
        self._client = http_client
        self._owns_client = http_client is None
        self._workers: dict[str, _RunningWorker] = {}
        self._stop: asyncio.Event | None = None
        self._reply_task: asyncio.Task | None = None

    @property
    def initialized(self) -> bool:
        return self._reply_task is not None

    # -- lifecycle -------------------------------------------------------

    async def init(self) -> dict[str, Any]:
        if self.initialized:
            return self.describe()
        if self._client is None:
            self._client = httpx.AsyncClient()
            self._owns_client = True
        self._stop = asyncio.Event()
        self._reply_task = asyncio.create_task(
            self.engine.run_replies(self._stop, self.settings.consumer_poll_seconds),
            name="cwm-replies",
        )
        for controller in self.registry.list(CONTROLLERS):
            self._start_worker(controller)
        logger.info("manager_initialized", extra={"state": "running"})
        return self.describe()

    async def stop(self) -> dict[str, Any]:
        """Stop workers after their in-flight request, then the reply consumer."""

        for controller_id in list(self._workers):
            await self._stop_worker(controller_id)
        if self._reply_task is not None:
            assert self._stop is not None
            self._stop.set()
            await self._reply_task
            self._reply_task = None
        if self._owns_client and self._client is not None:
            await self._client.aclose()
            self._client = None
        logger.info("manager_stopped", extra={"state": "stopped"})
        return self.describe()

    def _start_worker(self, spec: ControllerSpec) -> None:
        assert self._client is not None
        worker = ControllerWorker(
            spec, self.broker, self._client, self.settings.controller_options(spec.controller_id)
        )
        stop = asyncio.Event()
        task = asyncio.create_task(worker.run(stop), name=f"controller-{spec.controller_id}")
        self._workers[spec.controller_id] = _RunningWorker(worker, stop, task)

    async def _stop_worker(self, controller_id: str) -> None:
        running = self._workers.pop(controller_id, None)
        if running is None:
            return
        running.stop.set()
        await running.task

    async def _reconcile(self, kind: str, element_id: str) -> None:
        if kind != CONTROLLERS or not self.initialized:
            return
        await self._stop_worker(element_id)
        try:
            spec = self.registry.get(CONTROLLERS, element_id)
        except UnknownElementError:
            return
        self._start_worker(spec)

    def describe(self) -> dict[str, Any]:
        return {
            "initialized": self.initialized,
            "controllers": sorted(self._workers),
            "executions": len(self.engine.list_executions()),
            "lateReplies": self.engine.late_replies,
            "broker": self.broker.stats(),
        }

    # -- elements --------------------------------------------------------

    async def create_element(self, kind: str, document: bytes) -> tuple[Any, ValidationReport]:
        element, report = self.registry.create(kind, document)
        await self._reconcile(kind, element.identifier)
        return element, report

    async def modify_element(
        self, kind: str, element_id: str, document: bytes
    ) -> tuple[Any, ValidationReport]:
        element, report = self.registry.modify(
            kind, element_id, document, in_use=self.engine.references_in_use
        )
        await self._reconcile(kind, element_id)
        return element, report

    async def delete_element(self, kind: str, element_id: str) -> None:
        self.registry.delete(kind, element_id, in_use=self.engine.references_in_use)
        if kind == CONTROLLERS:
            await self._stop_worker(element_id)
            self.broker.release_queues(element_id)

    # -- executions ------------------------------------------------------

    def execute(
        self,
        template_id: str,
        document: NifDocument | str,
        priority: Priority | None = None,
        param_overrides: Mapping[str, str] | None = None,
    ) -> str:
        if not self.initialized:
            raise IllegalStateError("The workflow manager is not initialized; call /admin/init")
        execution_id = self.engine.create_execution(
            template_id, document, priority=priority, param_overrides=param_overrides
        )
        self.engine.start(execution_id)
        return execution_id
