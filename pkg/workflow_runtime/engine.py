"""
Workflow execution engine.

A template is compiled once into an :class:`~workflow_runtime.cwdl.ExecutionGraph`;
every execution walks that graph: the source completes with the input
document, service nodes are dispatched as envelopes to their controller's
queue and complete when the reply arrives, split nodes pass their payload to
every branch and waitcombiner nodes merge the NIF documents of all branches.
The engine never waits on services itself; replies come back through the
broker's reply queue.
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading
import uuid
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Protocol

from pydantic import BaseModel

from .broker import BrokerAdapter, Envelope, Priority
from .cwdl import (
    CONTROLLERS,
    SINK_ID,
    SOURCE_ID,
    TASKS,
    TEMPLATES,
    ControllerSpec,
    ExecutionGraph,
    NodeKind,
    TaskSpec,
    WorkflowTemplate,
    compile_template,
    resolve_controller,
    validate,
)
from .errors import (
    BrokerError,
    FailedExecutionError,
    IllegalStateError,
    NotFinishedError,
    UnknownCorrelationError,
    UnknownExecutionError,
    UnknownTemplateError,
    ValidationError,
    WorkflowError,
)
from .nif import NifDocument, make_context, merge, parse_nif, serialize_nif
from .problem import PROBLEM_JSON, decode_problem, make_problem

logger = logging.getLogger(__name__)

DEFAULT_BASE_URI = "http://example.org/documents/"


class ExecutionState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    CANCELLED = "CANCELLED"


TERMINAL_STATES = frozenset(
    {ExecutionState.COMPLETED, ExecutionState.FAILED, ExecutionState.CANCELLED}
)


class NodeState(str, Enum):
    WAITING = "WAITING"
    DISPATCHED = "DISPATCHED"
    DONE = "DONE"
    ERRORED = "ERRORED"


class ElementSource(Protocol):
    """Read access to the registered CWDL elements."""

    def template(self, template_id: str) -> WorkflowTemplate | None: ...

    def task_map(self) -> Mapping[str, TaskSpec]: ...

    def controller_map(self) -> Mapping[str, ControllerSpec]: ...


def _now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class WorkflowExecution:
    execution_id: str
    template_id: str
    graph: ExecutionGraph
    input_payload: bytes
    priority: Priority
    param_overrides: dict[str, str]
    routes: dict[str, ControllerSpec]
    references: frozenset[tuple[str, str]]
    state: ExecutionState = ExecutionState.PENDING
    node_states: dict[str, NodeState] = field(default_factory=dict)
    branch_results: dict[str, bytes] = field(default_factory=dict)
    result: bytes | None = None
    error: dict[str, Any] | None = None
    created_at: datetime = field(default_factory=_now)
    started_at: datetime | None = None
    finished_at: datetime | None = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    finished: asyncio.Event | None = field(default=None, repr=False)

    @property
    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES


class ExecutionStatus(BaseModel):
    executionId: str
    templateId: str
    state: ExecutionState
    priority: Priority
    nodes: dict[str, NodeState]
    createdAt: datetime
    startedAt: Optional[datetime] = None
    finishedAt: Optional[datetime] = None
    error: Optional[dict[str, Any]] = None


class EventLog:
    """Append-only JSON-lines record of state transitions."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, execution_id: str, node_id: str | None, transition: str) -> None:
        line = json.dumps(
            {
                "ts": _now().isoformat(),
                "executionId": execution_id,
                "nodeId": node_id,
                "transition": transition,
            }
        )
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")


class WorkflowEngine:
    def __init__(
        self,
        registry: ElementSource,
        broker: BrokerAdapter,
        *,
        reply_queue: str = "cwm.replies",
        base_uri: str = DEFAULT_BASE_URI,
        priority_size_threshold: int | None = None,
        event_log: EventLog | None = None,
        max_finished_executions: int | None = 1000,
    ) -> None:
        self.registry = registry
        self.broker = broker
        self.reply_queue = broker.declare_queue(reply_queue)
        self.base_uri = base_uri
        self.priority_size_threshold = priority_size_threshold
        self.event_log = event_log
        self.max_finished_executions = max_finished_executions
        self.late_replies = 0
        self._executions: dict[str, WorkflowExecution] = {}
        self._graphs: dict[WorkflowTemplate, ExecutionGraph] = {}
        broker.add_dead_letter_listener(self._on_dead_letter)

    # -- bookkeeping -----------------------------------------------------

    def _get(self, execution_id: str) -> WorkflowExecution:
        try:
            return self._executions[execution_id]
        except KeyError:
            raise UnknownExecutionError(
                f"Unknown execution {execution_id}", payload={"executionId": execution_id}
            ) from None

    def _record(self, ex: WorkflowExecution, node_id: str | None, transition: str) -> None:
        if self.event_log is not None:
            self.event_log.record(ex.execution_id, node_id, transition)

    def _set_node(self, ex: WorkflowExecution, node_id: str, state: NodeState) -> None:
        previous = ex.node_states[node_id]
        ex.node_states[node_id] = state
        self._record(ex, node_id, f"{previous.value}->{state.value}")

    def _set_state(self, ex: WorkflowExecution, state: ExecutionState) -> None:
        previous = ex.state
        ex.state = state
        if state in TERMINAL_STATES:
            ex.finished_at = _now()
            if ex.finished is not None:
                ex.finished.set()
        self._record(ex, None, f"{previous.value}->{state.value}")
        logger.info(
            "execution_state",
            extra={"execution_id": ex.execution_id, "state": state.value},
        )

    def _compile(self, template: WorkflowTemplate) -> ExecutionGraph:
        graph = self._graphs.get(template)
        if graph is None:
            graph = self._graphs[template] = compile_template(template)
        return graph

    # -- lifecycle -------------------------------------------------------

    def create_execution(
        self,
        template_id: str,
        document: NifDocument | str,
        priority: Priority | str | None = None,
        param_overrides: Mapping[str, str] | None = None,
    ) -> str:
        """Instantiate ``template_id`` over an input document (raw text is wrapped)."""

        template = self.registry.template(template_id)
        if template is None:
            raise UnknownTemplateError(
                f"Unknown template {template_id}", payload={"templateId": template_id}
            )
        overrides = dict(param_overrides or {})
        tasks = self.registry.task_map()
        controllers = self.registry.controller_map()
        report = validate(template, tasks, controllers, inputs=overrides.keys())
        if not report.ok:
            raise ValidationError(
                f"Template {template_id} failed validation",
                payload=report.model_dump(mode="json"),
            )

        if isinstance(document, str):
            document = make_context(document, self.base_uri)
        payload = serialize_nif(document).encode("utf-8")
        if priority is None:
            threshold = self.priority_size_threshold
            small = threshold is not None and len(payload) <= threshold
            priority = Priority.PRIORITY if small else Priority.NORMAL

        graph = self._compile(template)
        routes: dict[str, ControllerSpec] = {}
        references = {(TEMPLATES, template_id)}
        for node in graph.service_nodes():
            task = tasks[node.task_id]
            controller = resolve_controller(controllers, task.controller_id)
            assert controller is not None  # guaranteed by validate()
            routes[node.node_id] = controller
            references.update({(TASKS, task.task_id), (CONTROLLERS, controller.controller_id)})

        execution = WorkflowExecution(
            execution_id=uuid.uuid4().hex,
            template_id=template_id,
            graph=graph,
            input_payload=payload,
            priority=Priority(priority),
            param_overrides=overrides,
            routes=routes,
            references=frozenset(references),
            node_states={node_id: NodeState.WAITING for node_id in graph.nodes},
        )
        self._executions[execution.execution_id] = execution
        self._prune_finished()
        self._record(execution, None, "->PENDING")
        logger.info(
            "execution_created",
            extra={"execution_id": execution.execution_id, "template_id": template_id},
        )
        return execution.execution_id

    def start(self, execution_id: str) -> None:
        ex = self._get(execution_id)
        with ex.lock:
            if ex.state is not ExecutionState.PENDING:
                raise IllegalStateError(
                    f"Execution {execution_id} is {ex.state.value}, expected PENDING"
                )
            ex.started_at = _now()
            self._set_state(ex, ExecutionState.RUNNING)
            self._complete(ex, SOURCE_ID, ex.input_payload)

    def cancel(self, execution_id: str) -> None:
        ex = self._get(execution_id)
        with ex.lock:
            if ex.is_terminal:
                raise IllegalStateError(
                    f"Execution {execution_id} is already {ex.state.value}"
                )
            self._set_state(ex, ExecutionState.CANCELLED)
        self.broker.discard(execution_id)

    # -- graph walking ---------------------------------------------------

    def _complete(self, ex: WorkflowExecution, node_id: str, payload: bytes) -> None:
        ex.branch_results[node_id] = payload
        self._set_node(ex, node_id, NodeState.DONE)
        if node_id == SINK_ID:
            ex.result = payload
            self._set_state(ex, ExecutionState.COMPLETED)
            return
        for successor in ex.graph.successors(node_id):
            if ex.state is not ExecutionState.RUNNING:
                return
            ready = all(
                ex.node_states[p] is NodeState.DONE for p in ex.graph.predecessors(successor)
            )
            if ready and ex.node_states[successor] is NodeState.WAITING:
                self._activate(ex, successor)

    def _activate(self, ex: WorkflowExecution, node_id: str) -> None:
        node = ex.graph.nodes[node_id]
        inputs = [ex.branch_results[p] for p in ex.graph.predecessors(node_id)]
        if node.kind is NodeKind.SERVICE:
            self._dispatch(ex, node_id, inputs[0])
        elif node.kind is NodeKind.WAITCOMBINER:
            try:
                merged = merge([parse_nif(p) for p in inputs])
            except WorkflowError as exc:
                self._fail(ex, node_id, make_problem(exc.status_code, "CombineError", exc.detail))
                return
            self._complete(ex, node_id, serialize_nif(merged).encode("utf-8"))
        else:
            self._complete(ex, node_id, inputs[0])

    def _dispatch(self, ex: WorkflowExecution, node_id: str, payload: bytes) -> None:
        controller = ex.routes[node_id]
        pair = self.broker.declare_queues(controller)
        envelope = Envelope(
            execution_id=ex.execution_id,
            node_id=node_id,
            payload=payload,
            reply_queue=self.reply_queue,
            priority=ex.priority,
            param_overrides=dict(ex.param_overrides),
        )
        try:
            self.broker.publish(pair.for_priority(ex.priority), envelope)
        except BrokerError as exc:
            self._fail(ex, node_id, make_problem(exc.status_code, type(exc).__name__, exc.detail))
            return
        self._set_node(ex, node_id, NodeState.DISPATCHED)
        logger.info(
            "node_dispatched",
            extra={
                "execution_id": ex.execution_id,
                "node_id": node_id,
                "controller_id": controller.controller_id,
                "message_id": envelope.message_id,
            },
        )

    def _fail(self, ex: WorkflowExecution, node_id: str, problem: dict[str, Any]) -> None:
        self._set_node(ex, node_id, NodeState.ERRORED)
        ex.error = {"nodeId": node_id, **problem}
        self._set_state(ex, ExecutionState.FAILED)
        self.broker.discard(ex.execution_id)

    # -- replies ---------------------------------------------------------

    def handle_result(self, envelope: Envelope) -> None:
        """Apply one reply envelope; duplicates and late replies are ignored."""

        ex = self._executions.get(envelope.execution_id)
        if ex is None or envelope.node_id not in ex.graph.nodes:
            raise UnknownCorrelationError(
                f"No execution node {envelope.execution_id}/{envelope.node_id}",
                payload={"executionId": envelope.execution_id, "nodeId": envelope.node_id},
            )
        log_extra = {"execution_id": ex.execution_id, "node_id": envelope.node_id}
        with ex.lock:
            if ex.is_terminal:
                self.late_replies += 1
                logger.info("late_reply_ignored", extra=log_extra)
                return
            state = ex.node_states[envelope.node_id]
            if state is not NodeState.DISPATCHED:
                logger.info("duplicate_reply_ignored", extra=log_extra | {"node_state": state.value})
                return
            if envelope.content_type == PROBLEM_JSON:
                logger.warning("node_errored", extra=log_extra)
                self._fail(ex, envelope.node_id, decode_problem(envelope.payload))
                return
            self._complete(ex, envelope.node_id, envelope.payload)

    def _on_dead_letter(self, queue: str, envelope: Envelope) -> None:
        if queue == self.reply_queue or envelope.reply_queue != self.reply_queue:
            return
        ex = self._executions.get(envelope.execution_id)
        if ex is None:
            return
        with ex.lock:
            if ex.is_terminal or ex.node_states.get(envelope.node_id) is not NodeState.DISPATCHED:
                return
            self._fail(
                ex,
                envelope.node_id,
                make_problem(
                    504,
                    "DeadLettered",
                    f"Envelope for {envelope.node_id} exhausted {envelope.attempt} attempts",
                    attempts=envelope.attempt,
                ),
            )

    async def run_replies(self, stop: asyncio.Event, poll: float = 0.1) -> None:
        """Consume the reply queue until ``stop`` is set."""

        while not stop.is_set():
            item = await self.broker.get([self.reply_queue], timeout=poll)
            if item is None:
                continue
            envelope, tag = item
            try:
                self.handle_result(envelope)
            except UnknownCorrelationError:
                logger.warning(
                    "unknown_correlation",
                    extra={"execution_id": envelope.execution_id, "node_id": envelope.node_id},
                )
                self.broker.nack(tag, requeue=False)
                continue
            except Exception:
                logger.exception("reply_handling_failed", extra={"execution_id": envelope.execution_id})
                self.broker.nack(tag, requeue=False)
                continue
            self.broker.ack(tag)

    async def wait(self, execution_id: str, timeout: float) -> ExecutionState:
        """Block until the execution is terminal (``asyncio.TimeoutError`` otherwise)."""

        ex = self._get(execution_id)
        with ex.lock:
            if ex.is_terminal:
                return ex.state
            if ex.finished is None:
                ex.finished = asyncio.Event()
            finished = ex.finished
        await asyncio.wait_for(finished.wait(), timeout)
        return ex.state

    # -- queries ---------------------------------------------------------

    def get_status(self, execution_id: str) -> ExecutionStatus:
        ex = self._get(execution_id)
        with ex.lock:
            return ExecutionStatus(
                executionId=ex.execution_id,
                templateId=ex.template_id,
                state=ex.state,
                priority=ex.priority,
                nodes=dict(ex.node_states),
                createdAt=ex.created_at,
                startedAt=ex.started_at,
                finishedAt=ex.finished_at,
                error=ex.error,
            )

    def get_result(self, execution_id: str) -> bytes:
        ex = self._get(execution_id)
        with ex.lock:
            if ex.state is ExecutionState.COMPLETED:
                assert ex.result is not None
                return ex.result
            if ex.state is ExecutionState.FAILED:
                raise FailedExecutionError(
                    f"Execution {execution_id} failed at node {(ex.error or {}).get('nodeId')}",
                    payload={
                        "error": ex.error,
                        "completedNodes": sorted(
                            n for n, s in ex.node_states.items() if s is NodeState.DONE
                        ),
                    },
                )
            raise NotFinishedError(
                f"Execution {execution_id} is {ex.state.value}",
                payload={"state": ex.state.value},
            )

    def partial_results(self, execution_id: str) -> dict[str, bytes]:
        ex = self._get(execution_id)
        with ex.lock:
            return dict(ex.branch_results)

    def list_executions(self) -> list[ExecutionStatus]:
        return [self.get_status(execution_id) for execution_id in list(self._executions)]

    def delete_execution(self, execution_id: str) -> None:
        ex = self._get(execution_id)
        if not ex.is_terminal:
            raise IllegalStateError(f"Execution {execution_id} is still {ex.state.value}")
        del self._executions[execution_id]

    def _prune_finished(self) -> None:
        """Forget the oldest finished executions beyond ``max_finished_executions``."""

        limit = self.max_finished_executions
        if limit is None:
            return
        finished = [ex for ex in list(self._executions.values()) if ex.is_terminal]
        finished.sort(key=lambda ex: ex.finished_at or ex.created_at)
        for ex in finished[: max(len(finished) - limit, 0)]:
            self._executions.pop(ex.execution_id, None)

    def references_in_use(self) -> set[tuple[str, str]]:
        """``(kind, id)`` pairs used by executions that have not finished."""

        used: set[tuple[str, str]] = set()
        for ex in list(self._executions.values()):
            if not ex.is_terminal:
                used |= ex.references
        return used


ServiceFunction = Callable[[NifDocument], NifDocument]


def reference_interpreter(
    template: WorkflowTemplate,
    document: NifDocument | str,
    service_functions: Mapping[str, ServiceFunction],
    *,
    base_uri: str = DEFAULT_BASE_URI,
) -> NifDocument:
    """Run a template strictly sequentially in one topological order (test oracle)."""

    graph = compile_template(template)
    if isinstance(document, str):
        document = make_context(document, base_uri)
    results: dict[str, NifDocument] = {}
    for node_id in graph.topological_order():
        node = graph.nodes[node_id]
        inputs: Iterable[NifDocument] = [results[p] for p in graph.predecessors(node_id)]
        if node.kind is NodeKind.SOURCE:
            results[node_id] = document
        elif node.kind is NodeKind.SERVICE:
            results[node_id] = service_functions[node.task_id](list(inputs)[0])
        elif node.kind is NodeKind.WAITCOMBINER:
            results[node_id] = merge(list(inputs))
        else:
            results[node_id] = list(inputs)[0]
    return results[SINK_ID]
