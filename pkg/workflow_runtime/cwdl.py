"""
Curation Workflow Definition Language: JSON models, validation and graph compilation.

Three element kinds exist on the wire: controllers (a REST service proxy and its
queue pair), tasks (bind a unit of work to a controller) and templates (a tree
of tasks composed with ``ParallelTask``/``SequentialTask`` blocks). Templates
compile into an :class:`ExecutionGraph` with a single source and sink, where
every parallel block becomes a ``split`` node fanning out to its children and a
``waitcombiner`` node joining them again.
"""

from __future__ import annotations

import graphlib
import json
import re
from collections import deque
from collections.abc import Collection, Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Annotated, Any, Literal, Union

import httpx
from pydantic import (
    AfterValidator,
    BaseModel,
    ConfigDict,
    Discriminator,
    Field,
    Tag,
    field_validator,
    model_validator,
)
from pydantic import ValidationError as PydanticValidationError

from .errors import CompileError, ParseError, SchemaError
from .reports import ValidationReport

PAYLOAD_SLOT = "documentContentNIF"
PLACEHOLDER_RE = re.compile(r"<([A-Za-z_][\w.-]*)>")

CONTROLLERS = "controllers"
TASKS = "tasks"
TEMPLATES = "templates"
ELEMENT_KINDS = (CONTROLLERS, TASKS, TEMPLATES)


class ParamKind(str, Enum):
    PARAMETER = "parameter"
    HEADER = "header"


class CombinatorKind(str, Enum):
    SPLIT = "split"
    WAITCOMBINER = "waitcombiner"


class _Wire(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


Identifier = Annotated[str, Field(min_length=1, pattern=r"^[A-Za-z0-9][A-Za-z0-9._-]*$")]


# --- Controllers ----------------------------------------------------------


class ParamSpec(_Wire):
    """A query parameter or header bound when the controller builds a request."""

    name: Identifier
    kind: ParamKind = Field(alias="type")
    default_value: str | None = None
    required: bool = False


class BodySpec(_Wire):
    content: str


def _unique_names(params: tuple[ParamSpec, ...]) -> tuple[ParamSpec, ...]:
    seen: set[str] = set()
    for param in params:
        if param.name in seen:
            raise ValueError(f"duplicate name {param.name!r}")
        seen.add(param.name)
    return params


ParamList = Annotated[tuple[ParamSpec, ...], AfterValidator(_unique_names)]


def endpoint_placeholders(url: str) -> list[str]:
    return PLACEHOLDER_RE.findall(url)


class ConnectionSpec(_Wire):
    connection_type: Literal["restapi"]
    method: Literal["GET", "POST", "PUT", "DELETE", "PATCH"]
    endpoint_url: str
    parameters: ParamList = ()
    headers: ParamList = ()
    body: BodySpec | None = None

    @field_validator("endpoint_url")
    @classmethod
    def _absolute_url(cls, value: str) -> str:
        candidate = PLACEHOLDER_RE.sub(lambda m: m.group(1).replace("_", "-"), value)
        try:
            url = httpx.URL(candidate)
        except httpx.InvalidURL as exc:
            raise ValueError(f"invalid endpoint URL: {exc}") from exc
        if url.scheme not in {"http", "https"} or not url.host:
            raise ValueError("endpoint_url must be an absolute http(s) URL")
        return value

    @field_validator("parameters")
    @classmethod
    def _only_parameters(cls, value: tuple[ParamSpec, ...]) -> tuple[ParamSpec, ...]:
        if any(p.kind is not ParamKind.PARAMETER for p in value):
            raise ValueError("entries of 'parameters' must have type 'parameter'")
        return value

    @field_validator("headers")
    @classmethod
    def _only_headers(cls, value: tuple[ParamSpec, ...]) -> tuple[ParamSpec, ...]:
        if any(p.kind is not ParamKind.HEADER for p in value):
            raise ValueError("entries of 'headers' must have type 'header'")
        return value

    @property
    def body_content_slot(self) -> str | None:
        return self.body.content if self.body else None

    def header_value(self, name: str) -> str | None:
        for header in self.headers:
            if header.name.lower() == name.lower():
                return header.default_value
        return None


class QueueNames(_Wire):
    name_input_normal: Identifier = Field(alias="nameInputNormal")
    name_input_priority: Identifier = Field(alias="nameInputPriority")

    @model_validator(mode="after")
    def _distinct(self) -> "QueueNames":
        if self.name_input_normal == self.name_input_priority:
            raise ValueError("nameInputNormal and nameInputPriority must differ")
        return self


class ControllerSpec(_Wire):
    controller_name: str = Field(alias="controllerName")
    service_id: Identifier = Field(alias="serviceId")
    controller_id: Identifier = Field(alias="controllerId")
    queues: QueueNames
    connection: ConnectionSpec

    @property
    def identifier(self) -> str:
        return self.controller_id

    def required_params(self) -> Iterator[ParamSpec]:
        for param in (*self.connection.parameters, *self.connection.headers):
            if param.required and param.default_value is None:
                yield param


# --- Tasks ----------------------------------------------------------------


class TaskSpec(_Wire):
    task_name: str = Field(alias="taskName")
    task_id: Identifier = Field(alias="taskId")
    controller_id: Identifier = Field(alias="controllerId")
    component_type: Literal["rabbitmqrestapi"]

    @property
    def identifier(self) -> str:
        return self.task_id


# --- Templates ------------------------------------------------------------


def _unique_orders(nodes: tuple[Any, ...]) -> tuple[Any, ...]:
    seen: set[int] = set()
    for node in nodes:
        if node.order in seen:
            raise ValueError(f"duplicate order {node.order} among sibling tasks")
        seen.add(node.order)
    return nodes


class ServiceNode(_Wire):
    order: int = Field(gt=0)
    task_id: Identifier = Field(alias="taskId")


class CombinatorRef(_Wire):
    component_type: CombinatorKind


class ParallelFeatures(_Wire):
    input: CombinatorRef
    output: CombinatorRef
    tasks: "NodeList" = Field(min_length=1)


class ParallelBlock(_Wire):
    order: int = Field(gt=0)
    task_id: Literal["ParallelTask"] = Field(alias="taskId")
    features: ParallelFeatures

    @property
    def input_combinator(self) -> CombinatorKind:
        return self.features.input.component_type

    @property
    def output_combinator(self) -> CombinatorKind:
        return self.features.output.component_type

    @property
    def children(self) -> tuple["TaskNode", ...]:
        return self.features.tasks


class SequentialFeatures(_Wire):
    tasks: "NodeList" = Field(min_length=1)


class SequentialBlock(_Wire):
    order: int = Field(gt=0)
    task_id: Literal["SequentialTask"] = Field(alias="taskId")
    features: SequentialFeatures

    @property
    def children(self) -> tuple["TaskNode", ...]:
        return self.features.tasks


_NODE_TAGS = {"service", "parallel", "sequential"}


def _node_tag(value: Any) -> str:
    if isinstance(value, Mapping):
        task_id = value.get("taskId", value.get("task_id"))
    else:
        task_id = getattr(value, "task_id", None)
    if task_id == "ParallelTask":
        return "parallel"
    if task_id == "SequentialTask":
        return "sequential"
    return "service"


TaskNode = Annotated[
    Union[
        Annotated[ServiceNode, Tag("service")],
        Annotated[ParallelBlock, Tag("parallel")],
        Annotated[SequentialBlock, Tag("sequential")],
    ],
    Discriminator(_node_tag),
]
NodeList = Annotated[tuple[TaskNode, ...], AfterValidator(_unique_orders)]


class WorkflowTemplate(_Wire):
    workflow_template_name: str = Field(alias="workflowTemplateName")
    workflow_template_id: Identifier = Field(alias="workflowTemplateId")
    workflow_template_description: str = Field(default="", alias="workflowTemplateDescription")
    tasks: NodeList = Field(min_length=1)

    @property
    def identifier(self) -> str:
        return self.workflow_template_id

    def task_ids(self) -> set[str]:
        found: set[str] = set()
        pending: deque[Any] = deque(self.tasks)
        while pending:
            node = pending.popleft()
            if isinstance(node, ServiceNode):
                found.add(node.task_id)
            else:
                pending.extend(node.children)
        return found


ParallelFeatures.model_rebuild()
SequentialFeatures.model_rebuild()
ParallelBlock.model_rebuild()
SequentialBlock.model_rebuild()
WorkflowTemplate.model_rebuild()

Element = Union[ControllerSpec, TaskSpec, WorkflowTemplate]
_MODELS: dict[str, type[_Wire]] = {
    CONTROLLERS: ControllerSpec,
    TASKS: TaskSpec,
    TEMPLATES: WorkflowTemplate,
}


# --- Parsing and serialisation --------------------------------------------


def _json_path(loc: tuple[Any, ...]) -> str:
    path = "$"
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        elif part not in _NODE_TAGS:
            path += f".{part}"
    return path


def _load_json(text: str | bytes | Mapping[str, Any]) -> dict[str, Any]:
    if isinstance(text, Mapping):
        return dict(text)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"Malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise ParseError("CWDL documents must be UTF-8 encoded") from exc
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object", path="$")
    return data


def _parse(model: type[_Wire], text: str | bytes | Mapping[str, Any]) -> Any:
    data = _load_json(text)
    try:
        return model.model_validate(data)
    except PydanticValidationError as exc:
        first = exc.errors()[0]
        raise SchemaError(first["msg"], path=_json_path(tuple(first["loc"]))) from exc


def parse_controller(text: str | bytes | Mapping[str, Any]) -> ControllerSpec:
    return _parse(ControllerSpec, text)


def parse_task(text: str | bytes | Mapping[str, Any]) -> TaskSpec:
    return _parse(TaskSpec, text)


def parse_template(text: str | bytes | Mapping[str, Any]) -> WorkflowTemplate:
    return _parse(WorkflowTemplate, text)


def parse_element(kind: str, text: str | bytes | Mapping[str, Any]) -> Any:
    """Parse a document of a known element kind (``controllers``, ``tasks``, ``templates``)."""

    try:
        model = _MODELS[kind]
    except KeyError:
        raise SchemaError(f"unknown element kind {kind!r}") from None
    return _parse(model, text)


def detect_kind(data: Mapping[str, Any]) -> str:
    if "workflowTemplateId" in data or "workflowTemplateName" in data:
        return TEMPLATES
    if "queues" in data or "connection" in data:
        return CONTROLLERS
    if "component_type" in data or "taskName" in data:
        return TASKS
    raise SchemaError("cannot tell whether the document is a controller, task or template")


def load_element(text: str | bytes | Mapping[str, Any]) -> tuple[str, Any]:
    """Parse a CWDL document of unknown kind, returning ``(kind, element)``."""

    data = _load_json(text)
    kind = detect_kind(data)
    return kind, _parse(_MODELS[kind], data)


def to_wire(element: _Wire) -> dict[str, Any]:
    """JSON-ready dict in the CWDL wire format (only fields present on input)."""

    return element.model_dump(mode="json", by_alias=True, exclude_unset=True)


def serialize(element: _Wire) -> str:
    return json.dumps(to_wire(element), indent=1, ensure_ascii=False)


def element_kind(element: Any) -> str:
    for kind, model in _MODELS.items():
        if isinstance(element, model):
            return kind
    raise TypeError(f"not a CWDL element: {type(element).__name__}")


# --- Validation -----------------------------------------------------------


def resolve_controller(
    controllers: Mapping[str, ControllerSpec], reference: str
) -> ControllerSpec | None:
    """Resolve a task's ``controllerId`` by controller id, falling back to service id."""

    found = controllers.get(reference)
    if found is not None:
        return found
    candidates = sorted(
        (c for c in controllers.values() if c.service_id == reference),
        key=lambda c: c.controller_id,
    )
    return candidates[0] if candidates else None


def _check_controller(
    report: ValidationReport,
    controller: ControllerSpec,
    path: str,
    inputs: Collection[str] | None,
) -> None:
    for param in controller.required_params():
        if inputs is None:
            report.warning(
                path,
                f"required parameter {param.name!r} of controller {controller.controller_id} "
                "has no default and must be supplied at execution time",
            )
        elif param.name not in inputs:
            report.error(
                path,
                f"required parameter {param.name!r} of controller {controller.controller_id} "
                "has no default and no value was supplied",
            )


def validate_controller(controller: ControllerSpec) -> ValidationReport:
    report = ValidationReport()
    _check_controller(report, controller, "$", None)
    return report


def validate_task(task: TaskSpec, controllers: Mapping[str, ControllerSpec]) -> ValidationReport:
    report = ValidationReport()
    if resolve_controller(controllers, task.controller_id) is None:
        report.error("$.controllerId", f"unresolved controllerId {task.controller_id}")
    return report


def validate(
    template: WorkflowTemplate,
    tasks: Mapping[str, TaskSpec],
    controllers: Mapping[str, ControllerSpec],
    *,
    inputs: Collection[str] | None = None,
) -> ValidationReport:
    """
    Check a parsed template against the task and controller registries.

    ``inputs`` lists the parameter names supplied at execution time. Without it
    the template is checked at definition time, and required parameters lacking
    a default only produce warnings.
    """

    report = ValidationReport()

    def visit(nodes: tuple[Any, ...], base: str) -> None:
        for index, node in enumerate(nodes):
            path = f"{base}[{index}]"
            if isinstance(node, ServiceNode):
                task = tasks.get(node.task_id)
                if task is None:
                    report.error(f"{path}.taskId", f"unresolved taskId {node.task_id}")
                    continue
                controller = resolve_controller(controllers, task.controller_id)
                if controller is None:
                    report.error(
                        f"{path}.taskId",
                        f"unresolved controllerId {task.controller_id} (task {task.task_id})",
                    )
                    continue
                _check_controller(report, controller, f"{path}.taskId", inputs)
                continue
            if isinstance(node, ParallelBlock):
                if node.input_combinator is not CombinatorKind.SPLIT:
                    report.error(
                        f"{path}.features.input.component_type",
                        "ParallelTask input combinator must be 'split'",
                    )
                if node.output_combinator is not CombinatorKind.WAITCOMBINER:
                    report.error(
                        f"{path}.features.output.component_type",
                        "ParallelTask output combinator must be 'waitcombiner'",
                    )
            visit(node.children, f"{path}.features.tasks")

    visit(template.tasks, "$.tasks")
    return report


def validate_element(
    element: Any,
    tasks: Mapping[str, TaskSpec],
    controllers: Mapping[str, ControllerSpec],
) -> ValidationReport:
    if isinstance(element, ControllerSpec):
        return validate_controller(element)
    if isinstance(element, TaskSpec):
        return validate_task(element, controllers)
    return validate(element, tasks, controllers)


# --- Compilation ----------------------------------------------------------


class NodeKind(str, Enum):
    SOURCE = "source"
    SINK = "sink"
    SERVICE = "service"
    SPLIT = "split"
    WAITCOMBINER = "waitcombiner"


SOURCE_ID = "source"
SINK_ID = "sink"


@dataclass(frozen=True)
class GraphNode:
    node_id: str
    kind: NodeKind
    task_id: str | None = None


@dataclass(frozen=True)
class ExecutionGraph:
    """Compiled fan-out/fan-in DAG of a template."""

    nodes: Mapping[str, GraphNode]
    edges: tuple[tuple[str, str], ...]
    joins: Mapping[str, str] = field(default_factory=dict)

    @cached_property
    def _successors(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {node_id: [] for node_id in self.nodes}
        for src, dst in self.edges:
            out[src].append(dst)
        return {key: tuple(value) for key, value in out.items()}

    @cached_property
    def _predecessors(self) -> dict[str, tuple[str, ...]]:
        into: dict[str, list[str]] = {node_id: [] for node_id in self.nodes}
        for src, dst in self.edges:
            into[dst].append(src)
        return {key: tuple(value) for key, value in into.items()}

    def successors(self, node_id: str) -> tuple[str, ...]:
        return self._successors[node_id]

    def predecessors(self, node_id: str) -> tuple[str, ...]:
        return self._predecessors[node_id]

    def service_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes.values() if n.kind is NodeKind.SERVICE]

    def topological_order(self) -> list[str]:
        sorter = graphlib.TopologicalSorter(
            {node_id: self.predecessors(node_id) for node_id in self.nodes}
        )
        try:
            return list(sorter.static_order())
        except graphlib.CycleError as exc:
            raise CompileError(f"execution graph contains a cycle: {exc.args[1]}") from exc

    def _reachable(self, start: str, step: Any) -> set[str]:
        seen = {start}
        pending = deque([start])
        while pending:
            for nxt in step(pending.popleft()):
                if nxt not in seen:
                    seen.add(nxt)
                    pending.append(nxt)
        return seen

    def check(self) -> None:
        """Raise :class:`CompileError` unless the structural invariants hold."""

        self.topological_order()
        sources = [n for n in self.nodes.values() if n.kind is NodeKind.SOURCE]
        sinks = [n for n in self.nodes.values() if n.kind is NodeKind.SINK]
        if len(sources) != 1 or len(sinks) != 1:
            raise CompileError("execution graph needs exactly one source and one sink")
        everything = set(self.nodes)
        if self._reachable(SOURCE_ID, self.successors) != everything:
            raise CompileError("some nodes are unreachable from the source")
        if self._reachable(SINK_ID, self.predecessors) != everything:
            raise CompileError("some nodes cannot reach the sink")
        for split_id, combiner_id in self.joins.items():
            fan_out = len(self.successors(split_id))
            if fan_out < 1 or len(self.predecessors(combiner_id)) != fan_out:
                raise CompileError(f"unbalanced split/waitcombiner pair at {split_id}")


class _GraphBuilder:
    def __init__(self) -> None:
        self.nodes: dict[str, GraphNode] = {}
        self.edges: list[tuple[str, str]] = []
        self.joins: dict[str, str] = {}

    def add(self, node_id: str, kind: NodeKind, task_id: str | None = None) -> str:
        if node_id in self.nodes:
            raise CompileError(f"duplicate graph node {node_id}")
        self.nodes[node_id] = GraphNode(node_id, kind, task_id)
        return node_id

    def connect(self, src: str, dst: str) -> None:
        self.edges.append((src, dst))

    def sequence(self, nodes: tuple[Any, ...], prefix: str) -> tuple[str, str]:
        ordered = sorted(nodes, key=lambda n: n.order)
        entry = exit_ = ""
        for node in ordered:
            path = f"{prefix}.{node.order}" if prefix else str(node.order)
            head, tail = self.node(node, path)
            if exit_:
                self.connect(exit_, head)
            else:
                entry = head
            exit_ = tail
        return entry, exit_

    def node(self, node: Any, path: str) -> tuple[str, str]:
        if isinstance(node, ServiceNode):
            node_id = self.add(f"{path}:{node.task_id}", NodeKind.SERVICE, node.task_id)
            return node_id, node_id
        if isinstance(node, SequentialBlock):
            return self.sequence(node.children, path)
        split = self.add(f"{path}:split", NodeKind.SPLIT)
        combiner = self.add(f"{path}:waitcombiner", NodeKind.WAITCOMBINER)
        self.joins[split] = combiner
        for child in sorted(node.children, key=lambda n: n.order):
            head, tail = self.node(child, f"{path}.{child.order}")
            self.connect(split, head)
            self.connect(tail, combiner)
        return split, combiner


def compile_template(template: WorkflowTemplate) -> ExecutionGraph:
    """Compile a validated template into its execution graph."""

    builder = _GraphBuilder()
    builder.add(SOURCE_ID, NodeKind.SOURCE)
    builder.add(SINK_ID, NodeKind.SINK)
    entry, exit_ = builder.sequence(template.tasks, "")
    builder.connect(SOURCE_ID, entry)
    builder.connect(exit_, SINK_ID)
    graph = ExecutionGraph(dict(builder.nodes), tuple(builder.edges), dict(builder.joins))
    graph.check()
    return graph
