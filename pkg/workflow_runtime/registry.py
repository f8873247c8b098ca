"""Registry of CWDL elements, optionally persisted as one JSON file per element."""

from __future__ import annotations

import builtins
import logging
import os
import tempfile
import threading
from collections.abc import Callable, Iterable, Mapping
from pathlib import Path
from typing import Any

from .cwdl import (
    CONTROLLERS,
    ELEMENT_KINDS,
    TASKS,
    TEMPLATES,
    ControllerSpec,
    TaskSpec,
    WorkflowTemplate,
    element_kind,
    parse_element,
    resolve_controller,
    serialize,
    to_wire,
    validate_element,
)
from .errors import (
    DuplicateElementError,
    ElementInUseError,
    SchemaError,
    UnknownElementError,
    ValidationError,
)
from .reports import ValidationReport

logger = logging.getLogger(__name__)

_SAFE_CHARS = frozenset("-_.")

InUse = Callable[[], Iterable[tuple[str, str]]]


class RegistryError(RuntimeError):
    """Raised when an element file cannot be placed inside the data directory."""


def _check_kind(kind: str) -> str:
    if kind not in ELEMENT_KINDS:
        raise UnknownElementError(
            f"Unknown element kind {kind!r}", payload={"kinds": list(ELEMENT_KINDS)}
        )
    return kind


def element_path(data_dir: Path, kind: str, element_id: str) -> Path:
    """``<data_dir>/<kind>/<id>.json``; ids that would escape the directory are refused."""

    safe_id = "".join(c for c in element_id if c.isalnum() or c in _SAFE_CHARS)
    if not safe_id or safe_id != element_id or safe_id.startswith("."):
        raise RegistryError(f"Element id cannot be stored as a file name: {element_id!r}")
    return data_dir / kind / f"{safe_id}.json"


class ElementRegistry:
    """
    Holds every registered controller, task and template.

    Only elements that pass validation are stored. With a ``data_dir`` each
    mutation is written to a temporary file and renamed into place, so readers
    of the directory never see a partial element.
    """

    def __init__(self, data_dir: str | Path | None = None) -> None:
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self._lock = threading.RLock()
        self._elements: dict[str, dict[str, Any]] = {kind: {} for kind in ELEMENT_KINDS}
        if self.data_dir is not None:
            self._load()

    # -- persistence -----------------------------------------------------

    def _load(self) -> None:
        assert self.data_dir is not None
        for kind in ELEMENT_KINDS:
            folder = self.data_dir / kind
            folder.mkdir(parents=True, exist_ok=True)
            for path in sorted(folder.glob("*.json")):
                try:
                    element = parse_element(kind, path.read_text(encoding="utf-8"))
                except Exception:
                    logger.exception("element_load_failed", extra={"path": str(path)})
                    continue
                self._elements[kind][element.identifier] = element
        logger.info(
            "registry_loaded",
            extra={kind: len(items) for kind, items in self._elements.items()},
        )

    def _write(self, kind: str, element: Any) -> None:
        if self.data_dir is None:
            return
        target = element_path(self.data_dir, kind, element.identifier)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(serialize(element))
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def _remove(self, kind: str, element_id: str) -> None:
        if self.data_dir is None:
            return
        element_path(self.data_dir, kind, element_id).unlink(missing_ok=True)

    # -- reads -----------------------------------------------------------

    def list(self, kind: str) -> list[Any]:
        with self._lock:
            items = self._elements[_check_kind(kind)]
            return [items[key] for key in sorted(items)]

    def get(self, kind: str, element_id: str) -> Any:
        with self._lock:
            try:
                return self._elements[_check_kind(kind)][element_id]
            except KeyError:
                raise UnknownElementError(
                    f"Unknown {kind[:-1]} {element_id}", payload={"kind": kind, "id": element_id}
                ) from None

    def template(self, template_id: str) -> WorkflowTemplate | None:
        with self._lock:
            return self._elements[TEMPLATES].get(template_id)

    def task_map(self) -> Mapping[str, TaskSpec]:
        with self._lock:
            return dict(self._elements[TASKS])

    def controller_map(self) -> Mapping[str, ControllerSpec]:
        with self._lock:
            return dict(self._elements[CONTROLLERS])

    def referrers(self, kind: str, element_id: str) -> builtins.list[tuple[str, str]]:
        """Registered elements that would dangle without ``(kind, element_id)``."""

        with self._lock:
            found: builtins.list[tuple[str, str]] = []
            if kind == CONTROLLERS:
                controllers = self._elements[CONTROLLERS]
                for task in self._elements[TASKS].values():
                    resolved = resolve_controller(controllers, task.controller_id)
                    if resolved is not None and resolved.controller_id == element_id:
                        found.append((TASKS, task.task_id))
            elif kind == TASKS:
                for template in self._elements[TEMPLATES].values():
                    if element_id in template.task_ids():
                        found.append((TEMPLATES, template.workflow_template_id))
            return sorted(found)

    # -- writes ----------------------------------------------------------

    def check(self, element: Any) -> ValidationReport:
        with self._lock:
            return validate_element(element, self.task_map(), self.controller_map())

    def _admit(self, kind: str, document: str | bytes | Mapping[str, Any]) -> tuple[Any, ValidationReport]:
        element = parse_element(_check_kind(kind), document)
        report = self.check(element)
        if not report.ok:
            raise ValidationError(
                f"{kind[:-1].capitalize()} {element.identifier} failed validation",
                payload=report.model_dump(mode="json"),
            )
        if kind == CONTROLLERS:
            self._check_queue_names(element)
        return element, report

    def _check_queue_names(self, controller: ControllerSpec) -> None:
        wanted = {controller.queues.name_input_normal, controller.queues.name_input_priority}
        for other in self._elements[CONTROLLERS].values():
            if other.controller_id == controller.controller_id:
                continue
            taken = wanted & {other.queues.name_input_normal, other.queues.name_input_priority}
            if taken:
                raise DuplicateElementError(
                    f"Queue {sorted(taken)[0]} is already used by controller {other.controller_id}",
                    payload={"queues": sorted(taken), "controllerId": other.controller_id},
                )

    def _broken_dependents(self, kind: str, element: Any) -> builtins.list[tuple[str, str]]:
        """Registered elements that would fail validation once ``element`` replaces its namesake."""

        tasks = dict(self._elements[TASKS])
        controllers = dict(self._elements[CONTROLLERS])
        if kind == CONTROLLERS:
            controllers[element.identifier] = element
        elif kind == TASKS:
            tasks[element.identifier] = element
        else:
            return []
        dependents: builtins.list[Any] = list(self._elements[TEMPLATES].values())
        if kind == CONTROLLERS:
            dependents += list(self._elements[TASKS].values())
        return sorted(
            (element_kind(dependent), dependent.identifier)
            for dependent in dependents
            if not validate_element(dependent, tasks, controllers).ok
        )

    def create(
        self, kind: str, document: str | bytes | Mapping[str, Any]
    ) -> tuple[Any, ValidationReport]:
        with self._lock:
            element, report = self._admit(kind, document)
            if element.identifier in self._elements[kind]:
                raise DuplicateElementError(
                    f"{kind[:-1].capitalize()} {element.identifier} already exists",
                    payload={"kind": kind, "id": element.identifier},
                )
            self._write(kind, element)
            self._elements[kind][element.identifier] = element
        logger.info("element_created", extra={"kind": kind, "element_id": element.identifier})
        return element, report

    def add(self, element: Any) -> Any:
        """Register an already parsed element (same checks as :meth:`create`)."""

        return self.create(element_kind(element), to_wire(element))[0]

    def modify(
        self,
        kind: str,
        element_id: str,
        document: str | bytes | Mapping[str, Any],
        in_use: InUse = tuple,
    ) -> tuple[Any, ValidationReport]:
        with self._lock:
            self.get(kind, element_id)
            element, report = self._admit(kind, document)
            if element.identifier != element_id:
                raise SchemaError(
                    f"identifier {element.identifier!r} does not match {element_id!r}"
                )
            if (kind, element_id) in set(in_use()):
                raise ElementInUseError(
                    f"{kind[:-1].capitalize()} {element_id} is used by a running execution",
                    payload={"kind": kind, "id": element_id},
                )
            broken = self._broken_dependents(kind, element)
            if broken:
                raise ElementInUseError(
                    f"Changing {kind[:-1]} {element_id} would invalidate the elements that use it",
                    payload={"referencedBy": [f"{k}/{i}" for k, i in broken]},
                )
            self._write(kind, element)
            self._elements[kind][element_id] = element
        logger.info("element_modified", extra={"kind": kind, "element_id": element_id})
        return element, report

    def delete(self, kind: str, element_id: str, in_use: InUse = tuple) -> Any:
        with self._lock:
            element = self.get(kind, element_id)
            referrers = self.referrers(kind, element_id)
            if (kind, element_id) in set(in_use()):
                referrers.append(("executions", "running"))
            if referrers:
                raise ElementInUseError(
                    f"{kind[:-1].capitalize()} {element_id} is still referenced",
                    payload={"referencedBy": [f"{k}/{i}" for k, i in referrers]},
                )
            self._remove(kind, element_id)
            del self._elements[kind][element_id]
        logger.info("element_deleted", extra={"kind": kind, "element_id": element_id})
        return element
