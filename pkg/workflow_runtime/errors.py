"""Exception hierarchy shared by the workflow runtime and the REST surface."""

from __future__ import annotations

from typing import Any, Dict


class WorkflowError(Exception):
    """Base error carrying an HTTP status and an optional structured payload."""

    status_code = 500

    def __init__(
        self,
        detail: str,
        *,
        status_code: int | None = None,
        payload: Dict[str, Any] | None = None,
    ) -> None:
        self.detail = detail
        if status_code is not None:
            self.status_code = status_code
        self.payload = payload or {}
        super().__init__(detail)


# --- CWDL -----------------------------------------------------------------


class ParseError(WorkflowError):
    """Malformed JSON or turtle input."""

    status_code = 400


class SchemaError(WorkflowError):
    """A CWDL document does not match the schema; ``path`` names the JSON path."""

    status_code = 400

    def __init__(self, detail: str, *, path: str = "$") -> None:
        self.path = path
        super().__init__(f"{path}: {detail}", payload={"path": path})


class CompileError(WorkflowError):
    status_code = 400


class ValidationError(WorkflowError):
    """A template or element failed validation; the report is the payload."""

    status_code = 400


# --- NIF ------------------------------------------------------------------


class OffsetError(WorkflowError):
    status_code = 400


class ModelError(WorkflowError):
    """Turtle parsed but the NIF model invariants do not hold."""

    status_code = 400


class ContextMismatchError(WorkflowError):
    status_code = 400


# --- Broker ---------------------------------------------------------------


class BrokerError(WorkflowError):
    status_code = 500


class UnknownQueueError(BrokerError):
    pass


class PriorityMismatchError(BrokerError):
    pass


class ConflictError(BrokerError):
    status_code = 409


class UnknownTagError(BrokerError):
    pass


class PayloadTooLargeError(BrokerError):
    status_code = 413


# --- Controller -----------------------------------------------------------


class MissingParameterError(WorkflowError):
    status_code = 400


class ServiceCallError(WorkflowError):
    """Base for failures talking to a downstream service."""

    status_code = 502


class ServiceError(ServiceCallError):
    """Downstream service answered with a non-2xx status."""

    def __init__(self, status: int, body: bytes = b"") -> None:
        self.status = status
        self.body = body
        super().__init__(
            f"Service responded with status {status}",
            payload={"status": status, "body": body[:512].decode("utf-8", "replace")},
        )


class ServiceTimeoutError(ServiceCallError):
    status_code = 504


class ServiceConnectError(ServiceCallError):
    pass


class ProtocolError(ServiceCallError):
    pass


# --- Engine ---------------------------------------------------------------


class UnknownTemplateError(WorkflowError):
    status_code = 404


class UnknownExecutionError(WorkflowError):
    status_code = 404


class UnknownCorrelationError(WorkflowError):
    status_code = 404


class IllegalStateError(WorkflowError):
    status_code = 409


class NotFinishedError(WorkflowError):
    status_code = 409


class FailedExecutionError(WorkflowError):
    status_code = 422


# --- Registry / API -------------------------------------------------------


class UnknownElementError(WorkflowError):
    status_code = 404


class ElementInUseError(WorkflowError):
    """Element is still referenced by another element or a live execution."""

    status_code = 409


class Unauthenticated(WorkflowError):
    status_code = 401


class Forbidden(WorkflowError):
    status_code = 403


class DuplicateElementError(WorkflowError):
    status_code = 409
