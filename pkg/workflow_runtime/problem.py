"""Helpers for ``application/problem+json`` error payloads."""

from __future__ import annotations

import json
from typing import Any, Dict

from .errors import ServiceError, WorkflowError

PROBLEM_JSON = "application/problem+json"


def make_problem(
    status: int,
    title: str,
    detail: str | None = None,
    **extra: Any,
) -> Dict[str, Any]:
    """Build a problem document; ``extra`` members are added verbatim."""

    problem: Dict[str, Any] = {"type": "about:blank", "title": title, "status": status}
    if detail is not None:
        problem["detail"] = detail
    problem.update({key: value for key, value in extra.items() if value is not None})
    return problem


def problem_from_error(exc: Exception, **extra: Any) -> Dict[str, Any]:
    if isinstance(exc, ServiceError):
        return make_problem(
            exc.status,
            type(exc).__name__,
            exc.detail,
            serviceStatus=exc.status,
            serviceBody=exc.payload.get("body"),
            **extra,
        )
    if isinstance(exc, WorkflowError):
        return make_problem(exc.status_code, type(exc).__name__, exc.detail, **extra)
    return make_problem(500, "InternalError", str(exc) or type(exc).__name__, **extra)


def encode_problem(problem: Dict[str, Any]) -> bytes:
    return json.dumps(problem, ensure_ascii=False).encode("utf-8")


def decode_problem(payload: bytes) -> Dict[str, Any]:
    try:
        data = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return make_problem(500, "InvalidErrorReport", payload[:256].decode("utf-8", "replace"))
    return data if isinstance(data, dict) else make_problem(500, "InvalidErrorReport", str(data))
