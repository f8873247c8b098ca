"""
Exception handler registration.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from workflow_runtime.errors import ValidationError, WorkflowError

logger = logging.getLogger(__name__)


def register_exception_handlers(app: FastAPI) -> None:
    """Attach module exception handlers to the FastAPI app."""

    @app.exception_handler(WorkflowError)
    async def workflow_error_handler(request: Request, exc: WorkflowError) -> JSONResponse:
        log = logger.error if exc.status_code >= 500 else logger.info
        log(
            "workflow_error",
            extra={
                "request_id": request.headers.get("X-Request-ID"),
                "user_id": getattr(request.state, "user_id", None),
                "kind": type(exc).__name__,
            },
        )
        if isinstance(exc, ValidationError):
            body = {**exc.payload, "error": exc.detail}
        else:
            body = {"error": exc.detail}
            if exc.payload:
                body["details"] = exc.payload
        headers = {"WWW-Authenticate": "Bearer"} if exc.status_code == 401 else None
        return JSONResponse(status_code=exc.status_code, content=body, headers=headers)
