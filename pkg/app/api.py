"""
REST surface: administration, element CRUD and workflow execution.
"""

from __future__ import annotations

import logging
from typing import Any, Optional

from fastapi import APIRouter, Depends, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ConfigDict, Field

from workflow_runtime.broker import Priority
from workflow_runtime.cwdl import to_wire
from workflow_runtime.errors import SchemaError, WorkflowError
from workflow_runtime.nif import MEDIA_TYPE, parse_nif
from workflow_runtime.reports import ValidationReport

from .manager import WorkflowManager
from .security import Principal, require_principal

logger = logging.getLogger(__name__)

EXECUTIONS = "executions"


class ExecuteRequest(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    template_id: str = Field(alias="templateId", min_length=1)
    input: str
    content_type: str = Field(default="text/plain", alias="contentType")
    priority: Optional[Priority] = None
    param_overrides: dict[str, str] = Field(default_factory=dict, alias="paramOverrides")


def get_manager(request: Request) -> WorkflowManager:
    return request.app.state.manager


router = APIRouter(dependencies=[Depends(require_principal)])


def _element_body(element: Any, report: ValidationReport | None = None) -> dict[str, Any]:
    body: dict[str, Any] = {"id": element.identifier, "element": to_wire(element)}
    if report is not None:
        body["findings"] = report.model_dump(mode="json")["findings"]
    return body


async def _parse_execute(request: Request) -> ExecuteRequest:
    raw = await request.body()
    try:
        return ExecuteRequest.model_validate_json(raw)
    except ValueError as exc:
        raise SchemaError(f"invalid execution request: {exc}") from exc


def _start_execution(manager: WorkflowManager, payload: ExecuteRequest, principal: Principal) -> str:
    if payload.content_type == MEDIA_TYPE:
        document: Any = parse_nif(payload.input)
    elif payload.content_type == "text/plain":
        document = payload.input
    else:
        raise WorkflowError(
            f"Unsupported input content type {payload.content_type}", status_code=415
        )
    execution_id = manager.execute(
        payload.template_id,
        document,
        priority=payload.priority,
        param_overrides=payload.param_overrides,
    )
    logger.info(
        "execution_requested",
        extra={"execution_id": execution_id, "user_id": principal.user_id},
    )
    return execution_id


# -- administration ---------------------------------------------------------


@router.post("/admin/init", tags=["admin"])
async def admin_init(manager: WorkflowManager = Depends(get_manager)) -> dict[str, Any]:
    return await manager.init()


@router.post("/admin/stop", tags=["admin"])
async def admin_stop(manager: WorkflowManager = Depends(get_manager)) -> dict[str, Any]:
    return await manager.stop()


# -- elements ---------------------------------------------------------------


@router.get("/elements/{kind}", tags=["elements"])
async def list_elements(kind: str, manager: WorkflowManager = Depends(get_manager)) -> list[Any]:
    if kind == EXECUTIONS:
        return [status.model_dump(mode="json") for status in manager.engine.list_executions()]
    return [to_wire(element) for element in manager.registry.list(kind)]


@router.get("/elements/{kind}/{element_id}", tags=["elements"])
async def view_element(
    kind: str, element_id: str, manager: WorkflowManager = Depends(get_manager)
) -> dict[str, Any]:
    if kind == EXECUTIONS:
        return manager.engine.get_status(element_id).model_dump(mode="json")
    return to_wire(manager.registry.get(kind, element_id))


@router.post("/elements/{kind}", status_code=201, tags=["elements"])
async def create_element(
    kind: str,
    request: Request,
    manager: WorkflowManager = Depends(get_manager),
    principal: Principal = Depends(require_principal),
) -> dict[str, Any]:
    if kind == EXECUTIONS:
        payload = await _parse_execute(request)
        return {"executionId": _start_execution(manager, payload, principal)}
    element, report = await manager.create_element(kind, await request.body())
    return _element_body(element, report)


@router.put("/elements/{kind}/{element_id}", tags=["elements"])
async def modify_element(
    kind: str,
    element_id: str,
    request: Request,
    manager: WorkflowManager = Depends(get_manager),
) -> dict[str, Any]:
    if kind == EXECUTIONS:
        raise WorkflowError("Executions cannot be modified", status_code=405)
    element, report = await manager.modify_element(kind, element_id, await request.body())
    return _element_body(element, report)


@router.delete("/elements/{kind}/{element_id}", status_code=204, tags=["elements"])
async def delete_element(
    kind: str, element_id: str, manager: WorkflowManager = Depends(get_manager)
) -> Response:
    if kind == EXECUTIONS:
        manager.engine.delete_execution(element_id)
    else:
        await manager.delete_element(kind, element_id)
    return Response(status_code=204)


# -- executions -------------------------------------------------------------


@router.post("/executions", status_code=201, tags=["executions"])
async def execute(
    request: Request,
    manager: WorkflowManager = Depends(get_manager),
    principal: Principal = Depends(require_principal),
) -> JSONResponse:
    payload = await _parse_execute(request)
    execution_id = _start_execution(manager, payload, principal)
    return JSONResponse(
        status_code=201,
        content={"executionId": execution_id},
        headers={"Location": f"/executions/{execution_id}/status"},
    )


@router.get("/executions/{execution_id}/status", tags=["executions"])
async def execution_status(
    execution_id: str, manager: WorkflowManager = Depends(get_manager)
) -> dict[str, Any]:
    return manager.engine.get_status(execution_id).model_dump(mode="json")


@router.get("/executions/{execution_id}/result", tags=["executions"])
async def execution_result(
    execution_id: str, manager: WorkflowManager = Depends(get_manager)
) -> Response:
    return Response(content=manager.engine.get_result(execution_id), media_type=MEDIA_TYPE)


@router.post("/executions/{execution_id}/cancel", tags=["executions"])
async def cancel_execution(
    execution_id: str, manager: WorkflowManager = Depends(get_manager)
) -> dict[str, Any]:
    manager.engine.cancel(execution_id)
    return manager.engine.get_status(execution_id).model_dump(mode="json")
