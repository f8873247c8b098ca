"""
Application entrypoint exposing the FastAPI instance.
"""

from __future__ import annotations

from collections.abc import AsyncIterator
from contextlib import asynccontextmanager

import httpx
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware

from .api import router
from .config import Settings, get_settings
from .errors import register_exception_handlers
from .logging import configure_logging
from .manager import WorkflowManager


def create_app(
    settings: Settings | None = None,
    *,
    http_client: httpx.AsyncClient | None = None,
) -> FastAPI:
    """Instantiate and configure the FastAPI application."""

    settings = settings or get_settings()
    configure_logging(settings.log_level)

    @asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncIterator[None]:
        yield
        await app.state.manager.stop()

    app = FastAPI(
        title="Curation Workflow Manager",
        summary="Orchestrates curation micro-services through CWDL workflow templates.",
        version="0.1.0",
        lifespan=lifespan,
    )
    app.state.settings = settings
    app.state.manager = WorkflowManager(settings, http_client=http_client)

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Request-ID", "Location"],
    )

    register_exception_handlers(app)

    @app.get("/health", tags=["health"])
    async def health(request: Request) -> dict[str, object]:
        return {"status": "ok", "initialized": request.app.state.manager.initialized}

    app.include_router(router)
    return app


app = create_app()
