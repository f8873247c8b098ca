"""
Bearer-token authentication against a static token list and a user allowlist.
"""

from __future__ import annotations

import hmac
from dataclasses import dataclass

from fastapi import Depends, Request
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer

from workflow_runtime.errors import Forbidden, Unauthenticated

from .config import Settings, get_settings

auth_scheme = HTTPBearer(auto_error=False)


@dataclass(frozen=True)
class Principal:
    """The authenticated caller."""

    user_id: str


def check_user(token: str | None, settings: Settings) -> Principal:
    """Map ``token`` to an allowlisted user; tokens are compared in constant time."""

    if not token:
        raise Unauthenticated("Missing bearer token")
    presented = token.encode("utf-8")
    user_id: str | None = None
    for entry in settings.tokens:
        # no early exit
        if hmac.compare_digest(entry.token.encode("utf-8"), presented):
            user_id = entry.user_id
    if user_id is None:
        raise Unauthenticated("Invalid bearer token")
    if user_id not in settings.allowlist:
        raise Forbidden(f"User {user_id} is not allowed", payload={"userId": user_id})
    return Principal(user_id=user_id)


def current_settings(request: Request) -> Settings:
    return getattr(request.app.state, "settings", None) or get_settings()


def require_principal(
    request: Request,
    credentials: HTTPAuthorizationCredentials | None = Depends(auth_scheme),
) -> Principal:
    """FastAPI dependency guarding every endpoint except ``/health``."""

    token = None
    if credentials is not None and credentials.scheme.lower() == "bearer":
        token = credentials.credentials
    principal = check_user(token, current_settings(request))
    request.state.user_id = principal.user_id
    return principal
