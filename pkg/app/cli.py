"""
Command-line client and server launcher (``cwm``).

Exit codes: 0 on success, 1 when a document fails validation, 2 on transport,
authentication and other request errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import httpx
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from workflow_runtime.cwdl import CONTROLLERS, TASKS, load_element, validate_element
from workflow_runtime.errors import WorkflowError
from workflow_runtime.registry import ElementRegistry

from .config import read_config_file

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ERROR = 2

KINDS = ("controllers", "tasks", "templates", "executions")


class CliConfig(BaseSettings):
    """Where the CLI finds the server; ``CWM_URL``/``CWM_TOKEN`` override profile values."""

    model_config = SettingsConfigDict(env_prefix="CWM_", case_sensitive=False, extra="ignore")

    url: str = "http://127.0.0.1:8080"
    token: Optional[str] = None
    output: Literal["json", "turtle", "plain"] = "json"

    @field_validator("url")
    @classmethod
    def _absolute(cls, value: str) -> str:
        if not httpx.URL(value).is_absolute_url:
            raise ValueError(f"server URL must be absolute: {value!r}")
        return value


def load_cli_config(profile: str | None, flags: dict[str, Any] | None = None) -> CliConfig:
    """Profile file, then environment, then command-line flags; later sources win."""

    values: dict[str, Any] = read_config_file(profile) if profile else {}
    values |= CliConfig().model_dump(exclude_unset=True)
    values |= flags or {}
    return CliConfig(**values)


def _emit(data: Any) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def _fail(message: str, code: int = EXIT_ERROR) -> int:
    print(message, file=sys.stderr)
    return code


class Commands:
    def __init__(self, config: CliConfig, client: httpx.Client | None = None) -> None:
        self.config = config
        self._client = client

    @property
    def client(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(base_url=self.config.url, timeout=30.0)
        return self._client

    def _request(self, method: str, path: str, **kwargs: Any) -> httpx.Response | int:
        headers = dict(kwargs.pop("headers", {}))
        if self.config.token:
            headers["Authorization"] = f"Bearer {self.config.token}"
        try:
            response = self.client.request(method, path, headers=headers, **kwargs)
        except httpx.HTTPError as exc:
            return _fail(f"request to {self.config.url} failed: {exc}")
        if response.is_success:
            return response
        try:
            detail: Any = response.json()
        except ValueError:
            detail = response.text
        print(json.dumps({"status": response.status_code, "error": detail}), file=sys.stderr)
        return EXIT_INVALID if response.status_code in (400, 422) else EXIT_ERROR

    def _json(self, method: str, path: str, **kwargs: Any) -> int:
        response = self._request(method, path, **kwargs)
        if isinstance(response, int):
            return response
        if response.content:
            _emit(response.json())
        return EXIT_OK

    def register(self, kind: str, file: Path) -> int:
        return self._json(
            "POST",
            f"/elements/{kind}",
            content=file.read_bytes(),
            headers={"Content-Type": "application/json"},
        )

    def list(self, kind: str) -> int:
        return self._json("GET", f"/elements/{kind}")

    def execute(
        self,
        template: str,
        input_file: Path,
        content_type: str | None,
        priority: str | None,
        params: Sequence[str],
    ) -> int:
        overrides: dict[str, str] = {}
        for item in params:
            name, sep, value = item.partition("=")
            if not sep or not name:
                return _fail(f"--param expects name=value, got {item!r}")
            overrides[name] = value
        if content_type is None:
            content_type = "text/turtle" if input_file.suffix == ".ttl" else "text/plain"
        body: dict[str, Any] = {
            "templateId": template,
            "input": input_file.read_text(encoding="utf-8"),
            "contentType": content_type,
            "paramOverrides": overrides,
        }
        if priority:
            body["priority"] = priority
        response = self._request("POST", "/executions", json=body)
        if isinstance(response, int):
            return response
        execution_id = response.json()["executionId"]
        if self.config.output == "json":
            _emit({"executionId": execution_id})
        else:
            print(execution_id)
        return EXIT_OK

    def status(self, execution_id: str) -> int:
        return self._json("GET", f"/executions/{execution_id}/status")

    def result(self, execution_id: str, output: Path | None) -> int:
        response = self._request("GET", f"/executions/{execution_id}/result")
        if isinstance(response, int):
            return response
        if output is not None:
            output.write_bytes(response.content)
        elif self.config.output == "json":
            _emit({"executionId": execution_id, "result": response.text})
        else:
            sys.stdout.write(response.text)
        return EXIT_OK

    def cancel(self, execution_id: str) -> int:
        return self._json("POST", f"/executions/{execution_id}/cancel")


def validate_files(files: Sequence[Path], registry_dir: Path | None) -> int:
    """
    Offline validation with the same rules the server applies.

    Files are checked in order; valid elements from earlier files resolve
    references in later ones, on top of the elements found in ``registry_dir``.
    """

    registry = ElementRegistry(registry_dir) if registry_dir is not None else ElementRegistry()
    tasks = dict(registry.task_map())
    controllers = dict(registry.controller_map())
    code = EXIT_OK
    results = []
    for path in files:
        try:
            kind, element = load_element(path.read_bytes())
        except WorkflowError as exc:
            results.append({"file": str(path), "ok": False, "error": exc.detail, **exc.payload})
            code = EXIT_INVALID
            continue
        report = validate_element(element, tasks, controllers)
        results.append(
            {
                "file": str(path),
                "kind": kind,
                "id": element.identifier,
                "ok": report.ok,
                "findings": report.model_dump(mode="json")["findings"],
            }
        )
        if not report.ok:
            code = EXIT_INVALID
        elif kind == CONTROLLERS:
            controllers[element.identifier] = element
        elif kind == TASKS:
            tasks[element.identifier] = element
    _emit(results if len(results) != 1 else results[0])
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwm", description="Curation Workflow Manager")
    parser.add_argument("--profile", help="YAML/JSON file with url, token and output")
    parser.add_argument("--url", help="server URL (overrides CWM_URL)")
    parser.add_argument("--token", help="bearer token (overrides CWM_TOKEN)")
    parser.add_argument("--output", choices=("json", "turtle", "plain"))
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the workflow manager")
    serve.add_argument("--config", help="YAML/JSON settings file")

    mock = sub.add_parser("mock", help="run a mock annotation service")
    mock.add_argument("--config", required=True, help="YAML/JSON mock service config")

    validate = sub.add_parser("validate", help="validate CWDL files offline")
    validate.add_argument("files", nargs="+", type=Path)
    validate.add_argument("--registry", type=Path, help="data directory with registered elements")

    register = sub.add_parser("register", help="register a CWDL element")
    register.add_argument("kind", choices=KINDS[:3])
    register.add_argument("file", type=Path)

    listing = sub.add_parser("list", help="list elements or executions")
    listing.add_argument("kind", choices=KINDS)

    execute = sub.add_parser("execute", help="execute a workflow template")
    execute.add_argument("--template", required=True)
    execute.add_argument("--input", required=True, type=Path)
    execute.add_argument("--content-type", choices=("text/plain", "text/turtle"))
    execute.add_argument("--priority", choices=("normal", "priority"))
    execute.add_argument("--param", action="append", default=[], metavar="NAME=VALUE")

    for name in ("status", "cancel"):
        command = sub.add_parser(name, help=f"{name} of an execution")
        command.add_argument("execution_id")

    result = sub.add_parser("result", help="fetch the result of an execution")
    result.add_argument("execution_id")
    result.add_argument("-o", "--out", type=Path)
    return parser


def _serve(config_file: str | None) -> int:
    import uvicorn

    from .config import load_settings
    from .main import create_app

    settings = load_settings(config_file)
    uvicorn.run(create_app(settings), host=settings.host, port=settings.port)
    return EXIT_OK


def _mock(config_file: str) -> int:
    from workflow_runtime.mocks import MockServiceConfig, serve_mock

    config = MockServiceConfig.model_validate(read_config_file(config_file))
    if not config.port:
        config = config.model_copy(update={"port": 9000})
    server = serve_mock(config)
    _emit({"service": config.name, "url": server.url})
    sys.stdout.flush()
    server.serve_forever()
    return EXIT_OK


def main(argv: Sequence[str] | None = None, *, client: httpx.Client | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        return _serve(args.config)
    if args.command == "mock":
        return _mock(args.config)
    if args.command == "validate":
        return validate_files(args.files, args.registry)

    try:
        flags = {k: v for k in ("url", "token", "output") if (v := getattr(args, k))}
        config = load_cli_config(args.profile, flags)
    except (ValueError, OSError) as exc:
        return _fail(f"invalid CLI configuration: {exc}")

    commands = Commands(config, client)
    if args.command == "register":
        return commands.register(args.kind, args.file)
    if args.command == "list":
        return commands.list(args.kind)
    if args.command == "execute":
        return commands.execute(
            args.template, args.input, args.content_type, args.priority, args.param
        )
    if args.command == "status":
        return commands.status(args.execution_id)
    if args.command == "result":
        return commands.result(args.execution_id, args.out)
    return commands.cancel(args.execution_id)


if __name__ == "__main__":
    sys.exit(main())
