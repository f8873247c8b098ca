"""
Controller runtime: the proxy between a controller's queue pair and its REST service.

A worker takes envelopes priority-first, turns each one into an HTTP request
described by the controller's connection spec, calls the service synchronously
or asynchronously (``202 Accepted`` + ``Location`` + polling) and publishes the
result, or an ``application/problem+json`` error report, to the envelope's
reply queue.
"""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace

import httpx

from .broker import BrokerAdapter, Envelope
from .cwdl import PAYLOAD_SLOT, PLACEHOLDER_RE, ConnectionSpec, ControllerSpec, ParamSpec
from .errors import (
    BrokerError,
    MissingParameterError,
    ProtocolError,
    ServiceCallError,
    ServiceConnectError,
    ServiceError,
    ServiceTimeoutError,
    UnknownTagError,
)
from .problem import PROBLEM_JSON, encode_problem, problem_from_error

logger = logging.getLogger(__name__)

EXECUTION_HEADER = "X-Execution-Id"
NODE_HEADER = "X-Node-Id"


@dataclass(frozen=True)
class RequestDescription:
    method: str
    url: str
    headers: Mapping[str, str]
    body: bytes = b""


@dataclass(frozen=True)
class PollPolicy:
    interval: float
    max_wait: float

    def __post_init__(self) -> None:
        if self.interval <= 0:
            raise ValueError("poll interval must be positive")
        if self.max_wait < self.interval:
            raise ValueError("poll max_wait must be at least one interval")


@dataclass(frozen=True)
class ServiceResponse:
    status: int
    headers: Mapping[str, str]
    body: bytes

    @property
    def content_type(self) -> str | None:
        value = self.headers.get("content-type")
        return value.split(";", 1)[0].strip() if value else None


@dataclass(frozen=True)
class ControllerOptions:
    request_timeout: float = 30.0
    poll: PollPolicy = field(default_factory=lambda: PollPolicy(interval=0.5, max_wait=60.0))
    asynchronous: bool = False
    max_attempts: int = 3
    endpoint_variables: Mapping[str, str] = field(default_factory=dict)
    consumer_poll: float = 0.1


# --- request construction -------------------------------------------------


def _bind(params: Iterable[ParamSpec], overrides: Mapping[str, str]) -> dict[str, str]:
    bound: dict[str, str] = {}
    for param in params:
        value = overrides.get(param.name, param.default_value)
        if value is None:
            if param.required:
                raise MissingParameterError(
                    f"Required {param.kind.value} {param.name!r} has no value",
                    payload={"name": param.name},
                )
            continue
        bound[param.name] = value
    return bound


def _expand_endpoint(
    url: str, overrides: Mapping[str, str], variables: Mapping[str, str]
) -> str:
    def substitute(match) -> str:
        name = match.group(1)
        value = overrides.get(name, variables.get(name))
        if value is None:
            raise MissingParameterError(
                f"Endpoint placeholder <{name}> has no value", payload={"name": name}
            )
        return value

    return PLACEHOLDER_RE.sub(substitute, url)


def build_request(
    spec: ConnectionSpec,
    envelope: Envelope,
    variables: Mapping[str, str] | None = None,
) -> RequestDescription:
    """Bind parameters, headers and body for one envelope (overrides beat defaults)."""

    overrides = envelope.param_overrides
    url = _expand_endpoint(spec.endpoint_url, overrides, variables or {})
    query = _bind(spec.parameters, overrides)
    headers = _bind(spec.headers, overrides)

    expected = spec.header_value("Content-Type")
    if expected and envelope.content_type and expected != envelope.content_type:
        logger.warning(
            "content_type_mismatch",
            extra={"execution_id": envelope.execution_id, "node_id": envelope.node_id},
        )

    slot = spec.body_content_slot
    if slot is None:
        body = b""
    elif slot == PAYLOAD_SLOT:
        body = envelope.payload
    else:
        body = slot.encode("utf-8").replace(PAYLOAD_SLOT.encode("utf-8"), envelope.payload)

    return RequestDescription(
        method=spec.method,
        url=str(httpx.URL(url).copy_merge_params(query)),
        headers=headers,
        body=body,
    )


# --- service calls --------------------------------------------------------


async def _send(
    client: httpx.AsyncClient,
    method: str,
    url: str,
    *,
    headers: Mapping[str, str] | None = None,
    body: bytes = b"",
    timeout: float,
) -> httpx.Response:
    try:
        return await client.request(
            method, url, headers=dict(headers or {}), content=body or None, timeout=timeout
        )
    except httpx.TimeoutException as exc:
        raise ServiceTimeoutError(f"Request to {url} timed out") from exc
    except httpx.TransportError as exc:
        raise ServiceConnectError(f"Could not reach {url}: {exc}") from exc


def _to_response(response: httpx.Response) -> ServiceResponse:
    if not response.is_success:
        raise ServiceError(response.status_code, response.content)
    return ServiceResponse(
        status=response.status_code,
        headers={key.lower(): value for key, value in response.headers.items()},
        body=response.content,
    )


async def _poll(
    client: httpx.AsyncClient,
    req: RequestDescription,
    location: str,
    policy: PollPolicy,
    timeout: float,
) -> ServiceResponse:
    target = str(httpx.URL(req.url).join(location))
    loop = asyncio.get_running_loop()
    started = loop.time()
    while True:
        await asyncio.sleep(policy.interval)
        response = await _send(client, "GET", target, headers=req.headers, timeout=timeout)
        if response.status_code != 202:
            return _to_response(response)
        if loop.time() - started >= policy.max_wait:
            raise ServiceTimeoutError(
                f"Asynchronous job at {target} did not finish within {policy.max_wait}s"
            )


async def execute_sync(
    client: httpx.AsyncClient,
    req: RequestDescription,
    timeout: float,
    *,
    poll: PollPolicy | None = None,
) -> ServiceResponse:
    """
    Call the service and wait for its answer.

    When ``poll`` is given and the service unexpectedly answers ``202`` with a
    ``Location``, the call continues as an asynchronous one.
    """

    response = await _send(
        client, req.method, req.url, headers=req.headers, body=req.body, timeout=timeout
    )
    location = response.headers.get("location")
    if response.status_code == 202 and location and poll is not None:
        return await _poll(client, req, location, poll, timeout)
    return _to_response(response)


async def execute_async(
    client: httpx.AsyncClient,
    req: RequestDescription,
    policy: PollPolicy,
    timeout: float = 30.0,
) -> ServiceResponse:
    response = await _send(
        client, req.method, req.url, headers=req.headers, body=req.body, timeout=timeout
    )
    if response.status_code != 202:
        return _to_response(response)
    location = response.headers.get("location")
    if not location:
        raise ProtocolError("Service answered 202 Accepted without a Location header")
    return await _poll(client, req, location, policy, timeout)


# --- worker ---------------------------------------------------------------


class ControllerWorker:
    """Consumes one controller's queue pair; one request in flight at a time."""

    def __init__(
        self,
        spec: ControllerSpec,
        broker: BrokerAdapter,
        client: httpx.AsyncClient,
        options: ControllerOptions | None = None,
    ) -> None:
        self.spec = spec
        self.broker = broker
        self.client = client
        self.options = options or ControllerOptions()
        self.processed = 0

    @property
    def controller_id(self) -> str:
        return self.spec.controller_id

    async def call(self, req: RequestDescription) -> ServiceResponse:
        if self.options.asynchronous:
            return await execute_async(
                self.client, req, self.options.poll, self.options.request_timeout
            )
        return await execute_sync(
            self.client, req, self.options.request_timeout, poll=self.options.poll
        )

    async def run(self, stop: asyncio.Event) -> None:
        """Process envelopes until ``stop`` is set; in-flight work is finished first."""

        pair = self.broker.declare_queues(self.spec)
        logger.info("controller_started", extra={"controller_id": self.controller_id})
        while not stop.is_set():
            item = await self.broker.get(pair.consume_order(), timeout=self.options.consumer_poll)
            if item is None:
                continue
            envelope, tag = item
            await self.process(envelope, tag)
        logger.info("controller_stopped", extra={"controller_id": self.controller_id})

    async def process(self, envelope: Envelope, tag: int) -> None:
        log_extra = {
            "controller_id": self.controller_id,
            "execution_id": envelope.execution_id,
            "node_id": envelope.node_id,
            "message_id": envelope.message_id,
        }
        keepalive = asyncio.create_task(self._keep_visible(tag))
        try:
            req = build_request(self.spec.connection, envelope, self.options.endpoint_variables)
            req = replace(
                req,
                headers={
                    **req.headers,
                    EXECUTION_HEADER: envelope.execution_id,
                    NODE_HEADER: envelope.node_id,
                },
            )
            response = await self.call(req)
        except MissingParameterError as exc:
            self._reply_error(envelope, exc)
            self._settle(tag, log_extra)
            return
        except ServiceCallError as exc:
            attempts = envelope.attempt + 1
            if attempts < self.options.max_attempts:
                logger.warning("controller_retry", extra=log_extra | {"attempt": attempts})
                self._settle(tag, log_extra, requeue=True)
                return
            logger.error("controller_gave_up", extra=log_extra | {"attempt": attempts})
            self._reply_error(envelope, exc, attempts=attempts)
            self._settle(tag, log_extra)
            return
        except Exception as exc:
            logger.exception("controller_unexpected_error", extra=log_extra)
            self._reply_error(envelope, exc)
            self._settle(tag, log_extra)
            return
        finally:
            keepalive.cancel()

        reply = Envelope(
            execution_id=envelope.execution_id,
            node_id=envelope.node_id,
            payload=response.body,
            priority=envelope.priority,
            content_type=response.content_type or "text/turtle",
        )
        try:
            self.broker.publish(envelope.reply_queue, reply)
        except BrokerError as exc:
            self._reply_error(envelope, exc)
        self._settle(tag, log_extra)
        self.processed += 1
        logger.info("controller_replied", extra=log_extra)

    async def _keep_visible(self, tag: int) -> None:
        """Hold the delivery while its request is in flight."""

        while True:
            try:
                visibility = self.broker.extend(tag)
            except UnknownTagError:
                return
            await asyncio.sleep(visibility / 2)

    def _settle(self, tag: int, log_extra: Mapping[str, str], *, requeue: bool | None = None) -> None:
        """Ack (or nack when ``requeue`` is given) a delivery that may have expired meanwhile."""

        try:
            if requeue is None:
                self.broker.ack(tag)
            else:
                self.broker.nack(tag, requeue=requeue)
        except UnknownTagError:
            # The broker already redelivered it; the engine drops the duplicate reply.
            logger.warning("delivery_expired_in_flight", extra=dict(log_extra))

    def _reply_error(self, envelope: Envelope, exc: Exception, *, attempts: int | None = None) -> None:
        problem = problem_from_error(
            exc,
            controllerId=self.controller_id,
            nodeId=envelope.node_id,
            executionId=envelope.execution_id,
            attempts=attempts,
        )
        reply = Envelope(
            execution_id=envelope.execution_id,
            node_id=envelope.node_id,
            payload=encode_problem(problem),
            priority=envelope.priority,
            content_type=PROBLEM_JSON,
        )
        try:
            self.broker.publish(envelope.reply_queue, reply)
        except BrokerError:
            logger.exception(
                "controller_error_reply_failed", extra={"controller_id": self.controller_id}
            )
