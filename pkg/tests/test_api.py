from __future__ import annotations

import json
import time

import pytest

from conftest import AUTH, GEONAMES_PARIS, GND_MONTEUX, LOC, PER, SENTENCE, fixture_text
from workflow_runtime.nif import make_context, parse_nif, serialize_nif

TERMINAL = {"COMPLETED", "FAILED", "CANCELLED"}
ELEMENTS = (
    ("controllers", "ner_controller.json"),
    ("controllers", "geo_controller.json"),
    ("tasks", "ner_task.json"),
    ("tasks", "geo_task.json"),
    ("templates", "ml_glk_template.json"),
)


def register_all(client) -> None:
    for kind, name in ELEMENTS:
        response = client.post(f"/elements/{kind}", content=fixture_text(name), headers=AUTH)
        assert response.status_code == 201, response.text


def start(client, **overrides) -> str:
    body = {"templateId": "ML_GLK", "input": SENTENCE} | overrides
    response = client.post("/executions", json=body, headers=AUTH)
    assert response.status_code == 201, response.text
    execution_id = response.json()["executionId"]
    assert response.headers["location"] == f"/executions/{execution_id}/status"
    return execution_id


def wait_for(client, execution_id: str, states=TERMINAL, timeout: float = 10.0) -> dict:
    deadline = time.monotonic() + timeout
    while True:
        status = client.get(f"/executions/{execution_id}/status", headers=AUTH).json()
        if status["state"] in states or time.monotonic() > deadline:
            return status
        time.sleep(0.02)


def wait_for_node(client, execution_id: str, node_id: str, state: str, timeout: float = 10.0) -> dict:
    deadline = time.monotonic() + timeout
    while True:
        status = client.get(f"/executions/{execution_id}/status", headers=AUTH).json()
        if status["nodes"][node_id] == state or time.monotonic() > deadline:
            return status
        time.sleep(0.02)


def wait_until(condition, timeout: float = 10.0) -> bool:
    deadline = time.monotonic() + timeout
    while not condition():
        if time.monotonic() > deadline:
            return False
        time.sleep(0.02)
    return True


def test_health_needs_no_token(make_client):
    with make_client() as client:
        response = client.get("/health")

    assert response.status_code == 200
    assert response.json() == {"status": "ok", "initialized": False}


@pytest.mark.parametrize(
    ("method", "path"),
    [
        ("post", "/admin/init"),
        ("post", "/admin/stop"),
        ("get", "/elements/controllers"),
        ("get", "/elements/controllers/NERController"),
        ("post", "/elements/controllers"),
        ("put", "/elements/controllers/NERController"),
        ("delete", "/elements/controllers/NERController"),
        ("post", "/executions"),
        ("get", "/executions/x/status"),
        ("get", "/executions/x/result"),
        ("post", "/executions/x/cancel"),
    ],
)
def test_every_endpoint_requires_a_token(make_client, method, path):
    with make_client() as client:
        missing = client.request(method.upper(), path)
        invalid = client.request(method.upper(), path, headers={"Authorization": "Bearer nope"})

    assert missing.status_code == 401
    assert missing.headers["www-authenticate"] == "Bearer"
    assert invalid.status_code == 401


def test_user_outside_allowlist_is_forbidden(make_client, make_settings):
    mallory = {"Authorization": "Bearer mallory-token"}
    with make_client() as client:
        assert client.get("/elements/tasks", headers=mallory).status_code == 403

        client.app.state.settings = make_settings(allowlist=["alice", "mallory"])

        assert client.get("/elements/tasks", headers=mallory).status_code == 200


def test_element_crud(make_client):
    with make_client() as client:
        created = client.post(
            "/elements/controllers", content=fixture_text("ner_controller.json"), headers=AUTH
        )
        assert created.status_code == 201
        assert created.json()["id"] == "NERController"
        assert created.json()["findings"] == []

        fetched = client.get("/elements/controllers/NERController", headers=AUTH)
        assert fetched.json() == json.loads(fixture_text("ner_controller.json"))
        assert [c["controllerId"] for c in client.get("/elements/controllers", headers=AUTH).json()] == [
            "NERController"
        ]

        changed = json.loads(fixture_text("ner_controller.json"))
        changed["controllerName"] = "Renamed"
        modified = client.put("/elements/controllers/NERController", json=changed, headers=AUTH)
        assert modified.status_code == 200
        assert modified.json()["element"]["controllerName"] == "Renamed"

        deleted = client.delete("/elements/controllers/NERController", headers=AUTH)
        assert deleted.status_code == 204
        missing = client.get("/elements/controllers/NERController", headers=AUTH)
        assert missing.status_code == 404


def test_element_errors(make_client):
    with make_client() as client:
        register_all(client)

        duplicate = client.post("/elements/tasks", content=fixture_text("ner_task.json"), headers=AUTH)
        malformed = client.post("/elements/tasks", content=b'{"taskName": ', headers=AUTH)
        unknown_kind = client.get("/elements/widgets", headers=AUTH)
        mismatch = client.put(
            "/elements/tasks/GEOTask", content=fixture_text("ner_task.json"), headers=AUTH
        )
        referenced = client.delete("/elements/tasks/NERTask", headers=AUTH)

    assert duplicate.status_code == 409
    assert malformed.status_code == 400
    assert unknown_kind.status_code == 404
    assert mismatch.status_code == 400
    assert referenced.status_code == 409
    assert referenced.json()["details"]["referencedBy"] == ["templates/ML_GLK"]


def test_controller_change_that_orphans_tasks_conflicts(make_client):
    changed = json.loads(fixture_text("ner_controller.json"))
    changed["serviceId"] = "XNER"
    with make_client() as client:
        register_all(client)

        response = client.put("/elements/controllers/NERController", json=changed, headers=AUTH)
        kept = client.get("/elements/controllers/NERController", headers=AUTH).json()

    assert response.status_code == 409
    assert response.json()["details"]["referencedBy"] == ["tasks/NERTask", "templates/ML_GLK"]
    assert kept["serviceId"] == "NER"


def test_invalid_template_returns_report(make_client):
    with make_client() as client:
        for kind, name in ELEMENTS[:3]:
            client.post(f"/elements/{kind}", content=fixture_text(name), headers=AUTH)

        response = client.post(
            "/elements/templates", content=fixture_text("ml_glk_template.json"), headers=AUTH
        )

    assert response.status_code == 400
    assert response.json()["error"] == "Template ML_GLK failed validation"
    findings = response.json()["findings"]
    assert findings == [
        {
            "severity": "error",
            "path": "$.tasks[0].features.tasks[1].taskId",
            "message": "unresolved taskId GEOTask",
        }
    ]


def test_queue_names_are_unique_across_controllers(make_client):
    clash = json.loads(fixture_text("geo_controller.json"))
    clash["queues"]["nameInputNormal"] = "NER_input_normal"
    with make_client() as client:
        client.post("/elements/controllers", content=fixture_text("ner_controller.json"), headers=AUTH)

        response = client.post("/elements/controllers", json=clash, headers=AUTH)

    assert response.status_code == 409


def test_execute_before_init_conflicts(make_client):
    with make_client() as client:
        register_all(client)

        response = client.post(
            "/executions", json={"templateId": "ML_GLK", "input": SENTENCE}, headers=AUTH
        )

    assert response.status_code == 409


def test_admin_init_and_stop(make_client):
    with make_client() as client:
        register_all(client)

        started = client.post("/admin/init", headers=AUTH).json()
        assert started["initialized"] is True
        assert started["controllers"] == ["GEOController", "NERController"]
        assert client.get("/health").json()["initialized"] is True

        stopped = client.post("/admin/stop", headers=AUTH).json()
        assert stopped["initialized"] is False
        assert stopped["controllers"] == []


def test_end_to_end_lifecycle(make_client):
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)

        execution_id = start(client)
        status = wait_for(client, execution_id)
        result = client.get(f"/executions/{execution_id}/result", headers=AUTH)
        listed = client.get("/elements/executions", headers=AUTH).json()
        mocks = client.app.state.mocks
        log = client.app.state.request_log.entries()

        assert status["state"] == "COMPLETED"
        assert status["templateId"] == "ML_GLK"
        assert result.status_code == 200
        assert result.headers["content-type"].startswith("text/turtle")
        document = parse_nif(result.content)
        assert document.context_text == SENTENCE
        assert document.annotation_keys() == {
            (0, 7, PER, GND_MONTEUX),
            (20, 25, LOC, GEONAMES_PARIS),
        }
        assert [e["executionId"] for e in listed] == [execution_id]
        assert mocks["ner"].calls == mocks["geo"].calls == 1
        assert {e["service"] for e in log} == {"ner", "geo"}

        assert client.post(f"/executions/{execution_id}/cancel", headers=AUTH).status_code == 409
        assert client.delete(f"/elements/executions/{execution_id}", headers=AUTH).status_code == 204
        assert client.get(f"/executions/{execution_id}/status", headers=AUTH).status_code == 404


def test_turtle_input_and_priority(make_client):
    document = serialize_nif(make_context(SENTENCE, "http://example.org/input/"))
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)

        execution_id = start(client, input=document, contentType="text/turtle", priority="priority")
        status = wait_for(client, execution_id)
        result = parse_nif(client.get(f"/executions/{execution_id}/result", headers=AUTH).content)

    assert status["state"] == "COMPLETED"
    assert status["priority"] == "priority"
    assert result.base_uri == "http://example.org/input/"
    assert len(result.annotations) == 2


def test_executions_through_element_endpoints(make_client):
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)

        created = client.post(
            "/elements/executions", json={"templateId": "ML_GLK", "input": SENTENCE}, headers=AUTH
        )
        execution_id = created.json()["executionId"]
        viewed = client.get(f"/elements/executions/{execution_id}", headers=AUTH)
        modified = client.put(f"/elements/executions/{execution_id}", json={}, headers=AUTH)
        wait_for(client, execution_id)

    assert created.status_code == 201
    assert viewed.json()["executionId"] == execution_id
    assert modified.status_code == 405


def test_execution_request_errors(make_client):
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)

        unknown = client.post("/executions", json={"templateId": "nope", "input": "x"}, headers=AUTH)
        invalid = client.post("/executions", json={"input": "x"}, headers=AUTH)
        unsupported = client.post(
            "/executions",
            json={"templateId": "ML_GLK", "input": "x", "contentType": "application/pdf"},
            headers=AUTH,
        )
        bad_turtle = client.post(
            "/executions",
            json={"templateId": "ML_GLK", "input": "<x", "contentType": "text/turtle"},
            headers=AUTH,
        )
        no_status = client.get("/executions/nope/status", headers=AUTH)

    assert unknown.status_code == 404
    assert invalid.status_code == 400
    assert unsupported.status_code == 415
    assert bad_turtle.status_code == 400
    assert no_status.status_code == 404


def test_failed_execution_result(make_client, ner_config):
    flaky = ner_config.model_copy(update={"fail_next_n": 3})
    with make_client(ner=flaky) as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)

        execution_id = start(client)
        status = wait_for(client, execution_id)
        result = client.get(f"/executions/{execution_id}/result", headers=AUTH)

    assert status["state"] == "FAILED"
    assert status["error"]["nodeId"] == "1.1:NERTask"
    assert result.status_code == 422
    assert result.json()["details"]["error"]["serviceStatus"] == 500


def test_running_execution_blocks_changes_and_can_be_cancelled(make_client):
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)
        ner = client.app.state.mocks["ner"]
        ner.pause()
        execution_id = start(client)
        assert wait_until(lambda: ner.calls == 1)

        in_use = client.put(
            "/elements/tasks/NERTask", content=fixture_text("ner_task.json"), headers=AUTH
        )
        pending = client.get(f"/executions/{execution_id}/result", headers=AUTH)
        cancelled = client.post(f"/executions/{execution_id}/cancel", headers=AUTH)
        ner.resume()
        client.post("/admin/stop", headers=AUTH)
        final = client.get(f"/executions/{execution_id}/status", headers=AUTH).json()

    assert in_use.status_code == 409
    assert pending.status_code == 409
    assert cancelled.status_code == 200
    assert cancelled.json()["state"] == "CANCELLED"
    assert final["state"] == "CANCELLED"


def test_status_mid_run_shows_dispatched_services(make_client):
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)
        mocks = client.app.state.mocks
        for mock in mocks.values():
            mock.pause()
        execution_id = start(client)
        assert wait_until(lambda: all(mock.calls == 1 for mock in mocks.values()))

        status = client.get(f"/executions/{execution_id}/status", headers=AUTH).json()
        for mock in mocks.values():
            mock.resume()
        final = wait_for(client, execution_id)

    assert status["state"] == "RUNNING"
    assert status["nodes"]["source"] == "DONE"
    assert status["nodes"]["1.1:NERTask"] == "DISPATCHED"
    assert status["nodes"]["1.2:GEOTask"] == "DISPATCHED"
    assert status["nodes"]["1:waitcombiner"] == "WAITING"
    assert status["nodes"]["sink"] == "WAITING"
    assert final["state"] == "COMPLETED"


def test_cancel_after_one_branch_never_fires_the_combiner(make_client):
    with make_client() as client:
        register_all(client)
        client.post("/admin/init", headers=AUTH)
        geo = client.app.state.mocks["geo"]
        engine = client.app.state.manager.engine
        geo.pause()
        execution_id = start(client)
        mid = wait_for_node(client, execution_id, "1.1:NERTask", "DONE")

        cancelled = client.post(f"/executions/{execution_id}/cancel", headers=AUTH)
        geo.resume()
        assert wait_until(lambda: engine.late_replies == 1)
        final = client.get(f"/executions/{execution_id}/status", headers=AUTH).json()
        result = client.get(f"/executions/{execution_id}/result", headers=AUTH)

    assert mid["nodes"]["1.2:GEOTask"] == "DISPATCHED"
    assert cancelled.json()["state"] == "CANCELLED"
    assert final["state"] == "CANCELLED"
    assert final["nodes"]["1.1:NERTask"] == "DONE"
    assert final["nodes"]["1.2:GEOTask"] == "DISPATCHED"
    assert final["nodes"]["1:waitcombiner"] == "WAITING"
    assert final["nodes"]["sink"] == "WAITING"
    assert result.status_code == 409
