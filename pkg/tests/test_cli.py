from __future__ import annotations

import json
import time

import pytest

from app.cli import load_cli_config, main
from conftest import AUTH, FIXTURES, SENTENCE, TOKEN, fixture_text
from workflow_runtime.registry import ElementRegistry


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("CWM_URL", "CWM_TOKEN", "CWM_OUTPUT"):
        monkeypatch.delenv(name, raising=False)


def output(capsys) -> object:
    return json.loads(capsys.readouterr().out)


def test_validate_template_against_registry_dir(tmp_path, capsys):
    registry = ElementRegistry(tmp_path)
    for kind, name in (
        ("controllers", "ner_controller.json"),
        ("controllers", "geo_controller.json"),
        ("tasks", "ner_task.json"),
        ("tasks", "geo_task.json"),
    ):
        registry.create(kind, fixture_text(name))

    code = main(["validate", str(FIXTURES / "ml_glk_template.json"), "--registry", str(tmp_path)])

    report = output(capsys)
    assert code == 0
    assert report["ok"] is True
    assert report["kind"] == "templates"
    assert report["findings"] == []


def test_validate_files_in_order(capsys):
    names = ["ner_controller.json", "geo_controller.json", "ner_task.json", "geo_task.json", "ml_glk_template.json"]

    code = main(["validate", *(str(FIXTURES / name) for name in names)])

    reports = output(capsys)
    assert code == 0
    assert [r["id"] for r in reports] == ["NERController", "GEOController", "NERTask", "GEOTask", "ML_GLK"]
    assert all(r["ok"] for r in reports)


def test_validate_unresolved_template_fails(capsys):
    code = main(["validate", str(FIXTURES / "ml_glk_template.json")])

    report = output(capsys)
    assert code == 1
    assert report["ok"] is False
    assert report["findings"]


def test_validate_duplicate_order_fails(tmp_path, capsys):
    doc = json.loads(fixture_text("ml_glk_template.json"))
    doc["tasks"][0]["features"]["tasks"][1]["order"] = 1
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(doc), encoding="utf-8")

    code = main(["validate", str(path)])

    report = output(capsys)
    assert code == 1
    assert report["ok"] is False
    assert report["path"] == "$.tasks[0].features.tasks"


def test_config_precedence(tmp_path, monkeypatch):
    profile = tmp_path / "profile.yaml"
    profile.write_text("url: http://profile:1\ntoken: from-profile\noutput: plain\n", encoding="utf-8")
    monkeypatch.setenv("CWM_TOKEN", "from-env")

    config = load_cli_config(str(profile), {"url": "http://flag:2"})

    assert config.url == "http://flag:2"
    assert config.token == "from-env"
    assert config.output == "plain"


def test_relative_url_is_rejected(capsys):
    assert main(["--url", "relative/path", "list", "tasks"]) == 2


def test_scripted_session(make_client, make_settings, tmp_path, capsys):
    text = tmp_path / "sentence.txt"
    text.write_text(SENTENCE, encoding="utf-8")
    result_file = tmp_path / "result.ttl"
    auth = ["--token", TOKEN]

    with make_client(make_settings(log_level="WARNING")) as client:
        for kind, name in (
            ("controllers", "ner_controller.json"),
            ("controllers", "geo_controller.json"),
            ("tasks", "ner_task.json"),
            ("tasks", "geo_task.json"),
            ("templates", "ml_glk_template.json"),
        ):
            assert main([*auth, "register", kind, str(FIXTURES / name)], client=client) == 0
        capsys.readouterr()

        assert main([*auth, "list", "tasks"], client=client) == 0
        assert [t["taskId"] for t in output(capsys)] == ["GEOTask", "NERTask"]

        client.post("/admin/init", headers=AUTH)
        assert main([*auth, "execute", "--template", "ML_GLK", "--input", str(text)], client=client) == 0
        execution_id = output(capsys)["executionId"]

        deadline = time.monotonic() + 10
        state = None
        while state != "COMPLETED" and time.monotonic() < deadline:
            assert main([*auth, "status", execution_id], client=client) == 0
            state = output(capsys)["state"]
            time.sleep(0.02)
        assert state == "COMPLETED"

        assert main([*auth, "result", execution_id, "-o", str(result_file)], client=client) == 0
        assert main([*auth, "cancel", execution_id], client=client) == 2
        assert main(["--token", "wrong", "list", "tasks"], client=client) == 2
        assert (
            main([*auth, "register", "templates", str(FIXTURES / "ner_controller.json")], client=client)
            == 1
        )
        assert (
            main(
                [*auth, "execute", "--template", "ML_GLK", "--input", str(text), "--param", "oops"],
                client=client,
            )
            == 2
        )

    assert "Monteux" in result_file.read_text(encoding="utf-8")


def test_mock_command_serves_the_configured_mock(tmp_path, monkeypatch, capsys):
    config = tmp_path / "ner.yaml"
    config.write_text(
        "name: ner\ngazetteer:\n  - {surface: Monteux, entityClass: PER}\n", encoding="utf-8"
    )
    calls = []

    class RecordingServer:
        url = "http://127.0.0.1:9000/"

        def serve_forever(self) -> None:
            calls.append("serve_forever")

    def fake_serve_mock(mock_config, log=None):
        calls.append((mock_config.name, mock_config.port))
        return RecordingServer()

    monkeypatch.setattr("workflow_runtime.mocks.serve_mock", fake_serve_mock)

    assert main(["mock", "--config", str(config)]) == 0
    assert calls == [("ner", 9000), "serve_forever"]
    assert output(capsys) == {"service": "ner", "url": "http://127.0.0.1:9000/"}
