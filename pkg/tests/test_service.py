import json
import time

import pytest
from fastapi.testclient import TestClient

from esrl.config import TrainConfig
from esrl.service import create_app
from esrl.trainer import Trainer
from esrl.wire import PROTOCOL_VERSION, TelemetryBus, encode_line, make_message


@pytest.fixture()
def live_app():
    bus = TelemetryBus()
    bus.set_hello({"task": "touch2", "mode": "e2hil"})
    app = create_app(bus=bus)
    with TestClient(app) as client:
        yield client, bus, app


def test_health(live_app):
    client, _, _ = live_app
    r = client.get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert body["protocol_version"] == PROTOCOL_VERSION


def test_ws_hello_first(live_app):
    client, _, _ = live_app
    with client.websocket_connect("/ws") as ws:
        msg = ws.receive_json()
        assert msg["type"] == "hello"
        assert msg["version"] == 1
        assert msg["payload"]["task"] == "touch2"


def test_inbound_takeover_lands_on_command_queue(live_app):
    client, bus, app = live_app
    with client.websocket_connect("/ws") as ws:
        ws.receive_json()  # hello
        ws.send_json({"type": "takeover", "on": True})
        deadline = time.time() + 2
        cmds = []
        while time.time() < deadline and not cmds:
            cmds = bus.commands.drain()
            time.sleep(0.01)
    assert len(cmds) == 1 and cmds[0]["type"] == "takeover"
    assert app.state.command_counts["takeover"] == 1


def test_unknown_inbound_type_ignored(live_app):
    client, bus, app = live_app
    with client.websocket_connect("/ws") as ws:
        ws.receive_json()
        ws.send_json({"type": "mystery", "x": 1})
        ws.send_json({"type": "pause"})
        deadline = time.time() + 2
        cmds = []
        while time.time() < deadline and not cmds:
            cmds = bus.commands.drain()
            time.sleep(0.01)
    assert [c["type"] for c in cmds] == ["pause"]


def test_broadcast_fan_out_three_clients(live_app):
    client, bus, _ = live_app
    with client.websocket_connect("/ws") as a, client.websocket_connect("/ws") as b, client.websocket_connect("/ws") as c:
        for ws in (a, b, c):
            assert ws.receive_json()["type"] == "hello"
        bus.publish("metrics", 7, {"alpha": 0.25})
        lines = [ws.receive_json() for ws in (a, b, c)]
    assert all(m["type"] == "metrics" and m["step"] == 7 for m in lines)
    assert lines[0] == lines[1] == lines[2]


def test_version_mismatch_closes_connection(live_app):
    client, _, _ = live_app
    with client.websocket_connect("/ws") as ws:
        ws.receive_json()
        ws.send_json({"type": "takeover", "on": True, "version": 999})
        with pytest.raises(Exception):
            for _ in range(50):
                ws.receive_json()


def _write_fixture(path, n_metrics):
    msgs = [make_message("hello", 0, {"task": "touch2"}, ts=0.0)]
    for i in range(n_metrics):
        msgs.append(make_message("metrics", i, {"alpha": 0.1}, ts=0.001 * i))
    path.write_text("".join(encode_line(m) for m in msgs))


def test_fixture_replay_counts(tmp_path):
    fixture = tmp_path / "rec.jsonl"
    _write_fixture(fixture, 100)
    app = create_app(fixture_path=fixture, max_speed=True)
    with TestClient(app) as client:
        with client.websocket_connect("/ws") as ws:
            got = []
            try:
                while True:
                    got.append(ws.receive_json())
            except Exception:
                pass
    assert got[0]["type"] == "hello"
    assert sum(1 for m in got if m["type"] == "metrics") == 100


def test_fixture_replay_is_deterministic(tmp_path):
    fixture = tmp_path / "rec.jsonl"
    _write_fixture(fixture, 25)
    app = create_app(fixture_path=fixture, max_speed=True)

    def collect():
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                got = []
                try:
                    while True:
                        got.append(ws.receive_json())
                except Exception:
                    pass
                return got

    assert collect() == collect()


def test_empty_fixture_hello_then_close(tmp_path):
    fixture = tmp_path / "empty.jsonl"
    fixture.write_text("")
    app = create_app(fixture_path=fixture, max_speed=True)
    with TestClient(app) as client:
        with client.websocket_connect("/ws") as ws:
            assert ws.receive_json()["type"] == "hello"
            with pytest.raises(Exception):
                ws.receive_json()


def test_fixture_logs_inbound_without_effect(tmp_path):
    fixture = tmp_path / "rec.jsonl"
    _write_fixture(fixture, 3)
    app = create_app(fixture_path=fixture, max_speed=True)
    with TestClient(app) as client:
        with client.websocket_connect("/ws") as ws:
            ws.receive_json()
            ws.send_json({"type": "action", "a": [1.0, 0.0]})
            try:
                while True:
                    ws.receive_json()
            except Exception:
                pass
    assert app.state.command_counts["action"] == 1


def test_run_lifecycle(tmp_path):
    app = create_app()
    with TestClient(app) as client:
        r = client.post("/runs", json={"config": {"total_steps": 40, "task": "touch2", "seed": 3}, "out_dir": str(tmp_path / "run")})
        assert r.status_code == 200
        run_id = r.json()["run_id"]
        deadline = time.time() + 30
        state = "running"
        while time.time() < deadline and state == "running":
            state = client.get(f"/runs/{run_id}").json()["state"]
            time.sleep(0.05)
        assert state == "finished"
        body = client.get(f"/runs/{run_id}").json()
        assert body["summary"]["total_steps"] == 40
        assert (tmp_path / "run" / "summary.json").exists()


def test_run_rejects_bad_config():
    app = create_app()
    with TestClient(app) as client:
        r = client.post("/runs", json={"config": {"batch_size": 7}})
        assert r.status_code == 422
        r = client.post("/runs", json={"config": {"not_a_key": 1}})
        assert r.status_code == 422


def test_unknown_run_404():
    app = create_app()
    with TestClient(app) as client:
        assert client.get("/runs/nope").status_code == 404


def test_eval_endpoint(tmp_path):
    cfg = TrainConfig(total_steps=0, seed=5)
    Trainer(cfg, tmp_path / "run").run()
    app = create_app()
    with TestClient(app) as client:
        r = client.post("/eval", json={"checkpoint": str(tmp_path / "run" / "checkpoints" / "final"), "episodes": 2})
        assert r.status_code == 200
        body = r.json()
        assert body["task"] == "touch2"
        assert 0.0 <= body["success_rate"] <= 1.0
        r = client.post("/eval", json={"checkpoint": str(tmp_path / "missing")})
        assert r.status_code == 404
