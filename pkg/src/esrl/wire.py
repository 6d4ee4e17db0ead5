"""Live telemetry protocol: message schema, bounded queues, recordings.

Every message is a single JSON document on one newline-terminated line:

    {"type": <str>, "step": <int>, "version": 1, "payload": {...}}

Outbound types: hello, snapshot, metrics, influence. Inbound types:
takeover {"on": bool}, action {"a": [..]}, pause, resume. Unknown inbound
types are ignored with a warning; malformed JSON is dropped and counted.
Recorded captures add a top-level "ts" so fixtures can replay at the
original cadence.

The trainer publishes fire-and-forget onto bounded drop-oldest queues, so a
slow or absent client can never block training.
"""

from __future__ import annotations

import collections
import json
import logging
import threading
import time
from pathlib import Path

log = logging.getLogger("esrl.wire")

PROTOCOL_VERSION = 1
OUTBOUND_TYPES = ("hello", "snapshot", "metrics", "influence")
INBOUND_TYPES = ("takeover", "action", "pause", "resume")

SNAPSHOT_MIN_INTERVAL = 0.1  # 10 Hz cap


def make_message(msg_type: str, step: int, payload: dict | None = None, ts: float | None = None) -> dict:
    msg = {"type": msg_type, "step": int(step), "version": PROTOCOL_VERSION, "payload": payload or {}}
    if ts is not None:
        msg["ts"] = ts
    return msg


def encode_line(msg: dict) -> str:
    return json.dumps(msg, separators=(",", ":")) + "\n"


def decode_line(line: str) -> dict | None:
    """Parse one wire line; returns None (caller counts a drop) if malformed."""
    try:
        msg = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if not isinstance(msg, dict) or "type" not in msg:
        return None
    return msg


class CommandQueue:
    """Inbound takeover/action/pause/resume commands; one consumer (trainer)."""

    def __init__(self, maxlen: int = 1024):
        self._q: collections.deque = collections.deque(maxlen=maxlen)

    def put(self, msg: dict) -> None:
        self._q.append(msg)

    def drain(self) -> list[dict]:
        out = []
        while True:
            try:
                out.append(self._q.popleft())
            except IndexError:
                return out

    def __len__(self) -> int:
        return len(self._q)


class TelemetryBus:
    """Trainer-side publish surface; the service thread is the only reader.

    Snapshots go into a latest-wins slot capped at 10 Hz; metrics/influence
    lines go into a bounded drop-oldest event queue.
    """

    def __init__(self, event_capacity: int = 4096, record_path: str | Path | None = None):
        self.events: collections.deque = collections.deque(maxlen=event_capacity)
        self.commands = CommandQueue()
        self.hello_payload: dict = {}
        self._last_snapshot = 0.0
        self._record_file = open(record_path, "w", encoding="utf-8") if record_path else None
        self._lock = threading.Lock()
        self.dropped_snapshots = 0

    def set_hello(self, payload: dict) -> None:
        self.hello_payload = payload
        self._record(make_message("hello", 0, payload, ts=time.time()))

    def publish_snapshot(self, step: int, payload: dict) -> None:
        now = time.time()
        if now - self._last_snapshot < SNAPSHOT_MIN_INTERVAL:
            self.dropped_snapshots += 1
            return
        self._last_snapshot = now
        msg = make_message("snapshot", step, payload)
        self.events.append(msg)
        self._record({**msg, "ts": now})

    def publish(self, msg_type: str, step: int, payload: dict) -> None:
        msg = make_message(msg_type, step, payload)
        self.events.append(msg)
        self._record({**msg, "ts": time.time()})

    def drain_events(self, limit: int = 256) -> list[dict]:
        out = []
        for _ in range(limit):
            try:
                out.append(self.events.popleft())
            except IndexError:
                break
        return out

    def _record(self, msg: dict) -> None:
        if self._record_file is None:
            return
        with self._lock:
            self._record_file.write(encode_line(msg))
            self._record_file.flush()

    def close(self) -> None:
        if self._record_file is not None:
            self._record_file.close()
            self._record_file = None


def read_recording(path: str | Path) -> list[dict]:
    """Load a JSON-lines capture; malformed lines are dropped with a warning."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            msg = decode_line(line)
            if msg is None:
                log.warning("dropping malformed recording line")
                continue
            out.append(msg)
    return out
