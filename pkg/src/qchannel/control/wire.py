"""Line-delimited JSON transport for control-plane messages.

One message per line: a JSON object with a ``type`` key naming the message
class and the remaining keys holding its fields. Nested messages (a packet
inside ``PacketIn``, a flow entry inside ``InstallFlow``) are nested objects
carrying their own ``type``. Packet payloads are base64 strings.

The controller server answers each request line with the resulting command
lines followed by ``{"type": "Done"}``.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import socketserver
import threading
from typing import Optional

from .controller import Controller
from .messages import MESSAGE_TYPES, Packet


def _encode_value(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return to_dict(value)
    if isinstance(value, bytes):
        return base64.b64encode(value).decode("ascii")
    if isinstance(value, (tuple, list)):
        return [_encode_value(v) for v in value]
    if isinstance(value, dict):
        return {k: _encode_value(v) for k, v in value.items()}
    return value


def to_dict(message) -> dict:
    out = {"type": type(message).__name__}
    for f in dataclasses.fields(message):
        out[f.name] = _encode_value(getattr(message, f.name))
    return out


def _decode_value(value):
    if isinstance(value, dict) and "type" in value and value["type"] in MESSAGE_TYPES:
        return from_dict(value)
    if isinstance(value, list):
        return tuple(_decode_value(v) for v in value)
    return value


def from_dict(obj: dict):
    obj = dict(obj)
    kind = obj.pop("type", None)
    cls = MESSAGE_TYPES.get(kind)
    if cls is None:
        raise ValueError(f"unknown message type {kind!r}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ValueError(f"{kind} has no field(s) {sorted(unknown)}")
    kwargs = {}
    for k, v in obj.items():
        if cls is Packet and k == "payload":
            kwargs[k] = base64.b64decode(v) if v else b""
        elif k == "delta":
            kwargs[k] = {dk: _decode_value(dv) for dk, dv in v.items()}
        else:
            kwargs[k] = _decode_value(v)
    return cls(**kwargs)


def encode(message) -> str:
    return json.dumps(to_dict(message), sort_keys=True, separators=(",", ":"))


def decode(line: str):
    return from_dict(json.loads(line))


DONE = '{"type":"Done"}'


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: ControllerServer = self.server  # type: ignore[assignment]
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            try:
                msg = decode(line)
                with server.lock:
                    commands = server.controller.handle(msg)
                out = [encode(c) for c in commands]
            except (ValueError, TypeError, KeyError) as exc:
                out = [json.dumps({"type": "Error", "reason": str(exc)})]
            for o in out + [DONE]:
                self.wfile.write((o + "\n").encode("utf-8"))
            self.wfile.flush()


class ControllerServer(socketserver.ThreadingTCPServer):
    """Exposes a controller over a local TCP socket."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, controller: Controller, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.controller = controller
        self.lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self):
        return self.server_address

    def start(self) -> "ControllerServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def request(sock_file, message) -> list:
    """Send one message over a connected socket file and collect the reply commands."""
    sock_file.write((encode(message) + "\n").encode("utf-8"))
    sock_file.flush()
    replies = []
    for raw in sock_file:
        line = raw.decode("utf-8").strip()
        if line == DONE:
            break
        obj = json.loads(line)
        replies.append(obj if obj.get("type") == "Error" else from_dict(obj))
    return replies
