"""Line-delimited JSON wire protocol and transports.

Every request is one JSON object on one line: ``{"op": ..., "session": ...,
"payload": {...}}``.  Every response is ``{"ok": true, "result": ...}`` or
``{"ok": false, "error": {"category": ..., "message": ...}}``.  Binary
fields inside payloads travel as uppercase hex (the record codecs take care
of that).  The same codec backs the TCP transport and the in-process one, so
tests and simulations exercise the exact bytes that cross a real socket.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from typing import Any, Protocol

from .errors import ProtocolError, RowShareError, UnreachableError, error_for_category

logger = logging.getLogger(__name__)

MAX_LINE_BYTES = 64 * 1024 * 1024


def encode_request(op: str, session: str | None, payload: dict) -> bytes:
    return json.dumps(
        {"op": op, "session": session, "payload": payload},
        separators=(",", ":"),
    ).encode() + b"\n"


def decode_request(line: bytes) -> tuple[str, str | None, dict]:
    try:
        data = json.loads(line)
        op = data["op"]
        session = data.get("session")
        payload = data.get("payload") or {}
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"unparseable request: {exc}") from exc
    if not isinstance(op, str) or not isinstance(payload, dict):
        raise ProtocolError("request fields have wrong types")
    if session is not None and not isinstance(session, str):
        raise ProtocolError("session must be a string")
    return op, session, payload


def encode_ok(result: Any) -> bytes:
    return json.dumps({"ok": True, "result": result}, separators=(",", ":")).encode() + b"\n"


def encode_error(exc: Exception) -> bytes:
    category = getattr(exc, "category", "error")
    return json.dumps(
        {"ok": False, "error": {"category": category, "message": str(exc)}},
        separators=(",", ":"),
    ).encode() + b"\n"


def decode_response(line: bytes) -> Any:
    try:
        data = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"unparseable response: {exc}") from exc
    if not isinstance(data, dict) or "ok" not in data:
        raise ProtocolError("response missing 'ok' field")
    if data["ok"]:
        return data.get("result")
    err = data.get("error") or {}
    raise error_for_category(
        err.get("category", "error"), err.get("message", "remote error")
    )


class RequestHandler(Protocol):
    """Anything that can answer one wire line with one wire line."""

    def handle_line(self, line: bytes) -> bytes: ...


class Transport(Protocol):
    def call(self, op: str, payload: dict, session: str | None = None) -> Any: ...


class LocalTransport:
    """In-process transport that still round-trips through the codec."""

    def __init__(self, handler: RequestHandler) -> None:
        self.handler = handler

    def call(self, op: str, payload: dict, session: str | None = None) -> Any:
        request = encode_request(op, session, payload)
        response = self.handler.handle_line(request)
        return decode_response(response)

    def close(self) -> None:
        pass


class TcpTransport:
    """Blocking single-connection client transport."""

    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._file = None

    def _connect(self) -> None:
        try:
            self._sock = socket.create_connection(
                (self.host, self.port), timeout=self.timeout
            )
            self._file = self._sock.makefile("rwb")
        except OSError as exc:
            self._sock = None
            self._file = None
            raise UnreachableError(
                f"cannot reach {self.host}:{self.port}: {exc}"
            ) from exc

    def call(self, op: str, payload: dict, session: str | None = None) -> Any:
        if self._file is None:
            self._connect()
        try:
            self._file.write(encode_request(op, session, payload))
            self._file.flush()
            line = self._file.readline(MAX_LINE_BYTES)
        except OSError as exc:
            self.close()
            raise UnreachableError(f"connection lost: {exc}") from exc
        if not line:
            self.close()
            raise UnreachableError("connection closed by peer")
        return decode_response(line)

    def close(self) -> None:
        if self._file is not None:
            try:
                self._file.close()
            except OSError:
                pass
            self._file = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            try:
                line = self.rfile.readline(MAX_LINE_BYTES)
            except OSError:
                return
            if not line:
                return
            try:
                response = self.server.app.handle_line(line)
            except Exception:
                logger.exception("handler crashed on a request")
                response = encode_error(RowShareError("internal error"))
            try:
                self.wfile.write(response)
                self.wfile.flush()
            except OSError:
                return


class WireServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], app: RequestHandler) -> None:
        super().__init__(address, _LineHandler)
        self.app = app


def serve_in_background(app: RequestHandler, host: str, port: int) -> WireServer:
    """Start a TCP server on a daemon thread; returns the server handle."""
    server = WireServer((host, port), app)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
