"""TCP front end for the broker.

One connection carries both channels. A line starting with ``{`` is a JSON
control message terminated by ``\\n``; a 0xB5 byte starts a raw 13-byte
frame. Anything else is skipped byte by byte. Replies and forwarded frames
share the same interleaving on the way back.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import signal
from typing import Optional

from ..protocol import FRAME_SIZE, SYNC
from .broker import Broker, RelayError, RoutingMode

logger = logging.getLogger(__name__)

MAX_CONTROL_LINE = 4096


def parse_mode(msg: dict) -> RoutingMode:
    mode = msg.get("mode")
    if isinstance(mode, dict):
        # {"fanout": {"source": "alice"}}
        (kind, opts), = mode.items()
        return RoutingMode(kind.lower(), (opts or {}).get("source"))
    if not isinstance(mode, str):
        raise ValueError("mode must be a string or object")
    return RoutingMode(mode.lower(), msg.get("source"))


class RelayServer:
    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 7878):
        self.broker = broker
        self.host = host
        self.port = port
        self.stray_bytes = 0
        self._server: Optional[asyncio.base_events.Server] = None
        self._anon = itertools.count(1)
        self._stopping: Optional[asyncio.Event] = None

    async def start(self) -> None:
        self._stopping = asyncio.Event()
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        sock = self._server.sockets[0]
        self.port = sock.getsockname()[1]
        logger.info("relay listening on %s:%d", self.host, self.port)

    def request_stop(self) -> None:
        if self._stopping is not None:
            self._stopping.set()

    async def serve_until_stopped(self) -> None:
        assert self._stopping is not None
        await self._stopping.wait()
        await self.stop()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        self.broker.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = {"session": None, "participant": None}

        def reply(obj: dict) -> None:
            writer.write((json.dumps(obj) + "\n").encode())

        try:
            while True:
                head = await reader.read(1)
                if not head:
                    break
                if head[0] == SYNC:
                    try:
                        rest = await reader.readexactly(FRAME_SIZE - 1)
                    except asyncio.IncompleteReadError:
                        break
                    if conn["session"] is None:
                        continue
                    self.broker.route_frame(conn["session"], head + rest)
                elif head == b"{":
                    try:
                        line = head + await reader.readuntil(b"\n")
                    except (asyncio.IncompleteReadError, asyncio.LimitOverrunError):
                        break
                    if len(line) > MAX_CONTROL_LINE:
                        reply({"ok": False, "error": "LineTooLong"})
                        continue
                    reply(self._control(line, conn, writer))
                else:
                    self.stray_bytes += 1
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            if conn["session"] is not None:
                try:
                    self.broker.leave(conn["session"], conn["participant"])
                except RelayError:
                    pass
            writer.close()

    def _control(self, line: bytes, conn: dict, writer: asyncio.StreamWriter) -> dict:
        try:
            msg = json.loads(line)
            op = msg.get("op")
            if op == "create":
                sid = self.broker.create_session(parse_mode(msg))
                return {"ok": True, "op": "create", "session": sid}
            if op == "join":
                if conn["session"] is not None:
                    return {"ok": False, "op": "join", "error": "AlreadyJoined"}
                session = msg["session"]
                participant = str(msg.get("participant") or f"anon{next(self._anon)}")
                source_id = self.broker.join(session, participant, writer.write)
                conn["session"], conn["participant"] = session, participant
                return {"ok": True, "op": "join", "session": session,
                        "participant": participant, "source_id": source_id}
            if op == "leave":
                if conn["session"] is None:
                    return {"ok": False, "op": "leave", "error": "NotAMember"}
                self.broker.leave(conn["session"], conn["participant"])
                conn["session"] = conn["participant"] = None
                return {"ok": True, "op": "leave"}
            if op == "stats":
                s = self.broker.session(msg.get("session") or conn["session"])
                with s.lock:
                    counters = dict(s.counters)
                    members = {str(k): v for k, v in s.members.items()}
                return {"ok": True, "op": "stats", "session": s.id,
                        "counters": counters, "members": members}
            return {"ok": False, "error": "UnknownOp", "op": op}
        except RelayError as exc:
            return {"ok": False, "error": type(exc).__name__, "detail": str(exc)}
        except (ValueError, KeyError, TypeError) as exc:
            return {"ok": False, "error": "BadRequest", "detail": str(exc)}


async def run_relay(broker: Broker, host: str, port: int, ready=None) -> None:
    """Serve until SIGINT/SIGTERM, then close sessions and flush logs."""
    server = RelayServer(broker, host, port)
    await server.start()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, server.request_stop)
        except (NotImplementedError, RuntimeError):
            pass
    if ready is not None:
        ready(server)
    await server.serve_until_stopped()


class RelayClient:
    """Blocking socket client, used by tests and scripted sessions."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        import socket

        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._buf = bytearray()
        self.frames: list[bytes] = []

    def close(self) -> None:
        self.sock.close()

    def send_frame(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def request(self, obj: dict) -> dict:
        self.sock.sendall((json.dumps(obj) + "\n").encode())
        while True:
            msg = self._next_message()
            if isinstance(msg, dict):
                return msg

    def read_frames(self, count: int) -> list[bytes]:
        while len(self.frames) < count:
            msg = self._next_message()
            if isinstance(msg, dict):
                continue
        out, self.frames = self.frames[:count], self.frames[count:]
        return out

    def _next_message(self):
        while True:
            if self._buf:
                if self._buf[0] == SYNC and len(self._buf) >= FRAME_SIZE:
                    frame = bytes(self._buf[:FRAME_SIZE])
                    del self._buf[:FRAME_SIZE]
                    self.frames.append(frame)
                    return frame
                if self._buf[0:1] == b"{":
                    nl = self._buf.find(b"\n")
                    if nl >= 0:
                        line = bytes(self._buf[: nl + 1])
                        del self._buf[: nl + 1]
                        return json.loads(line)
                elif self._buf[0] != SYNC:
                    del self._buf[:1]
                    continue
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("relay closed the connection")
            self._buf.extend(chunk)
