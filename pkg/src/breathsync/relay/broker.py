"""Session broker for pair, one-to-many and many-to-many breath sharing.

Each frame is routed against an atomic snapshot of session membership. The
session lock is held across logging and delivery so that frames from any one
source reach every recipient in send order.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

from ..protocol import FRAME_SIZE, FrameError, decode_frame
from .log import MemoryLog, SessionLog

logger = logging.getLogger(__name__)

MAX_PARTICIPANTS = 256

Sink = Callable[[bytes], None]


class RelayError(Exception):
    pass


class UnknownSession(RelayError):
    pass


class SessionFull(RelayError):
    pass


class DuplicateParticipant(RelayError):
    pass


class NotAMember(RelayError):
    pass


@dataclass(frozen=True)
class RoutingMode:
    kind: str  # "pair" | "fanout" | "mesh"
    source: Optional[str] = None  # participant id of the fan-out source

    def __post_init__(self):
        if self.kind not in ("pair", "fanout", "mesh"):
            raise ValueError(f"unknown routing mode {self.kind!r}")
        if self.kind == "fanout" and self.source is None:
            raise ValueError("fanout mode needs a source participant")

    @classmethod
    def pair(cls) -> "RoutingMode":
        return cls("pair")

    @classmethod
    def fanout(cls, source: str) -> "RoutingMode":
        return cls("fanout", source)

    @classmethod
    def mesh(cls) -> "RoutingMode":
        return cls("mesh")

    @property
    def capacity(self) -> int:
        return 2 if self.kind == "pair" else MAX_PARTICIPANTS


def recipients_for(mode: RoutingMode, members: dict[int, str], sender: int) -> set[int]:
    """Source ids that receive a frame from `sender` given current members."""
    if sender not in members:
        return set()
    if mode.kind == "fanout":
        if members[sender] != mode.source:
            return set()
    return {sid for sid in members if sid != sender}


class Session:
    def __init__(self, session_id: str, mode: RoutingMode, log: Union[SessionLog, MemoryLog]):
        self.id = session_id
        self.mode = mode
        self.log = log
        self.members: dict[int, str] = {}
        self.sinks: dict[int, Sink] = {}
        self.lock = threading.Lock()
        self.counters: Counter = Counter()
        self._last_ts = 0

    def source_id_of(self, participant: str) -> Optional[int]:
        for sid, pid in self.members.items():
            if pid == participant:
                return sid
        return None


class Broker:
    """In-process relay core. Transports call `route_frame` with raw bytes.

    Session logs go to ``<log_dir>/<session>.log``, or stay in memory when no
    directory is given.

    `clock` returns broker time in ms; it defaults to wall-clock monotonic
    time since construction and is replaced by a virtual clock in simulation.
    """

    def __init__(self, log_dir: Union[str, Path, None] = None, clock: Optional[Callable[[], int]] = None):
        self.log_dir = Path(log_dir) if log_dir is not None else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        if clock is None:
            t0 = time.monotonic()
            clock = lambda: int((time.monotonic() - t0) * 1000)  # noqa: E731
        self.clock = clock
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def create_session(self, mode: RoutingMode) -> str:
        with self._lock:
            session_id = f"s{next(self._ids):04d}"
            while self.log_dir is not None and (self.log_dir / f"{session_id}.log").exists():
                session_id = f"s{next(self._ids):04d}"
            if self.log_dir is not None:
                log = SessionLog(self.log_dir / f"{session_id}.log")
            else:
                log = MemoryLog()
            self.sessions[session_id] = Session(session_id, mode, log)
        logger.info("created session %s (%s)", session_id, mode.kind)
        return session_id

    def session(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise UnknownSession(session_id) from None

    def join(self, session_id: str, participant: str, sink: Optional[Sink] = None) -> int:
        s = self.session(session_id)
        with s.lock:
            if s.source_id_of(participant) is not None:
                raise DuplicateParticipant(participant)
            if len(s.members) >= s.mode.capacity:
                raise SessionFull(session_id)
            sid = next(i for i in range(MAX_PARTICIPANTS) if i not in s.members)
            s.members[sid] = participant
            if sink is not None:
                s.sinks[sid] = sink
        return sid

    def leave(self, session_id: str, participant: str) -> int:
        s = self.session(session_id)
        with s.lock:
            sid = s.source_id_of(participant)
            if sid is None:
                raise NotAMember(participant)
            del s.members[sid]
            s.sinks.pop(sid, None)
        return sid

    def route_frame(self, session_id: str, frame: bytes) -> set[int]:
        """Log and deliver `frame`; returns the recipient source ids.

        Undecodable frames and frames from non-members are dropped and
        counted rather than raised, so a bad client cannot stop the relay.
        """
        s = self.session(session_id)
        try:
            if len(frame) != FRAME_SIZE:
                raise FrameError("wrong frame size")
            order = decode_frame(frame)
        except FrameError:
            with s.lock:
                s.counters["undecodable"] += 1
            return set()
        with s.lock:
            if order.source_id not in s.members:
                s.counters["unknown_source"] += 1
                return set()
            targets = recipients_for(s.mode, s.members, order.source_id)
            if s.mode.kind == "fanout" and s.members[order.source_id] != s.mode.source:
                s.counters["non_source"] += 1
            elif not targets:
                s.counters["no_recipient"] += 1
            s._last_ts = max(s._last_ts, int(self.clock()))
            s.log.append(s._last_ts, bytes(frame))
            s.counters["accepted"] += 1
            payload = bytes(frame)
            for sid in sorted(targets):
                sink = s.sinks.get(sid)
                if sink is not None:
                    sink(payload)
                    s.counters["delivered"] += 1
        return targets

    def close(self) -> None:
        with self._lock:
            for s in self.sessions.values():
                with s.lock:
                    s.log.flush()
                    s.log.close()
