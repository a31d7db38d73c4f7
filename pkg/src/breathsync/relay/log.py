"""Append-only session logs: records of [recv_ts u64 BE][13 frame bytes]."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterator, Union

from ..protocol import FRAME_SIZE, AmplitudeOrder, FrameError, decode_frame

RECORD_SIZE = 8 + FRAME_SIZE
_TS = struct.Struct(">Q")


class LogError(Exception):
    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


class TruncatedRecord(LogError):
    pass


class ChecksumFailure(LogError):
    pass


class SessionLog:
    """Writes each record with a single unbuffered write so that an interrupted
    process leaves the file on a record boundary."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        self.records = 0

    def append(self, recv_ts: int, frame: bytes) -> None:
        if len(frame) != FRAME_SIZE:
            raise ValueError("log records hold exactly one frame")
        os.write(self._fd, _TS.pack(recv_ts) + frame)
        self.records += 1

    def flush(self) -> None:
        if self._fd >= 0:
            os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class MemoryLog:
    """Same interface as SessionLog, kept in a list; used by simulations."""

    def __init__(self):
        self.entries: list[tuple[int, bytes]] = []

    @property
    def records(self) -> int:
        return len(self.entries)

    def append(self, recv_ts: int, frame: bytes) -> None:
        if len(frame) != FRAME_SIZE:
            raise ValueError("log records hold exactly one frame")
        self.entries.append((recv_ts, bytes(frame)))

    def to_bytes(self) -> bytes:
        return b"".join(_TS.pack(ts) + f for ts, f in self.entries)

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


def iter_records(path: Union[str, Path]) -> Iterator[tuple[int, bytes]]:
    """Raw (recv_ts, frame bytes) records; raises TruncatedRecord on a partial tail."""
    data = Path(path).read_bytes()
    offset = 0
    while offset < len(data):
        if len(data) - offset < RECORD_SIZE:
            raise TruncatedRecord(offset, f"{len(data) - offset} trailing bytes")
        (ts,) = _TS.unpack_from(data, offset)
        yield ts, data[offset + 8: offset + RECORD_SIZE]
        offset += RECORD_SIZE


def replay_log(path: Union[str, Path]) -> Iterator[tuple[int, AmplitudeOrder]]:
    offset = 0
    for ts, frame in iter_records(path):
        try:
            order = decode_frame(frame)
        except FrameError as exc:
            raise ChecksumFailure(offset, str(exc)) from None
        yield ts, order
        offset += RECORD_SIZE
