"""Fixed-size amplitude-order frames.

Layout (13 bytes, big-endian)::

    [0]     0xB5 sync
    [1]     0x01 version
    [2]     source_id
    [3:5]   seq (wraps at 2**16)
    [5:9]   timestamp_ms (sender clock)
    [9]     pattern
    [10]    level, 0..100
    [11]    channel mask, low 4 bits
    [12]    XOR of bytes 0..11
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import reduce
from operator import xor
from typing import Iterator, Optional

SYNC = 0xB5
VERSION = 0x01
FRAME_SIZE = 13
SEQ_MODULUS = 1 << 16

_BODY = struct.Struct(">BBBHIBBB")


class FrameError(ValueError):
    """Base class for frame encode/decode failures."""


class EncodeError(FrameError):
    pass


class BadSync(FrameError):
    pass


class BadVersion(FrameError):
    pass


class BadChecksum(FrameError):
    pass


class FieldOutOfRange(FrameError):
    pass


class BadLength(FrameError):
    pass


@dataclass(frozen=True)
class AmplitudeOrder:
    source_id: int
    seq: int
    timestamp_ms: int
    pattern: int
    level: int
    channel_mask: int = 0b1111


def _checksum(body: bytes) -> int:
    return reduce(xor, body, 0)


def _range_problem(order: AmplitudeOrder) -> Optional[str]:
    if order.level > 100:
        return f"level {order.level} > 100"
    if order.pattern > 2:
        return f"pattern {order.pattern} > 2"
    if order.channel_mask >= 16:
        return f"channel_mask {order.channel_mask:#x} >= 16"
    return None


def encode_frame(order: AmplitudeOrder) -> bytes:
    limits = (
        ("source_id", order.source_id, 0xFF),
        ("seq", order.seq, 0xFFFF),
        ("timestamp_ms", order.timestamp_ms, 0xFFFFFFFF),
        ("pattern", order.pattern, 0xFF),
        ("level", order.level, 0xFF),
        ("channel_mask", order.channel_mask, 0xFF),
    )
    for name, value, hi in limits:
        if not isinstance(value, int) or not 0 <= value <= hi:
            raise EncodeError(f"{name}={value!r} does not fit its field")
    problem = _range_problem(order)
    if problem:
        raise EncodeError(problem)
    body = _BODY.pack(
        SYNC, VERSION, order.source_id, order.seq, order.timestamp_ms,
        order.pattern, order.level, order.channel_mask,
    )
    return body + bytes([_checksum(body)])


def decode_frame(frame: bytes) -> AmplitudeOrder:
    if len(frame) != FRAME_SIZE:
        raise BadLength(f"frame is {len(frame)} bytes, expected {FRAME_SIZE}")
    if frame[0] != SYNC:
        raise BadSync(f"sync byte {frame[0]:#04x}")
    if frame[1] != VERSION:
        raise BadVersion(f"version {frame[1]:#04x}")
    if _checksum(frame[:12]) != frame[12]:
        raise BadChecksum(f"checksum {frame[12]:#04x}, computed {_checksum(frame[:12]):#04x}")
    _, _, source_id, seq, ts, pattern, level, mask = _BODY.unpack(frame[:12])
    order = AmplitudeOrder(source_id, seq, ts, pattern, level, mask)
    problem = _range_problem(order)
    if problem:
        raise FieldOutOfRange(problem)
    return order


class Disposition(enum.Enum):
    IN_ORDER = "in_order"
    FIRST = "first"
    GAP = "gap"
    DUPLICATE = "duplicate"
    STALE = "stale"


@dataclass(frozen=True)
class FrameGapReport:
    source_id: int
    expected_seq: int
    received_seq: int
    gap_size: int


class SequenceTracker:
    """Per-source sequence bookkeeping with 16-bit wraparound.

    Forward jumps of less than half the sequence space are gaps; anything
    else that is not the next number is a duplicate or an older frame and
    should be dropped.
    """

    def __init__(self):
        self.last: dict[int, int] = {}
        self.counts = {d: 0 for d in Disposition}

    def observe(self, source_id: int, seq: int) -> tuple[Disposition, Optional[FrameGapReport]]:
        prev = self.last.get(source_id)
        report = None
        if prev is None:
            disposition = Disposition.FIRST
        else:
            delta = (seq - prev) % SEQ_MODULUS
            if delta == 0:
                disposition = Disposition.DUPLICATE
            elif delta == 1:
                disposition = Disposition.IN_ORDER
            elif delta < SEQ_MODULUS // 2:
                disposition = Disposition.GAP
                expected = (prev + 1) % SEQ_MODULUS
                report = FrameGapReport(source_id, expected, seq, delta - 1)
            else:
                disposition = Disposition.STALE
        if disposition not in (Disposition.DUPLICATE, Disposition.STALE):
            self.last[source_id] = seq
        self.counts[disposition] += 1
        return disposition, report


def track_sequence(source_id: int, seq: int, state: SequenceTracker) -> Optional[FrameGapReport]:
    return state.observe(source_id, seq)[1]


class FrameReader:
    """Reassembles frames from an arbitrary chunked byte stream.

    Bytes before a sync byte are skipped; a 13-byte window that fails to
    decode is discarded one byte at a time so a misaligned stream resyncs.
    """

    def __init__(self):
        self._buf = bytearray()
        self.skipped_bytes = 0
        self.bad_frames = 0

    def feed(self, data: bytes) -> Iterator[AmplitudeOrder]:
        self._buf.extend(data)
        while True:
            start = self._buf.find(SYNC)
            if start < 0:
                self.skipped_bytes += len(self._buf)
                self._buf.clear()
                return
            if start:
                self.skipped_bytes += start
                del self._buf[:start]
            if len(self._buf) < FRAME_SIZE:
                return
            try:
                order = decode_frame(bytes(self._buf[:FRAME_SIZE]))
            except FrameError:
                self.bad_frames += 1
                self.skipped_bytes += 1
                del self._buf[:1]
                continue
            del self._buf[:FRAME_SIZE]
            yield order
