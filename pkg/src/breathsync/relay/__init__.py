from .broker import (
    Broker,
    DuplicateParticipant,
    NotAMember,
    RelayError,
    RoutingMode,
    SessionFull,
    UnknownSession,
    recipients_for,
)
from .log import ChecksumFailure, SessionLog, TruncatedRecord, iter_records, replay_log

__all__ = [
    "Broker",
    "ChecksumFailure",
    "DuplicateParticipant",
    "NotAMember",
    "RelayError",
    "RoutingMode",
    "SessionFull",
    "SessionLog",
    "TruncatedRecord",
    "UnknownSession",
    "iter_records",
    "recipients_for",
    "replay_log",
]
