"""Exception hierarchy shared by all cyclewatch modules.

Each exception carries an ``exit_code`` so the CLI can map failures onto
its documented process exit codes (2 config, 3 network, 4 storage,
5 corruption).
"""

from __future__ import annotations


class CycleWatchError(Exception):
    exit_code = 1


# --- model -----------------------------------------------------------------


class UnknownParameter(CycleWatchError, KeyError):
    """A (source_name, device_class) pair is not in the catalog.

    Samples raising this must be quarantined by the caller, not dropped.
    """

    def __str__(self) -> str:  # KeyError repr()s its argument otherwise
        return Exception.__str__(self)


class CatalogError(CycleWatchError, ValueError):
    exit_code = 2


class DegenerateCycle(CycleWatchError, ValueError):
    pass


# --- mqttwire --------------------------------------------------------------


class MqttError(CycleWatchError):
    exit_code = 3


class MalformedPacket(MqttError, ValueError):
    pass


class NeedMoreData(MqttError):
    """Buffer holds a strict prefix of a packet. Resumable, not a failure."""


class OversizePacket(MqttError, ValueError):
    pass


class InvalidFilter(MqttError, ValueError):
    pass


class ProtocolViolation(MqttError):
    pass


class PublishBackpressure(MqttError):
    pass


# --- simulator -------------------------------------------------------------


class ParamUnavailable(CycleWatchError, LookupError):
    pass


# --- eventlog --------------------------------------------------------------


class StorageError(CycleWatchError):
    exit_code = 4


class PayloadTooLarge(StorageError, ValueError):
    pass


class StorageFull(StorageError):
    pass


class OffsetOutOfRange(StorageError, IndexError):
    pass


class WriterLocked(StorageError):
    pass


class CorruptRecord(StorageError):
    exit_code = 5

    def __init__(self, topic: str, offset: int, reason: str = "crc mismatch"):
        super().__init__(f"{topic}@{offset}: {reason}")
        self.topic = topic
        self.offset = offset


class UnrecoverableSegment(StorageError):
    exit_code = 5


# --- columnstore -----------------------------------------------------------


class NonFiniteValue(CycleWatchError, ValueError):
    pass


class CorruptChunk(StorageError):
    exit_code = 5


class CorruptStore(StorageError):
    exit_code = 5


class SchemaMismatch(StorageError, ValueError):
    pass


class UnknownParam(CycleWatchError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class EmptyStore(StorageError):
    pass


# --- analytics -------------------------------------------------------------


class NotWarmedUp(CycleWatchError):
    pass


class InsufficientHistory(CycleWatchError, ValueError):
    pass


class NoOverlap(CycleWatchError, ValueError):
    pass


class LengthMismatch(CycleWatchError, ValueError):
    pass


class NonFiniteObservation(CycleWatchError, ValueError):
    pass


# --- cli -------------------------------------------------------------------


class ConfigInvalid(CycleWatchError, ValueError):
    exit_code = 2


class PortInUse(CycleWatchError):
    exit_code = 3


class UnknownFormat(CycleWatchError, ValueError):
    exit_code = 2


def exit_code_for(exc: BaseException) -> int:
    """CLI exit status for an exception: 2 config, 3 network, 4 storage, 5 corruption."""
    if isinstance(exc, CycleWatchError):
        return exc.exit_code
    if isinstance(exc, (ConnectionError, TimeoutError)):
        return 3
    if isinstance(exc, OSError):
        return 4
    return 1
