"""MQTT 3.1.1 subset: packet types, encoder and a total decoder.

Supported control packets: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK,
SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT.  Anything else (QoS 2
flow, UNSUBSCRIBE, reserved types 0 and 15) decodes as
:class:`MalformedPacket`; the connection must then be closed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

from ..errors import MalformedPacket, NeedMoreData, OversizePacket

MAX_REMAINING_LENGTH = 268_435_455
PROTOCOL_NAME = "MQTT"
PROTOCOL_LEVEL = 4

CONNECT, CONNACK, PUBLISH, PUBACK = 1, 2, 3, 4
SUBSCRIBE, SUBACK = 8, 9
PINGREQ, PINGRESP, DISCONNECT = 12, 13, 14

SUBACK_FAILURE = 0x80


@dataclass(frozen=True)
class Connect:
    client_id: str
    keepalive_s: int = 60


@dataclass(frozen=True)
class ConnAck:
    return_code: int = 0
    session_present: bool = False


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes
    qos: int = 0
    packet_id: int | None = None
    dup: bool = False

    def __post_init__(self):
        if self.qos not in (0, 1):
            raise ValueError("qos must be 0 or 1")
        if self.qos == 1 and not self.packet_id:
            raise ValueError("qos 1 publish needs a non-zero packet_id")
        if self.qos == 0 and self.packet_id is not None:
            raise ValueError("qos 0 publish carries no packet_id")
        if not self.topic or "+" in self.topic or "#" in self.topic or "\x00" in self.topic:
            raise ValueError(f"invalid publish topic {self.topic!r}")


@dataclass(frozen=True)
class PubAck:
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple((f, q) for f, q in self.filters))
        if not self.packet_id:
            raise ValueError("subscribe needs a non-zero packet_id")
        if not self.filters:
            raise ValueError("subscribe needs at least one filter")


@dataclass(frozen=True)
class SubAck:
    packet_id: int
    granted: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "granted", tuple(self.granted))


@dataclass(frozen=True)
class PingReq:
    pass


@dataclass(frozen=True)
class PingResp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = Union[Connect, ConnAck, Publish, PubAck, Subscribe, SubAck, PingReq, PingResp, Disconnect]


# --- encoding ----------------------------------------------------------------


def encode_remaining_length(n: int) -> bytes:
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise OversizePacket(f"remaining length {n} exceeds {MAX_REMAINING_LENGTH}")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n:
            digit |= 0x80
        out.append(digit)
        if not n:
            return bytes(out)


def _utf8(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise OversizePacket("string longer than 65535 bytes")
    return struct.pack(">H", len(b)) + b


def _frame(type_flags: int, body: bytes) -> bytes:
    return bytes([type_flags]) + encode_remaining_length(len(body)) + body


def encode_packet(p: Packet) -> bytes:
    if isinstance(p, Publish):
        flags = (0x08 if p.dup else 0) | (p.qos << 1)
        body = _utf8(p.topic)
        if p.qos:
            body += struct.pack(">H", p.packet_id)
        return _frame((PUBLISH << 4) | flags, body + bytes(p.payload))
    if isinstance(p, PubAck):
        return _frame(PUBACK << 4, struct.pack(">H", p.packet_id))
    if isinstance(p, Connect):
        body = _utf8(PROTOCOL_NAME) + bytes([PROTOCOL_LEVEL, 0x02]) + struct.pack(">H", p.keepalive_s)
        return _frame(CONNECT << 4, body + _utf8(p.client_id))
    if isinstance(p, ConnAck):
        return _frame(CONNACK << 4, bytes([1 if p.session_present else 0, p.return_code]))
    if isinstance(p, Subscribe):
        body = struct.pack(">H", p.packet_id)
        for flt, qos in p.filters:
            body += _utf8(flt) + bytes([qos])
        return _frame((SUBSCRIBE << 4) | 0x02, body)
    if isinstance(p, SubAck):
        return _frame(SUBACK << 4, struct.pack(">H", p.packet_id) + bytes(p.granted))
    if isinstance(p, PingReq):
        return b"\xc0\x00"
    if isinstance(p, PingResp):
        return b"\xd0\x00"
    if isinstance(p, Disconnect):
        return b"\xe0\x00"
    raise TypeError(f"not an MQTT packet: {p!r}")


# --- decoding ----------------------------------------------------------------

_FIXED_FLAGS = {
    CONNECT: 0, CONNACK: 0, PUBACK: 0, SUBSCRIBE: 2, SUBACK: 0,
    PINGREQ: 0, PINGRESP: 0, DISCONNECT: 0,
}


def decode_packet(buf: bytes | bytearray | memoryview) -> tuple[Packet, int]:
    """Decode one packet from the start of ``buf``.

    Returns ``(packet, consumed)``.  Raises :class:`NeedMoreData` when
    ``buf`` is a strict prefix of a packet whose fixed header is valid so
    far, :class:`MalformedPacket` otherwise.  Never reads past ``consumed``.
    """
    mv = memoryview(buf)
    if len(mv) < 1:
        raise NeedMoreData()
    first = mv[0]
    ptype, flags = first >> 4, first & 0x0F
    if ptype == PUBLISH:
        if (flags >> 1) & 0x03 == 3:
            raise MalformedPacket("publish with qos 3")
    elif ptype in _FIXED_FLAGS:
        if flags != _FIXED_FLAGS[ptype]:
            raise MalformedPacket(f"bad flags {flags:#x} for packet type {ptype}")
    else:
        raise MalformedPacket(f"unsupported packet type {ptype}")

    remaining = 0
    mult = 1
    pos = 1
    while True:
        if pos > 4:
            raise MalformedPacket("remaining length longer than 4 bytes")
        if pos >= len(mv):
            raise NeedMoreData()
        b = mv[pos]
        remaining += (b & 0x7F) * mult
        mult *= 128
        pos += 1
        if not b & 0x80:
            break
    end = pos + remaining
    if len(mv) < end:
        raise NeedMoreData()
    body = bytes(mv[pos:end])
    return _decode_body(ptype, flags, body), end


class _Reader:
    __slots__ = ("b", "i")

    def __init__(self, b: bytes):
        self.b = b
        self.i = 0

    def need(self, n: int) -> None:
        if self.i + n > len(self.b):
            raise MalformedPacket("packet body shorter than its fields")

    def u8(self) -> int:
        self.need(1)
        v = self.b[self.i]
        self.i += 1
        return v

    def u16(self) -> int:
        self.need(2)
        (v,) = struct.unpack_from(">H", self.b, self.i)
        self.i += 2
        return v

    def raw(self, n: int) -> bytes:
        self.need(n)
        v = self.b[self.i:self.i + n]
        self.i += n
        return v

    def string(self) -> str:
        raw = self.raw(self.u16())
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacket("invalid UTF-8 string") from exc
        if "\x00" in s:
            raise MalformedPacket("U+0000 in string")
        return s

    def rest(self) -> bytes:
        v = self.b[self.i:]
        self.i = len(self.b)
        return v

    def done(self) -> None:
        if self.i != len(self.b):
            raise MalformedPacket("trailing bytes in packet body")


def _decode_body(ptype: int, flags: int, body: bytes) -> Packet:
    r = _Reader(body)
    if ptype == PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos == 2:
            raise MalformedPacket("qos 2 not supported")
        topic = r.string()
        if not topic or "+" in topic or "#" in topic:
            raise MalformedPacket(f"invalid publish topic {topic!r}")
        packet_id = None
        if qos:
            packet_id = r.u16()
            if packet_id == 0:
                raise MalformedPacket("qos 1 publish with packet id 0")
        return Publish(topic, r.rest(), qos, packet_id, dup=bool(flags & 0x08))

    if ptype == PUBACK:
        pid = r.u16()
        r.done()
        return PubAck(pid)

    if ptype == CONNECT:
        if r.string() != PROTOCOL_NAME:
            raise MalformedPacket("unknown protocol name")
        level = r.u8()
        if level != PROTOCOL_LEVEL:
            raise MalformedPacket(f"unsupported protocol level {level}")
        cflags = r.u8()
        if cflags & 0x01:
            raise MalformedPacket("reserved connect flag set")
        will = cflags & 0x04
        will_qos = (cflags >> 3) & 0x03
        if not will and (will_qos or cflags & 0x20):
            raise MalformedPacket("will qos/retain without will flag")
        if will_qos == 3:
            raise MalformedPacket("will qos 3")
        if cflags & 0x40 and not cflags & 0x80:
            raise MalformedPacket("password without username")
        keepalive = r.u16()
        client_id = r.string()
        # will, username, password are parsed for framing and then dropped
        if will:
            r.string()
            r.raw(r.u16())
        if cflags & 0x80:
            r.string()
        if cflags & 0x40:
            r.raw(r.u16())
        r.done()
        return Connect(client_id, keepalive)

    if ptype == CONNACK:
        ack_flags = r.u8()
        if ack_flags & 0xFE:
            raise MalformedPacket("reserved connack flags set")
        rc = r.u8()
        r.done()
        return ConnAck(rc, bool(ack_flags & 1))

    if ptype == SUBSCRIBE:
        pid = r.u16()
        if pid == 0:
            raise MalformedPacket("subscribe with packet id 0")
        filters = []
        while r.i < len(body):
            flt = r.string()
            if not flt:
                raise MalformedPacket("empty topic filter")
            q = r.u8()
            if q > 2:
                raise MalformedPacket("reserved bits in requested qos")
            filters.append((flt, q))
        if not filters:
            raise MalformedPacket("subscribe without filters")
        return Subscribe(pid, tuple(filters))

    if ptype == SUBACK:
        pid = r.u16()
        granted = r.rest()
        if any(g not in (0, 1, 2, SUBACK_FAILURE) for g in granted):
            raise MalformedPacket("invalid suback return code")
        return SubAck(pid, tuple(granted))

    if body:
        raise MalformedPacket("non-empty body for header-only packet")
    return {PINGREQ: PingReq, PINGRESP: PingResp, DISCONNECT: Disconnect}[ptype]()


class StreamDecoder:
    """Incremental decoder: feed arbitrary chunks, get whole packets back."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Packet]:
        self._buf += data
        out: list[Packet] = []
        pos = 0
        buf = bytes(self._buf)
        while True:
            try:
                pkt, used = decode_packet(memoryview(buf)[pos:])
            except NeedMoreData:
                break
            out.append(pkt)
            pos += used
        if pos:
            del self._buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)
