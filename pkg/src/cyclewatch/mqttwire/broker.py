"""Minimal MQTT broker: session registry, routing logic and an asyncio TCP server.

:meth:`Broker.handle` is the whole protocol state machine.  It takes one
inbound packet and returns the packets to send as ``(session, packet)``
actions, which keeps it testable without sockets.  :class:`BrokerServer`
wires it to TCP connections with bounded per-session outbound queues.

Inbound QoS 1 publishes are handed to the ``sink`` (the event-log bridge)
before the PUBACK action is produced, and the server forces a sink sync
before any PUBACK leaves the process.  A failure inside the sink therefore
drops the connection without acknowledging, and the publisher retransmits.
"""

from __future__ import annotations

import asyncio
import collections
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

from ..errors import InvalidFilter, MalformedPacket, ProtocolViolation
from .codec import (
    SUBACK_FAILURE,
    ConnAck,
    Connect,
    Disconnect,
    Packet,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    StreamDecoder,
    SubAck,
    Subscribe,
    encode_packet,
)
from .topics import topic_matches, validate_filter

log = logging.getLogger(__name__)

KEEPALIVE_GRACE = 1.5
DEFAULT_QUEUE_CAPACITY = 1024


class Sink(Protocol):
    def deliver(self, topic: str, payload: bytes) -> None: ...

    def sync(self) -> None: ...


def _now_ms() -> int:
    return int(time.monotonic() * 1000)


@dataclass(eq=False)
class Session:
    client_id: str = ""
    subscriptions: list[tuple[str, int]] = field(default_factory=list)
    inflight_qos1: dict[int, Publish] = field(default_factory=dict)
    last_activity_ms: int = 0
    keepalive_s: int = 0
    connected: bool = False
    closed: bool = False
    _pid: int = 0

    def next_packet_id(self) -> int:
        for _ in range(65535):
            self._pid = self._pid % 65535 + 1
            if self._pid not in self.inflight_qos1:
                return self._pid
        raise ProtocolViolation(f"{self.client_id}: no free packet ids")

    def keepalive_expired(self, now_ms: int) -> bool:
        if not self.keepalive_s:
            return False
        return now_ms - self.last_activity_ms > KEEPALIVE_GRACE * self.keepalive_s * 1000

    def subscription_qos(self, topic: str) -> int | None:
        best = None
        for flt, qos in self.subscriptions:
            if topic_matches(flt, topic) and (best is None or qos > best):
                best = qos
        return best


Action = tuple[Session, Packet]


class Broker:
    """Routing core shared by all connections."""

    def __init__(self, sink: Sink | None = None):
        self.sink = sink
        self.sessions: dict[str, Session] = {}
        self._lock = threading.RLock()
        self._anon = itertools.count(1)
        self.received_publishes = 0
        self.routed_messages = 0

    def handle(self, s: Session, p: Packet, now_ms: int | None = None) -> list[Action]:
        now_ms = _now_ms() if now_ms is None else now_ms
        if s.closed:
            raise ProtocolViolation("session already closed")
        s.last_activity_ms = now_ms

        if isinstance(p, Connect):
            if s.connected:
                raise ProtocolViolation("second CONNECT on one connection")
            return self._connect(s, p)
        if not s.connected:
            raise ProtocolViolation(f"{type(p).__name__} before CONNECT")

        if isinstance(p, Publish):
            return self._publish(s, p)
        if isinstance(p, PubAck):
            s.inflight_qos1.pop(p.packet_id, None)
            return []
        if isinstance(p, Subscribe):
            return self._subscribe(s, p)
        if isinstance(p, PingReq):
            return [(s, PingResp())]
        if isinstance(p, Disconnect):
            self.close(s)
            return []
        raise ProtocolViolation(f"client may not send {type(p).__name__}")

    def close(self, s: Session) -> None:
        with self._lock:
            s.closed = True
            s.connected = False
            if self.sessions.get(s.client_id) is s:
                del self.sessions[s.client_id]

    def _connect(self, s: Session, p: Connect) -> list[Action]:
        client_id = p.client_id or f"anon-{next(self._anon)}"
        with self._lock:
            old = self.sessions.get(client_id)
            if old is not None and old is not s:
                # takeover: clean session semantics, the old connection is dropped
                old.closed = True
                old.connected = False
            s.client_id = client_id
            s.keepalive_s = p.keepalive_s
            s.connected = True
            self.sessions[client_id] = s
        return [(s, ConnAck(0))]

    def _subscribe(self, s: Session, p: Subscribe) -> list[Action]:
        granted = []
        with self._lock:
            for flt, qos in p.filters:
                try:
                    validate_filter(flt)
                except InvalidFilter:
                    granted.append(SUBACK_FAILURE)
                    continue
                q = min(qos, 1)
                s.subscriptions = [(f, g) for f, g in s.subscriptions if f != flt]
                s.subscriptions.append((flt, q))
                granted.append(q)
        return [(s, SubAck(p.packet_id, tuple(granted)))]

    def _publish(self, s: Session, p: Publish) -> list[Action]:
        self.received_publishes += 1
        if self.sink is not None:
            self.sink.deliver(p.topic, p.payload)
        actions: list[Action] = []
        if p.qos == 1:
            actions.append((s, PubAck(p.packet_id)))
        with self._lock:
            targets = list(self.sessions.values())
        for target in targets:
            if not target.connected:
                continue
            sub_qos = target.subscription_qos(p.topic)
            if sub_qos is None:
                continue
            qos = min(p.qos, sub_qos)
            if qos:
                pid = target.next_packet_id()
                out = Publish(p.topic, p.payload, 1, pid)
                target.inflight_qos1[pid] = out
            else:
                out = Publish(p.topic, p.payload, 0)
            actions.append((target, out))
            self.routed_messages += 1
        return actions


def broker_handle(s: Session, p: Packet, registry: Broker) -> list[Action]:
    return registry.handle(s, p)


class _Outbound:
    """Bounded outbound queue for one connection.

    QoS 0 overflow drops the oldest queued QoS 0 message; anything else
    waits for space, which stalls the producing connection's reader.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.q: collections.deque[Packet] = collections.deque()
        self.dropped = 0
        self._ready = asyncio.Event()
        self._space = asyncio.Event()
        self._space.set()

    def put_lossy(self, pkt: Packet) -> None:
        if len(self.q) >= self.capacity:
            for i, queued in enumerate(self.q):
                if isinstance(queued, Publish) and queued.qos == 0:
                    del self.q[i]
                    self.dropped += 1
                    break
            else:
                self.dropped += 1
                return
        self.q.append(pkt)
        self._ready.set()

    async def put(self, pkt: Packet) -> None:
        while len(self.q) >= self.capacity:
            self._space.clear()
            await self._space.wait()
        self.q.append(pkt)
        self._ready.set()

    async def take_all(self) -> list[Packet]:
        while not self.q:
            self._ready.clear()
            await self._ready.wait()
        items = list(self.q)
        self.q.clear()
        self._space.set()
        return items


class _Conn:
    def __init__(self, session: Session, writer: asyncio.StreamWriter, capacity: int):
        self.session = session
        self.writer = writer
        self.out = _Outbound(capacity)
        self.writer_task: asyncio.Task | None = None


class BrokerServer:
    """asyncio TCP front end for :class:`Broker`."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 1883,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.broker = broker
        self.host = host
        self.port = port
        self.queue_capacity = queue_capacity
        self._server: asyncio.base_events.Server | None = None
        self._conns: dict[Session, _Conn] = {}
        self.malformed = 0
        self.violations = 0

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for conn in list(self._conns.values()):
            conn.writer.transport.abort()
            if conn.writer_task:
                conn.writer_task.cancel()
        self._conns.clear()

    def abort_all(self) -> None:
        """Drop every connection without flushing: simulates a crash."""
        for conn in list(self._conns.values()):
            conn.writer.transport.abort()

    @property
    def dropped_qos0(self) -> int:
        return sum(c.out.dropped for c in self._conns.values())

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session = Session(last_activity_ms=_now_ms())
        conn = _Conn(session, writer, self.queue_capacity)
        self._conns[session] = conn
        conn.writer_task = asyncio.create_task(self._drain(conn))
        decoder = StreamDecoder()
        try:
            while not session.closed:
                timeout = KEEPALIVE_GRACE * session.keepalive_s if session.keepalive_s else None
                try:
                    data = await asyncio.wait_for(reader.read(65536), timeout)
                except asyncio.TimeoutError:
                    log.info("keepalive expired for %s", session.client_id)
                    break
                if not data:
                    break
                try:
                    packets = decoder.feed(data)
                except MalformedPacket as exc:
                    self.malformed += 1
                    log.warning("malformed packet from %s: %s", session.client_id or "?", exc)
                    break
                actions: list[Action] = []
                for pkt in packets:
                    actions.extend(self.broker.handle(session, pkt))
                    if isinstance(pkt, Connect):
                        self._drop_taken_over(session)
                if self.broker.sink is not None and any(isinstance(a[1], PubAck) for a in actions):
                    self.broker.sink.sync()
                for target, pkt in actions:
                    tconn = self._conns.get(target)
                    if tconn is None or target.closed and target is not session:
                        continue
                    if isinstance(pkt, Publish) and pkt.qos == 0:
                        tconn.out.put_lossy(pkt)
                    else:
                        await tconn.out.put(pkt)
        except ProtocolViolation as exc:
            self.violations += 1
            log.warning("protocol violation from %s: %s", session.client_id or "?", exc)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except Exception:
            log.exception("connection handler failed; dropping %s without ack", session.client_id or "?")
            writer.transport.abort()
        finally:
            self.broker.close(session)
            self._conns.pop(session, None)
            # let already-queued acks go out before closing
            if not writer.transport.is_closing():
                try:
                    await asyncio.wait_for(self._flush_queue(conn), 1.0)
                except (asyncio.TimeoutError, ConnectionError):
                    pass
            if conn.writer_task:
                conn.writer_task.cancel()
            writer.close()

    def _drop_taken_over(self, current: Session) -> None:
        for sess, conn in list(self._conns.items()):
            if sess is not current and sess.closed:
                conn.writer.transport.abort()

    async def _flush_queue(self, conn: _Conn) -> None:
        while conn.out.q:
            await asyncio.sleep(0)
        await conn.writer.drain()

    async def _drain(self, conn: _Conn) -> None:
        try:
            while True:
                items = await conn.out.take_all()
                conn.writer.write(b"".join(encode_packet(p) for p in items))
                await conn.writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass


def run_broker(broker: Broker, host: str, port: int, stop: threading.Event | None = None,
               ready: threading.Event | None = None, server_box: list | None = None) -> None:
    """Blocking helper: serve until ``stop`` is set (or forever)."""

    async def main():
        server = BrokerServer(broker, host, port)
        await server.start()
        if server_box is not None:
            server_box.append(server)
        if ready is not None:
            ready.set()
        try:
            while stop is None or not stop.is_set():
                await asyncio.sleep(0.05)
        finally:
            await server.stop()

    asyncio.run(main())
