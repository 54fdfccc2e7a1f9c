"""Blocking MQTT client with a QoS 1 in-flight window and retransmission.

The simulator publishes through this client.  Unacknowledged QoS 1
messages are kept in order; after a reconnect they are re-sent with the
DUP flag, which gives at-least-once delivery across broker crashes.
"""

from __future__ import annotations

import collections
import logging
import queue
import socket
import threading
import time
from typing import Callable

from ..errors import MalformedPacket, MqttError, PublishBackpressure
from .codec import (
    ConnAck,
    Connect,
    Disconnect,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    StreamDecoder,
    SubAck,
    Subscribe,
    encode_packet,
)

log = logging.getLogger(__name__)


class MqttClient:
    def __init__(
        self,
        client_id: str,
        host: str = "127.0.0.1",
        port: int = 1883,
        keepalive_s: int = 60,
        max_inflight: int = 512,
        reconnect: bool = True,
        connect_timeout_s: float = 5.0,
        on_message: Callable[[Publish], None] | None = None,
    ):
        self.client_id = client_id
        self.host = host
        self.port = port
        self.keepalive_s = keepalive_s
        self.max_inflight = max_inflight
        self.reconnect = reconnect
        self.connect_timeout_s = connect_timeout_s
        self.on_message = on_message
        self.messages: queue.Queue[Publish] = queue.Queue()

        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._state = threading.Condition()
        self._inflight: collections.OrderedDict[int, Publish] = collections.OrderedDict()
        self._pid = 0
        self._connack = threading.Event()
        self._subacks: dict[int, SubAck] = {}
        self._reader: threading.Thread | None = None
        self._closing = False
        self._generation = 0

        self.published = 0
        self.acked = 0
        self.retransmitted = 0
        self.reconnects = 0

    # --- connection ---------------------------------------------------------

    def connect(self) -> None:
        self._closing = False
        self._open()

    def _open(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=self.connect_timeout_s)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self._connack.clear()
        with self._state:
            self._generation += 1
            gen = self._generation
        self._reader = threading.Thread(target=self._read_loop, args=(sock, gen), daemon=True,
                                        name=f"mqtt-reader-{self.client_id}")
        self._reader.start()
        sock.sendall(encode_packet(Connect(self.client_id, self.keepalive_s)))
        if not self._connack.wait(self.connect_timeout_s):
            sock.close()
            raise MqttError("no CONNACK from broker")
        # resend everything still unacknowledged, oldest first, before anyone
        # else may use the new socket
        with self._send_lock:
            with self._state:
                pending = list(self._inflight.values())
            for pkt in pending:
                sock.sendall(encode_packet(Publish(pkt.topic, pkt.payload, 1, pkt.packet_id, dup=True)))
                self.retransmitted += 1
            self._sock = sock

    def _reopen(self) -> None:
        delay = 0.05
        deadline = time.monotonic() + 30.0
        while not self._closing:
            try:
                self._open()
                self.reconnects += 1
                return
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(delay)
                delay = min(delay * 2, 1.0)

    def disconnect(self, timeout: float | None = 10.0) -> None:
        if timeout is not None:
            self.wait_for_acks(timeout)
        self._closing = True
        try:
            self._send(Disconnect())
        except OSError:
            pass
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        if self._reader is not None:
            self._reader.join(timeout=2.0)

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.disconnect()

    # --- sending --------------------------------------------------------------

    def _send(self, pkt) -> None:
        data = encode_packet(pkt)
        with self._send_lock:
            sock = self._sock
            if sock is None:
                raise OSError("not connected")
            sock.sendall(data)

    def publish(self, topic: str, payload: bytes, qos: int = 1, timeout: float | None = None) -> int | None:
        """Publish one message.

        For QoS 1 this blocks while the in-flight window is full (publisher
        backpressure); ``timeout`` turns the wait into
        :class:`PublishBackpressure`.
        """
        if qos == 0:
            self._send_retrying(Publish(topic, payload, 0))
            self.published += 1
            return None
        with self._state:
            if not self._state.wait_for(lambda: len(self._inflight) < self.max_inflight, timeout):
                raise PublishBackpressure(f"{self.max_inflight} messages in flight")
            pid = self._next_pid()
            pkt = Publish(topic, payload, 1, pid)
            self._inflight[pid] = pkt
        self._send_retrying(pkt)
        self.published += 1
        return pid

    def _send_retrying(self, pkt) -> None:
        dead = self._sock
        try:
            self._send(pkt)
        except OSError:
            if not self.reconnect or self._closing:
                raise
            # the reader thread notices the dead socket and reconnects; inflight
            # messages (including this one) are re-sent right after CONNACK
            self._wait_reconnected(dead)
            if pkt.qos == 0:
                self._send(pkt)

    def _wait_reconnected(self, dead, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        while self._sock is None or self._sock is dead:
            if time.monotonic() > deadline:
                raise MqttError("reconnect timed out")
            time.sleep(0.01)

    def _next_pid(self) -> int:
        for _ in range(65535):
            self._pid = self._pid % 65535 + 1
            if self._pid not in self._inflight:
                return self._pid
        raise PublishBackpressure("packet id space exhausted")

    def subscribe(self, filters: list[tuple[str, int]], timeout: float = 5.0) -> tuple[int, ...]:
        with self._state:
            pid = self._next_pid()
        self._send(Subscribe(pid, tuple(filters)))
        deadline = time.monotonic() + timeout
        with self._state:
            while pid not in self._subacks:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise MqttError("no SUBACK from broker")
                self._state.wait(left)
            return self._subacks.pop(pid).granted

    def ping(self) -> None:
        self._send(PingReq())

    def wait_for_acks(self, timeout: float | None = None) -> bool:
        with self._state:
            return self._state.wait_for(lambda: not self._inflight, timeout)

    @property
    def inflight(self) -> int:
        return len(self._inflight)

    # --- receiving ------------------------------------------------------------

    def _read_loop(self, sock: socket.socket, gen: int) -> None:
        decoder = StreamDecoder()
        sock.settimeout(max(self.keepalive_s / 2, 0.5) if self.keepalive_s else None)
        try:
            while True:
                try:
                    data = sock.recv(65536)
                except socket.timeout:
                    self._send(PingReq())
                    continue
                if not data:
                    break
                for pkt in decoder.feed(data):
                    self._dispatch(pkt)
        except (OSError, MalformedPacket) as exc:
            log.debug("reader for %s stopped: %s", self.client_id, exc)
        with self._send_lock:
            if self._sock is sock:
                self._sock = None
        sock.close()
        if self._closing or gen != self._generation:
            return
        if self.reconnect:
            log.info("connection lost for %s; reconnecting", self.client_id)
            try:
                self._reopen()
            except OSError:
                log.error("reconnect failed for %s", self.client_id)

    def _dispatch(self, pkt) -> None:
        if isinstance(pkt, PubAck):
            with self._state:
                if self._inflight.pop(pkt.packet_id, None) is not None:
                    self.acked += 1
                self._state.notify_all()
        elif isinstance(pkt, Publish):
            if pkt.qos == 1:
                self._send(PubAck(pkt.packet_id))
            if self.on_message is not None:
                self.on_message(pkt)
            else:
                self.messages.put(pkt)
        elif isinstance(pkt, ConnAck):
            if pkt.return_code != 0:
                log.error("broker refused connection: rc=%d", pkt.return_code)
            self._connack.set()
        elif isinstance(pkt, SubAck):
            with self._state:
                self._subacks[pkt.packet_id] = pkt
                self._state.notify_all()
        elif isinstance(pkt, PingResp):
            pass
