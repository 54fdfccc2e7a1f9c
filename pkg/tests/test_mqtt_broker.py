import asyncio
import random
import threading
import time

import pytest

from cyclewatch.errors import ProtocolViolation
from cyclewatch.mqttwire import (
    Broker, BrokerServer, Connect, Disconnect, MqttClient, PingReq, PingResp, PubAck, Publish,
    Session, SubAck, Subscribe, broker_handle,
)


class ListSink:
    def __init__(self, fail_after=None):
        self.payloads = []
        self.syncs = 0
        self.fail_after = fail_after

    def deliver(self, topic, payload):
        self.payloads.append(payload)
        if self.fail_after is not None and len(self.payloads) >= self.fail_after:
            self.fail_after = None
            raise RuntimeError("injected crash after append, before PUBACK")

    def sync(self):
        self.syncs += 1


def _connected(broker, cid, *filters):
    s = Session()
    broker.handle(s, Connect(cid, 60))
    if filters:
        broker.handle(s, Subscribe(1, tuple((f, q) for f, q in filters)))
    return s


def test_fan_out_qos1_publisher_qos0_subscribers():
    b = Broker()
    pub = _connected(b, "pub")
    s1 = _connected(b, "s1", ("flatform/+/energy_analyzer/data", 0))
    s2 = _connected(b, "s2", ("flatform/#", 0))
    _connected(b, "s3", ("other/#", 1))
    actions = broker_handle(pub, Publish("flatform/c1/energy_analyzer/data", b"x", 1, 9), b)
    assert actions[0] == (pub, PubAck(9))
    rest = {(t.client_id, p) for t, p in actions[1:]}
    assert rest == {("s1", Publish("flatform/c1/energy_analyzer/data", b"x", 0)),
                    ("s2", Publish("flatform/c1/energy_analyzer/data", b"x", 0))}


def test_publish_without_subscribers_only_acks():
    b = Broker()
    pub = _connected(b, "pub")
    assert b.handle(pub, Publish("a/b", b"x", 1, 3)) == [(pub, PubAck(3))]


def test_qos_is_min_of_publish_and_subscription():
    b = Broker()
    pub = _connected(b, "pub")
    sub = _connected(b, "sub", ("a/#", 1))
    (_, out) = b.handle(pub, Publish("a/b", b"x", 0))[0]
    assert out.qos == 0
    acts = b.handle(pub, Publish("a/b", b"y", 1, 5))
    out = acts[1][1]
    assert out.qos == 1 and out.packet_id in sub.inflight_qos1
    b.handle(sub, PubAck(out.packet_id))
    assert not sub.inflight_qos1


def test_subscribe_grants_and_rejects():
    b = Broker()
    s = _connected(b, "s")
    [(_, ack)] = b.handle(s, Subscribe(4, (("a/+", 2), ("bad#", 0), ("x", 0))))
    assert ack == SubAck(4, (1, 0x80, 0))


def test_publish_before_connect_is_violation():
    b = Broker()
    with pytest.raises(ProtocolViolation):
        b.handle(Session(), Publish("a", b"", 0))


def test_second_connect_is_violation():
    b = Broker()
    s = _connected(b, "c")
    with pytest.raises(ProtocolViolation):
        b.handle(s, Connect("c"))


def test_ping_and_disconnect():
    b = Broker()
    s = _connected(b, "c")
    assert b.handle(s, PingReq()) == [(s, PingResp())]
    assert b.handle(s, Disconnect()) == []
    assert "c" not in b.sessions and s.closed


def test_sink_sees_payload_before_puback():
    sink = ListSink()
    b = Broker(sink)
    s = _connected(b, "c")
    b.handle(s, Publish("a", b"p1", 1, 1))
    assert sink.payloads == [b"p1"]
    sink.fail_after = 2
    with pytest.raises(RuntimeError):
        b.handle(s, Publish("a", b"p2", 1, 2))
    assert sink.payloads == [b"p1", b"p2"]


def test_keepalive_expiry_rule():
    s = Session(keepalive_s=10, last_activity_ms=0)
    assert not s.keepalive_expired(15_000)
    assert s.keepalive_expired(15_001)


def test_broker_never_alters_payload_bytes():
    rng = random.Random(0)
    b = Broker()
    pub = _connected(b, "pub")
    sub = _connected(b, "sub", ("#", 0))
    for _ in range(200):
        payload = rng.randbytes(rng.randint(0, 2000))
        acts = b.handle(pub, Publish("t/x", payload, 0))
        assert [p.payload for t, p in acts if t is sub] == [payload]


# --- over TCP ---------------------------------------------------------------


class ServerThread:
    def __init__(self, broker, port=0):
        self.broker = broker
        self.port = port
        self.ready = threading.Event()
        self.stop_flag = threading.Event()
        self.server = None
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        async def main():
            self.server = BrokerServer(self.broker, "127.0.0.1", self.port)
            self.port = await self.server.start()
            self.ready.set()
            while not self.stop_flag.is_set():
                await asyncio.sleep(0.01)
            await self.server.stop()
        asyncio.run(main())

    def __enter__(self):
        self.thread.start()
        assert self.ready.wait(5)
        return self

    def __exit__(self, *exc):
        self.stop_flag.set()
        self.thread.join(5)


def test_hash_subscriber_receives_exactly_the_published_set():
    rng = random.Random(42)
    with ServerThread(Broker()) as srv:
        sub = MqttClient("sub", port=srv.port)
        sub.connect()
        assert sub.subscribe([("#", 1)]) == (1,)
        pub = MqttClient("pub", port=srv.port)
        pub.connect()
        sent = set()
        for i in range(1000):
            topic = f"flatform/cell{rng.randint(0, 9):02d}/{rng.choice(['robot6ax', 'energy_analyzer'])}/data"
            payload = f"{i}:{rng.random()}".encode()
            sent.add((topic, payload))
            pub.publish(topic, payload, qos=rng.randint(0, 1))
        assert pub.wait_for_acks(10)
        got = set()
        deadline = time.time() + 10
        while len(got) < len(sent) and time.time() < deadline:
            try:
                m = sub.messages.get(timeout=0.5)
            except Exception:
                continue
            got.add((m.topic, m.payload))
        pub.disconnect()
        sub.disconnect()
    assert got == sent


def test_retransmit_after_crash_gives_at_least_once():
    sink = ListSink(fail_after=150)
    broker = Broker(sink)
    with ServerThread(broker) as srv:
        pub = MqttClient("pub", port=srv.port, max_inflight=64)
        pub.connect()
        sent = [f"msg-{i}".encode() for i in range(400)]
        for p in sent:
            pub.publish("flatform/c1/robot6ax/data", p, qos=1)
        assert pub.wait_for_acks(20)
        pub.disconnect()
    assert set(sink.payloads) == set(sent)
    assert len(sink.payloads) >= len(sent)
    assert pub.retransmitted > 0 and pub.reconnects >= 1


def test_malformed_bytes_close_connection():
    import socket
    with ServerThread(Broker()) as srv:
        s = socket.create_connection(("127.0.0.1", srv.port))
        s.sendall(bytes.fromhex("F0 00"))
        s.settimeout(5)
        assert s.recv(10) == b""
        s.close()
        time.sleep(0.1)
        assert srv.server.malformed == 1
