import random

import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from cyclewatch.errors import MalformedPacket, NeedMoreData, OversizePacket
from cyclewatch.mqttwire import (
    ConnAck, Connect, PingReq, PubAck, Publish, StreamDecoder, SubAck, Subscribe,
    decode_packet, encode_packet, encode_remaining_length,
)

from packetgen import packets, random_packet


def test_publish_qos0_bytes():
    assert encode_packet(Publish("a/b", b"hi", 0)).hex(" ").upper() == "30 07 00 03 61 2F 62 68 69"


def test_pingreq_bytes():
    assert encode_packet(PingReq()) == bytes.fromhex("C000")


def _base128_oracle(n):
    # digits least-significant first, continuation bit on all but the last
    digits = []
    while True:
        digits.append(n % 128)
        n //= 128
        if n == 0:
            break
    return bytes([d | 0x80 for d in digits[:-1]] + [digits[-1]])


@pytest.mark.parametrize("n, expected", [(0, "00"), (127, "7F"), (128, "8001"), (321, "C102"),
                                         (16383, "FF7F"), (16384, "808001"), (268_435_455, "FFFFFF7F")])
def test_remaining_length_encoding(n, expected):
    assert encode_remaining_length(n) == bytes.fromhex(expected)
    assert _base128_oracle(n) == bytes.fromhex(expected)


def test_remaining_length_too_large():
    with pytest.raises(OversizePacket):
        encode_remaining_length(268_435_456)


def test_publish_round_trip_from_hand_bytes():
    pkt, used = decode_packet(bytes.fromhex("30 07 00 03 61 2F 62 68 69"))
    assert pkt == Publish("a/b", b"hi", 0) and used == 9


def test_truncated_needs_more_data():
    with pytest.raises(NeedMoreData):
        decode_packet(bytes.fromhex("30 07 00 03"))


def test_reserved_type_15_is_malformed():
    with pytest.raises(MalformedPacket):
        decode_packet(bytes.fromhex("F0 00"))


@pytest.mark.parametrize("raw", [
    "00 00",                     # reserved type 0
    "36 05 00 01 61 00 01",      # qos 3
    "34 05 00 01 61 00 01",      # qos 2 unsupported
    "32 05 00 01 61 00 00",      # qos 1 with packet id 0
    "30 04 00 01 2B 41",         # '+' in publish topic
    "82 03 00 01 00",            # subscribe without filters
    "80 05 00 01 00 01 61",      # subscribe with wrong flags
    "C0 01 00",                  # pingreq with body
    "40 03 00 01 00",            # puback with trailing byte
    "30 FF FF FF FF 01",         # 5-byte remaining length
    "10 0C 00 04 4D 51 49 54 04 02 00 3C 00 00",  # wrong protocol name
    "30 05 00 02 C3 28 41",      # invalid utf-8 topic
])
def test_malformed_inputs(raw):
    with pytest.raises(MalformedPacket):
        decode_packet(bytes.fromhex(raw))


def test_connect_with_credentials_is_accepted():
    # username + password, as a stock client would send
    body = b"\x00\x04MQTT\x04\xc2\x00\x3c" + b"\x00\x03cid" + b"\x00\x01u" + b"\x00\x02pw"
    pkt, _ = decode_packet(bytes([0x10, len(body)]) + body)
    assert pkt == Connect("cid", 60)


@settings(max_examples=500, deadline=None)
@given(packets)
def test_round_trip(p):
    raw = encode_packet(p)
    q, used = decode_packet(raw + b"\xff\xff")  # trailing junk must not be consumed
    assert q == p and used == len(raw)


@settings(max_examples=200, deadline=None)
@given(st.lists(packets, min_size=1, max_size=8), st.data())
def test_rechunked_stream_decodes_identically(pkts, data):
    stream = b"".join(encode_packet(p) for p in pkts)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=10)))
    dec = StreamDecoder()
    out = []
    prev = 0
    for c in cuts + [len(stream)]:
        out.extend(dec.feed(stream[prev:c]))
        prev = c
    assert out == pkts and dec.buffered == 0


def test_byte_by_byte_equals_whole():
    rng = random.Random(5)
    pkts = [random_packet(rng) for _ in range(200)]
    stream = b"".join(encode_packet(p) for p in pkts)
    whole = StreamDecoder().feed(stream)
    dec = StreamDecoder()
    single = []
    for i in range(len(stream)):
        single.extend(dec.feed(stream[i:i + 1]))
    assert whole == single == pkts


@settings(max_examples=2000, deadline=None)
@given(st.binary(max_size=64))
def test_decoder_is_total(buf):
    try:
        pkt, used = decode_packet(buf)
    except (MalformedPacket, NeedMoreData):
        return
    assert 0 < used <= len(buf)


def test_prefix_of_valid_packet_needs_more_data():
    raw = encode_packet(Subscribe(7, (("flatform/#", 1), ("a/+/b", 0))))
    for i in range(len(raw)):
        with pytest.raises(NeedMoreData):
            decode_packet(raw[:i])


def test_packet_invariants_enforced_on_construction():
    with pytest.raises(ValueError):
        Publish("a/#", b"", 0)
    with pytest.raises(ValueError):
        Publish("a", b"", 1, None)
    with pytest.raises(ValueError):
        Subscribe(0, (("a", 0),))


def test_other_packets_round_trip_examples():
    for p in [ConnAck(0), PubAck(1), SubAck(3, (0, 1, 0x80)), Connect("", 0)]:
        assert decode_packet(encode_packet(p))[0] == p
