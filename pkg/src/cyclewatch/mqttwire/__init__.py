"""MQTT 3.1.1 subset: codec, topic matching, broker and client."""

from .broker import Broker, BrokerServer, Session, broker_handle
from .client import MqttClient
from .codec import (
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
    decode_packet,
    encode_packet,
    encode_remaining_length,
)
from .topics import topic_matches, validate_filter

__all__ = [
    "Broker", "BrokerServer", "Session", "broker_handle", "MqttClient",
    "ConnAck", "Connect", "Disconnect", "Packet", "PingReq", "PingResp", "PubAck", "Publish",
    "StreamDecoder", "SubAck", "Subscribe", "decode_packet", "encode_packet",
    "encode_remaining_length", "topic_matches", "validate_filter",
]
