import json
import socket

import pytest

from qchannel.control.controller import Controller, UserInfo
from qchannel.control.messages import (
    KEY_EXCHANGE_READY,
    KEY_EXCHANGE_REQUEST,
    ConfigAck,
    ConfigNack,
    Drop,
    EditConfig,
    FlowEntry,
    ForwardTo,
    InstallFlow,
    Match,
    Packet,
    PacketIn,
    SendPacket,
    SendToController,
    SlotGrant,
    SlotQueued,
    SlotRelease,
    SlotRequest,
)
from qchannel.control.wire import ControllerServer, decode, encode, request

SAMPLES = [
    Packet("a", "b", qchannel="qch-1", qcom=KEY_EXCHANGE_REQUEST, qec="none", payload=b"\x00\xffhi"),
    PacketIn(Packet("a", "b"), 3),
    InstallFlow(FlowEntry(100, Match(src="a", qcom="*"), ForwardTo(2))),
    InstallFlow(FlowEntry(1, Match(), Drop())),
    InstallFlow(FlowEntry(1, Match(), SendToController())),
    SendPacket(Packet("controller", "a", payload=b'{"slot": 0}'), 1),
    EditConfig("charlie-qd", {"delay_ps": 1250, "peer_delay_ps": 1000}, "qch-1"),
    EditConfig("relay", {"relay_port_map": (("a", 1), ("c", 3))}, "qch-1"),
    ConfigAck("relay", 4, "qch-1"),
    ConfigNack("relay", "busy", "qch-1"),
    SlotRequest(("a", "c"), 1.0, "qch-1"),
    SlotGrant(("a", "c"), 0, "qch-1"),
    SlotQueued(("a", "c"), "qch-1"),
    SlotRelease(0, "qch-1"),
]


@pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: type(m).__name__)
def test_round_trip(msg):
    line = encode(msg)
    assert "\n" not in line
    assert json.loads(line)["type"] == type(msg).__name__
    assert decode(line) == msg


def test_field_names_on_the_wire():
    obj = json.loads(encode(SAMPLES[0]))
    assert set(obj) == {"type", "src", "dst", "qchannel", "qcom", "qec", "payload"}
    assert set(json.loads(encode(ConfigAck("d", 1)))) == {"type", "device_id", "version", "txn"}


def test_unknown_type_and_field_rejected():
    with pytest.raises(ValueError):
        decode('{"type": "Bogus"}')
    with pytest.raises(ValueError):
        decode('{"type": "ConfigAck", "device_id": "d", "version": 1, "colour": 2}')


def test_controller_over_socket():
    users = {"alice": UserInfo(1, "alice-qd", 1000), "charlie": UserInfo(3, "charlie-qd", 1000)}
    server = ControllerServer(Controller(users)).start()
    try:
        with socket.create_connection(server.address, timeout=5) as sock:
            fh = sock.makefile("rwb")
            (req,) = request(fh, PacketIn(Packet("charlie", "alice", qcom=KEY_EXCHANGE_REQUEST), 3))
            assert isinstance(req, SlotRequest)
            edits = request(fh, SlotGrant(req.pair, 0, req.txn))
            assert [e.device_id for e in edits] == ["charlie-qd", "relay"]
            assert request(fh, ConfigAck("charlie-qd", 1, req.txn)) == []
            out = request(fh, ConfigAck("relay", 1, req.txn))
            ready = [o for o in out if isinstance(o, SendPacket)]
            assert {o.packet.dst for o in ready} == {"alice", "charlie"}
            assert all(o.packet.qcom == KEY_EXCHANGE_READY for o in ready)
    finally:
        server.stop()


def test_malformed_line_gets_error():
    server = ControllerServer(Controller({})).start()
    try:
        with socket.create_connection(server.address, timeout=5) as sock:
            fh = sock.makefile("rwb")
            fh.write(b'{"type": "Nope"}\n')
            fh.flush()
            lines = [fh.readline().decode().strip() for _ in range(2)]
            assert json.loads(lines[0])["type"] == "Error"
            assert lines[1] == '{"type":"Done"}'
    finally:
        server.stop()
