import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qchannel.control.controller import Controller, UserInfo, compatible_delay
from qchannel.control.messages import (
    ANY,
    KEY_EXCHANGE_DONE,
    KEY_EXCHANGE_ERROR,
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
from qchannel.control.netconf import DeviceConfig, DeviceRegistry, DeviceServer
from qchannel.control.network import (
    CONTROLLER,
    SWITCH,
    ControlPlaneSpec,
    build_network,
    orchestrate,
    ready_after_acks,
    ready_payload,
)
from qchannel.control.relay import RelayScheduler, SlotError
from qchannel.control.switch import FlowTable, switch_process
from qchannel.optics import ConfigurationError
from qchannel.timebin import signatures_separated

USERS = {"alice": {"port": 1, "delay_ps": 1000}, "bob": {"port": 2, "delay_ps": 2000},
         "charlie": {"port": 3, "delay_ps": 1000}}


# --- switch --------------------------------------------------------------------


def test_metadata_request_goes_to_controller():
    table = [FlowEntry(100, Match(qcom=ANY), SendToController()), FlowEntry(10, Match(dst="alice"), ForwardTo(1))]
    pkt = Packet("charlie", "alice", qcom=KEY_EXCHANGE_REQUEST)
    assert switch_process(pkt, table) == SendToController()


def test_plain_forwarding_and_table_miss():
    table = [FlowEntry(10, Match(src="A", dst="B"), ForwardTo(2))]
    assert switch_process(Packet("A", "B"), table) == ForwardTo(2)
    assert switch_process(Packet("A", "C"), []) == SendToController()


def test_priority_then_insertion_order():
    t = FlowTable([FlowEntry(5, Match(), ForwardTo(1)), FlowEntry(5, Match(), ForwardTo(2)),
                   FlowEntry(1, Match(), Drop())])
    assert t.lookup(Packet("x", "y")) == ForwardTo(1)
    t.add(FlowEntry(9, Match(dst="y"), Drop()))
    assert t.lookup(Packet("x", "y")) == Drop()


def test_present_wildcard_needs_field():
    m = Match(qchannel=ANY)
    assert not m.matches(Packet("a", "b"))
    assert m.matches(Packet("a", "b", qchannel="qch-1"))
    assert not Packet("a", "b").is_quantum


names = st.sampled_from(["alice", "bob", "charlie", None])
entries = st.builds(
    FlowEntry,
    st.integers(0, 5),
    st.builds(Match, names, names, st.sampled_from([None, ANY, "qch-1"]), st.sampled_from([None, ANY])),
    st.one_of(st.builds(ForwardTo, st.integers(1, 4)), st.just(SendToController()), st.just(Drop())),
)
packets = st.builds(Packet, st.sampled_from(["alice", "bob", "charlie"]), st.sampled_from(["alice", "bob"]),
                    st.sampled_from([None, "qch-1"]), st.sampled_from([None, KEY_EXCHANGE_REQUEST]))


@given(st.lists(entries, max_size=8), packets)
def test_flow_determinism(table, pkt):
    first = switch_process(pkt, table)
    assert all(switch_process(pkt, table) == first for _ in range(5))
    # brute-force reference: best priority, earliest index among matches
    matches = [(-e.priority, i, e.action) for i, e in enumerate(table) if e.match.matches(pkt)]
    assert first == (min(matches)[2] if matches else SendToController())


# --- device configuration ------------------------------------------------------


def test_edit_and_readback():
    reg = DeviceRegistry()
    reg.register(DeviceConfig("dev"))
    assert reg.get_config("dev").version == 0
    ack = reg.edit_config("dev", {"delay_ps": 1500})
    assert ack == ConfigAck("dev", 1)
    assert reg.get_config("dev").delay_ps == 1500


def test_signature_collision_nacked():
    srv = DeviceServer(DeviceConfig("dev", peer_delay_ps=1000))
    out = srv.edit_config({"delay_ps": 1000})
    assert isinstance(out, ConfigNack) and "collision" in out.reason
    assert srv.get_config().version == 0


def test_empty_delta_and_unknown_device():
    reg = DeviceRegistry()
    reg.register(DeviceConfig("dev"))
    reg.edit_config("dev", {"lc_phase": 0.3})
    assert reg.edit_config("dev", {}) == ConfigAck("dev", 1)
    assert isinstance(reg.edit_config("ghost", {"delay_ps": 1500}), ConfigNack)
    assert isinstance(reg.edit_config("dev", {"colour": "red"}), ConfigNack)
    with pytest.raises(ConfigurationError):
        reg.get_config("ghost")


def test_version_after_three_acks():
    srv = DeviceServer(DeviceConfig("dev"))
    for d in (1500, 1750, 2250):
        srv.edit_config({"delay_ps": d})
    cfg = srv.get_config()
    assert (cfg.version, cfg.delay_ps) == (3, 2250)


def test_config_linearizability_under_threads():
    srv = DeviceServer(DeviceConfig("dev"))
    acks, lock = [], threading.Lock()
    seen = []

    def writer(k):
        for i in range(200):
            d = 1000 + 10 * k + i * 1000
            out = srv.edit_config({"delay_ps": d, "lc_phase": float(d)})
            with lock:
                acks.append((out.version, d))

    def reader():
        for _ in range(2000):
            cfg = srv.get_config()
            seen.append(cfg)

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(4)] + [threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    versions = sorted(v for v, _ in acks)
    assert versions == list(range(1, 801))
    last = max(acks)
    assert srv.get_config().version == last[0] and srv.get_config().delay_ps == last[1]
    # a snapshot is never a mix of two writes
    assert all(cfg.version == 0 or cfg.lc_phase == float(cfg.delay_ps) for cfg in seen)


# --- relay -----------------------------------------------------------------------


def test_relay_examples():
    r = RelayScheduler(1, users=["a", "b", "c"])
    assert r.allocate(("a", "b")) == SlotGrant(("a", "b"), 0)
    assert isinstance(r.allocate(("a", "c")), SlotQueued)
    assert r.release(0) == SlotGrant(("a", "c"), 0)
    with pytest.raises(SlotError):
        r.allocate(("a", "a"))
    with pytest.raises(SlotError):
        r.allocate(("a", "z"))


def test_no_cross_talk_random_schedule():
    rng = np.random.default_rng(12)
    users = ["alice", "bob", "charlie", "dave"]
    r = RelayScheduler(2, users=users)
    held = {}
    ran = []
    for _ in range(100):
        op = rng.integers(3)
        pair = tuple(rng.choice(users, 2, replace=False))
        if op == 0:
            out = r.allocate(pair)
            if isinstance(out, SlotGrant):
                held[out.slot] = tuple(sorted(pair))
        elif op == 1 and held:
            slot = int(rng.choice(list(held)))
            grant = r.release(slot)
            held.pop(slot)
            if grant is not None:
                held[grant.slot] = tuple(sorted(grant.pair))
        else:
            slot = int(rng.integers(2))
            try:
                r.run_in_slot(pair, slot, lambda: ran.append((pair, slot)))
            except SlotError:
                assert held.get(slot) != tuple(sorted(pair))
            else:
                assert held.get(slot) == tuple(sorted(pair))
        holders = [p for p in (r.holder(i) for i in range(2)) if p is not None]
        assert len(holders) == len(set(holders))
    assert ran


# --- controller ------------------------------------------------------------------


def controller():
    users = {n: UserInfo(u["port"], f"{n}-qd", u["delay_ps"]) for n, u in USERS.items()}
    return Controller(users, "relay", 100.0)


def request(src="charlie", dst="alice"):
    return PacketIn(Packet(src, dst, qcom=KEY_EXCHANGE_REQUEST), USERS.get(src, {"port": 9})["port"])


def test_charlie_alice_exchange():
    c = controller()
    (req,) = c.handle(request())
    assert isinstance(req, SlotRequest)
    edits = c.handle(SlotGrant(req.pair, 0, req.txn))
    assert all(isinstance(e, EditConfig) for e in edits)
    delay = edits[0].delta["delay_ps"]
    assert delay != 1000 and signatures_separated(1000, delay, 100.0)
    assert c.handle(ConfigAck(edits[0].device_id, 1, req.txn)) == []
    out = c.handle(ConfigAck("relay", 1, req.txn))
    ready = [o for o in out if isinstance(o, SendPacket)]
    assert {r.packet.dst for r in ready} == {"alice", "charlie"}
    assert sum(isinstance(o, InstallFlow) for o in out) == 2
    # duplicate request re-sends READY on the same channel, no new configuration
    again = c.handle(request())
    assert {o.packet.qchannel for o in again} == {req.txn}
    assert all(isinstance(o, SendPacket) and o.packet.qcom == KEY_EXCHANGE_READY for o in again)


def test_unknown_user_rejected():
    c = controller()
    (out,) = c.handle(request(dst="dave"))
    assert out.packet.qcom == KEY_EXCHANGE_ERROR and out.packet.dst == "charlie"
    assert c.errors


def test_nack_aborts_and_releases():
    c = controller()
    (req,) = c.handle(request())
    c.handle(SlotGrant(req.pair, 0, req.txn))
    out = c.handle(ConfigNack("relay", "busy", req.txn))
    assert SlotRelease(0, req.txn) in out
    assert any(isinstance(o, SendPacket) and o.packet.qcom == KEY_EXCHANGE_ERROR for o in out)


def test_done_releases_slot():
    c = controller()
    (req,) = c.handle(request())
    c.handle(SlotGrant(req.pair, 0, req.txn))
    c.handle(ConfigAck("charlie-qd", 1, req.txn))
    c.handle(ConfigAck("relay", 1, req.txn))
    out = c.handle(PacketIn(Packet("charlie", "alice", qchannel=req.txn, qcom=KEY_EXCHANGE_DONE), 3))
    assert out == [SlotRelease(0, req.txn)]


def test_compatible_delay_keeps_valid_value():
    assert compatible_delay(1000, 2000, 100.0) == 2000
    assert compatible_delay(1000, 1000, 100.0) == 1250


# --- orchestration over the simulated network -------------------------------------


def test_end_to_end_orchestration():
    res = orchestrate(ControlPlaneSpec(USERS), "charlie", "alice", np.random.default_rng(0))
    assert res.ok and res.ready_users == {"alice", "charlie"}
    cfg = res.registry.get_config("charlie-qd")
    assert cfg.version == 1 and signatures_separated(1000, cfg.delay_ps, 100.0)
    payload = ready_payload(res.hosts["alice"].inbox[0])
    assert payload["peer"] == "charlie" and payload["peer_delay_ps"] == cfg.delay_ps


@pytest.mark.parametrize("seed", range(100))
def test_controller_safety(seed):
    spec = ControlPlaneSpec(USERS, latency=(0.1, 20.0))
    res = orchestrate(spec, "charlie", "alice", np.random.default_rng(seed))
    assert res.ok
    assert ready_after_acks(res.trace)


def test_ready_after_acks_detects_violation():
    from qchannel.control.network import TraceEntry

    txn = "qch-1"
    ready = SendPacket(Packet(CONTROLLER, "alice", qchannel=txn, qcom=KEY_EXCHANGE_READY), 1)
    trace = [
        TraceEntry(0.0, CONTROLLER, "alice-qd", EditConfig("alice-qd", {}, txn)),
        TraceEntry(1.0, CONTROLLER, SWITCH, ready),
        TraceEntry(2.0, "alice-qd", CONTROLLER, ConfigAck("alice-qd", 1, txn)),
    ]
    assert not ready_after_acks(trace)


def test_queued_request_waits_for_release():
    spec = ControlPlaneSpec(USERS, busy_pairs=(("alice", "bob"),), busy_release_at=40.0)
    res = orchestrate(spec, "charlie", "alice", np.random.default_rng(1))
    assert res.ok and res.exchange.deferred
    first_ready = min(e.time for e in res.trace if isinstance(e.message, SendPacket)
                      and e.message.packet.qcom == KEY_EXCHANGE_READY)
    assert first_ready > 40.0


def test_two_concurrent_requests_one_slot():
    net, registry, scheduler, ctrl = build_network(ControlPlaneSpec(USERS), np.random.default_rng(3))
    net.send("charlie", SWITCH, Packet("charlie", "alice", qcom=KEY_EXCHANGE_REQUEST), delay=0.0)
    net.send("bob", SWITCH, Packet("bob", "alice", qcom=KEY_EXCHANGE_REQUEST), delay=0.0)
    net.run()
    states = sorted(ex.state for ex in ctrl.exchanges.values())
    assert states == ["awaiting_slot", "ready"]
    done = next(ex for ex in ctrl.exchanges.values() if ex.state == "ready")
    net.send(done.requester, SWITCH, Packet(done.requester, done.peer, qchannel=done.channel, qcom=KEY_EXCHANGE_DONE))
    net.run()
    assert [ex.state for ex in ctrl.exchanges.values()] == ["ready"]


def test_device_fault_reports_error():
    spec = ControlPlaneSpec(USERS, nack_devices=("relay",))
    res = orchestrate(spec, "charlie", "alice", np.random.default_rng(0))
    assert not res.ok and res.errors
    assert any(p.qcom == KEY_EXCHANGE_ERROR for p in res.hosts["charlie"].inbox)
    assert scheduler_free(res.scheduler)


def scheduler_free(s):
    return all(slot.pair is None for slot in s.table)


def test_network_deterministic():
    def run():
        res = orchestrate(ControlPlaneSpec(USERS), "charlie", "alice", np.random.default_rng(21))
        return [(e.time, e.src, e.dst, repr(e.message)) for e in res.trace]

    assert run() == run()
