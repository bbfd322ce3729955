"""Deterministic in-process message bus wiring the control-plane actors.

Every actor handles its inbox one message at a time. Latency is drawn per
message from a seeded generator, so messages between different actor pairs
may overtake each other; a single link stays FIFO.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import Controller, UserInfo
from .messages import (
    ANY,
    CONTROLLER,
    KEY_EXCHANGE_READY,
    KEY_EXCHANGE_REQUEST,
    ConfigAck,
    ConfigNack,
    EditConfig,
    FlowEntry,
    ForwardTo,
    InstallFlow,
    Match,
    Packet,
    PacketIn,
    SendPacket,
    SendToController,
    SlotRelease,
    SlotRequest,
)
from .netconf import DeviceConfig, DeviceRegistry
from .relay import RelayScheduler
from .switch import FlowTable

SWITCH = "switch"
CONTROL_PRIORITY = 1000
RELAY_SCHEDULER = "relay-scheduler"


@dataclass(frozen=True)
class TraceEntry:
    time: float
    src: str
    dst: str
    message: object


class Network:
    def __init__(self, rng: np.random.Generator, latency: tuple = (1.0, 5.0)):
        self.rng = rng
        self.latency = latency
        self.now = 0.0
        self.actors: dict = {}
        self.trace: list[TraceEntry] = []
        self._queue: list = []
        self._seq = 0
        self._link_clock: dict = {}

    def add(self, name: str, actor) -> None:
        self.actors[name] = actor

    def send(self, src: str, dst: str, message, delay: Optional[float] = None) -> None:
        if dst not in self.actors:
            raise KeyError(f"no actor named {dst!r}")
        lo, hi = self.latency
        d = float(self.rng.uniform(lo, hi)) if delay is None else delay
        t = max(self.now + d, self._link_clock.get((src, dst), 0.0))
        self._link_clock[(src, dst)] = t
        heapq.heappush(self._queue, (t, self._seq, src, dst, message))
        self._seq += 1

    def schedule_at(self, time: float, src: str, dst: str, message) -> None:
        heapq.heappush(self._queue, (time, self._seq, src, dst, message))
        self._seq += 1

    def run(self, max_events: int = 100000) -> int:
        n = 0
        while self._queue and n < max_events:
            t, _, src, dst, msg = heapq.heappop(self._queue)
            self.now = t
            self.trace.append(TraceEntry(t, src, dst, msg))
            for out_dst, out_msg in self.actors[dst].receive(msg, src):
                self.send(dst, out_dst, out_msg)
            n += 1
        return n


class Host:
    def __init__(self, name: str):
        self.name = name
        self.inbox: list[Packet] = []

    def receive(self, msg, src):
        if isinstance(msg, Packet):
            self.inbox.append(msg)
        return []


class SwitchActor:
    def __init__(self, table: FlowTable, ports: dict):
        self.table = table
        self.ports = dict(ports)  # port -> host actor name
        self._port_of = {h: p for p, h in self.ports.items()}

    def receive(self, msg, src):
        if isinstance(msg, InstallFlow):
            self.table.add(msg.entry)
            return []
        if isinstance(msg, SendPacket):
            host = self.ports.get(msg.port)
            return [] if host is None else [(host, msg.packet)]
        if isinstance(msg, Packet):
            action = self.table.lookup(msg)
            if isinstance(action, ForwardTo):
                host = self.ports.get(action.port)
                return [] if host is None else [(host, msg)]
            if isinstance(action, SendToController):
                return [(CONTROLLER, PacketIn(msg, self._port_of.get(src, 0)))]
            return []
        return []


class ControllerActor:
    def __init__(self, controller: Controller):
        self.controller = controller
        self.commands: list = []

    def receive(self, msg, src):
        out = []
        for cmd in self.controller.handle(msg):
            self.commands.append(cmd)
            if isinstance(cmd, (InstallFlow, SendPacket)):
                out.append((SWITCH, cmd))
            elif isinstance(cmd, EditConfig):
                out.append((cmd.device_id, cmd))
            elif isinstance(cmd, (SlotRequest, SlotRelease)):
                out.append((RELAY_SCHEDULER, cmd))
        return out


class DeviceActor:
    def __init__(self, registry: DeviceRegistry, device_id: str, nack: bool = False):
        self.registry = registry
        self.device_id = device_id
        self.nack = nack  # fault injection

    def receive(self, msg, src):
        if isinstance(msg, EditConfig):
            if self.nack:
                return [(src, ConfigNack(self.device_id, "device fault", msg.txn))]
            return [(src, self.registry.edit_config(self.device_id, msg.delta, msg.txn))]
        return []


class RelayActor:
    def __init__(self, scheduler: RelayScheduler):
        self.scheduler = scheduler

    def receive(self, msg, src):
        if isinstance(msg, SlotRequest):
            return [(src, self.scheduler.allocate(msg.pair, msg.duration, msg.txn))]
        if isinstance(msg, SlotRelease):
            grant = self.scheduler.release(msg.slot)
            return [] if grant is None else [(CONTROLLER, grant)]
        return []


# --- orchestration -------------------------------------------------------


@dataclass
class ControlPlaneSpec:
    users: dict  # name -> {"port": int, "delay_ps": int}
    relay_slots: int = 1
    slot_duration: float = 1.0
    window_ps: float = 100.0
    flows: tuple = ()
    busy_pairs: tuple = ()  # pairs already holding relay slots
    busy_release_at: Optional[float] = None  # time the busy pairs finish
    latency: tuple = (1.0, 5.0)
    nack_devices: tuple = ()

    @staticmethod
    def device_of(user: str) -> str:
        return f"{user}-qd"


@dataclass
class OrchestrationResult:
    trace: list
    commands: list
    hosts: dict
    registry: DeviceRegistry
    scheduler: RelayScheduler
    controller: Controller
    exchange: Optional[object] = None
    errors: list = field(default_factory=list)

    @property
    def ready_users(self) -> set:
        return {
            name for name, h in self.hosts.items()
            if any(p.qcom == KEY_EXCHANGE_READY for p in h.inbox)
        }

    @property
    def ok(self) -> bool:
        ex = self.exchange
        return ex is not None and ex.state == "ready" and {ex.requester, ex.peer} <= self.ready_users


def build_network(spec: ControlPlaneSpec, rng: np.random.Generator):
    net = Network(rng, spec.latency)
    registry = DeviceRegistry(spec.window_ps)
    users = {}
    for name, u in spec.users.items():
        dev = ControlPlaneSpec.device_of(name)
        delay = int(u.get("delay_ps", 1000))
        registry.register(DeviceConfig(dev, delay_ps=delay))
        users[name] = UserInfo(int(u["port"]), dev, delay)
        net.add(name, Host(name))
        net.add(dev, DeviceActor(registry, dev, nack=dev in spec.nack_devices))
    registry.register(DeviceConfig("relay"))
    net.add("relay", DeviceActor(registry, "relay", nack="relay" in spec.nack_devices))
    scheduler = RelayScheduler(spec.relay_slots, spec.slot_duration, users=spec.users)
    net.add(RELAY_SCHEDULER, RelayActor(scheduler))
    controller = Controller(users, "relay", spec.window_ps, spec.slot_duration)
    net.add(CONTROLLER, ControllerActor(controller))
    # control-protocol packets always reach the controller, ahead of session flows
    table = FlowTable((FlowEntry(CONTROL_PRIORITY, Match(qcom=ANY), SendToController()),) + tuple(spec.flows))
    net.add(SWITCH, SwitchActor(table, {u.port: name for name, u in users.items()}))
    return net, registry, scheduler, controller


def orchestrate(spec: ControlPlaneSpec, requester: str, peer: str, rng: np.random.Generator) -> OrchestrationResult:
    """Inject a key-exchange request from ``requester`` and run the network to quiescence."""
    net, registry, scheduler, controller = build_network(spec, rng)
    busy_slots = []
    for pair in spec.busy_pairs:
        grant = scheduler.allocate(pair)
        busy_slots.append(grant.slot)
    if spec.busy_release_at is not None:
        for slot in busy_slots:
            # the earlier session finishing is modeled as the scheduler freeing its slot
            net.schedule_at(spec.busy_release_at, CONTROLLER, RELAY_SCHEDULER, SlotRelease(slot))
    source = requester if requester in net.actors else SWITCH
    net.send(source, SWITCH, Packet(requester, peer, qcom=KEY_EXCHANGE_REQUEST), delay=0.0)
    net.run()
    exchange = next(iter(controller.exchanges.values()), None)
    return OrchestrationResult(net.trace, net.actors[CONTROLLER].commands,
                               {n: a for n, a in net.actors.items() if isinstance(a, Host)},
                               registry, scheduler, controller, exchange, list(controller.errors))


def ready_after_acks(trace: list) -> bool:
    """True when every READY leaves the controller after all acks of its exchange."""
    acked: dict = {}
    needed: dict = {}
    for entry in trace:
        msg = entry.message
        if entry.dst == CONTROLLER and isinstance(msg, ConfigAck):
            acked.setdefault(msg.txn, set()).add(msg.device_id)
        if entry.src == CONTROLLER and isinstance(msg, EditConfig):
            needed.setdefault(msg.txn, set()).add(msg.device_id)
        if entry.src == CONTROLLER and isinstance(msg, SendPacket) and msg.packet.qcom == KEY_EXCHANGE_READY:
            ch = msg.packet.qchannel
            if not needed.get(ch) or not needed[ch] <= acked.get(ch, set()):
                return False
    return True


def ready_payload(packet: Packet) -> dict:
    return json.loads(packet.payload.decode())
