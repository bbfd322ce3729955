"""Controller that turns key-exchange requests into device configuration."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from ..timebin import signatures_separated
from .messages import (
    CONTROLLER,
    KEY_EXCHANGE_DONE,
    KEY_EXCHANGE_ERROR,
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
    SlotGrant,
    SlotQueued,
    SlotRelease,
    SlotRequest,
)

log = logging.getLogger(__name__)


@dataclass
class UserInfo:
    port: int
    device_id: str
    delay_ps: int = 1000


@dataclass
class Exchange:
    channel: str
    requester: str
    peer: str
    state: str = "awaiting_slot"  # -> configuring -> ready | aborted
    slot: Optional[int] = None
    pending: set = field(default_factory=set)
    deferred: bool = False
    delay_ps: Optional[int] = None


def compatible_delay(peer_delay: int, current: int, window: float, step: int = 250, limit: int = 100) -> int:
    """Closest delay to ``current`` whose signatures with ``peer_delay`` are resolvable."""
    for k in range(limit):
        for cand in ((current,) if k == 0 else (current + k * step, current - k * step)):
            if cand > 4 * window and signatures_separated(peer_delay, cand, window):
                return int(cand)
    raise ValueError(f"no compatible delay near {current} ps for peer delay {peer_delay} ps")


class Controller:
    def __init__(self, users: dict, relay_device: str = "relay", window_ps: float = 100.0,
                 session_duration: float = 1.0, delay_step: int = 250):
        self.users: dict[str, UserInfo] = dict(users)
        self.relay_device = relay_device
        self.window_ps = window_ps
        self.session_duration = session_duration
        self.delay_step = delay_step
        self.exchanges: dict[str, Exchange] = {}
        self._by_pair: dict[frozenset, str] = {}
        self._next = 1
        self.errors: list[str] = []

    # -- helpers ------------------------------------------------------------

    def _notify(self, user: str, qcom: str, channel: Optional[str], body: dict) -> SendPacket:
        payload = json.dumps(body, sort_keys=True).encode()
        pkt = Packet(CONTROLLER, user, qchannel=channel, qcom=qcom, payload=payload)
        return SendPacket(pkt, self.users[user].port)

    def _ready(self, ex: Exchange) -> list:
        cmds = []
        for me, other in ((ex.requester, ex.peer), (ex.peer, ex.requester)):
            cmds.append(self._notify(me, KEY_EXCHANGE_READY, ex.channel,
                                     {"slot": ex.slot, "peer": other, "peer_delay_ps": self.users[other].delay_ps,
                                      "delay_ps": self.users[me].delay_ps}))
        return cmds

    def _reject(self, pkt: Packet, in_port: int, reason: str) -> list:
        self.errors.append(reason)
        log.warning("rejecting request %s -> %s: %s", pkt.src, pkt.dst, reason)
        port = self.users[pkt.src].port if pkt.src in self.users else in_port
        err = Packet(CONTROLLER, pkt.src, qcom=KEY_EXCHANGE_ERROR, payload=reason.encode())
        return [SendPacket(err, port)]

    def _forget(self, ex: Exchange) -> None:
        self._by_pair.pop(frozenset((ex.requester, ex.peer)), None)

    # -- event dispatch -----------------------------------------------------

    def handle(self, event) -> list:
        if isinstance(event, PacketIn):
            return self._packet_in(event)
        if isinstance(event, SlotGrant):
            return self._slot_grant(event)
        if isinstance(event, SlotQueued):
            ex = self.exchanges.get(event.txn)
            if ex is not None:
                ex.deferred = True
            return []
        if isinstance(event, ConfigAck):
            return self._ack(event)
        if isinstance(event, ConfigNack):
            return self._nack(event)
        raise TypeError(f"controller cannot handle {type(event).__name__}")

    def _packet_in(self, ev: PacketIn) -> list:
        pkt = ev.packet
        if pkt.qcom == KEY_EXCHANGE_REQUEST:
            return self._request(pkt, ev.in_port)
        if pkt.qcom == KEY_EXCHANGE_DONE and pkt.qchannel in self.exchanges:
            ex = self.exchanges.pop(pkt.qchannel)
            self._forget(ex)
            return [SlotRelease(ex.slot, ex.channel)] if ex.slot is not None else []
        if pkt.dst in self.users and not pkt.is_quantum:
            # plain traffic: learn a forwarding rule and push the packet out
            port = self.users[pkt.dst].port
            entry = FlowEntry(10, Match(dst=pkt.dst), ForwardTo(port))
            return [InstallFlow(entry), SendPacket(pkt, port)]
        return []

    def _request(self, pkt: Packet, in_port: int) -> list:
        requester, peer = pkt.src, pkt.dst
        for u in (requester, peer):
            if u not in self.users:
                return self._reject(pkt, in_port, f"unknown user {u!r}")
        if requester == peer:
            return self._reject(pkt, in_port, "cannot exchange a key with oneself")
        key = frozenset((requester, peer))
        if key in self._by_pair:
            ex = self.exchanges[self._by_pair[key]]
            return self._ready(ex) if ex.state == "ready" else []
        channel = f"qch-{self._next}"
        self._next += 1
        ex = Exchange(channel, requester, peer)
        self.exchanges[channel] = ex
        self._by_pair[key] = channel
        return [SlotRequest((requester, peer), self.session_duration, channel)]

    def _slot_grant(self, ev: SlotGrant) -> list:
        ex = self.exchanges.get(ev.txn)
        if ex is None or ex.state != "awaiting_slot":
            return []
        ex.slot = ev.slot
        ex.state = "configuring"
        req, peer = self.users[ex.requester], self.users[ex.peer]
        ex.delay_ps = compatible_delay(peer.delay_ps, req.delay_ps, self.window_ps, self.delay_step)
        ex.pending = {req.device_id, self.relay_device}
        port_map = [[ex.requester, req.port], [ex.peer, peer.port]]
        return [
            EditConfig(req.device_id, {"delay_ps": ex.delay_ps, "peer_delay_ps": peer.delay_ps}, ex.channel),
            EditConfig(self.relay_device, {"relay_port_map": port_map}, ex.channel),
        ]

    def _ack(self, ev: ConfigAck) -> list:
        ex = self.exchanges.get(ev.txn)
        if ex is None or ex.state != "configuring":
            return []
        ex.pending.discard(ev.device_id)
        if ev.device_id == self.users[ex.requester].device_id:
            self.users[ex.requester].delay_ps = ex.delay_ps
        if ex.pending:
            return []
        ex.state = "ready"
        a, b = self.users[ex.requester], self.users[ex.peer]
        flows = [
            InstallFlow(FlowEntry(100, Match(src=ex.requester, dst=ex.peer, qchannel=ex.channel), ForwardTo(b.port))),
            InstallFlow(FlowEntry(100, Match(src=ex.peer, dst=ex.requester, qchannel=ex.channel), ForwardTo(a.port))),
        ]
        return flows + self._ready(ex)

    def _nack(self, ev: ConfigNack) -> list:
        ex = self.exchanges.get(ev.txn)
        if ex is None or ex.state != "configuring":
            return []
        ex.state = "aborted"
        self.exchanges.pop(ex.channel)
        self._forget(ex)
        reason = f"device {ev.device_id} refused configuration: {ev.reason}"
        self.errors.append(reason)
        cmds = [SlotRelease(ex.slot, ex.channel)] if ex.slot is not None else []
        err = Packet(CONTROLLER, ex.requester, qchannel=ex.channel, qcom=KEY_EXCHANGE_ERROR, payload=reason.encode())
        return cmds + [SendPacket(err, self.users[ex.requester].port)]


def controller_handle(controller: Controller, event) -> list:
    return controller.handle(event)
