"""Control-plane message types.

Quantum metadata rides on ordinary packets as three optional fields:
``qchannel`` (channel id), ``qcom`` (communication protocol tag) and
``qec`` (error-correction tag).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

KEY_EXCHANGE_REQUEST = "KEY_EXCHANGE_REQUEST"
KEY_EXCHANGE_READY = "KEY_EXCHANGE_READY"
KEY_EXCHANGE_ERROR = "KEY_EXCHANGE_ERROR"
KEY_EXCHANGE_DONE = "KEY_EXCHANGE_DONE"

ANY = "*"  # match wildcard meaning "field present with any value"
CONTROLLER = "controller"


@dataclass(frozen=True)
class Packet:
    src: str
    dst: str
    qchannel: Optional[str] = None
    qcom: Optional[str] = None
    qec: Optional[str] = None
    payload: bytes = b""

    @property
    def is_quantum(self) -> bool:
        return any(v is not None for v in (self.qchannel, self.qcom, self.qec))


# --- flow actions ----------------------------------------------------------


@dataclass(frozen=True)
class ForwardTo:
    port: int


@dataclass(frozen=True)
class SendToController:
    pass


@dataclass(frozen=True)
class Drop:
    pass


Action = Union[ForwardTo, SendToController, Drop]


def _field_matches(want, have) -> bool:
    if want is None:
        return True
    if want == ANY:
        return have is not None
    return want == have


@dataclass(frozen=True)
class Match:
    """Predicates over packet fields; ``None`` is a wildcard, ``"*"`` means present."""

    src: Optional[str] = None
    dst: Optional[str] = None
    qchannel: Optional[str] = None
    qcom: Optional[str] = None

    def matches(self, packet: Packet) -> bool:
        return (
            _field_matches(self.src, packet.src)
            and _field_matches(self.dst, packet.dst)
            and _field_matches(self.qchannel, packet.qchannel)
            and _field_matches(self.qcom, packet.qcom)
        )


@dataclass(frozen=True)
class FlowEntry:
    priority: int
    match: Match
    action: Action


# --- switch <-> controller -------------------------------------------------


@dataclass(frozen=True)
class PacketIn:
    packet: Packet
    in_port: int = 0


@dataclass(frozen=True)
class InstallFlow:
    entry: FlowEntry


@dataclass(frozen=True)
class SendPacket:
    packet: Packet
    port: int


# --- controller <-> devices ------------------------------------------------


@dataclass(frozen=True)
class EditConfig:
    device_id: str
    delta: dict = field(default_factory=dict)
    txn: str = ""


@dataclass(frozen=True)
class ConfigAck:
    device_id: str
    version: int
    txn: str = ""


@dataclass(frozen=True)
class ConfigNack:
    device_id: str
    reason: str
    txn: str = ""


# --- controller <-> relay scheduler ----------------------------------------


@dataclass(frozen=True)
class SlotRequest:
    pair: tuple
    duration: float = 1.0
    txn: str = ""


@dataclass(frozen=True)
class SlotGrant:
    pair: tuple
    slot: int
    txn: str = ""


@dataclass(frozen=True)
class SlotQueued:
    pair: tuple
    txn: str = ""


@dataclass(frozen=True)
class SlotRelease:
    slot: int
    txn: str = ""


MESSAGE_TYPES = {
    cls.__name__: cls
    for cls in (
        Packet, ForwardTo, SendToController, Drop, Match, FlowEntry, PacketIn, InstallFlow, SendPacket,
        EditConfig, ConfigAck, ConfigNack, SlotRequest, SlotGrant, SlotQueued, SlotRelease,
    )
}
