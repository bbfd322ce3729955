"""Software-defined control plane: switch, controller, device configuration and relay slots."""

from .controller import Controller, compatible_delay
from .messages import FlowEntry, Match, Packet
from .netconf import DeviceConfig, DeviceRegistry, DeviceServer
from .network import ControlPlaneSpec, orchestrate, ready_after_acks
from .relay import RelayScheduler, SlotError
from .switch import FlowTable, switch_process

__all__ = [
    "ControlPlaneSpec", "Controller", "DeviceConfig", "DeviceRegistry", "DeviceServer", "FlowEntry",
    "FlowTable", "Match", "Packet", "RelayScheduler", "SlotError", "compatible_delay", "orchestrate",
    "ready_after_acks", "switch_process",
]
