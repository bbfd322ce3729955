"""Transactional configuration store for quantum devices (netconf-like).

Each device keeps one immutable :class:`DeviceConfig` snapshot. An edit is
validated against a copy and swapped in under a lock, so readers always see
either the old or the new snapshot.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Optional, Union

from ..optics import ConfigurationError
from ..timebin import min_signature_gap
from .messages import ConfigAck, ConfigNack

EDITABLE = ("delay_ps", "lc_phase", "waveplate_phase", "relay_port_map", "peer_delay_ps")


@dataclass(frozen=True)
class DeviceConfig:
    device_id: str
    delay_ps: int = 1000
    lc_phase: float = 0.0
    waveplate_phase: float = 0.0
    relay_port_map: tuple = ()
    # 0-degree delay of the station this device is paired with, if any
    peer_delay_ps: Optional[int] = None
    version: int = 0


class DeviceServer:
    def __init__(self, config: DeviceConfig, window_ps: float = 100.0):
        self._config = config
        self._lock = threading.Lock()
        self.window_ps = window_ps

    @property
    def device_id(self) -> str:
        return self._config.device_id

    def get_config(self) -> DeviceConfig:
        return self._config

    def _validate(self, cfg: DeviceConfig) -> Optional[str]:
        if cfg.delay_ps <= 4 * self.window_ps:
            return f"delay {cfg.delay_ps} ps does not exceed 4 x window"
        if cfg.peer_delay_ps is not None:
            gap = min_signature_gap(cfg.peer_delay_ps, cfg.delay_ps)
            if gap < 2 * self.window_ps:
                return f"signature collision: delays {cfg.delay_ps}/{cfg.peer_delay_ps} ps leave a {gap} ps gap"
        ports = [p for _, p in cfg.relay_port_map]
        if len(set(ports)) != len(ports):
            return "relay port map assigns one port twice"
        return None

    def edit_config(self, delta: dict, txn: str = "") -> Union[ConfigAck, ConfigNack]:
        unknown = set(delta) - set(EDITABLE)
        if unknown:
            return ConfigNack(self.device_id, f"unknown field(s): {', '.join(sorted(unknown))}", txn)
        with self._lock:
            current = self._config
            if not delta:
                return ConfigAck(self.device_id, current.version, txn)
            changes = dict(delta)
            if "relay_port_map" in changes:
                changes["relay_port_map"] = tuple((str(u), int(p)) for u, p in changes["relay_port_map"])
            if "delay_ps" in changes:
                changes["delay_ps"] = int(changes["delay_ps"])
            try:
                candidate = replace(current, version=current.version + 1, **changes)
            except TypeError as exc:
                return ConfigNack(self.device_id, str(exc), txn)
            reason = self._validate(candidate)
            if reason is not None:
                return ConfigNack(self.device_id, reason, txn)
            self._config = candidate
            return ConfigAck(self.device_id, candidate.version, txn)


class DeviceRegistry:
    def __init__(self, window_ps: float = 100.0):
        self.window_ps = window_ps
        self._servers: dict[str, DeviceServer] = {}

    def register(self, config: DeviceConfig) -> DeviceServer:
        server = DeviceServer(config, self.window_ps)
        self._servers[config.device_id] = server
        return server

    def __contains__(self, device_id) -> bool:
        return device_id in self._servers

    def server(self, device_id: str) -> DeviceServer:
        try:
            return self._servers[device_id]
        except KeyError:
            raise ConfigurationError(f"unknown device {device_id!r}") from None

    def edit_config(self, device_id: str, delta: dict, txn: str = "") -> Union[ConfigAck, ConfigNack]:
        if device_id not in self._servers:
            return ConfigNack(device_id, "unknown device", txn)
        return self._servers[device_id].edit_config(delta, txn)

    def get_config(self, device_id: str) -> DeviceConfig:
        return self.server(device_id).get_config()
