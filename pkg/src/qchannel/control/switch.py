"""Match-action dataplane."""

from __future__ import annotations

from typing import Iterable, Union

from .messages import Action, FlowEntry, Packet, SendToController


class FlowTable:
    def __init__(self, entries: Iterable[FlowEntry] = ()):
        self._entries: list[tuple[int, int, FlowEntry]] = []
        self._seq = 0
        for e in entries:
            self.add(e)

    def add(self, entry: FlowEntry) -> None:
        self._entries.append((-entry.priority, self._seq, entry))
        self._seq += 1
        self._entries.sort(key=lambda t: (t[0], t[1]))

    def __iter__(self):
        return (e for _, _, e in self._entries)

    def __len__(self):
        return len(self._entries)

    def lookup(self, packet: Packet) -> Action:
        for _, _, entry in self._entries:
            if entry.match.matches(packet):
                return entry.action
        return SendToController()


def switch_process(packet: Packet, flow_table: Union[FlowTable, Iterable[FlowEntry]]) -> Action:
    """Action of the highest-priority matching entry; a table miss goes to the controller."""
    table = flow_table if isinstance(flow_table, FlowTable) else FlowTable(flow_table)
    return table.lookup(packet)
