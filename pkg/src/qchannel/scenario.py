"""Scenario files: YAML documents describing optics, stations and experiments.

Validation walks the whole document and collects every problem, each tagged
with its source line, before anything is simulated.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .control.messages import ANY, Drop, FlowEntry, ForwardTo, Match, SendToController
from .optics import ChannelTopology, ConfigurationError, DriftModel, Element, SourceModel, route
from .timebin import UserStation, min_signature_gap

ELEMENT_KINDS = {
    "fiber": "FiberSegment",
    "fibersegment": "FiberSegment",
    "stage": "DelayStage",
    "delaystage": "DelayStage",
    "liquid_crystal": "LiquidCrystal",
    "liquidcrystal": "LiquidCrystal",
    "wave_plate": "WavePlate",
    "waveplate": "WavePlate",
    "connector90": "Connector90",
}


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 only treats exponents with a sign as floats; accept 1.0e6 as well
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


class ScenarioError(ValueError):
    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def stream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one subsystem, fixed by (master seed, label)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


def stream_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]).generate_state(1)[0])


def _line_map(text: str) -> dict:
    lines = {}

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    root = yaml.compose(text, Loader=_Loader)
    if root is not None:
        walk(root, ())
    return lines


class _Checker:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines
        self.problems: list[str] = []

    def error(self, path: tuple, message: str) -> None:
        p = path
        while p and p not in self.lines:
            p = p[:-1]
        line = self.lines.get(p, 1)
        dotted = ".".join(f"[{x}]" if isinstance(x, int) else str(x) for x in path).replace(".[", "[")
        self.problems.append(f"{self.source}:{line}: {dotted or '<root>'}: {message}")

    def number(self, obj: dict, key: str, path: tuple, default=None, positive=False, nonneg=False,
               required=False):
        if key not in obj or obj[key] is None:
            if required:
                self.error(path + (key,), "missing required value")
            return default
        val = obj[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.error(path + (key,), f"expected a number, got {val!r}")
            return default
        if not np.isfinite(val):
            self.error(path + (key,), "must be finite")
            return default
        if positive and val <= 0:
            self.error(path + (key,), "must be positive")
            return default
        if nonneg and val < 0:
            self.error(path + (key,), "must be non-negative")
            return default
        return float(val)

    def mapping(self, obj, key, path, required=False) -> dict:
        val = obj.get(key) if isinstance(obj, dict) else None
        if val is None:
            if required:
                self.error(path + (key,), "missing required section")
            return {}
        if not isinstance(val, dict):
            self.error(path + (key,), "expected a mapping")
            return {}
        return val


@dataclass
class Scenario:
    source_path: str
    seed: int
    optics: dict
    source: SourceModel
    paths: dict  # user/path name -> tuple[Element]
    stations: dict  # name -> UserStation
    window_ps: float
    experiments: dict
    control_plane: dict = field(default_factory=dict)

    def topology(self, user1: str, user2: Optional[str] = None) -> ChannelTopology:
        return route(self.paths, user1, user1 if user2 is None else user2, **self.optics)

    def drift_period(self) -> Optional[float]:
        for path in self.paths.values():
            for el in path:
                if el.drift is not None and el.drift.kind.value == "sinusoid":
                    return el.drift.period
        return None

    def with_seed(self, seed: Optional[int]) -> "Scenario":
        if seed is None or seed == self.seed:
            return self
        return load_scenario_text(self._text, self.source_path, seed_override=seed)

    _text: str = ""


def _element(c: _Checker, raw: Any, path: tuple, seed: int) -> Optional[Element]:
    if not isinstance(raw, dict):
        c.error(path, "element must be a mapping")
        return None
    kind_raw = str(raw.get("kind", "")).lower()
    kind = ELEMENT_KINDS.get(kind_raw)
    if kind is None:
        c.error(path + ("kind",), f"unknown element kind {raw.get('kind')!r}; rotations are only allowed as connector90")
        return None
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        c.error(path + ("name",), "every element needs a non-empty name")
        return None
    allowed = {"kind", "name", "delay_um", "offset_um", "phase_rad", "drift", "enabled"}
    for extra in sorted(set(raw) - allowed):
        c.error(path + (extra,), "unknown field")
    delay = c.number(raw, "delay_um", path, 0.0)
    if "offset_um" in raw:
        delay = c.number(raw, "offset_um", path, 0.0)
    phase = c.number(raw, "phase_rad", path, 0.0)
    enabled = raw.get("enabled", True)
    if not isinstance(enabled, bool):
        c.error(path + ("enabled",), "expected true/false")
        enabled = True
    drift = None
    if "drift" in raw and raw["drift"] is not None:
        d = raw["drift"]
        dp = path + ("drift",)
        if not isinstance(d, dict):
            c.error(dp, "drift must be a mapping")
        else:
            dkind = d.get("kind", "constant")
            if dkind not in ("sinusoid", "random_walk", "constant"):
                c.error(dp + ("kind",), f"unknown drift kind {dkind!r}")
            else:
                dseed = d.get("seed")
                drift_kwargs = dict(
                    kind=dkind,
                    amplitude=c.number(d, "amplitude_um", dp, 0.0),
                    period=c.number(d, "period_s", dp, 1.0, positive=True),
                    step_sigma=c.number(d, "step_sigma_um", dp, 0.0, nonneg=True),
                    seed=int(dseed) if isinstance(dseed, int) else stream_seed(seed, f"drift:{name}"),
                )
                drift = DriftModel(**drift_kwargs)
    try:
        return Element(kind, name, delay=delay, phase=phase, drift=drift, enabled=enabled)
    except ConfigurationError as exc:
        c.error(path, str(exc))
        return None


def _flow(c: _Checker, raw: Any, path: tuple) -> Optional[FlowEntry]:
    if not isinstance(raw, dict):
        c.error(path, "flow entry must be a mapping")
        return None
    prio = raw.get("priority", 0)
    if not isinstance(prio, int):
        c.error(path + ("priority",), "priority must be an integer")
        return None
    m = raw.get("match") or {}
    if not isinstance(m, dict) or set(m) - {"src", "dst", "qchannel", "qcom"}:
        c.error(path + ("match",), "match may only use src, dst, qchannel, qcom")
        return None
    act = raw.get("action")
    if act == "controller":
        action = SendToController()
    elif act == "drop":
        action = Drop()
    elif isinstance(act, dict) and isinstance(act.get("forward"), int):
        action = ForwardTo(act["forward"])
    else:
        c.error(path + ("action",), "action must be 'controller', 'drop' or {forward: <port>}")
        return None
    return FlowEntry(prio, Match(**{k: (ANY if v == "*" else str(v)) for k, v in m.items()}), action)


def _check_refs(c: _Checker, exp: dict, paths: dict, key: str, fields: dict) -> None:
    section = exp.get(key)
    if not isinstance(section, dict):
        return
    for fname, kind in fields.items():
        val = section.get(fname)
        p = ("experiments", key, fname)
        if val is None:
            continue
        if kind == "path" and val not in paths:
            c.error(p, f"unknown path {val!r}")
        elif kind == "element":
            names = {el.name for path in paths.values() for el in path}
            if val not in names:
                c.error(p, f"unknown element {val!r}")


def load_scenario_text(text: str, source: str = "<scenario>", seed_override: Optional[int] = None) -> Scenario:
    try:
        lines = _line_map(text)
        doc = yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 1
        raise ScenarioError([f"{source}:{line}: <root>: invalid YAML: {exc}"]) from None
    c = _Checker(source, lines)
    if not isinstance(doc, dict):
        raise ScenarioError([f"{source}:1: <root>: scenario must be a mapping"])

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        c.error(("seed",), "seed must be an integer")
        seed = 0
    if seed_override is not None:
        seed = int(seed_override)

    o = c.mapping(doc, "optics", ())
    optics = {
        "wavelength": c.number(o, "wavelength_um", ("optics",), 0.810, positive=True),
        "coherence_dc": c.number(o, "coherence_dc_um", ("optics",), 100.0, positive=True),
        "coherence_pump": c.number(o, "coherence_pump_um", ("optics",), 1.0e6, positive=True),
    }
    if optics["coherence_pump"] < optics["coherence_dc"]:
        c.error(("optics", "coherence_pump_um"), "pump coherence must be >= down-converted coherence")

    s = c.mapping(doc, "source", ())
    p_shared = c.number(s, "p_shared", ("source",), 0.5, nonneg=True)
    p_filtered = c.number(s, "p_filtered", ("source",), 0.5, nonneg=True)
    sign = s.get("filtered_sign", 1)
    if sign not in (1, -1):
        c.error(("source", "filtered_sign"), "must be +1 or -1")
        sign = 1
    source = SourceModel(1.0e4, 0.5, 0.5, 1)
    if p_shared + p_filtered > 1 + 1e-12:
        c.error(("source", "p_filtered"), "p_shared + p_filtered exceeds 1")
    else:
        source = SourceModel(c.number(s, "pair_rate", ("source",), 1.0e4, nonneg=True), p_shared, p_filtered, sign)

    paths: dict = {}
    raw_paths = c.mapping(doc, "paths", (), required=True)
    seen_names: dict = {}
    for user, elements in raw_paths.items():
        pp = ("paths", user)
        if not isinstance(elements, list) or not elements:
            c.error(pp, "a path must be a non-empty list of elements")
            continue
        built = []
        for i, raw in enumerate(elements):
            el = _element(c, raw, pp + (i,), seed)
            if el is None:
                continue
            if el.name in seen_names:
                c.error(pp + (i, "name"), f"element name {el.name!r} already used in path {seen_names[el.name]!r}")
            seen_names[el.name] = user
            built.append(el)
        paths[user] = tuple(built)

    window = c.number(doc, "window_ps", (), 100.0, positive=True)
    stations = {}
    for name, raw in c.mapping(doc, "stations", ()).items():
        sp = ("stations", name)
        if not isinstance(raw, dict):
            c.error(sp, "station must be a mapping")
            continue
        delay = c.number(raw, "delay_ps", sp, 1000.0, positive=True)
        jitter = c.number(raw, "jitter_ps", sp, 20.0, nonneg=True)
        if delay <= 4 * window:
            c.error(sp + ("delay_ps",), f"0-degree delay must exceed 4 x window ({4 * window} ps)")
        st_seed = raw.get("seed")
        stations[name] = UserStation(name, delay, int(st_seed) if isinstance(st_seed, int)
                                     else stream_seed(seed, f"station:{name}"), jitter)

    exp = c.mapping(doc, "experiments", ())
    _check_refs(c, exp, paths, "scan", {"path": "path", "stage": "element", "lc": "element"})
    _check_refs(c, exp, paths, "fig3", {"alice": "path", "bob": "path", "uncalibrated_element": "element"})
    _check_refs(c, exp, paths, "qkd", {"alice": "path", "bob": "path"})
    _check_refs(c, exp, paths, "probe", {"alice": "path", "bob": "path"})
    for key in ("fig3",):
        acts = (exp.get(key) or {}).get("actuators") if isinstance(exp.get(key), dict) else None
        if isinstance(acts, dict):
            names = {el.name for path in paths.values() for el in path}
            for u, a in acts.items():
                if a not in names:
                    c.error(("experiments", key, "actuators", u), f"unknown element {a!r}")
    q = exp.get("qkd")
    if isinstance(q, dict) and q.get("alice") in stations and q.get("bob") in stations:
        a, b = stations[q["alice"]], stations[q["bob"]]
        gap = min_signature_gap(a.basis_delay_0, b.basis_delay_0)
        if gap < 2 * window:
            c.error(("stations", q["bob"], "delay_ps"),
                    f"delay signatures with {q['alice']} are only {gap} ps apart (need {2 * window})")
    if isinstance(exp.get("scan"), dict):
        sc = exp["scan"]
        rng_ = sc.get("range_um")
        if rng_ is not None and (not isinstance(rng_, list) or len(rng_) != 2 or rng_[1] <= rng_[0]):
            c.error(("experiments", "scan", "range_um"), "range must be [low, high] with high > low")
        c.number(sc, "step_um", ("experiments", "scan"), 50.0, positive=True)

    cp = c.mapping(doc, "control_plane", ())
    control = {}
    if cp:
        ports = cp.get("ports") or {}
        if not isinstance(ports, dict) or not ports:
            c.error(("control_plane", "ports"), "ports must map each user to a switch port")
            ports = {}
        if len(set(ports.values())) != len(ports):
            c.error(("control_plane", "ports"), "two users share one switch port")
        flows = []
        for i, raw in enumerate(cp.get("flows") or []):
            fe = _flow(c, raw, ("control_plane", "flows", i))
            if fe is not None:
                flows.append(fe)
        relay = cp.get("relay") or {}
        slots = relay.get("slots", 1)
        if not isinstance(slots, int) or slots < 0:
            c.error(("control_plane", "relay", "slots"), "slot count must be a non-negative integer")
            slots = 1
        busy = relay.get("busy") or []
        for i, pair in enumerate(busy):
            if not (isinstance(pair, list) and len(pair) == 2 and pair[0] != pair[1]):
                c.error(("control_plane", "relay", "busy", i), "busy entries are [user, user] pairs")
        if len(busy) > slots:
            c.error(("control_plane", "relay", "busy"), "more busy pairs than relay slots")
        lat = cp.get("latency", [1.0, 5.0])
        if not (isinstance(lat, list) and len(lat) == 2 and 0 <= lat[0] <= lat[1]):
            c.error(("control_plane", "latency"), "latency must be [min, max] with 0 <= min <= max")
            lat = [1.0, 5.0]
        req = cp.get("request") or {}
        for key in ("src", "dst"):
            if key not in req:
                c.error(("control_plane", "request", key), "missing request endpoint")
        control = {
            "ports": ports,
            "flows": tuple(flows),
            "slots": slots,
            "slot_duration": c.number(relay, "slot_duration_s", ("control_plane", "relay"), 1.0, positive=True),
            "busy": tuple(tuple(p) for p in busy if isinstance(p, list)),
            "busy_release_at": c.number(relay, "busy_release_at", ("control_plane", "relay"), None, nonneg=True),
            "latency": tuple(lat),
            "request": req,
            "session": cp.get("session") or {},
            "nack_devices": tuple(cp.get("nack_devices") or ()),
        }
        for user in ports:
            if user not in stations:
                c.error(("control_plane", "ports", user), f"user {user!r} has no station")
            if user not in paths:
                c.error(("control_plane", "ports", user), f"user {user!r} has no fiber path")

    if c.problems:
        raise ScenarioError(c.problems)
    sc = Scenario(source, seed, optics, source, paths, stations, window, exp, control)
    sc._text = text
    return sc


def load_scenario(path, seed_override: Optional[int] = None) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError([f"{path}:0: <file>: cannot read scenario ({exc.strerror})"]) from None
    return load_scenario_text(text, str(path), seed_override)
