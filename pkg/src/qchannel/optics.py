"""Birefringent channel model for photon pairs.

Each photon walks an ordered list of elements. The slow axis of every
birefringent element is the lab V axis; a ``Connector90`` physically rotates
the photon by +90 degrees (H -> V, V -> -H), which is what makes downstream
slow-axis delays land on the other original polarization.

For every two-photon basis state we keep a ledger (T1, T2) of slow-axis
excess path picked up by each photon. Coherence between two basis states is
suppressed by ``gamma_pump(dS) * gamma_dc(dD)`` where S = T1 + T2 and
D = T1 - T2. The pump scale is long, the down-conversion scale is short, so
a single-fiber Psi state shows a narrow dip while a Phi state keeps its
fringes across centimetres of path difference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .polarization import (
    H,
    V,
    DensityState,
    ParityDistribution,
    TwoPhotonState,
    bell_state,
    correlation_observable,
    parity_probabilities,
)


class ConfigurationError(ValueError):
    """Raised for malformed topologies, scenarios or device settings."""


class ElementKind(str, Enum):
    FIBER = "FiberSegment"
    STAGE = "DelayStage"
    LIQUID_CRYSTAL = "LiquidCrystal"
    WAVE_PLATE = "WavePlate"
    CONNECTOR90 = "Connector90"


class DriftKind(str, Enum):
    SINUSOID = "sinusoid"
    RANDOM_WALK = "random_walk"
    CONSTANT = "constant"


@dataclass(frozen=True)
class DriftModel:
    kind: DriftKind = DriftKind.CONSTANT
    amplitude: float = 0.0  # um
    period: float = 1.0  # s
    step_sigma: float = 0.0  # um / sqrt(s)
    seed: int = 0
    dt: float = 0.01  # random-walk grid, s

    def __post_init__(self):
        object.__setattr__(self, "kind", DriftKind(self.kind))
        if self.kind is DriftKind.SINUSOID and self.period <= 0:
            raise ConfigurationError("sinusoidal drift needs a positive period")
        if self.kind is DriftKind.RANDOM_WALK and self.dt <= 0:
            raise ConfigurationError("random-walk drift needs a positive dt")


_WALK_BLOCK = 4096


@lru_cache(maxsize=64)
def _walk_prefix(model: DriftModel, n_blocks: int) -> np.ndarray:
    # Steps are always drawn from the start of the seeded stream, so values
    # do not depend on the order in which times are queried.
    rng = np.random.default_rng(model.seed)
    steps = rng.normal(0.0, model.step_sigma * np.sqrt(model.dt), size=n_blocks * _WALK_BLOCK)
    return np.concatenate([[0.0], np.cumsum(steps)])


def drift_value(model: Optional[DriftModel], time: float) -> float:
    """Excess-path drift in um at ``time`` seconds."""
    if model is None or model.kind is DriftKind.CONSTANT:
        return 0.0
    if time < 0:
        raise ValueError("drift time must be non-negative")
    if model.kind is DriftKind.SINUSOID:
        return float(model.amplitude * np.sin(2.0 * np.pi * time / model.period))
    pos = time / model.dt
    i = int(np.floor(pos))
    n_blocks = i // _WALK_BLOCK + 1
    walk = _walk_prefix(model, n_blocks)
    frac = pos - i
    return float(walk[i] + frac * (walk[i + 1] - walk[i]))


@dataclass(frozen=True)
class Element:
    kind: ElementKind
    name: str = ""
    delay: float = 0.0  # um, slow-minus-fast excess path (fiber) or stage offset
    phase: float = 0.0  # rad, retarders only
    drift: Optional[DriftModel] = None
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ElementKind(self.kind))
        k = self.kind
        if k is ElementKind.CONNECTOR90 and (self.delay != 0.0 or self.phase != 0.0):
            raise ConfigurationError(f"connector {self.name!r} cannot carry delay or phase")
        if k in (ElementKind.FIBER, ElementKind.STAGE) and self.phase != 0.0:
            raise ConfigurationError(f"{k.value} {self.name!r} cannot carry a retarder phase")
        if k in (ElementKind.LIQUID_CRYSTAL, ElementKind.WAVE_PLATE) and self.delay != 0.0:
            raise ConfigurationError(f"retarder {self.name!r} cannot carry a delay")
        if self.drift is not None and k is not ElementKind.FIBER:
            raise ConfigurationError(f"only fiber segments drift ({self.name!r} is {k.value})")
        if not (np.isfinite(self.delay) and np.isfinite(self.phase)):
            raise ConfigurationError(f"element {self.name!r} has a non-finite parameter")

    def delay_at(self, time: float) -> float:
        return self.delay + drift_value(self.drift, time)


def fiber(delay: float, name: str = "fiber", drift: Optional[DriftModel] = None) -> Element:
    return Element(ElementKind.FIBER, name, delay=delay, drift=drift)


def stage(offset: float = 0.0, name: str = "stage") -> Element:
    return Element(ElementKind.STAGE, name, delay=offset)


def liquid_crystal(phase: float = 0.0, name: str = "lc") -> Element:
    return Element(ElementKind.LIQUID_CRYSTAL, name, phase=phase)


def wave_plate(phase: float = np.pi / 4, name: str = "waveplate") -> Element:
    return Element(ElementKind.WAVE_PLATE, name, phase=phase)


def connector90(name: str = "connector", enabled: bool = True) -> Element:
    return Element(ElementKind.CONNECTOR90, name, enabled=enabled)


@dataclass(frozen=True)
class ChannelTopology:
    path1: tuple
    path2: tuple
    wavelength: float = 0.810  # um
    coherence_dc: float = 100.0  # um
    coherence_pump: float = 1.0e6  # um

    def __post_init__(self):
        p1 = tuple(self.path1)
        p2 = p1 if self.path2 is self.path1 else tuple(self.path2)
        object.__setattr__(self, "path1", p1)
        object.__setattr__(self, "path2", p2)
        if not p1 or not p2:
            raise ConfigurationError("each photon path needs at least one element")
        for el in p1 + p2:
            if not isinstance(el, Element):
                raise ConfigurationError(f"unsupported element {el!r}")
        if self.wavelength <= 0:
            raise ConfigurationError("mean wavelength must be positive")
        if self.coherence_dc <= 0 or self.coherence_pump <= 0:
            raise ConfigurationError("coherence lengths must be positive")
        if self.coherence_pump < self.coherence_dc:
            raise ConfigurationError("pump coherence must not be shorter than down-converted coherence")

    @property
    def shared(self) -> bool:
        return self.path1 is self.path2

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength

    def element(self, name: str) -> Element:
        for el in self.path1 + self.path2:
            if el.name == name:
                return el
        raise ConfigurationError(f"no element named {name!r} in topology")

    def replace_element(self, name: str, **changes) -> "ChannelTopology":
        self.element(name)

        def swap(path):
            return tuple(replace(el, **changes) if el.name == name else el for el in path)

        p1 = swap(self.path1)
        p2 = p1 if self.shared else swap(self.path2)
        return replace(self, path1=p1, path2=p2)

    def with_delay(self, name: str, delay: float) -> "ChannelTopology":
        return self.replace_element(name, delay=delay)

    def with_phase(self, name: str, phase: float) -> "ChannelTopology":
        return self.replace_element(name, phase=phase)

    def with_coherence(self, dc: float, pump: float) -> "ChannelTopology":
        return replace(self, coherence_dc=dc, coherence_pump=pump)


def route(paths: dict, user1: str, user2: str, **optics) -> ChannelTopology:
    """Topology for photon 1 going to ``user1`` and photon 2 to ``user2``."""
    p1 = tuple(paths[user1])
    p2 = p1 if user1 == user2 else tuple(paths[user2])
    return ChannelTopology(p1, p2, **optics)


@dataclass(frozen=True)
class AnnotatedState:
    density: DensityState
    ledger: np.ndarray  # (4, 2) slow-axis excess path per photon, indexed like density rows

    def __post_init__(self):
        ledger = np.asarray(self.ledger, dtype=float).reshape(4, 2)
        if not np.all(np.isfinite(ledger)):
            raise ValueError("ledger entries must be finite")
        object.__setattr__(self, "ledger", ledger)


def envelope(u, length: float):
    """Gaussian visibility exp(-(u/L)^2); an infinite length gives 1."""
    u = np.asarray(u, dtype=float)
    if np.isinf(length):
        return np.ones_like(u)
    return np.exp(-((u / length) ** 2))


@dataclass
class _PathResponse:
    # indexed by the photon's initial polarization (H, V)
    out_pol: np.ndarray
    sign: np.ndarray
    excess: np.ndarray  # um
    phase: np.ndarray  # rad
    on_stage: np.ndarray  # how many times the photon crossed the stage on the slow axis


def _walk_path(path: Sequence[Element], time: float, k: float, stage_name: Optional[str]) -> _PathResponse:
    out_pol = np.zeros(2, dtype=int)
    sign = np.ones(2)
    excess = np.zeros(2)
    phase = np.zeros(2)
    on_stage = np.zeros(2)
    for p0 in (H, V):
        pol, s, t, ph, n = p0, 1.0, 0.0, 0.0, 0.0
        for el in path:
            if not el.enabled:
                continue
            kind = el.kind
            if kind is ElementKind.CONNECTOR90:
                if pol == H:
                    pol = V
                else:
                    pol, s = H, -s
            elif pol == V:
                if kind in (ElementKind.FIBER, ElementKind.STAGE):
                    if stage_name is not None and el.name == stage_name:
                        n += 1.0
                        continue
                    d = el.delay_at(time)
                    t += d
                    ph += k * d
                else:
                    ph += el.phase
        out_pol[p0], sign[p0], excess[p0], phase[p0], on_stage[p0] = pol, s, t, ph, n
    return _PathResponse(out_pol, sign, excess, phase, on_stage)


def _check_stage(topology: ChannelTopology, stage_name: str) -> None:
    el = topology.element(stage_name)
    if el.kind is not ElementKind.STAGE:
        raise ConfigurationError(f"element {stage_name!r} is not a delay stage")


def _assemble(state: TwoPhotonState, topology: ChannelTopology, time: float,
              stage_name: Optional[str] = None, offsets=None):
    """Batch propagation; returns (rho[N,4,4], ledger[N,4,2])."""
    k = topology.wavenumber
    r1 = _walk_path(topology.path1, time, k, stage_name)
    r2 = _walk_path(topology.path2, time, k, stage_name)
    offsets = np.zeros(1) if offsets is None else np.atleast_1d(np.asarray(offsets, dtype=float))

    p1 = np.array([0, 0, 1, 1])
    p2 = np.array([0, 1, 0, 1])
    out = 2 * r1.out_pol[p1] + r2.out_pol[p2]
    # (N, 4) ledgers and phases, indexed by input basis state
    t1 = r1.excess[p1][None, :] + offsets[:, None] * r1.on_stage[p1][None, :]
    t2 = r2.excess[p2][None, :] + offsets[:, None] * r2.on_stage[p2][None, :]
    phase = (r1.phase[p1] + r2.phase[p2])[None, :] + k * offsets[:, None] * (r1.on_stage[p1] + r2.on_stage[p2])[None, :]
    amp = state.amplitudes[None, :] * (r1.sign[p1] * r2.sign[p2])[None, :] * np.exp(1j * phase)

    s = t1 + t2
    d = t1 - t2
    gamma = envelope(s[:, :, None] - s[:, None, :], topology.coherence_pump) * envelope(
        d[:, :, None] - d[:, None, :], topology.coherence_dc
    )
    rho_in = amp[:, :, None] * amp[:, None, :].conj() * gamma
    # reorder rows/cols from input-basis labels to output labels
    inv = np.empty(4, dtype=int)
    inv[out] = np.arange(4)
    rho = rho_in[:, inv][:, :, inv]
    ledger = np.stack([t1, t2], axis=-1)[:, inv]
    return rho, ledger


def propagate(state: TwoPhotonState, topology: ChannelTopology, time: float = 0.0) -> AnnotatedState:
    rho, ledger = _assemble(state, topology, time)
    m = rho[0]
    return AnnotatedState(DensityState(0.5 * (m + m.conj().T)), ledger[0])


def coincidence_parity(annotated: AnnotatedState, basis_angle: float = np.pi / 4) -> ParityDistribution:
    return parity_probabilities(annotated.density, basis_angle)


def parity_vs_stage(state: TwoPhotonState, topology: ChannelTopology, stage_name: str,
                    offsets, time: float = 0.0, basis_angle: float = np.pi / 4) -> np.ndarray:
    """Correlated probability for each stage offset, vectorized over offsets."""
    _check_stage(topology, stage_name)
    rho, _ = _assemble(state, topology, time, stage_name, offsets)
    m = correlation_observable(basis_angle)
    p = np.einsum("ij,nji->n", m, rho).real
    return np.clip(p, 0.0, 1.0)


def analytic_parity(state: TwoPhotonState, topology: ChannelTopology, time: float = 0.0,
                    basis_angle: float = np.pi / 4) -> ParityDistribution:
    return coincidence_parity(propagate(state, topology, time), basis_angle)


# --- source and counting -------------------------------------------------


class PulseKind(str, Enum):
    SHARED = "shared"
    FILTERED = "filtered"
    VACUUM = "vacuum"


@dataclass(frozen=True)
class PulseEvent:
    kind: PulseKind
    user: Optional[int] = None  # 1 or 2 for filtered pulses


@dataclass(frozen=True)
class SourceModel:
    pair_rate: float = 1.0e4  # pairs / s
    p_shared: float = 0.5
    p_filtered: float = 0.5
    filtered_sign: int = 1

    def __post_init__(self):
        if self.pair_rate < 0:
            raise ConfigurationError("pair rate must be non-negative")
        if min(self.p_shared, self.p_filtered) < 0 or self.p_shared + self.p_filtered > 1 + 1e-12:
            raise ConfigurationError("p_shared + p_filtered must lie in [0, 1]")
        if self.filtered_sign not in (1, -1):
            raise ConfigurationError("filtered_sign must be +1 or -1")

    def shared_state(self) -> TwoPhotonState:
        return bell_state("PsiMinus")

    def filtered_state(self) -> TwoPhotonState:
        return bell_state("PhiPlus" if self.filtered_sign > 0 else "PhiMinus")

    @property
    def shared_rate(self) -> float:
        return self.pair_rate * self.p_shared

    @property
    def filtered_rate_per_user(self) -> float:
        return self.pair_rate * self.p_filtered / 2.0


def emit_pulse(source: SourceModel, rng: np.random.Generator) -> PulseEvent:
    u = rng.random()
    if u < source.p_shared:
        return PulseEvent(PulseKind.SHARED)
    if u < source.p_shared + source.p_filtered:
        return PulseEvent(PulseKind.FILTERED, user=1 if rng.random() < 0.5 else 2)
    return PulseEvent(PulseKind.VACUUM)


@dataclass(frozen=True)
class CountPair:
    n_correlated: int
    n_anticorrelated: int

    @property
    def total(self) -> int:
        return self.n_correlated + self.n_anticorrelated

    def observed(self, basis_angle: float = np.pi / 4) -> Optional[ParityDistribution]:
        if self.total == 0:
            return None
        return ParityDistribution.from_correlated(self.n_correlated / self.total, basis_angle)


def sample_counts(parity: ParityDistribution, rate: float, window: float,
                  rng: np.random.Generator) -> CountPair:
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if window <= 0:
        raise ValueError("window must be positive")
    mean = rate * window
    n_c = rng.poisson(mean * parity.p_correlated)
    n_a = rng.poisson(mean * parity.p_anticorrelated)
    return CountPair(int(n_c), int(n_a))
