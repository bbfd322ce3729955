"""Calibration scans and bit-parity synchronization loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .optics import (
    ChannelTopology,
    ConfigurationError,
    CountPair,
    ElementKind,
    SourceModel,
    analytic_parity,
    liquid_crystal,
    parity_vs_stage,
    route,
    sample_counts,
)
from .polarization import ParityDistribution, TwoPhotonState, bell_state

TWO_PI = 2.0 * np.pi
DIAGONAL = np.pi / 4


class NoDipFound(RuntimeError):
    """No point of the trace falls significantly below its baseline."""

    def __init__(self, message: str, scan: Optional[str] = None):
        super().__init__(message if scan is None else f"{scan} scan: {message}")
        self.scan = scan


@dataclass(frozen=True)
class ScanPoint:
    offset: float
    parity: ParityDistribution
    counts: Optional[CountPair] = None

    @property
    def signal(self) -> float:
        """Correlated fraction; counts-normalized when counts were sampled."""
        if self.counts is not None and self.counts.total > 0:
            return self.counts.n_correlated / self.counts.total
        return self.parity.p_correlated


@dataclass(frozen=True)
class ScanTrace:
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        if len(pts) < 3:
            raise ValueError("a scan trace needs at least 3 points")
        offsets = np.array([p.offset for p in pts])
        if np.any(np.diff(offsets) <= 0):
            raise ValueError("scan offsets must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([p.offset for p in self.points])

    @property
    def p_correlated(self) -> np.ndarray:
        return np.array([p.parity.p_correlated for p in self.points])

    @property
    def signal(self) -> np.ndarray:
        return np.array([p.signal for p in self.points])

    @property
    def totals(self) -> Optional[np.ndarray]:
        if any(p.counts is None for p in self.points):
            return None
        return np.array([p.counts.total for p in self.points], dtype=float)

    def write_csv(self, path, time: float = 0.0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "offset_um", "p_correlated", "n_corr", "n_anti"])
            for p in self.points:
                nc = "" if p.counts is None else p.counts.n_correlated
                na = "" if p.counts is None else p.counts.n_anticorrelated
                w.writerow([_fmt(time), _fmt(p.offset), _fmt(p.parity.p_correlated), nc, na])


def _fmt(x: float) -> str:
    return repr(float(x))


def scan_offsets(topology: ChannelTopology, stage: str, input_state: TwoPhotonState, offsets,
                 rate: Optional[float] = None, window: float = 1.0,
                 rng: Optional[np.random.Generator] = None, time: float = 0.0) -> ScanTrace:
    """Scan the stage over explicit offsets. ``rate=None`` skips count sampling."""
    offsets = np.asarray(offsets, dtype=float)
    p = parity_vs_stage(input_state, topology, stage, offsets, time=time)
    counts = [None] * len(offsets)
    if rate is not None:
        if rng is None:
            raise ValueError("sampling counts needs an rng")
        mean = rate * window
        n_c = rng.poisson(mean * p)
        n_a = rng.poisson(mean * (1.0 - p))
        counts = [CountPair(int(a), int(b)) for a, b in zip(n_c, n_a)]
    points = tuple(
        ScanPoint(float(o), ParityDistribution.from_correlated(float(pc)), c)
        for o, pc, c in zip(offsets, p, counts)
    )
    return ScanTrace(points)


def scan(topology: ChannelTopology, stage: str, input_state: TwoPhotonState,
         range_: tuple, step: float, rate: Optional[float] = None, window: float = 1.0,
         rng: Optional[np.random.Generator] = None, time: float = 0.0) -> ScanTrace:
    lo, hi = range_
    if step <= 0:
        raise ValueError("scan step must be positive")
    if hi <= lo:
        raise ValueError("scan range is empty")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    offsets = lo + step * np.arange(n)
    return scan_offsets(topology, stage, input_state, offsets, rate, window, rng, time)


def dip_threshold_sigmas(n_points: int, false_alarm: float = 1e-3) -> float:
    """Threshold depth in standard errors: at least 3, widened so a flat trace of
    ``n_points`` triggers with probability at most ``false_alarm``."""
    from scipy.stats import norm

    return max(3.0, float(norm.isf(false_alarm / max(n_points, 1))))


def detect_dip(trace: ScanTrace) -> tuple[float, float]:
    """Locate the correlated-fraction dip; returns (center, full width at half depth)."""
    x = trace.offsets
    s = trace.signal
    n = len(x)
    edge = max(1, int(round(0.1 * n)))
    baseline = float(np.median(np.concatenate([s[:edge], s[-edge:]])))
    totals = trace.totals
    if totals is None:
        sigma = np.full(n, 1e-9)
    else:
        with np.errstate(divide="ignore"):
            sigma = np.sqrt(baseline * (1.0 - baseline) / totals)
        sigma[~np.isfinite(sigma)] = np.inf
        sigma = np.maximum(sigma, 1e-9)
    below = s < baseline - dip_threshold_sigmas(n) * sigma
    if not below.any():
        raise NoDipFound("no point falls below the baseline threshold")

    # keep the run of significant points around the deepest one; isolated
    # noise excursions elsewhere would drag the centroid
    i_min = int(np.argmin(np.where(below, s, np.inf)))
    lo = i_min
    while lo > 0 and below[lo - 1]:
        lo -= 1
    hi = i_min
    while hi < n - 1 and below[hi + 1]:
        hi += 1
    w = baseline - s[lo:hi + 1]
    center = float(np.sum(w * x[lo:hi + 1]) / np.sum(w))

    half = baseline - 0.5 * (baseline - s[i_min])
    left = i_min
    while left > 0 and s[left - 1] <= half:
        left -= 1
    right = i_min
    while right < n - 1 and s[right + 1] <= half:
        right += 1
    x_left = x[left] if left == 0 else np.interp(half, [s[left], s[left - 1]], [x[left], x[left - 1]])
    x_right = x[right] if right == n - 1 else np.interp(half, [s[right], s[right + 1]], [x[right], x[right + 1]])
    return center, float(x_right - x_left)


@dataclass(frozen=True)
class CalibrationResult:
    dip_center_1: float
    dip_center_2: float
    calibration_point: float
    dip_width_1: float
    dip_width_2: float


def _connectors(topology: ChannelTopology, names: Optional[Sequence[str]]) -> list[str]:
    if names is not None:
        for nm in names:
            if topology.element(nm).kind is not ElementKind.CONNECTOR90:
                raise ConfigurationError(f"element {nm!r} is not a Connector90")
        return list(names)
    found = []
    for el in topology.path1 + topology.path2:
        if el.kind is ElementKind.CONNECTOR90 and el.name not in found:
            found.append(el.name)
    if not found:
        raise ConfigurationError("calibration needs a Connector90 pair around the fiber")
    return found


def toggle_connectors(topology: ChannelTopology, names: Sequence[str]) -> ChannelTopology:
    for nm in names:
        topology = topology.replace_element(nm, enabled=not topology.element(nm).enabled)
    return topology


def calibrate_with_traces(topology: ChannelTopology, stage: str, input_state: TwoPhotonState,
                          range_: tuple, step: float, rate: Optional[float] = None, window: float = 1.0,
                          rng: Optional[np.random.Generator] = None, time: float = 0.0,
                          connectors: Optional[Sequence[str]] = None):
    """Double scan with the fiber coupling rotated by 90 degrees in between.

    Returns ``(result, parked_topology, (trace, rotated_trace))``. The parked
    topology has the stage at the midpoint of the two dips and the connectors
    left as they were.
    """
    names = _connectors(topology, connectors)
    traces = (
        scan(topology, stage, input_state, range_, step, rate, window, rng, time),
        scan(toggle_connectors(topology, names), stage, input_state, range_, step, rate, window, rng, time),
    )
    dips = []
    for label, tr in zip(("first", "rotated"), traces):
        try:
            dips.append(detect_dip(tr))
        except NoDipFound as exc:
            raise NoDipFound(str(exc), scan=label) from None
    (c1, w1), (c2, w2) = dips
    result = CalibrationResult(c1, c2, (c1 + c2) / 2.0, w1, w2)
    return result, topology.with_delay(stage, result.calibration_point), traces


def calibrate(topology, stage, input_state, range_, step, rate=None, window=1.0, rng=None,
              time=0.0, connectors=None):
    """Run the double scan; returns ``(CalibrationResult, parked_topology)``."""
    result, parked, _ = calibrate_with_traces(topology, stage, input_state, range_, step, rate,
                                              window, rng, time, connectors)
    return result, parked


# --- synchronization ---------------------------------------------------------


class Strategy(str, Enum):
    MAXIMIZE = "maximize"
    FIFTY_FIFTY = "fifty_fifty"


@dataclass
class SyncController:
    strategy: Strategy = Strategy.FIFTY_FIFTY
    phase_setting: float = 0.0
    gain: float = 0.5
    window: float = 0.1
    target_parity: float = 0.5
    # sign of d(p_correlated)/d(phase) at the crossing to lock onto; both
    # users must share it so their crossings sit a multiple of pi apart
    slope_sign: int = -1
    estimate_slope: bool = False
    min_slope_probe: float = 0.05
    probe_step: float = 0.2
    min_probe_step: float = 0.005
    history: list = field(default_factory=list)
    # hill-climb bookkeeping
    _stage: int = 0
    _center: float = 0.0
    _p_center: float = 0.0
    _p_plus: float = 0.0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.slope_sign not in (1, -1):
            raise ValueError("slope_sign must be +1 or -1")
        self.phase_setting = wrap_phase(self.phase_setting)
        self._center = self.phase_setting


def wrap_phase(phase: float) -> float:
    w = float(np.mod(phase, TWO_PI))
    return 0.0 if w >= TWO_PI else w


def _update_slope_estimate(c: SyncController) -> None:
    if len(c.history) < 2:
        return
    (_, p0, f0), (_, p1, f1) = c.history[-2], c.history[-1]
    df = np.angle(np.exp(1j * (f1 - f0)))
    if abs(df) >= c.min_slope_probe and p1 != p0:
        c.slope_sign = 1 if (p1 - p0) / df > 0 else -1


def sync_step(controller: SyncController, observed: ParityDistribution, time: Optional[float] = None) -> float:
    """Feed one observed parity to the controller and return the new phase command."""
    c = controller
    p = observed.p_correlated
    t = float(len(c.history)) * c.window if time is None else time
    c.history.append((t, p, c.phase_setting))

    if c.strategy is Strategy.FIFTY_FIFTY:
        if c.estimate_slope:
            _update_slope_estimate(c)
        c.phase_setting = wrap_phase(c.phase_setting - c.gain * (p - c.target_parity) * c.slope_sign)
        return c.phase_setting

    # hill climbing: observe centre, probe +step, probe -step, move to the best
    if c._stage == 0:
        c._center, c._p_center = c.phase_setting, p
        c._stage = 1
        c.phase_setting = wrap_phase(c._center + c.probe_step)
    elif c._stage == 1:
        c._p_plus = p
        c._stage = 2
        c.phase_setting = wrap_phase(c._center - c.probe_step)
    else:
        p_minus = p
        best = max((c._p_center, 0.0), (c._p_plus, 1.0), (p_minus, -1.0))
        if best[1] == 0.0:
            c.probe_step = max(c.probe_step / 2.0, c.min_probe_step)
        c._center = wrap_phase(c._center + best[1] * c.probe_step)
        c._stage = 0
        c.phase_setting = c._center
    return c.phase_setting


class VerifyOutcome(NamedTuple):
    cycled: bool
    phase: float


def sync_verify_and_cycle(controller: SyncController, shared_parity: ParityDistribution,
                          tolerance: float, target: float = 0.0) -> VerifyOutcome:
    """Check the shared-pair parity and step the actuator by pi when it is off target."""
    if abs(shared_parity.p_correlated - target) > tolerance:
        controller.phase_setting = wrap_phase(controller.phase_setting + np.pi)
        controller._center = controller.phase_setting
        return VerifyOutcome(True, controller.phase_setting)
    return VerifyOutcome(False, controller.phase_setting)


# --- response order ------------------------------------------------------


class Observable(str, Enum):
    SHARED_PSI = "shared_psi"
    FILTERED_PHI = "filtered_phi"


_PROBE = "__probe_lc__"


def _probed(topology: ChannelTopology, phase: float) -> ChannelTopology:
    # probe phase sits on photon 1's slow axis only
    p1 = topology.path1 + (liquid_crystal(phase, _PROBE),)
    return ChannelTopology(p1, topology.path2, topology.wavelength,
                           topology.coherence_dc, topology.coherence_pump)


def observable_parity(topology: ChannelTopology, observable, phase: float, filtered_sign: int = 1) -> float:
    observable = Observable(observable)
    if observable is Observable.SHARED_PSI:
        state = bell_state("PsiMinus")
    else:
        state = bell_state("PhiPlus" if filtered_sign > 0 else "PhiMinus")
    return analytic_parity(state, _probed(topology, phase)).p_correlated


def response_order_probe(topology: ChannelTopology, observable, operating_phase: float,
                         delta: float = 1e-3, filtered_sign: int = 1) -> float:
    """Central-difference slope of the correlated probability per radian of applied phase."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    hi = observable_parity(topology, observable, operating_phase + delta, filtered_sign)
    lo = observable_parity(topology, observable, operating_phase - delta, filtered_sign)
    return (hi - lo) / (2.0 * delta)


def operating_point(topology: ChannelTopology, strategy, observable, filtered_sign: int = 1,
                    target: float = 0.5, slope_sign: int = -1) -> float:
    """Applied phase where a converged controller of ``strategy`` would sit."""
    from scipy.optimize import brentq, minimize_scalar

    strategy = Strategy(strategy)
    grid = np.linspace(0.0, TWO_PI, 257)
    vals = np.array([observable_parity(topology, observable, g, filtered_sign) for g in grid])
    f = lambda ph: observable_parity(topology, observable, ph, filtered_sign)
    if strategy is Strategy.MAXIMIZE:
        i = int(np.argmax(vals))
        res = minimize_scalar(lambda ph: -f(ph), bracket=(grid[max(i - 1, 0)], grid[i], grid[min(i + 1, 256)]),
                              tol=1e-12)
        return wrap_phase(res.x)
    err = vals - target
    for i in range(len(grid) - 1):
        if err[i] == 0.0 or err[i] * err[i + 1] < 0:
            if np.sign(err[i + 1] - err[i]) == slope_sign:
                if err[i] == 0.0:
                    return float(grid[i])
                return float(brentq(lambda ph: f(ph) - target, grid[i], grid[i + 1], xtol=1e-14))
    raise ValueError(f"observable never crosses {target} with slope sign {slope_sign}")


# --- closed loop ---------------------------------------------------------


@dataclass(frozen=True)
class LoopSample:
    time: float
    p_shared: float  # analytic shared-pair correlated probability
    counts: CountPair  # shared-pair counts in this window
    phases: tuple  # actuator phase per user after the update
    cycled: bool

    @property
    def measured(self) -> float:
        t = self.counts.total
        return self.counts.n_correlated / t if t else float("nan")


def run_sync_loop(paths: dict, users: tuple, actuators: dict, source: SourceModel, duration: float,
                  window: float, rng: np.random.Generator, controllers: Optional[dict] = None,
                  verify_every: int = 20, tolerance: float = 0.25, shared_target: float = 0.0,
                  cycle_user: Optional[str] = None, optics: Optional[dict] = None) -> list:
    """Step both users' feedback loops over simulated time.

    ``controllers=None`` runs the channel open loop. Each user only sees the
    filtered pairs landing on its own fiber; the shared-pair parity is used
    for the periodic half-wave check on ``cycle_user``.
    """
    optics = optics or {}
    a, b = users
    paths = {u: tuple(p) for u, p in paths.items()}
    cycle_user = cycle_user or b
    n_steps = int(round(duration / window))
    samples = []
    shared_acc = [0, 0]

    def set_phase(user, phase):
        paths[user] = tuple(
            replace(el, phase=phase) if el.name == actuators[user] else el for el in paths[user]
        )

    if controllers:
        for u in users:
            set_phase(u, controllers[u].phase_setting)

    for i in range(n_steps):
        t = i * window
        if controllers:
            for u in users:
                topo = route(paths, u, u, **optics)
                par = analytic_parity(source.filtered_state(), topo, t)
                obs = sample_counts(par, source.filtered_rate_per_user, window, rng).observed()
                if obs is not None:
                    set_phase(u, sync_step(controllers[u], obs, time=t))
        shared = analytic_parity(source.shared_state(), route(paths, a, b, **optics), t)
        counts = sample_counts(shared, source.shared_rate, window, rng)
        shared_acc[0] += counts.n_correlated
        shared_acc[1] += counts.n_anticorrelated
        cycled = False
        if controllers and verify_every and (i + 1) % verify_every == 0:
            acc = CountPair(*shared_acc)
            obs = acc.observed()
            if obs is not None:
                out = sync_verify_and_cycle(controllers[cycle_user], obs, tolerance, shared_target)
                if out.cycled:
                    set_phase(cycle_user, out.phase)
                    cycled = True
            shared_acc = [0, 0]
        phases = tuple(
            controllers[u].phase_setting if controllers else _phase_of(paths[u], actuators[u]) for u in users
        )
        samples.append(LoopSample(t, shared.p_correlated, counts, phases, cycled))
    return samples


def _phase_of(path, name):
    for el in path:
        if el.name == name:
            return el.phase
    raise ConfigurationError(f"no actuator named {name!r}")


def write_loop_csv(samples: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "phase_rad", "p_correlated", "n_corr", "n_anti"])
        for s in samples:
            w.writerow([_fmt(s.time), _fmt(s.phases[0]), _fmt(s.p_shared),
                        s.counts.n_correlated, s.counts.n_anticorrelated])


def write_history_csv(controller: SyncController, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "phase_rad", "p_correlated", "n_corr", "n_anti"])
        for t, p, ph in controller.history:
            w.writerow([_fmt(t), _fmt(ph), _fmt(p), "", ""])
