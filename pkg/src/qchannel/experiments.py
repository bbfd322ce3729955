"""Scenario-driven experiment runners behind the command-line interface.

Each runner writes its CSV files into an output directory and returns a
RunReport. CSV contents depend only on the scenario and the master seed.
"""

from __future__ import annotations

import csv
import time as _time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .control.network import ControlPlaneSpec, orchestrate, ready_after_acks
from .control.wire import encode
from .optics import ElementKind, analytic_parity, route
from .polarization import bell_state
from .procedures import (
    NoDipFound,
    Observable,
    Strategy,
    SyncController,
    calibrate_with_traces,
    detect_dip,
    operating_point,
    response_order_probe,
    run_sync_loop,
    scan,
    scan_offsets,
    observable_parity,
    write_history_csv,
    write_loop_csv,
)
from .scenario import Scenario, stream
from .timebin import Basis, run_session, signatures_separated


class OrchestrationFailed(RuntimeError):
    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


@dataclass
class RunReport:
    command: str
    seed: int
    outputs: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def add(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def write_summary(self, out_dir: Path) -> Path:
        path = self.add(out_dir / f"{self.command}_summary.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["seed", self.seed])
            for k in sorted(self.metrics):
                w.writerow([k, _cell(self.metrics[k])])
        return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _section(scenario: Scenario, key: str) -> dict:
    sec = scenario.experiments.get(key)
    if not isinstance(sec, dict):
        raise ValueError(f"scenario has no experiments.{key} section")
    return sec


def _first_of_kind(topology, kind: ElementKind) -> Optional[str]:
    for el in topology.path1 + topology.path2:
        if el.kind is kind:
            return el.name
    return None


def _finish(report: RunReport, out_dir: Path, started: float) -> RunReport:
    report.write_summary(out_dir)
    report.wall_time = _time.perf_counter() - started
    return report


# --- scans -----------------------------------------------------------------


def cmd_scan(scenario: Scenario, state: str, out_dir) -> RunReport:
    """Psi dip scans (per LC phase plus the rotated calibration scan) or the Phi fringe scan."""
    started = _time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sec = _section(scenario, "scan")
    path = sec.get("path") or next(iter(scenario.paths))
    topo = scenario.topology(path)
    stage = sec.get("stage") or _first_of_kind(topo, ElementKind.STAGE)
    if stage is None:
        raise ValueError("scan needs a delay stage in the scanned path")
    lo, hi = sec.get("range_um", [-15000.0, 15000.0])
    step = float(sec.get("step_um", 50.0))
    rate = sec.get("rate")
    window = float(sec.get("window_s", 1.0))
    rng = stream(scenario.seed, f"source:scan:{state}")
    report = RunReport(f"scan_{state}", scenario.seed)
    report.metrics.update(step_um=step, range_low_um=lo, range_high_um=hi)

    if state == "psi":
        psi = scenario.source.shared_state()
        lc = sec.get("lc") or _first_of_kind(topo, ElementKind.LIQUID_CRYSTAL)
        phases = sec.get("lc_phases", [0.0, np.pi / 2, np.pi]) if lc else [None]
        centers = []
        for i, ph in enumerate(phases):
            t = topo if ph is None else topo.with_phase(lc, float(ph))
            trace = scan(t, stage, psi, (lo, hi), step, rate, window, rng)
            trace.write_csv(report.add(out / f"scan_psi_lc{i}.csv"))
            try:
                c, w = detect_dip(trace)
            except NoDipFound:
                c, w = float("nan"), float("nan")
            centers.append(c)
            report.metrics[f"dip_center_lc{i}_um"] = c
            report.metrics[f"dip_width_lc{i}_um"] = w
            if ph is not None:
                report.metrics[f"lc{i}_phase_rad"] = float(ph)
        shift = float(np.max(centers) - np.min(centers))
        report.metrics["dip_center_spread_um"] = shift
        report.metrics["dip_phase_independent"] = bool(shift < step)
        if _first_of_kind(topo, ElementKind.CONNECTOR90) is not None:
            result, _, (_, rotated) = calibrate_with_traces(topo, stage, psi, (lo, hi), step, rate, window, rng)
            rotated.write_csv(report.add(out / "scan_psi_rotated.csv"))
            report.metrics["dip_center_first_um"] = result.dip_center_1
            report.metrics["dip_center_rotated_um"] = result.dip_center_2
            report.metrics["calibration_point_um"] = result.calibration_point
        return _finish(report, out, started)

    if state != "phi":
        raise ValueError(f"unknown scan state {state!r}; use psi or phi")
    phi = scenario.source.filtered_state()
    ph = sec.get("phi", {}) or {}
    spacing = float(ph.get("checkpoint_spacing_um", 1000.0))
    m = int(ph.get("fringe_points", 16))
    n_paths = sum(any(el.name == stage for el in p) for p in (topo.path1, topo.path2))
    period = topo.wavelength / n_paths
    checkpoints = np.arange(lo, hi + spacing / 2, spacing)
    offsets = (checkpoints[:, None] + period * np.arange(m)[None, :] / m).ravel()
    trace = scan_offsets(topo, stage, phi, offsets, rate, window, rng)
    trace.write_csv(report.add(out / "scan_phi.csv"))
    sig = trace.signal.reshape(len(checkpoints), m)
    # amplitude of the fundamental over one full fringe, relative to the ideal 0.5
    x1 = np.abs(np.fft.fft(sig, axis=1)[:, 1])
    rel = 4.0 * x1 / m
    amp_path = report.add(out / "scan_phi_amplitude.csv")
    with open(amp_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["offset_um", "relative_amplitude"])
        for c, a in zip(checkpoints, rel):
            w.writerow([repr(float(c)), repr(float(a))])
    report.metrics.update(
        fringe_period_um=period,
        checkpoints=len(checkpoints),
        min_relative_amplitude=float(rel.min()),
        amplitude_ok=bool(rel.min() >= 0.9),
    )
    return _finish(report, out, started)


# --- Fig 3 -----------------------------------------------------------------


def _spectrum(x: np.ndarray, window: float, drift_period: Optional[float]) -> dict:
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)) ** 2
    n = len(x)
    k_peak = int(np.argmax(power[1:])) + 1
    out = {"dominant_period_s": n * window / k_peak}
    if drift_period:
        k = int(round(n * window / drift_period))
        noise = np.delete(power[1:], [i - 1 for i in (k - 1, k, k + 1) if 1 <= i < len(power)])
        out["drift_bin_power_ratio"] = float(power[k] / noise.mean()) if k < len(power) else float("nan")
        out["period_error"] = abs(out["dominant_period_s"] - drift_period) / drift_period
    return out


def _trace_stats(samples: list, window: float, drift_period: Optional[float], target: float,
                 settle: float) -> dict:
    m = np.array([s.measured for s in samples])
    tot = np.array([s.counts.total for s in samples], dtype=float)
    t = np.array([s.time for s in samples])
    mean = float(np.nanmean(m))
    sigma = float(np.sqrt(np.sum(0.25 / np.maximum(tot, 1))) / len(m))
    stats = {"mean_parity": mean, "sigma_mean": sigma}
    stats.update(_spectrum(np.nan_to_num(m, nan=mean), window, drift_period))
    post = np.abs(m[t >= settle] - target)
    stats["fraction_within_0.1"] = float(np.mean(post <= 0.1)) if len(post) else float("nan")
    stats["cycles"] = int(sum(s.cycled for s in samples))
    return stats


def cmd_fig3(scenario: Scenario, out_dir) -> RunReport:
    """Uncalibrated, calibrated open-loop and synchronized parity-vs-time traces."""
    started = _time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sec = _section(scenario, "fig3")
    a, b = sec.get("alice", "alice"), sec.get("bob", "bob")
    actuators = sec["actuators"]
    duration = float(sec.get("duration_s", 60.0))
    window = float(sec.get("window_s", 0.1))
    settle = float(sec.get("settle_s", 5.0))
    ctrl = sec.get("controller", {}) or {}
    shared_target = float(ctrl.get("shared_target", 0.0))
    drift_period = scenario.drift_period()
    report = RunReport("fig3", scenario.seed)

    def loop(paths, label, controllers=None):
        return run_sync_loop(
            paths, (a, b), actuators, scenario.source, duration, window,
            stream(scenario.seed, f"source:fig3:{label}"), controllers,
            verify_every=int(ctrl.get("verify_every", 20)), tolerance=float(ctrl.get("tolerance", 0.25)),
            shared_target=shared_target, cycle_user=ctrl.get("cycle_user"), optics=scenario.optics,
        )

    calibrated = dict(scenario.paths)
    uncal_name = sec.get("uncalibrated_element")
    uncal_delay = float(sec.get("uncalibrated_delay_um", 5000.0))
    uncalibrated = {
        u: tuple(replace(el, delay=uncal_delay) if el.name == uncal_name else el for el in p)
        for u, p in calibrated.items()
    }
    controllers = {
        u: SyncController(Strategy.FIFTY_FIFTY, gain=float(ctrl.get("gain", 0.5)), window=window,
                          target_parity=float(ctrl.get("target_parity", 0.5)),
                          slope_sign=int(ctrl.get("slope_sign", -1)),
                          estimate_slope=bool(ctrl.get("estimate_slope", False)))
        for u in (a, b)
    }
    runs = {
        "uncalibrated": loop(uncalibrated, "a"),
        "calibrated": loop(calibrated, "b"),
        "synchronized": loop(calibrated, "c", controllers),
    }
    for label, samples in runs.items():
        write_loop_csv(samples, report.add(out / f"fig3_{label}.csv"))
        for k, v in _trace_stats(samples, window, drift_period, shared_target, settle).items():
            report.metrics[f"{label}_{k}"] = v
    for u, c in controllers.items():
        write_history_csv(c, report.add(out / f"fig3_history_{u}.csv"))

    m = report.metrics
    m["drift_period_s"] = drift_period if drift_period else float("nan")
    m["uncalibrated_mean_ok"] = bool(abs(m["uncalibrated_mean_parity"] - 0.5) <= 3 * m["uncalibrated_sigma_mean"])
    m["uncalibrated_no_peak"] = bool(m.get("uncalibrated_drift_bin_power_ratio", 0.0) < NOISE_PEAK_RATIO)
    m["calibrated_period_ok"] = bool(m.get("calibrated_period_error", 1.0) <= 0.1)
    m["synchronized_ok"] = bool(m["synchronized_fraction_within_0.1"] >= 0.95)
    return _finish(report, out, started)


# a spectral line counts as a peak when it stands this far above the mean periodogram level
NOISE_PEAK_RATIO = 10.0


# --- QKD -------------------------------------------------------------------


def _with_element(paths: dict, name: str, **changes) -> dict:
    return {u: tuple(replace(el, **changes) if el.name == name else el for el in p) for u, p in paths.items()}


def _session_metrics(prefix: str, session, n_pulses: int) -> dict:
    key = session.key
    q45, n45 = key.subset_qber(Basis.DIAGONAL)
    q0, n0 = key.subset_qber(Basis.RECTILINEAR)
    return {
        f"{prefix}sifted_fraction": key.sifted_fraction,
        f"{prefix}sifted_sigma": float(np.sqrt(0.25 / n_pulses)),
        f"{prefix}sifted_bits": len(key),
        f"{prefix}qber": key.qber,
        f"{prefix}qber_diagonal": q45,
        f"{prefix}n_diagonal": n45,
        f"{prefix}qber_rectilinear": q0,
    }


def cmd_qkd(scenario: Scenario, out_dir) -> RunReport:
    """Time-encoded key session, plus optional uncalibrated and drifting comparisons."""
    started = _time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sec = _section(scenario, "qkd")
    a, b = sec.get("alice", "alice"), sec.get("bob", "bob")
    n = int(sec.get("n_pulses", 10000))
    rate = float(sec.get("rate", 10000.0))
    alice, bob = scenario.stations[a], scenario.stations[b]
    window = scenario.window_ps
    report = RunReport("qkd", scenario.seed)

    def session(paths, label):
        topo = route(paths, a, b, **scenario.optics)
        return run_session(topo, alice, bob, n, rate, stream(scenario.seed, f"source:qkd:{label}"), window)

    main = session(scenario.paths, "main")
    main.write_log(report.add(out / "qkd_session.csv"))
    report.metrics.update(_session_metrics("", main, n))
    report.metrics["qber_ok"] = bool(main.key.qber <= 0.01)
    report.metrics["sifted_ok"] = bool(abs(main.key.sifted_fraction - 0.5) <= 5 * np.sqrt(0.25 / n))

    unc = sec.get("uncalibrated")
    if isinstance(unc, dict):
        s = session(_with_element(scenario.paths, unc["element"], delay=float(unc.get("delay_um", 5000.0))),
                    "uncalibrated")
        s.write_log(report.add(out / "qkd_uncalibrated_session.csv"))
        report.metrics.update(_session_metrics("uncalibrated_", s, n))
        q, k = s.key.subset_qber(Basis.DIAGONAL)
        report.metrics["uncalibrated_diagonal_ok"] = bool(k > 0 and abs(q - 0.5) <= 3 * np.sqrt(0.25 / k))

    dr = sec.get("drift")
    if isinstance(dr, dict):
        from .optics import DriftModel

        model = DriftModel("sinusoid", amplitude=float(dr["amplitude_um"]), period=float(dr["period_s"]))
        paths = _with_element(scenario.paths, dr["element"], drift=model)
        s = session(paths, "drift")
        bin_s = float(dr.get("bin_s", 0.05))
        series = s.qber_series(bin_s, rate)
        # predicted 45-degree error rate is the shared-pair correlated probability
        topo = route(paths, a, b, **scenario.optics)
        psi = bell_state("PsiMinus")
        predicted = [
            float(np.mean([analytic_parity(psi, topo, t0 + f * bin_s).p_correlated for f in np.linspace(0, 1, 9)]))
            for t0, _, _ in series
        ]
        path = report.add(out / "qkd_drift_series.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "n_matched", "qber", "predicted_qber"])
            for (t0, k, q), p in zip(series, predicted):
                w.writerow([repr(float(t0)), k, repr(float(q)), repr(p)])
        q = np.array([x[2] for x in series])
        ok = np.isfinite(q)
        report.metrics["drift_qber_range"] = float(np.ptp(q[ok])) if ok.any() else float("nan")
        report.metrics["drift_qber_correlation"] = (
            float(np.corrcoef(q[ok], np.array(predicted)[ok])[0, 1]) if ok.sum() > 2 else float("nan")
        )
    return _finish(report, out, started)


# --- orchestration ---------------------------------------------------------


def _trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "src", "dst", "type", "message"])
        for e in trace:
            w.writerow([repr(float(e.time)), e.src, e.dst, type(e.message).__name__, encode(e.message)])


def cmd_orchestrate(scenario: Scenario, out_dir) -> RunReport:
    """Request a key exchange over the control plane, then run the session in the granted slot.

    Raises OrchestrationFailed (after writing the message trace) when the
    exchange is refused or never becomes ready.
    """
    started = _time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cp = scenario.control_plane
    if not cp:
        raise ValueError("scenario has no control_plane section")
    users = {u: {"port": p, "delay_ps": int(scenario.stations[u].basis_delay_0)} for u, p in cp["ports"].items()}
    spec = ControlPlaneSpec(users, cp["slots"], cp["slot_duration"], scenario.window_ps, cp["flows"],
                            cp["busy"], cp["busy_release_at"], cp["latency"], cp["nack_devices"])
    requester, peer = cp["request"]["src"], cp["request"]["dst"]
    result = orchestrate(spec, requester, peer, stream(scenario.seed, "transport"))
    report = RunReport("orchestrate", scenario.seed)
    _trace_csv(result.trace, report.add(out / "orchestrate_trace.csv"))
    ex = result.exchange
    m = report.metrics
    m["messages"] = len(result.trace)
    m["ready_users"] = ";".join(sorted(result.ready_users))
    m["ready_after_acks"] = ready_after_acks(result.trace)
    m["deferred_grant"] = bool(ex is not None and ex.deferred)
    m["errors"] = " | ".join(result.errors)
    m["ok"] = result.ok
    if not result.ok:
        _finish(report, out, started)
        raise OrchestrationFailed(result.errors[0] if result.errors else "exchange never became ready", report)

    m["slot"] = ex.slot
    # the session uses the configuration the devices accepted
    delay_req = result.registry.get_config(ControlPlaneSpec.device_of(requester)).delay_ps
    delay_peer = result.registry.get_config(ControlPlaneSpec.device_of(peer)).delay_ps
    m["requester_delay_ps"] = delay_req
    m["peer_delay_ps"] = delay_peer
    m["signatures_separated"] = signatures_separated(delay_peer, delay_req, scenario.window_ps)
    st_peer = replace(scenario.stations[peer], basis_delay_0=float(delay_peer))
    st_req = replace(scenario.stations[requester], basis_delay_0=float(delay_req))
    sess_cfg = cp.get("session", {}) or {}
    n = int(sess_cfg.get("n_pulses", 10000))
    rate = float(sess_cfg.get("rate", 10000.0))
    topo = route(scenario.paths, peer, requester, **scenario.optics)
    session = result.scheduler.run_in_slot(
        (requester, peer), ex.slot,
        lambda: run_session(topo, st_peer, st_req, n, rate, stream(scenario.seed, "source:orchestrate"),
                            scenario.window_ps),
    )
    session.write_log(report.add(out / "orchestrate_session.csv"))
    m.update(_session_metrics("session_", session, n))
    m["session_qber_ok"] = bool(session.key.qber <= 0.05)
    return _finish(report, out, started)


# --- response order --------------------------------------------------------


def cmd_probe_order(scenario: Scenario, out_dir) -> RunReport:
    """Slope of each observable with respect to applied phase at its controller's operating point."""
    started = _time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sec = scenario.experiments.get("probe") or {}
    names = list(scenario.paths)
    a = sec.get("alice", names[0])
    b = sec.get("bob", names[1] if len(names) > 1 else names[0])
    delta = float(sec.get("delta", 1e-3))
    sign = scenario.source.filtered_sign
    report = RunReport("probe_order", scenario.seed)
    cases = [
        (Observable.FILTERED_PHI, Strategy.FIFTY_FIFTY, scenario.topology(a)),
        (Observable.SHARED_PSI, Strategy.MAXIMIZE, scenario.topology(a, b)),
    ]
    rows = []
    for obs, strat, topo in cases:
        phase = operating_point(topo, strat, obs, filtered_sign=sign)
        slope = response_order_probe(topo, obs, phase, delta, filtered_sign=sign)
        p = observable_parity(topo, obs, phase, sign)
        rows.append((obs.value, strat.value, phase, p, slope))
        report.metrics[f"{strat.value}_slope_per_rad"] = slope
        report.metrics[f"{strat.value}_operating_phase_rad"] = phase
    path = report.add(out / "probe_order.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observable", "strategy", "phase_rad", "p_correlated", "slope_per_rad"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3])), repr(float(r[4]))])
    s_ff = abs(report.metrics["fifty_fifty_slope_per_rad"])
    s_mx = abs(report.metrics["maximize_slope_per_rad"])
    # the floor keeps the ratio finite when the second-order slope vanishes numerically
    ratio = s_ff / max(s_mx, 1e-6)
    report.metrics["slope_ratio"] = ratio
    report.metrics["ratio_ok"] = bool(ratio >= 100)
    report.metrics["fifty_fifty_slope_ok"] = bool(abs(s_ff - 0.5) <= 1e-3)
    return _finish(report, out, started)


COMMANDS = {
    "fig3": cmd_fig3,
    "qkd": cmd_qkd,
    "orchestrate": cmd_orchestrate,
    "probe-order": cmd_probe_order,
}
