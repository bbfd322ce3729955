"""Time-encoded QKD: basis choice read back from coincidence delays."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from itertools import combinations

import numpy as np

from .optics import ChannelTopology, ConfigurationError, DriftKind, ElementKind, propagate
from .polarization import bell_state, joint_probabilities


class Basis(IntEnum):
    RECTILINEAR = 0  # 0 degrees, fiber eigenbasis, carries the extra delay
    DIAGONAL = 45

    @property
    def angle(self) -> float:
        return np.deg2rad(int(self))


@dataclass(frozen=True)
class UserStation:
    name: str
    basis_delay_0: float = 1000.0  # ps
    seed: int = 0
    detection_jitter: float = 20.0  # ps, Gaussian sigma

    def check(self, window: float) -> None:
        if self.basis_delay_0 <= 4.0 * window:
            raise ConfigurationError(
                f"station {self.name}: 0-degree delay {self.basis_delay_0} ps must exceed 4 x window ({window} ps)"
            )


def signatures(alice_delay: float, bob_delay: float) -> dict:
    """Expected bob_time - alice_time for each (alice_basis, bob_basis)."""
    return {
        (Basis.DIAGONAL, Basis.DIAGONAL): 0.0,
        (Basis.DIAGONAL, Basis.RECTILINEAR): bob_delay,
        (Basis.RECTILINEAR, Basis.DIAGONAL): -alice_delay,
        (Basis.RECTILINEAR, Basis.RECTILINEAR): bob_delay - alice_delay,
    }


def min_signature_gap(alice_delay: float, bob_delay: float) -> float:
    vals = list(signatures(alice_delay, bob_delay).values())
    return min(abs(a - b) for a, b in combinations(vals, 2))


def signatures_separated(alice_delay: float, bob_delay: float, window: float) -> bool:
    return min_signature_gap(alice_delay, bob_delay) >= 2.0 * window


def check_stations(alice: UserStation, bob: UserStation, window: float) -> None:
    if window <= 0:
        raise ConfigurationError("coincidence window must be positive")
    alice.check(window)
    bob.check(window)
    gap = min_signature_gap(alice.basis_delay_0, bob.basis_delay_0)
    if gap < 2.0 * window:
        raise ConfigurationError(
            f"delay signatures of {alice.name}/{bob.name} are only {gap} ps apart; need >= {2 * window} ps"
        )


def classify_coincidence(delta_t: float, alice: UserStation, bob: UserStation, window: float):
    """Return (alice_basis, bob_basis) or None when no signature matches."""
    if window <= 0:
        raise ValueError("window must be positive")
    for pair, sig in signatures(alice.basis_delay_0, bob.basis_delay_0).items():
        if abs(delta_t - sig) <= window:
            return pair
    return None


@dataclass(frozen=True)
class PulseRecord:
    pulse_id: int
    alice_basis: Basis
    bob_basis: Basis
    alice_time: float  # ps
    bob_time: float  # ps
    alice_bit: int
    bob_bit: int

    @property
    def delta_t(self) -> float:
        return self.bob_time - self.alice_time


@dataclass(frozen=True)
class SiftedKey:
    alice_bits: tuple
    bob_bits: tuple
    matched_pulse_ids: tuple
    qber: float
    sifted_fraction: float
    matched_bases: tuple = ()

    def __post_init__(self):
        if len(self.alice_bits) != len(self.bob_bits) or len(self.alice_bits) != len(self.matched_pulse_ids):
            raise ValueError("sifted key lists must have equal length")

    def __len__(self):
        return len(self.alice_bits)

    def subset_qber(self, basis: Basis) -> tuple[float, int]:
        """QBER over matched pulses in one basis, with the number of pulses."""
        idx = [i for i, b in enumerate(self.matched_bases) if b == basis]
        if not idx:
            return float("nan"), 0
        err = sum(self.alice_bits[i] != self.bob_bits[i] for i in idx)
        return err / len(idx), len(idx)


@dataclass
class Session:
    records: list
    classified: list  # (alice_basis, bob_basis) or None, per record
    key: SiftedKey
    window: float

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pulse_id", "alice_basis", "bob_basis", "delta_t_ps", "matched", "alice_bit", "bob_bit"])
            for rec, cls in zip(self.records, self.classified):
                ab = "" if cls is None else int(cls[0])
                bb = "" if cls is None else int(cls[1])
                matched = int(cls is not None and cls[0] == cls[1])
                w.writerow([rec.pulse_id, ab, bb, repr(float(rec.delta_t)), matched, rec.alice_bit, rec.bob_bit])

    def qber_series(self, bin_seconds: float, rate: float, basis: Basis = Basis.DIAGONAL) -> list:
        """(bin start s, n matched, qber) in ``basis`` per time bin."""
        ids = np.array(self.key.matched_pulse_ids, dtype=float)
        bases = np.array([int(b) for b in self.key.matched_bases])
        errs = np.array(self.key.alice_bits) != np.array(self.key.bob_bits)
        if len(ids) == 0:
            return []
        t = ids / rate
        n_bins = int(np.floor(len(self.records) / rate / bin_seconds + 1e-9))
        out = []
        for k in range(max(n_bins, 1)):
            sel = (t >= k * bin_seconds) & (t < (k + 1) * bin_seconds) & (bases == int(basis))
            n = int(sel.sum())
            out.append((k * bin_seconds, n, float(errs[sel].mean()) if n else float("nan")))
        return out


def _has_drift(topology: ChannelTopology) -> bool:
    return any(
        el.kind is ElementKind.FIBER and el.drift is not None and el.drift.kind is not DriftKind.CONSTANT
        for el in topology.path1 + topology.path2
    )


def run_session(topology: ChannelTopology, alice: UserStation, bob: UserStation, n_pulses: int, rate: float,
                rng: np.random.Generator, window: float = 100.0, time_offset: float = 0.0) -> Session:
    """Distribute shared singlets, measure in random bases and sift by delay signature.

    Basis choices and jitter come from each station's own seeded stream; ``rng``
    only drives the joint measurement outcome.
    """
    check_stations(alice, bob, window)
    if rate <= 0:
        raise ValueError("pulse rate must be positive")
    rng_a = np.random.default_rng(alice.seed)
    rng_b = np.random.default_rng(bob.seed)
    psi = bell_state("PsiMinus")
    drifting = _has_drift(topology)

    def joint_table(t):
        rho = propagate(psi, topology, t).density
        return {
            (ba, bb): joint_probabilities(rho, ba.angle, bb.angle)
            for ba in Basis for bb in Basis
        }

    table = None if drifting else joint_table(time_offset)
    choices = (Basis.RECTILINEAR, Basis.DIAGONAL)
    records, classified = [], []
    a_bits, b_bits, ids, bases = [], [], [], []
    period_ps = 1e12 / rate
    for pid in range(n_pulses):
        t_s = time_offset + pid / rate
        if drifting:
            table = joint_table(t_s)
        ba = choices[int(rng_a.integers(2))]
        bb = choices[int(rng_b.integers(2))]
        outcome = int(rng.choice(4, p=table[(ba, bb)]))
        a_bit, b_bit = outcome >> 1, outcome & 1
        emit = pid * period_ps
        t_a = emit + (alice.basis_delay_0 if ba is Basis.RECTILINEAR else 0.0) + rng_a.normal(0.0, alice.detection_jitter)
        t_b = emit + (bob.basis_delay_0 if bb is Basis.RECTILINEAR else 0.0) + rng_b.normal(0.0, bob.detection_jitter)
        rec = PulseRecord(pid, ba, bb, t_a, t_b, a_bit, b_bit)
        cls = classify_coincidence(t_b - t_a, alice, bob, window)
        records.append(rec)
        classified.append(cls)
        if cls is not None and cls[0] == cls[1]:
            a_bits.append(a_bit)
            # singlet outcomes are anti-correlated; Bob flips so keys agree
            b_bits.append(1 - b_bit)
            ids.append(pid)
            bases.append(cls[0])
    n = len(ids)
    qber = float(np.mean(np.array(a_bits) != np.array(b_bits))) if n else float("nan")
    key = SiftedKey(tuple(a_bits), tuple(b_bits), tuple(ids), qber,
                    n / n_pulses if n_pulses else 0.0, tuple(bases))
    return Session(records, classified, key, window)


def estimate_qber(key: SiftedKey, sample_fraction: float, rng: np.random.Generator):
    """Reveal a random subset and return (qber estimate, revealed pulse ids)."""
    if len(key) == 0:
        raise ValueError("cannot estimate QBER on an empty key")
    if not 0 < sample_fraction <= 1:
        raise ValueError("sample_fraction must be in (0, 1]")
    n = len(key)
    m = max(1, int(round(sample_fraction * n)))
    idx = np.sort(rng.choice(n, size=m, replace=False))
    a = np.array(key.alice_bits)[idx]
    b = np.array(key.bob_bits)[idx]
    revealed = tuple(key.matched_pulse_ids[i] for i in idx)
    return float(np.mean(a != b)), revealed


def discard_revealed(key: SiftedKey, revealed) -> SiftedKey:
    drop = set(revealed)
    keep = [i for i, pid in enumerate(key.matched_pulse_ids) if pid not in drop]
    a = tuple(key.alice_bits[i] for i in keep)
    b = tuple(key.bob_bits[i] for i in keep)
    qber = float(np.mean(np.array(a) != np.array(b))) if keep else float("nan")
    bases = tuple(key.matched_bases[i] for i in keep) if key.matched_bases else ()
    return SiftedKey(a, b, tuple(key.matched_pulse_ids[i] for i in keep), qber, key.sifted_fraction, bases)
