"""Two-photon polarization algebra.

Amplitudes are ordered (HH, HV, VH, VV) with photon 1 as the left tensor
factor, so the index of a basis state is ``2 * p1 + p2`` with H = 0, V = 1.
A positive rotation angle turns H toward V. Measuring "at 45 degrees" means
rotating both photons by -pi/4 and then reading H/V.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

H, V = 0, 1
BASIS_LABELS = ("HH", "HV", "VH", "VV")
_SQ2 = 1.0 / np.sqrt(2.0)

# photon polarization per basis index
_POL = np.array([[H, H], [H, V], [V, H], [V, V]])


class BellKind(str, Enum):
    PSI_PLUS = "PsiPlus"
    PSI_MINUS = "PsiMinus"
    PHI_PLUS = "PhiPlus"
    PHI_MINUS = "PhiMinus"


@dataclass(frozen=True)
class TwoPhotonState:
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(4)
        norm = np.vdot(amps, amps).real
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-9:
            raise ValueError(f"state is not normalized (norm^2 = {norm})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    def density(self) -> "DensityState":
        a = self.amplitudes
        return DensityState(np.outer(a, a.conj()))

    def fidelity(self, other: "TwoPhotonState") -> float:
        """|<self|other>|^2, insensitive to global phase."""
        return float(abs(np.vdot(self.amplitudes, other.amplitudes)) ** 2)


@dataclass(frozen=True)
class DensityState:
    matrix: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.matrix, dtype=complex).reshape(4, 4)
        if np.max(np.abs(rho - rho.conj().T)) > 1e-12:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(rho).real - 1.0) > 1e-12:
            raise ValueError("density matrix trace is not 1")
        if np.linalg.eigvalsh(rho).min() < -1e-10:
            raise ValueError("density matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "matrix", rho)


@dataclass(frozen=True)
class ParityDistribution:
    p_correlated: float
    p_anticorrelated: float
    basis_angle: float = np.pi / 4

    def __post_init__(self):
        total = self.p_correlated + self.p_anticorrelated
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"parity probabilities sum to {total}, not 1")
        for p in (self.p_correlated, self.p_anticorrelated):
            if not -1e-12 <= p <= 1 + 1e-12:
                raise ValueError(f"probability {p} outside [0, 1]")

    @classmethod
    def from_correlated(cls, p_correlated: float, basis_angle: float = np.pi / 4):
        p = min(max(float(p_correlated), 0.0), 1.0)
        return cls(p, 1.0 - p, basis_angle)


State = Union[TwoPhotonState, DensityState]


def bell_state(kind) -> TwoPhotonState:
    kind = BellKind(kind)
    amps = {
        BellKind.PSI_PLUS: (0, _SQ2, _SQ2, 0),
        BellKind.PSI_MINUS: (0, _SQ2, -_SQ2, 0),
        BellKind.PHI_PLUS: (_SQ2, 0, 0, _SQ2),
        BellKind.PHI_MINUS: (_SQ2, 0, 0, -_SQ2),
    }[kind]
    return TwoPhotonState(np.array(amps, dtype=complex))


def phi_state(theta: float) -> TwoPhotonState:
    """(|HH> + e^{i theta}|VV>)/sqrt(2)."""
    return TwoPhotonState(np.array([_SQ2, 0, 0, _SQ2 * np.exp(1j * theta)]))


def _targets(photon) -> tuple[int, ...]:
    if photon in (1, "1"):
        return (0,)
    if photon in (2, "2"):
        return (1,)
    if photon == "both":
        return (0, 1)
    raise ValueError(f"photon must be 1, 2 or 'both', got {photon!r}")


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    # columns are the images of H and V
    return np.array([[c, -s], [s, c]])


def local_unitary(photon, single: np.ndarray) -> np.ndarray:
    """Lift a 2x2 single-photon operator to the two-photon space."""
    eye = np.eye(2)
    targets = _targets(photon)
    u1 = single if 0 in targets else eye
    u2 = single if 1 in targets else eye
    return np.kron(u1, u2)


def phase_on_v_unitary(photon, phase: float) -> np.ndarray:
    if not np.isfinite(phase):
        raise ValueError("phase must be finite")
    return local_unitary(photon, np.diag([1.0, np.exp(1j * phase)]))


def apply_unitary(state: State, u: np.ndarray) -> State:
    if isinstance(state, DensityState):
        rho = u @ state.matrix @ u.conj().T
        return DensityState(0.5 * (rho + rho.conj().T))
    return TwoPhotonState(u @ state.amplitudes)


def apply_phase_on_v(state: State, photon, phase: float) -> State:
    return apply_unitary(state, phase_on_v_unitary(photon, phase))


def apply_rotation(state: State, photon, angle: float) -> State:
    return apply_unitary(state, local_unitary(photon, rotation_matrix(angle)))


def correlation_observable(basis_angle: float) -> np.ndarray:
    """Hermitian M with p_correlated = tr(M rho) for a bilateral measurement."""
    u = local_unitary("both", rotation_matrix(-basis_angle))
    proj = np.diag([1.0, 0.0, 0.0, 1.0])
    return u.conj().T @ proj @ u


def parity_probabilities(state: State, basis_angle: float = np.pi / 4) -> ParityDistribution:
    u = local_unitary("both", rotation_matrix(-basis_angle))
    if isinstance(state, DensityState):
        probs = np.real(np.diag(u @ state.matrix @ u.conj().T))
    else:
        probs = np.abs(u @ state.amplitudes) ** 2
    p_corr = float(probs[0] + probs[3])
    p_corr = min(max(p_corr, 0.0), 1.0)
    return ParityDistribution(p_corr, 1.0 - p_corr, basis_angle)


def joint_probabilities(state: State, angle1: float, angle2: float) -> np.ndarray:
    """Outcome probabilities (HH, HV, VH, VV) when each photon is measured in its own basis."""
    u = np.kron(rotation_matrix(-angle1), rotation_matrix(-angle2))
    if isinstance(state, DensityState):
        probs = np.real(np.diag(u @ state.matrix @ u.conj().T))
    else:
        probs = np.abs(u @ state.amplitudes) ** 2
    probs = np.clip(probs, 0.0, None)
    return probs / probs.sum()


def random_state(rng: np.random.Generator) -> TwoPhotonState:
    amps = rng.normal(size=4) + 1j * rng.normal(size=4)
    return TwoPhotonState(amps / np.linalg.norm(amps))
