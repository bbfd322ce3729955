"""Independent reference computations used by the tests.

Nothing here imports the propagation or parity code under test: parities are
computed from explicit bra-ket projections, and optical chains are composed as
plain 2x2 Jones matrices per photon.
"""

import numpy as np

S = 1 / np.sqrt(2)
H = np.array([1.0, 0.0])
V = np.array([0.0, 1.0])

BELL = {
    "PsiPlus": np.array([0, S, S, 0], dtype=complex),
    "PsiMinus": np.array([0, S, -S, 0], dtype=complex),
    "PhiPlus": np.array([S, 0, 0, S], dtype=complex),
    "PhiMinus": np.array([S, 0, 0, -S], dtype=complex),
}


def analyzer(angle):
    """Pass states of a polarizer pair at ``angle``: (+, -) single-photon vectors."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c, s]), np.array([-s, c])


def p_correlated(psi, angle=np.pi / 4):
    """Probability both photons give the same outcome, by direct projection."""
    plus, minus = analyzer(angle)
    pp = np.kron(plus, plus)
    mm = np.kron(minus, minus)
    return abs(np.vdot(pp, psi)) ** 2 + abs(np.vdot(mm, psi)) ** 2


def p_correlated_rho(rho, angle=np.pi / 4):
    plus, minus = analyzer(angle)
    total = 0.0
    for v in (np.kron(plus, plus), np.kron(minus, minus)):
        total += np.real(np.vdot(v, rho @ v))
    return total


def retarder(phase):
    """Slow axis along V."""
    return np.diag([1.0, np.exp(1j * phase)])


def rot90():
    return np.array([[0.0, -1.0], [1.0, 0.0]])


def jones(path, k, time=0.0):
    """Compose a path (sequence of Element-like objects) into one Jones matrix."""
    j = np.eye(2, dtype=complex)
    for el in path:
        if not el.enabled:
            continue
        kind = el.kind.value
        if kind == "Connector90":
            m = rot90()
        elif kind in ("FiberSegment", "DelayStage"):
            m = retarder(k * el.delay_at(time))
        else:
            m = retarder(el.phase)
        j = m @ j
    return j


def chain_parity(psi, path1, path2, k, angle=np.pi / 4, time=0.0):
    out = np.kron(jones(path1, k, time), jones(path2, k, time)) @ psi
    return p_correlated(out, angle)


def gaussian(u, length):
    return np.exp(-((np.asarray(u, dtype=float) / length) ** 2))


def psi_dip(delta, length_dc):
    """Singlet through one shared fiber with excess path ``delta``."""
    return (1 - gaussian(2 * delta, length_dc)) / 2


def quadrature_phase(p0, p90, anti=False):
    """Parity phase from the correlated probability with an extra 0 and pi/2 on photon 1.

    Phi-like parity is (1 + V cos phi)/2, singlet-like is (1 - V cos phi)/2.
    """
    if anti:
        return np.arctan2(2 * p90 - 1, 1 - 2 * p0)
    return np.arctan2(1 - 2 * p90, 2 * p0 - 1)
