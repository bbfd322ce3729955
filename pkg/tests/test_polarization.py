import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import BELL, p_correlated, p_correlated_rho
from qchannel.polarization import (
    DensityState,
    ParityDistribution,
    TwoPhotonState,
    apply_phase_on_v,
    apply_rotation,
    bell_state,
    joint_probabilities,
    parity_probabilities,
    phi_state,
    random_state,
)

S = 1 / np.sqrt(2)
angles = st.floats(-2 * np.pi, 2 * np.pi, allow_nan=False)
photons = st.sampled_from([1, 2, "both"])


def same_up_to_phase(a, b, tol=1e-12):
    return abs(abs(np.vdot(a, b)) - 1.0) < tol


@pytest.mark.parametrize("kind", list(BELL))
def test_bell_states_match_definitions(kind):
    np.testing.assert_allclose(bell_state(kind).amplitudes, BELL[kind], atol=1e-15)


def test_phase_on_both_turns_phi_plus_into_phi_minus():
    out = apply_phase_on_v(bell_state("PhiPlus"), "both", np.pi / 2)
    np.testing.assert_allclose(out.amplitudes, BELL["PhiMinus"], atol=1e-12)


def test_common_phase_on_singlet_is_global():
    phi = 0.731
    out = apply_phase_on_v(bell_state("PsiMinus"), "both", phi)
    np.testing.assert_allclose(out.amplitudes, np.exp(1j * phi) * BELL["PsiMinus"], atol=1e-12)


def test_quarter_phase_balances_phi_minus():
    out = apply_phase_on_v(bell_state("PhiMinus"), "both", np.pi / 4)
    # equal weight on the two Phi states
    assert abs(abs(np.vdot(BELL["PhiPlus"], out.amplitudes)) ** 2 - 0.5) < 1e-12
    assert abs(parity_probabilities(out).p_correlated - 0.5) < 1e-12


@given(angles)
def test_singlet_rotation_invariant(theta):
    out = apply_rotation(bell_state("PsiMinus"), "both", theta)
    assert same_up_to_phase(out.amplitudes, BELL["PsiMinus"])


def test_bilateral_rotations_of_phi_plus_and_psi_plus():
    out = apply_rotation(bell_state("PhiPlus"), "both", np.pi / 4)
    np.testing.assert_allclose(out.amplitudes, BELL["PhiPlus"], atol=1e-12)
    out = apply_rotation(bell_state("PsiPlus"), "both", np.pi / 4)
    assert same_up_to_phase(out.amplitudes, BELL["PhiMinus"])


def test_rotation_convention_turns_h_toward_v():
    # photon 1 rotated by +90 degrees takes |HH> to |VH>
    hh = TwoPhotonState(np.array([1, 0, 0, 0], dtype=complex))
    out = apply_rotation(hh, 1, np.pi / 2)
    np.testing.assert_allclose(out.amplitudes, [0, 0, 1, 0], atol=1e-12)


@pytest.mark.parametrize("kind,expected", [("PsiMinus", 0.0), ("PhiPlus", 1.0), ("PhiMinus", 0.0), ("PsiPlus", 1.0)])
def test_bell_parities_at_45(kind, expected):
    assert abs(parity_probabilities(bell_state(kind), np.pi / 4).p_correlated - expected) < 1e-12


def test_parity_of_phi_theta_closed_form():
    assert abs(parity_probabilities(phi_state(np.pi / 2)).p_correlated - 0.5) < 1e-12


@given(st.floats(0, 2 * np.pi))
def test_phase_oscillation_law(theta):
    p = parity_probabilities(phi_state(theta)).p_correlated
    assert abs(p - (1 + np.cos(theta)) / 2) < 1e-12


@given(st.integers(0, 2**32 - 1), angles)
def test_parity_matches_projection_oracle(seed, angle):
    s = random_state(np.random.default_rng(seed))
    assert abs(parity_probabilities(s, angle).p_correlated - p_correlated(s.amplitudes, angle)) < 1e-12
    rho = s.density()
    assert abs(parity_probabilities(rho, angle).p_correlated - p_correlated_rho(rho.matrix, angle)) < 1e-12


def test_unitarity_on_random_states():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s = random_state(rng)
        for _ in range(3):
            photon = [1, 2, "both"][rng.integers(3)]
            if rng.random() < 0.5:
                s = apply_rotation(s, photon, rng.uniform(-7, 7))
            else:
                s = apply_phase_on_v(s, photon, rng.uniform(-7, 7))
        assert abs(np.sum(np.abs(s.amplitudes) ** 2) - 1) < 1e-12


def test_singlet_anticorrelated_on_grid():
    for theta in np.linspace(0, 2 * np.pi, 100):
        assert parity_probabilities(bell_state("PsiMinus"), theta).p_correlated < 1e-12


@given(st.floats(-10, 10), angles)
def test_singlet_phase_immunity(phase, angle):
    s = bell_state("PsiMinus")
    out = apply_phase_on_v(s, "both", phase)
    assert abs(parity_probabilities(out, angle).p_correlated - parity_probabilities(s, angle).p_correlated) < 1e-12
    np.testing.assert_allclose(joint_probabilities(out, angle, angle + 0.3),
                               joint_probabilities(s, angle, angle + 0.3), atol=1e-12)


@given(st.integers(0, 2**32 - 1), photons, st.floats(-10, 10))
def test_density_operations_stay_physical(seed, photon, angle):
    rho = random_state(np.random.default_rng(seed)).density()
    out = apply_rotation(apply_phase_on_v(rho, photon, angle), photon, angle / 3)
    m = out.matrix
    assert np.allclose(m, m.conj().T, atol=1e-12)
    assert abs(np.trace(m).real - 1) < 1e-12
    assert np.linalg.eigvalsh(m).min() > -1e-10


def test_invalid_states_rejected():
    with pytest.raises(ValueError):
        TwoPhotonState(np.array([1, 1, 0, 0], dtype=complex))
    with pytest.raises(ValueError):
        DensityState(np.diag([0.5, 0.5, 0.5, 0.0]).astype(complex))
    with pytest.raises(ValueError):
        ParityDistribution(0.7, 0.7)


def test_parity_distribution_sums_to_one():
    d = ParityDistribution.from_correlated(0.3)
    assert abs(d.p_correlated + d.p_anticorrelated - 1) < 1e-12
