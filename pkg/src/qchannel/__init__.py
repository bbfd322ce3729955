"""Calibration, synchronization and key exchange over birefringent fiber channels."""

from .optics import (
    ChannelTopology,
    ConfigurationError,
    DriftModel,
    Element,
    SourceModel,
    analytic_parity,
    connector90,
    fiber,
    liquid_crystal,
    propagate,
    route,
    stage,
    wave_plate,
)
from .polarization import ParityDistribution, TwoPhotonState, bell_state, parity_probabilities
from .procedures import (
    NoDipFound,
    Strategy,
    SyncController,
    calibrate,
    detect_dip,
    response_order_probe,
    run_sync_loop,
    scan,
    sync_step,
    sync_verify_and_cycle,
)
from .timebin import Basis, UserStation, estimate_qber, run_session

__all__ = [
    "Basis", "ChannelTopology", "ConfigurationError", "DriftModel", "Element", "NoDipFound",
    "ParityDistribution", "SourceModel", "Strategy", "SyncController", "TwoPhotonState", "UserStation",
    "analytic_parity", "bell_state", "calibrate", "connector90", "detect_dip", "estimate_qber", "fiber",
    "liquid_crystal", "parity_probabilities", "propagate", "response_order_probe", "route", "run_session",
    "run_sync_loop", "scan", "stage", "sync_step", "sync_verify_and_cycle", "wave_plate",
]
