"""Fiber / attenuator transmittance and leakage from a co-propagating classical channel."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .encoder import PulseTrain
from .model import (
    ChannelSpec,
    ClassicalChannelSpec,
    DetectorSpec,
    db_to_linear,
    dbm_to_watts,
    photon_energy,
)


@dataclass(frozen=True)
class ChannelState:
    transmittance_t: float
    background_rate: float = 0.0


def transmittance(channel: ChannelSpec) -> float:
    return db_to_linear(channel.total_loss_db)


def attenuate(train: PulseTrain, t: float) -> PulseTrain:
    if not 0 < t <= 1:
        raise ValueError("transmittance must lie in (0, 1]")
    return replace(train, amplitude=train.amplitude * t)


def classical_power_at_rx_dbm(spec: ClassicalChannelSpec, channel: ChannelSpec) -> float:
    """Classical power reaching the sync photodiode (after fiber loss only)."""
    return spec.launch_power_dbm - channel.total_loss_db


def sync_detectable(spec: ClassicalChannelSpec, channel: ChannelSpec) -> bool:
    return classical_power_at_rx_dbm(spec, channel) >= spec.sync_threshold_dbm


def classical_background(
    spec: Optional[ClassicalChannelSpec], channel: ChannelSpec, det: DetectorSpec
) -> float:
    """Total leakage click rate (Hz) added across the detectors behind the filters.

    Residual power = launch - fiber loss - (WDM + band-pass extinction),
    counted as photons at the quantum wavelength and scaled by the detector
    efficiency. Callers split it evenly over the detectors of a pair.
    """
    if spec is None:
        return 0.0
    residual_dbm = (
        spec.launch_power_dbm
        - channel.total_loss_db
        - spec.wdm_extinction_db
        - spec.bandpass_extinction_db
    )
    photons_per_s = dbm_to_watts(residual_dbm) / photon_energy()
    return photons_per_s * det.eta_det


def channel_state(channel: ChannelSpec, det: DetectorSpec) -> ChannelState:
    return ChannelState(transmittance(channel), classical_background(channel.classical, channel, det))
