"""Bob's optics and detectors.

The delay-line interferometer is treated at window level: the output window at
slot ``k`` combines the short-arm copy of slot ``k`` with the long-arm copy of
slot ``k - delay``. Each arm carries half of the incoming pulse, so a lone
pulse shows up (without interference) in two windows.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import PulseSlot, PulseTrain
from .model import DetectorSpec, db_to_linear

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class Detector(enum.IntEnum):
    PORT0 = 0
    PORT_PI = 1
    DATA_LINE = 2
    MONITOR_PORT0 = 3
    MONITOR_PORT_PI = 4


DETECTOR_NAMES = {
    Detector.PORT0: "Port0",
    Detector.PORT_PI: "PortPi",
    Detector.DATA_LINE: "DataLine",
    Detector.MONITOR_PORT0: "MonitorPort0",
    Detector.MONITOR_PORT_PI: "MonitorPortPi",
}
_BY_NAME = {v: k for k, v in DETECTOR_NAMES.items()}


@dataclass(frozen=True)
class InterferometerSpec:
    delay_slots: int = 2
    visibility_v: float = 0.98
    insertion_loss_lint: float = 8.0

    def __post_init__(self):
        if self.delay_slots < 1:
            raise ValueError("delay_slots must be >= 1")
        if not 0 <= self.visibility_v <= 1:
            raise ValueError("visibility out of range")

    @property
    def eta_int(self) -> float:
        return db_to_linear(self.insertion_loss_lint)


@dataclass(frozen=True)
class CowReceiverSpec:
    tap_ratio: float = 0.1

    def __post_init__(self):
        if not 0 < self.tap_ratio < 1:
            raise ValueError("tap_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class ClickRecord:
    time: float
    detector: Detector
    is_dark: bool = False


@dataclass
class Clicks:
    """Column store of click records, sorted by time."""

    time: np.ndarray
    detector: np.ndarray
    is_dark: np.ndarray

    @classmethod
    def empty(cls) -> "Clicks":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int8), np.zeros(0, dtype=bool))

    @classmethod
    def from_records(cls, records: Sequence[ClickRecord]) -> "Clicks":
        if not records:
            return cls.empty()
        c = cls(
            np.array([r.time for r in records], dtype=float),
            np.array([int(r.detector) for r in records], dtype=np.int8),
            np.array([r.is_dark for r in records], dtype=bool),
        )
        return c.sorted()

    @classmethod
    def concat(cls, parts: Sequence["Clicks"]) -> "Clicks":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.time for p in parts]),
            np.concatenate([p.detector for p in parts]),
            np.concatenate([p.is_dark for p in parts]),
        ).sorted()

    def __len__(self) -> int:
        return len(self.time)

    def sorted(self) -> "Clicks":
        order = np.lexsort((self.detector, self.time))
        return Clicks(self.time[order], self.detector[order], self.is_dark[order])

    def select(self, mask) -> "Clicks":
        return Clicks(self.time[mask], self.detector[mask], self.is_dark[mask])

    def for_detectors(self, *detectors: Detector) -> "Clicks":
        return self.select(np.isin(self.detector, [int(d) for d in detectors]))

    def slots(self, slot_period: float) -> np.ndarray:
        return np.rint(self.time / slot_period).astype(np.int64)

    def records(self) -> list[ClickRecord]:
        return [
            ClickRecord(float(t), Detector(int(d)), bool(k))
            for t, d, k in zip(self.time, self.detector, self.is_dark)
        ]


def interfere(slot_a: PulseSlot, slot_b: PulseSlot, spec: InterferometerSpec) -> tuple[float, float]:
    """Mean photons at (Port0, PortPi) for the arm contributions ``slot_a`` (long arm) and ``slot_b``.

    Amplitudes are the mean photon numbers each arm delivers to the output
    coupler. Port0 + PortPi = eta_int * (a + b) exactly.
    """
    a, b = slot_a.amplitude, slot_b.amplitude
    cross = spec.visibility_v * math.sqrt(a * b) * math.cos(slot_b.phase - slot_a.phase)
    base = 0.5 * (a + b)
    eta = spec.eta_int
    return eta * max(base + cross, 0.0), eta * max(base - cross, 0.0)


def window_means(
    amplitude: np.ndarray,
    phase_bit: np.ndarray,
    spec: InterferometerSpec,
    phase_flip: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window port means for a whole train; window ``k`` spans ``len + delay`` outputs.

    ``phase_flip`` optionally marks windows whose relative phase is inverted
    (imperfect phase modulation).
    """
    d = spec.delay_slots
    n = len(amplitude)
    short = np.zeros(n + d)
    long_ = np.zeros(n + d)
    short[:n] = 0.5 * amplitude
    long_[d:] = 0.5 * amplitude
    ph_s = np.zeros(n + d, dtype=np.int8)
    ph_l = np.zeros(n + d, dtype=np.int8)
    ph_s[:n] = phase_bit
    ph_l[d:] = phase_bit
    sign = 1.0 - 2.0 * (ph_s ^ ph_l)
    if phase_flip is not None:
        sign = np.where(phase_flip, -sign, sign)
    base = 0.5 * (short + long_)
    cross = spec.visibility_v * np.sqrt(short * long_) * sign
    eta = spec.eta_int
    return eta * (base + cross), eta * (base - cross)


def detect(mean_photons, det: DetectorSpec, background: float = 0.0, window: Optional[float] = None):
    """Click probability in one window: ``1 - exp(-(eta*n + (r_dc + bg)*window))``."""
    if window is None:
        window = det.gate_width if det.gate_width is not None else 0.0
    m = np.asarray(mean_photons, dtype=float) * det.eta_det + (det.dark_rate_rdc + background) * window
    p = -np.expm1(-m)
    return float(p) if np.ndim(p) == 0 else p


def apply_dead_time(raw_rate, det: DetectorSpec):
    """Non-paralyzable dead time: measured = R / (1 + R * t_d)."""
    raw = np.asarray(raw_rate, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.where(np.isinf(raw), 1.0 / det.dead_time_td if det.dead_time_td > 0 else np.inf,
                       raw / (1.0 + raw * det.dead_time_td))
    return float(out) if np.ndim(out) == 0 else out


def dead_time_veto(times: np.ndarray, dead_time: float) -> np.ndarray:
    """Mask of clicks kept by a non-paralyzable detector; ``times`` must be sorted."""
    keep = np.zeros(len(times), dtype=bool)
    if len(times) == 0:
        return keep
    if dead_time <= 0:
        keep[:] = True
        return keep
    i = 0
    n = len(times)
    while i < n:
        keep[i] = True
        end = times[i] + dead_time
        # a dead time below float resolution still vetoes coincident clicks
        i = int(np.searchsorted(times, end, side="right" if end == times[i] else "left"))
    return keep


def route_cow(train: PulseTrain, spec: CowReceiverSpec, rng_seed: int = 0) -> tuple[PulseTrain, PulseTrain]:
    """Coherent split into (data line, monitor line); phases preserved.

    ``rng_seed`` is accepted for interface symmetry; the split is deterministic.
    """
    data = replace(train, amplitude=train.amplitude * (1.0 - spec.tap_ratio))
    monitor = replace(train, amplitude=train.amplitude * spec.tap_ratio)
    return data, monitor


def jitter_sigma(det: DetectorSpec) -> float:
    return det.jitter_tj / FWHM_PER_SIGMA


# ---------------------------------------------------------------------------
# click export: "time_s,detector,is_dark"


def format_clicks(clicks: Clicks) -> str:
    lines = ["time_s,detector,is_dark"]
    for t, d, k in zip(clicks.time.tolist(), clicks.detector.tolist(), clicks.is_dark.tolist()):
        lines.append(f"{t!r},{DETECTOR_NAMES[Detector(d)]},{int(k)}")
    return "\n".join(lines) + "\n"


def write_clicks(clicks: Clicks, path) -> None:
    Path(path).write_text(format_clicks(clicks))


def parse_clicks(text: str) -> Clicks:
    times, dets, dark = [], [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("time_s"):
            continue
        t, d, k = line.split(",")
        times.append(float(t))
        dets.append(int(_BY_NAME[d]))
        dark.append(k.strip() in ("1", "true", "True"))
    if not times:
        return Clicks.empty()
    return Clicks(np.array(times), np.array(dets, dtype=np.int8), np.array(dark, dtype=bool)).sorted()


def read_clicks(path) -> Clicks:
    return parse_clicks(Path(path).read_text())
