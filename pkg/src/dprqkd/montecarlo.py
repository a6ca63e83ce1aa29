"""Seeded window-level Monte Carlo of the full link.

Every interference window draws its signal click from the port mean of the
receiver model and, independently, a dark/background click from the gate
probability; jitter and dead time act on the resulting time tags, and the
tags go through the same sifting code a real post-processing stack would use.

Random streams are derived with :func:`derive_seed` from ``(seed, stream)``
through numpy's ``SeedSequence`` and the PCG64 generator, so a run is fully
determined by its config and seed.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .channel import classical_background, transmittance
from .encoder import PulseTrain, encode_cow, encode_dpts, encode_dps, random_dpts_symbols
from .keyrate import background_split
from .model import ChannelSpec, Config, DetectorSpec, ProtocolId, SystemParams, db_to_linear, require_dpr, validate
from .receiver import DETECTOR_NAMES, Clicks, Detector, dead_time_veto, jitter_sigma
from .sifting import QberReport, SiftResult, bits_per_click, estimate_qber, sift

CHUNK_WINDOWS = 1 << 20

# fixed stream identifiers for derive_seed
STREAM_SYMBOLS = 0
STREAM_ENCODER = 1
STREAM_PHASE_FLIP = 2
STREAM_DETECTOR = 10  # + detector index
STREAM_BATCH = 100


def derive_seed(seed: int, *stream: int) -> np.random.SeedSequence:
    """Substream ``stream`` of ``seed``; the published seed-derivation function."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))


def generator(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *stream)))


def _int_seed(seed: int, *stream: int) -> int:
    return int(derive_seed(seed, *stream).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class McRunConfig:
    protocol: ProtocolId
    params: SystemParams
    channel: ChannelSpec
    det: DetectorSpec
    n_pulses: int = 1_000_000
    seed: int = 0
    emit_clicks: bool = False

    def __post_init__(self):
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        require_dpr(self.protocol)

    @classmethod
    def from_config(cls, cfg: Config, protocol: ProtocolId, n_pulses: int, seed: int = 0, emit_clicks=False):
        return cls(protocol, cfg.params_for(protocol), cfg.channel, cfg.detector, n_pulses, seed, emit_clicks)


@dataclass
class McResult:
    r_sift_meas: float
    qber_meas: QberReport
    n_clicks_per_detector: dict
    n_dark: int
    duration: float
    n_pulses: int
    sift: Optional[SiftResult] = None
    clicks: Optional[Clicks] = None
    train: Optional[PulseTrain] = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def n_clicks(self) -> int:
        return int(sum(self.n_clicks_per_detector.values()))


def _prepare(cfg: McRunConfig) -> PulseTrain:
    p = cfg.params
    rng = generator(cfg.seed, STREAM_SYMBOLS)
    if cfg.protocol is ProtocolId.DPTS:
        symbols = random_dpts_symbols(max(1, cfg.n_pulses // 4), p, rng)
        return encode_dpts(symbols, p, rng_seed=_int_seed(cfg.seed, STREAM_ENCODER))
    if cfg.protocol is ProtocolId.DPS:
        bits = rng.integers(0, 2, size=max(1, cfg.n_pulses - 1))
        return encode_dps(bits, p)
    bits = rng.integers(0, 2, size=max(1, cfg.n_pulses // 2))
    return encode_cow(bits, p, rng_seed=_int_seed(cfg.seed, STREAM_ENCODER))


@dataclass
class _Line:
    """One interferometer (or the direct data line) feeding one or two detectors."""

    amplitude: np.ndarray  # per slot, after channel and splitting
    phase_bit: np.ndarray
    delay: int  # 0: no interferometer
    eta: float  # interferometer transmission
    detectors: tuple
    phase_errors: bool = False
    time_errors: bool = False


def _lines(cfg: McRunConfig, train: PulseTrain) -> list[_Line]:
    p = cfg.params
    amp = train.amplitude * transmittance(cfg.channel)
    eta_int = db_to_linear(p.insertion_loss_lint)
    pair = (Detector.PORT0, Detector.PORT_PI)
    if cfg.protocol is ProtocolId.DPTS:
        return [_Line(amp, train.phase_bit, 2, eta_int, pair, phase_errors=True, time_errors=True)]
    if cfg.protocol is ProtocolId.DPS:
        return [_Line(amp, train.phase_bit, 1, eta_int, pair, phase_errors=True)]
    tap = p.tap_ratio
    return [
        _Line(amp * (1 - tap), train.phase_bit, 0, 1.0, (Detector.DATA_LINE,), time_errors=True),
        _Line(amp * tap, train.phase_bit, 1, eta_int, (Detector.MONITOR_PORT0, Detector.MONITOR_PORT_PI)),
    ]


def _port_means(line: _Line, lo: int, hi: int, flips: Optional[np.ndarray], V: float):
    """Port means for windows ``lo..hi-1``; window k mixes slots k (short arm) and k-delay (long arm)."""
    n = len(line.amplitude)
    k = np.arange(lo, hi)
    if line.delay == 0:
        m = np.where(k < n, line.amplitude[np.minimum(k, n - 1)], 0.0)
        return (m,)
    d = line.delay
    short_ok = k < n
    long_ok = (k >= d) & (k - d < n)
    ks = np.minimum(k, n - 1)
    kl = np.clip(k - d, 0, n - 1)
    a = np.where(short_ok, 0.5 * line.amplitude[ks], 0.0)
    b = np.where(long_ok, 0.5 * line.amplitude[kl], 0.0)
    sign = 1.0 - 2.0 * (line.phase_bit[ks] ^ line.phase_bit[kl])
    if flips is not None:
        sign = np.where(flips, -sign, sign)
    base = 0.5 * (a + b)
    cross = V * np.sqrt(a * b) * sign
    return line.eta * (base + cross), line.eta * (base - cross)


def run(cfg: McRunConfig) -> McResult:
    """Simulate ``cfg.n_pulses`` slots and sift the resulting clicks."""
    start = time.perf_counter()
    p, det = cfg.params, cfg.det
    validate(p, cfg.channel, det)
    train = _prepare(cfg)
    slot = p.slot_period
    gate = det.gate(p.nu)
    sigma = jitter_sigma(det)
    bg = background_split(cfg.protocol, p, classical_background(cfg.channel.classical, cfg.channel, det))
    flip_rng = generator(cfg.seed, STREAM_PHASE_FLIP)

    times: dict[int, list] = {}
    darks: dict[int, list] = {}
    for line in _lines(cfg, train):
        n_windows = len(line.amplitude) + line.delay
        rngs = {int(d): generator(cfg.seed, STREAM_DETECTOR + int(d)) for d in line.detectors}
        p_dark = {
            int(d): -np.expm1(-(det.dark_rate_rdc + bg[DETECTOR_NAMES[d]]) * gate) for d in line.detectors
        }
        for lo in range(0, n_windows, CHUNK_WINDOWS):
            hi = min(lo + CHUNK_WINDOWS, n_windows)
            flips = None
            if line.phase_errors and p.e_phase > 0:
                flips = flip_rng.random(hi - lo) < p.e_phase
            means = _port_means(line, lo, hi, flips, p.visibility_v)
            for d, m in zip(line.detectors, means):
                rng = rngs[int(d)]
                light = np.flatnonzero(rng.random(hi - lo) < -np.expm1(-det.eta_det * m)) + lo
                if line.time_errors and p.e_time > 0:
                    moved = rng.random(len(light)) < p.e_time
                    light[moved] ^= 1
                n_dark = rng.binomial(hi - lo, p_dark[int(d)]) if p_dark[int(d)] > 0 else 0
                dark = np.unique(rng.integers(lo, hi, size=n_dark))
                dark = np.setdiff1d(dark, light, assume_unique=False)
                k = np.concatenate([light, dark])
                is_dark = np.concatenate([np.zeros(len(light), bool), np.ones(len(dark), bool)])
                offset = np.zeros(len(k))
                if len(dark):
                    offset[len(light):] = rng.uniform(-gate / 2, gate / 2, size=len(dark))
                if sigma > 0 and len(light):
                    offset[: len(light)] = rng.normal(0.0, sigma, size=len(light))
                inside = np.abs(offset) <= gate / 2
                t = k * slot + offset
                inside &= t >= 0
                times.setdefault(int(d), []).append(t[inside])
                darks.setdefault(int(d), []).append(is_dark[inside])

    parts = []
    counts = {}
    n_dark_total = 0
    for d in sorted(times):
        t = np.concatenate(times[d])
        dk = np.concatenate(darks[d])
        order = np.argsort(t, kind="stable")
        t, dk = t[order], dk[order]
        keep = dead_time_veto(t, det.dead_time_td)
        t, dk = t[keep], dk[keep]
        counts[DETECTOR_NAMES[Detector(d)]] = int(len(t))
        n_dark_total += int(dk.sum())
        parts.append(Clicks(t, np.full(len(t), d, dtype=np.int8), dk))
    clicks = Clicks.concat(parts)

    result = sift(cfg.protocol, clicks, train, p)
    report = estimate_qber(result.alice, result.bob, result.visibility_est)
    duration = len(train) * slot
    return McResult(
        r_sift_meas=report.n_sifted / duration,
        qber_meas=report,
        n_clicks_per_detector=counts,
        n_dark=n_dark_total,
        duration=duration,
        n_pulses=len(train),
        sift=result,
        clicks=clicks if cfg.emit_clicks else None,
        train=train if cfg.emit_clicks else None,
        wall_time=time.perf_counter() - start,
    )


def max_sifted_bits(result: McResult, params: SystemParams, protocol: ProtocolId) -> int:
    return result.n_clicks * bits_per_click(protocol, params.bits_per_click_dpts)


def worker_count() -> int:
    """Parallel workers allowed; ``DPRQKD_THREADS`` caps the CPU count."""
    n = os.cpu_count() or 1
    env = os.environ.get("DPRQKD_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            pass
    return n


def batch_seed(seed: int, index: int) -> int:
    """Seed of batch ``index``; batch 0 reuses ``seed`` so a single batch equals :func:`run`."""
    return int(seed) if index == 0 else _int_seed(seed, STREAM_BATCH, index)


@dataclass
class BatchSeries:
    results: list

    @property
    def qber(self) -> np.ndarray:
        return np.array([r.qber_meas.qber_total for r in self.results])

    @property
    def n_sifted(self) -> np.ndarray:
        return np.array([r.qber_meas.n_sifted for r in self.results])

    @property
    def mean(self) -> float:
        return float(self.qber.mean())

    @property
    def std(self) -> float:
        return float(self.qber.std(ddof=1)) if len(self.results) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.results)

    def __getitem__(self, i):
        return self.results[i]


def run_batches(cfg: McRunConfig, n_batches: int, workers: Optional[int] = None) -> BatchSeries:
    """Independent runs with derived seeds, returned in batch order."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    configs = [replace(cfg, seed=batch_seed(cfg.seed, i)) for i in range(n_batches)]
    workers = min(workers or worker_count(), n_batches)
    if workers <= 1:
        return BatchSeries([run(c) for c in configs])
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return BatchSeries(list(pool.map(run, configs)))
