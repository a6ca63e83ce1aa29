"""Closed-form performance model.

Rates are expectations over the same window classes the Monte Carlo draws
from, so the two engines can serve as oracles for one another:

* light reaching each detector follows from energy conservation at the
  interferometer (each pulse feeds two windows through the two arms);
* only windows Alice can vouch for (two signal pulses of the same block, no
  decoy) are kept; dark counts are kept when they fall in the gates Bob
  reports for those windows;
* every detector is dead-time corrected on its total raw rate.

Eve's information is a beam-splitting photon-leakage bound: the probability
that the light diverted by the channel contains at least one photon from the
pulses carrying a bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize

from .channel import classical_background, transmittance
from .model import (
    ChannelSpec,
    Config,
    DetectorSpec,
    ProtocolId,
    SystemParams,
    db_to_linear,
    require_dpr,
    validate,
)
from .receiver import apply_dead_time

BOUND_VALID_LOSS_DB = 5.0
SATURATION_FRACTION = 0.5


@dataclass(frozen=True)
class RateReport:
    protocol: ProtocolId
    loss_db: float
    r_sift: float
    qber_pred: float
    qber_time: float
    qber_phase: float
    i_ab: float
    i_ae: float
    r_sk: float
    bound_valid: bool
    saturated: bool
    detector_rates: dict = field(default_factory=dict)
    raw_detector_rates: dict = field(default_factory=dict)
    distance_km: float = float("nan")


def binary_entropy(p):
    """h(p) in bits, with h(0) = h(1) = 0."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError("binary_entropy needs p in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -arr * np.log2(arr) - (1 - arr) * np.log2(1 - arr)
    h = np.where((arr == 0) | (arr == 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def compose_errors(a: float, b: float) -> float:
    """Error probability of two independent bit flips in series."""
    return a + b - 2 * a * b


def eve_info_bs(protocol: ProtocolId, mu: float, t: float, V: float = 1.0) -> float:
    if not 0 < t <= 1:
        raise ValueError("transmittance must lie in (0, 1]")
    require_dpr(protocol)
    pulses = 1.0 if protocol is ProtocolId.COW else 2.0
    info = -math.expm1(-pulses * mu * (1.0 - t))
    return min(max(info, 0.0), 1.0)


@dataclass
class _DetectorLoad:
    name: str
    light: float  # photons/s reaching the detector, before eta_det
    dark: float  # background + dark rate in all gates
    key_signal: float = 0.0  # photons/s in kept windows
    key_dark: float = 0.0  # dark rate in kept gates


def background_split(protocol: ProtocolId, params: SystemParams, bg: float) -> dict:
    """Per-detector share of the classical leakage rate ``bg`` (Hz).

    The leakage enters Bob's receiver like the quantum light: the interferometer
    pair shares it evenly; for COW the tap sends a fraction to the monitor
    interferometer, which also attenuates it.
    """
    if protocol is ProtocolId.COW:
        mon = bg * params.tap_ratio * db_to_linear(params.insertion_loss_lint) / 2
        return {"DataLine": bg * (1 - params.tap_ratio), "MonitorPort0": mon, "MonitorPortPi": mon}
    return {"Port0": bg / 2, "PortPi": bg / 2}


def _same_block_prob(params: SystemParams) -> float:
    if params.block_mode == "fixed":
        return 1.0 - 1.0 / max(1, int(round(params.block_len_n)))
    return 1.0 - 1.0 / params.block_len_n


def _loads(protocol: ProtocolId, params: SystemParams, t: float, det: DetectorSpec, bg: float):
    nu, mu, pd, V = params.nu, params.mu, params.decoy_prob_pd, params.visibility_v
    g = det.gate(nu)
    duty = nu * g
    rdc = det.dark_rate_rdc
    eta_int = db_to_linear(params.insertion_loss_lint)
    m = mu * t
    share = background_split(protocol, params, bg)
    if protocol is ProtocolId.DPTS:
        rate = nu / 4
        v_eff = V * (1 - 2 * params.e_phase)
        kept_windows = (1 - pd) + (1 - pd) ** 2 * _same_block_prob(params)
        loads = []
        for name, sign in (("Port0", 1.0), ("PortPi", -1.0)):
            light = rate * eta_int * m * ((1 - pd) + pd * (2 + sign * v_eff))
            d = rdc + share[name]
            loads.append(
                _DetectorLoad(
                    name,
                    light,
                    d * duty,
                    key_signal=rate * kept_windows * eta_int * m / 2,
                    key_dark=d * g * 2 * rate * kept_windows,
                )
            )
        return loads
    if protocol is ProtocolId.DPS:
        loads = []
        for name in ("Port0", "PortPi"):
            d = rdc + share[name]
            light = nu * eta_int * m / 2
            loads.append(_DetectorLoad(name, light, d * duty, key_signal=light, key_dark=d * g * nu))
        return loads
    if protocol is ProtocolId.COW:
        rate = nu / 2
        tap = params.tap_ratio
        d_data = rdc + share["DataLine"]
        data = _DetectorLoad(
            "DataLine",
            rate * (1 - tap) * m * (1 + pd),
            d_data * duty,
            key_signal=rate * (1 - tap) * m * (1 - pd),
            key_dark=d_data * g * 2 * rate * (1 - pd),
        )
        total = rate * tap * eta_int * m * (1 + pd)
        coherent = rate * tap * eta_int * m * (pd + ((1 + pd) / 2) ** 2)
        d_mon = rdc + share["MonitorPort0"]
        mon0 = _DetectorLoad("MonitorPort0", (total - coherent) / 2 + coherent * (1 + V) / 2, d_mon * duty)
        monpi = _DetectorLoad("MonitorPortPi", (total - coherent) / 2 + coherent * (1 - V) / 2, d_mon * duty)
        return [data, mon0, monpi]
    raise ValueError(f"{protocol.value} has no DPR detector model")


def predict_rates(
    protocol: ProtocolId,
    params: SystemParams,
    channel: ChannelSpec,
    det: DetectorSpec,
) -> RateReport:
    validate(params, channel, det)
    if protocol is ProtocolId.BB84_DECOY:
        return bb84_decoy_rate(params, channel, det)
    t = transmittance(channel)
    bg = classical_background(channel.classical, channel, det)
    loads = _loads(protocol, params, t, det, bg)

    raw, measured = {}, {}
    sig = dark = 0.0
    t_err = p_err = 0.0
    eps_phase = compose_errors((1 - params.visibility_v) / 2, params.e_phase)
    saturated = False
    for load in loads:
        r = load.light * det.eta_det + load.dark
        kept = 1.0 / (1.0 + r * det.dead_time_td)
        raw[load.name] = r
        measured[load.name] = float(apply_dead_time(r, det))
        s = load.key_signal * det.eta_det * kept
        d = load.key_dark * kept
        sig += s
        dark += d
        t_err += s * params.e_time + d / 2
        p_err += s * eps_phase + d / 2
        if load.key_signal > 0 and det.dead_time_td > 0 and r >= SATURATION_FRACTION / det.dead_time_td:
            saturated = True

    clicks = sig + dark
    qt = t_err / clicks if clicks > 0 else 0.5
    qp = p_err / clicks if clicks > 0 else 0.5
    if protocol is ProtocolId.DPTS:
        bits = params.bits_per_click_dpts
        q = (qt + qp) / 2 if bits == 2 else qp
    elif protocol is ProtocolId.DPS:
        bits, qt, q = 1, float("nan"), qp
    else:
        bits, qp, q = 1, float("nan"), qt
    r_sift = bits * clicks
    i_ab = 1.0 - binary_entropy(min(q, 0.5))
    i_ae = eve_info_bs(protocol, params.mu, t, params.visibility_v)
    r_sk = r_sift * max(0.0, i_ab - i_ae) / params.ec_efficiency
    loss = channel.total_loss_db
    return RateReport(
        protocol=protocol,
        loss_db=loss,
        r_sift=r_sift,
        qber_pred=q,
        qber_time=qt,
        qber_phase=qp,
        i_ab=i_ab,
        i_ae=i_ae,
        r_sk=r_sk,
        bound_valid=loss >= BOUND_VALID_LOSS_DB,
        saturated=saturated,
        detector_rates=measured,
        raw_detector_rates=raw,
        distance_km=channel.distance_km,
    )


def rates(cfg: Config, protocol: ProtocolId) -> RateReport:
    """:func:`predict_rates` with the protocol's own mean photon number from ``cfg``."""
    return predict_rates(protocol, cfg.params_for(protocol), cfg.channel, cfg.detector)


def bb84_decoy_rate(params: SystemParams, channel: ChannelSpec, det: DetectorSpec) -> RateReport:
    """Asymptotic three-intensity (signal, weak decoy, near-vacuum decoy) estimate."""
    if params.bb84 is None:
        raise ValueError("BB84 parameters missing")
    b = params.bb84
    t = transmittance(channel)
    bg = classical_background(channel.classical, channel, det)
    g = det.gate(params.nu)
    eta = t * det.eta_det * db_to_linear(params.insertion_loss_lint)
    y0 = 2 * (det.dark_rate_rdc + bg / 2) * g
    e_d = compose_errors((1 - params.visibility_v) / 2, params.e_phase)

    def gain(x):
        return y0 + 1 - math.exp(-eta * x)

    def err_gain(x):
        return 0.5 * y0 + e_d * (1 - math.exp(-eta * x))

    mu, nu_, om = b.mu_signal, b.nu_decoy, b.omega_decoy
    q_mu, q_nu, q_om = gain(mu), gain(nu_), gain(om)
    e_mu = err_gain(mu) / q_mu
    y0_l = max(0.0, (nu_ * q_om * math.exp(om) - om * q_nu * math.exp(nu_)) / (nu_ - om))
    y1_l = mu / (mu * nu_ - mu * om - nu_**2 + om**2) * (
        q_nu * math.exp(nu_) - q_om * math.exp(om) - (nu_**2 - om**2) / mu**2 * (q_mu * math.exp(mu) - y0_l)
    )
    y1_l = max(y1_l, 0.0)
    if y1_l > 0:
        e1_u = (err_gain(nu_) * math.exp(nu_) - err_gain(om) * math.exp(om)) / ((nu_ - om) * y1_l)
        e1_u = min(max(e1_u, 0.0), 0.5)
    else:
        e1_u = 0.5
    q1 = y1_l * mu * math.exp(-mu)

    sift = b.basis_prob**2 + (1 - b.basis_prob) ** 2
    raw_per_det = params.nu * q_mu / 2
    kept = 1.0 / (1.0 + raw_per_det * det.dead_time_td)
    r_sift = params.nu * sift * q_mu * kept
    i_ab = 1.0 - binary_entropy(min(e_mu, 0.5))
    i_ae = 1.0 - (q1 / q_mu) * (1.0 - binary_entropy(e1_u))
    secret = (q1 / q_mu) * (1 - binary_entropy(e1_u)) - params.ec_efficiency * binary_entropy(min(e_mu, 0.5))
    r_sk = r_sift * max(0.0, secret)
    loss = channel.total_loss_db
    measured = float(apply_dead_time(raw_per_det, det))
    return RateReport(
        protocol=ProtocolId.BB84_DECOY,
        loss_db=loss,
        r_sift=r_sift,
        qber_pred=e_mu,
        qber_time=float("nan"),
        qber_phase=e_mu,
        i_ab=i_ab,
        i_ae=min(max(i_ae, 0.0), 1.0),
        r_sk=r_sk,
        bound_valid=loss >= BOUND_VALID_LOSS_DB,
        saturated=det.dead_time_td > 0 and raw_per_det >= SATURATION_FRACTION / det.dead_time_td,
        detector_rates={"D0": measured, "D1": measured},
        raw_detector_rates={"D0": raw_per_det, "D1": raw_per_det},
        distance_km=channel.distance_km,
    )


@dataclass(frozen=True)
class MuOptimum:
    mu_opt: float
    r_sk_opt: float
    degenerate: bool = False


def optimize_mu(
    protocol: ProtocolId,
    params: SystemParams,
    channel: ChannelSpec,
    det: DetectorSpec,
    search_range: tuple[float, float] = (0.01, 2.0),
    grid_points: int = 32,
) -> MuOptimum:
    """Coarse grid to bracket the global maximum, then bounded Brent refinement."""
    lo, hi = search_range
    if not 0 < lo < hi <= 2:
        raise ValueError("search range must lie inside (0, 2]")

    def r_sk(mu: float) -> float:
        return predict_rates(protocol, _with_mu(protocol, params, mu), channel, det).r_sk

    grid = np.linspace(lo, hi, grid_points)
    values = np.array([r_sk(m) for m in grid])
    if not np.any(values > 0):
        return MuOptimum(float("nan"), 0.0, degenerate=True)
    i = int(np.argmax(values))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]
    res = optimize.minimize_scalar(lambda m: -r_sk(m), bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-6})
    if -res.fun >= values[i]:
        return MuOptimum(float(res.x), float(-res.fun))
    return MuOptimum(float(grid[i]), float(values[i]))


def _with_mu(protocol: ProtocolId, params: SystemParams, mu: float) -> SystemParams:
    if protocol is ProtocolId.BB84_DECOY:
        return replace(params, bb84=replace(params.bb84, mu_signal=mu))
    return replace(params, mu=mu)


def crossover_loss(
    protocol_a: ProtocolId,
    protocol_b: ProtocolId,
    cfg: Config,
    lo: float = BOUND_VALID_LOSS_DB,
    hi: float = 45.0,
    scan_step: float = 0.5,
    xtol: float = 1e-6,
) -> Optional[float]:
    """Smallest loss in [lo, hi] where r_sk(a) - r_sk(b) changes sign, or None."""

    def diff(loss: float) -> float:
        c = cfg.with_loss(loss)
        return rates(c, protocol_a).r_sk - rates(c, protocol_b).r_sk

    grid = np.arange(lo, hi + 1e-9, scan_step)
    prev_x, prev = grid[0], diff(grid[0])
    for x in grid[1:]:
        cur = diff(x)
        if prev == 0 and cur == 0:
            prev_x, prev = x, cur
            continue
        if prev != 0 and (cur == 0 or np.sign(cur) != np.sign(prev)):
            if cur == 0:
                return float(x)
            return float(optimize.bisect(diff, prev_x, x, xtol=xtol))
        prev_x, prev = x, cur
    return None
