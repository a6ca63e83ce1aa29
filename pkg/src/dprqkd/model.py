"""Shared domain types, unit helpers, validation and the config file format.

All quantities carry fixed units (Hz, dB, dBm, seconds, photons/pulse). Every
dB/dBm to linear conversion in the package goes through :func:`db_to_linear`
or :func:`dbm_to_watts`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

PLANCK = 6.62607015e-34
LIGHT_SPEED = 299792458.0
QUANTUM_WAVELENGTH_NM = 1550.0


def db_to_linear(db: float) -> float:
    """Power ratio for an attenuation of ``db`` decibels (10 dB -> 0.1)."""
    return 10.0 ** (-db / 10.0)


def linear_to_db(ratio: float) -> float:
    return -10.0 * math.log10(ratio)


def dbm_to_watts(dbm: float) -> float:
    return 1e-3 * 10.0 ** (dbm / 10.0)


def photon_energy(wavelength_nm: float = QUANTUM_WAVELENGTH_NM) -> float:
    return PLANCK * LIGHT_SPEED / (wavelength_nm * 1e-9)


class ProtocolId(str, enum.Enum):
    DPTS = "DPTS"
    DPS = "DPS"
    COW = "COW"
    BB84_DECOY = "BB84Decoy"

    @classmethod
    def parse(cls, text: str) -> "ProtocolId":
        key = text.strip().upper().replace("-", "").replace("_", "")
        if key == "BB84":
            return cls.BB84_DECOY
        for p in cls:
            if p.value.upper() == key or p.name.replace("_", "") == key:
                return p
        raise ValueError(f"unknown protocol {text!r}")

    @property
    def is_dpr(self) -> bool:
        return self is not ProtocolId.BB84_DECOY


DPR_PROTOCOLS = (ProtocolId.DPTS, ProtocolId.DPS, ProtocolId.COW)


def require_dpr(protocol: ProtocolId) -> None:
    if not protocol.is_dpr:
        raise ValueError(f"{protocol.value} is not a distributed-phase-reference protocol")


class ConfigError(ValueError):
    """Raised with every violated invariant when a configuration is invalid."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class BB84Params:
    mu_signal: float = 0.25
    nu_decoy: float = 0.08
    omega_decoy: float = 1e-10
    basis_prob: float = 0.5


@dataclass(frozen=True)
class SystemParams:
    nu: float = 1.19e9
    mu: float = 0.26
    block_len_n: float = 6.0
    decoy_prob_pd: float = 0.1
    visibility_v: float = 0.98
    insertion_loss_lint: float = 8.0
    e_time: float = 0.015
    e_phase: float = 0.005
    bb84: Optional[BB84Params] = field(default_factory=BB84Params)
    ec_efficiency: float = 1.0
    # COW receiver tap towards the monitor interferometer
    tap_ratio: float = 0.1
    # "geometric" or "fixed" DPTS block lengths
    block_mode: str = "geometric"
    bits_per_click_dpts: int = 2
    pulse_width: float = 150e-12

    @property
    def slot_period(self) -> float:
        return 1.0 / self.nu


@dataclass(frozen=True)
class ClassicalChannelSpec:
    launch_power_dbm: float = -27.0
    wavelength_nm: float = 1610.0
    wdm_extinction_db: float = 60.0
    bandpass_extinction_db: float = 40.0
    sync_threshold_dbm: float = -50.0


@dataclass(frozen=True)
class ChannelSpec:
    """Either a fiber of ``length_km`` or an explicit attenuation of ``loss_db``."""

    mode: str = "fiber"
    length_km: float = 0.0
    loss_db: float = 0.0
    loss_coeff: float = 0.22
    classical: Optional[ClassicalChannelSpec] = None

    @classmethod
    def fiber(cls, length_km: float, loss_coeff: float = 0.22, classical=None) -> "ChannelSpec":
        return cls(mode="fiber", length_km=length_km, loss_coeff=loss_coeff, classical=classical)

    @classmethod
    def explicit(cls, loss_db: float, loss_coeff: float = 0.22, classical=None) -> "ChannelSpec":
        return cls(mode="loss", loss_db=loss_db, loss_coeff=loss_coeff, classical=classical)

    @property
    def total_loss_db(self) -> float:
        if self.mode == "fiber":
            return self.loss_coeff * self.length_km
        return self.loss_db

    @property
    def distance_km(self) -> float:
        """Fiber-equivalent length; for explicit loss, converted via ``loss_coeff``."""
        if self.mode == "fiber":
            return self.length_km
        return self.loss_db / self.loss_coeff


@dataclass(frozen=True)
class DetectorSpec:
    eta_det: float = 0.2
    dark_rate_rdc: float = 100.0
    dead_time_td: float = 20e-6
    # FWHM timing jitter
    jitter_tj: float = 300e-12
    # None means one slot period, resolved against SystemParams.nu
    gate_width: Optional[float] = None

    def gate(self, nu: float) -> float:
        return self.gate_width if self.gate_width is not None else 1.0 / nu


def _check(errors: list[str], ok: bool, message: str) -> None:
    if not ok:
        errors.append(message)


def validation_errors(params: SystemParams, channel: ChannelSpec, det: DetectorSpec) -> list[str]:
    errors: list[str] = []
    p = params
    _check(errors, p.nu > 0, "nu out of range")
    _check(errors, 0 < p.mu < 5, "mu out of range")
    _check(errors, p.block_len_n >= 1, "block_len_n out of range")
    _check(errors, 0 <= p.decoy_prob_pd < 1, "decoy_prob_pd out of range")
    _check(errors, 0 <= p.visibility_v <= 1, "visibility out of range")
    _check(errors, p.insertion_loss_lint >= 0, "insertion_loss_lint out of range")
    _check(errors, 0 <= p.e_time <= 0.5, "e_time out of range")
    _check(errors, 0 <= p.e_phase <= 0.5, "e_phase out of range")
    _check(errors, p.ec_efficiency >= 1, "ec_efficiency out of range")
    _check(errors, 0 < p.tap_ratio < 1, "tap_ratio out of range")
    _check(errors, p.block_mode in ("geometric", "fixed"), "block_mode unknown")
    _check(errors, p.bits_per_click_dpts in (1, 2), "bits_per_click_dpts out of range")
    if p.bb84 is not None:
        b = p.bb84
        _check(errors, b.mu_signal > b.nu_decoy > b.omega_decoy >= 0, "bb84 intensities not ordered")
        _check(errors, 0 < b.basis_prob < 1, "bb84 basis_prob out of range")

    _check(errors, channel.mode in ("fiber", "loss"), "channel mode unknown")
    _check(errors, channel.loss_coeff > 0, "loss_coeff out of range")
    _check(errors, channel.length_km >= 0, "length out of range")
    _check(errors, channel.loss_db >= 0, "loss out of range")
    if channel.classical is not None:
        c = channel.classical
        _check(errors, c.wdm_extinction_db >= 0, "wdm_extinction out of range")
        _check(errors, c.bandpass_extinction_db >= 0, "bandpass_extinction out of range")
        _check(errors, c.wavelength_nm > 0, "classical wavelength out of range")

    _check(errors, 0 <= det.eta_det <= 1, "eta_det out of range")
    _check(errors, det.dark_rate_rdc >= 0, "dark_rate out of range")
    _check(errors, det.dead_time_td >= 0, "dead_time out of range")
    _check(errors, det.jitter_tj >= 0, "jitter out of range")
    _check(errors, det.gate_width is None or det.gate_width > 0, "gate_width out of range")
    return errors


def validate(params: SystemParams, channel: ChannelSpec, det: DetectorSpec):
    """Return ``(params, channel, det)`` unchanged, or raise :class:`ConfigError`.

    Every violated invariant is reported, not just the first one.
    """
    errors = validation_errors(params, channel, det)
    if errors:
        raise ConfigError(errors)
    return params, channel, det


# Default operating points; mu in SystemParams is per protocol.
DEFAULT_MU = {
    ProtocolId.DPTS: 0.26,
    ProtocolId.DPS: 0.13,
    ProtocolId.COW: 0.52,
    ProtocolId.BB84_DECOY: 0.25,
}


@dataclass(frozen=True)
class Config:
    """Everything a run needs: system, channel, detector and per-protocol mu."""

    params: SystemParams = field(default_factory=SystemParams)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    mu_dpts: float = DEFAULT_MU[ProtocolId.DPTS]
    mu_dps: float = DEFAULT_MU[ProtocolId.DPS]
    mu_cow: float = DEFAULT_MU[ProtocolId.COW]

    def mu_for(self, protocol: ProtocolId) -> float:
        return {
            ProtocolId.DPTS: self.mu_dpts,
            ProtocolId.DPS: self.mu_dps,
            ProtocolId.COW: self.mu_cow,
            ProtocolId.BB84_DECOY: self.params.bb84.mu_signal if self.params.bb84 else self.params.mu,
        }[protocol]

    def params_for(self, protocol: ProtocolId) -> SystemParams:
        return replace(self.params, mu=self.mu_for(protocol))

    def with_loss(self, loss_db: float) -> "Config":
        return replace(self, channel=replace(self.channel, mode="loss", loss_db=loss_db))

    def with_distance(self, length_km: float) -> "Config":
        return replace(self, channel=replace(self.channel, mode="fiber", length_km=length_km))

    def validate(self) -> "Config":
        errors: list[str] = []
        for p in DPR_PROTOCOLS:
            for e in validation_errors(self.params_for(p), self.channel, self.detector):
                if e not in errors:
                    errors.append(e)
        if errors:
            raise ConfigError(errors)
        return self


def default_config() -> Config:
    return Config()


def ideal_config(loss_db: float = 0.0) -> Config:
    """No error mechanism: V=1, no intrinsic errors, no dark counts, no dead time, no decoys."""
    params = SystemParams(visibility_v=1.0, e_time=0.0, e_phase=0.0, decoy_prob_pd=0.0)
    det = DetectorSpec(dark_rate_rdc=0.0, dead_time_td=0.0, jitter_tj=0.0)
    return Config(params=params, channel=ChannelSpec.explicit(loss_db), detector=det)


# ---------------------------------------------------------------------------
# config file: "key = value" lines, '#' comments

_PARAM_KEYS = {
    "nu_hz": "nu",
    "mu": "mu",
    "block_len_n": "block_len_n",
    "decoy_prob_pd": "decoy_prob_pd",
    "visibility_v": "visibility_v",
    "insertion_loss_lint_db": "insertion_loss_lint",
    "e_time": "e_time",
    "e_phase": "e_phase",
    "ec_efficiency": "ec_efficiency",
    "tap_ratio": "tap_ratio",
    "block_mode": "block_mode",
    "bits_per_click_dpts": "bits_per_click_dpts",
    "pulse_width_s": "pulse_width",
}
_BB84_KEYS = {
    "bb84_mu_signal": "mu_signal",
    "bb84_nu_decoy": "nu_decoy",
    "bb84_omega_decoy": "omega_decoy",
    "bb84_basis_prob": "basis_prob",
}
_CHANNEL_KEYS = {
    "channel_mode": "mode",
    "length_km": "length_km",
    "loss_db": "loss_db",
    "loss_coeff_db_per_km": "loss_coeff",
}
_CLASSICAL_KEYS = {
    "classical_launch_power_dbm": "launch_power_dbm",
    "classical_wavelength_nm": "wavelength_nm",
    "wdm_extinction_db": "wdm_extinction_db",
    "bandpass_extinction_db": "bandpass_extinction_db",
    "sync_threshold_dbm": "sync_threshold_dbm",
}
_DETECTOR_KEYS = {
    "eta_det": "eta_det",
    "dark_rate_hz": "dark_rate_rdc",
    "dead_time_s": "dead_time_td",
    "jitter_s": "jitter_tj",
    "gate_width_s": "gate_width",
}
_TOP_KEYS = ("mu_dpts", "mu_dps", "mu_cow")
_STRING_FIELDS = {"block_mode", "mode"}
_INT_FIELDS = {"bits_per_click_dpts"}


def _coerce(name: str, text: str):
    if name in _STRING_FIELDS:
        return text
    if name in _INT_FIELDS:
        return int(text)
    if text.lower() in ("none", "default", ""):
        return None
    return float(text)


def parse_config(text: str, base: Optional[Config] = None) -> Config:
    """Parse ``key = value`` text on top of ``base`` (built-in defaults if omitted)."""
    cfg = base or default_config()
    groups: dict[str, dict] = {"params": {}, "bb84": {}, "channel": {}, "classical": {}, "det": {}, "top": {}}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _PARAM_KEYS:
                groups["params"][_PARAM_KEYS[key]] = _coerce(_PARAM_KEYS[key], value)
            elif key in _BB84_KEYS:
                groups["bb84"][_BB84_KEYS[key]] = _coerce(_BB84_KEYS[key], value)
            elif key in _CHANNEL_KEYS:
                groups["channel"][_CHANNEL_KEYS[key]] = _coerce(_CHANNEL_KEYS[key], value)
            elif key in _CLASSICAL_KEYS:
                groups["classical"][_CLASSICAL_KEYS[key]] = _coerce(_CLASSICAL_KEYS[key], value)
            elif key in _DETECTOR_KEYS:
                groups["det"][_DETECTOR_KEYS[key]] = _coerce(_DETECTOR_KEYS[key], value)
            elif key in _TOP_KEYS:
                groups["top"][key] = float(value)
            elif key == "bb84":
                groups["bb84"]["__enabled__"] = value.lower() in ("1", "true", "yes", "on")
            elif key == "classical":
                groups["classical"]["__enabled__"] = value.lower() in ("1", "true", "yes", "on")
            else:
                errors.append(f"line {lineno}: unknown key {key!r}")
        except ValueError:
            errors.append(f"line {lineno}: bad value for {key!r}")
    if errors:
        raise ConfigError(errors)

    params = cfg.params
    bb84_updates = dict(groups["bb84"])
    bb84_enabled = bb84_updates.pop("__enabled__", None)
    if bb84_updates or bb84_enabled:
        params = replace(params, bb84=replace(params.bb84 or BB84Params(), **bb84_updates))
    if bb84_enabled is False:
        params = replace(params, bb84=None)
    params = replace(params, **groups["params"])

    classical_updates = dict(groups["classical"])
    enabled = classical_updates.pop("__enabled__", None)
    classical = cfg.channel.classical
    if classical_updates or enabled:
        classical = replace(classical or ClassicalChannelSpec(), **classical_updates)
    if enabled is False:
        classical = None
    channel = replace(cfg.channel, classical=classical, **groups["channel"])
    det = replace(cfg.detector, **groups["det"])
    return replace(cfg, params=params, channel=channel, detector=det, **groups["top"])


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: Config) -> str:
    """Serialize every field; ``parse_config(dump_config(c)) == c``."""
    lines = ["# dprqkd configuration"]
    for key, attr in _PARAM_KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(cfg.params, attr))}")
    if cfg.params.bb84 is None:
        lines.append("bb84 = off")
    else:
        for key, attr in _BB84_KEYS.items():
            lines.append(f"{key} = {_fmt(getattr(cfg.params.bb84, attr))}")
    for key in _TOP_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for key, attr in _CHANNEL_KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(cfg.channel, attr))}")
    if cfg.channel.classical is not None:
        lines.append("classical = on")
        for key, attr in _CLASSICAL_KEYS.items():
            lines.append(f"{key} = {_fmt(getattr(cfg.channel.classical, attr))}")
    else:
        lines.append("classical = off")
    for key, attr in _DETECTOR_KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(cfg.detector, attr))}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: Config, protocol: ProtocolId) -> bytes:
    """SHA-256 over the canonical serialization, used for session negotiation."""
    import hashlib

    text = dump_config(cfg) + f"protocol = {protocol.value}\n"
    return hashlib.sha256(text.encode()).digest()

