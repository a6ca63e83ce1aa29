"""Transmitter: symbol and bit streams to pulse trains for DPTS, DPS and COW.

A DPTS symbol ``s`` in {0, 1, 2, 3} carries a time bit ``s // 2`` (which slot
parity of its four-slot group holds light) and a phase bit ``s % 2`` (phase
difference between its two pulses)::

    0: a . a .      1: a . -a .      2: . a . a      3: . a . -a
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import ProtocolId, SystemParams

DECOY = -1
SYMBOL_SLOTS = {ProtocolId.DPTS: 4, ProtocolId.COW: 2, ProtocolId.DPS: 1}


@dataclass(frozen=True)
class PulseSlot:
    """One time slot: mean photon number (0 for vacuum) and phase in {0, pi}."""

    amplitude: float
    phase: float = 0.0

    @property
    def is_vacuum(self) -> bool:
        return self.amplitude == 0


@dataclass
class PulseTrain:
    """Alice's prepared train plus the record she keeps for sifting.

    ``symbols`` holds one entry per symbol group (DPTS symbol, COW bit, DPS
    bit); decoy groups are marked with ``DECOY``. ``block_id`` gives the
    DPTS block of each group.
    """

    protocol: ProtocolId
    amplitude: np.ndarray
    phase_bit: np.ndarray
    slot_period: float
    symbols: np.ndarray
    decoy_mask: np.ndarray
    block_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.amplitude)

    @property
    def phases(self) -> np.ndarray:
        return self.phase_bit * math.pi

    @property
    def group_size(self) -> int:
        return SYMBOL_SLOTS[self.protocol]

    @property
    def slots(self) -> list[PulseSlot]:
        return [PulseSlot(float(a), float(p)) for a, p in zip(self.amplitude, self.phases)]

    @property
    def block_boundaries(self) -> np.ndarray:
        """Index of the last slot of every DPTS block, strictly increasing."""
        if self.protocol is not ProtocolId.DPTS or len(self.block_id) == 0:
            return np.zeros(0, dtype=np.int64)
        ends = np.flatnonzero(np.diff(self.block_id) != 0)
        ends = np.append(ends, len(self.block_id) - 1)
        return ends * 4 + 3

    @property
    def decoy_positions(self) -> np.ndarray:
        g = self.group_size
        groups = np.flatnonzero(self.decoy_mask)
        return (groups[:, None] * g + np.arange(g)[None, :]).ravel()

    def block_lengths(self) -> np.ndarray:
        if len(self.block_id) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.bincount(self.block_id - self.block_id[0])


def _as_int_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).ravel()
    if arr.size == 0:
        raise ValueError(f"empty {name} sequence")
    return arr


def assign_blocks(symbols: np.ndarray, block_len_n: float, block_mode: str) -> np.ndarray:
    """Block index per symbol; a new block starts whenever the time parity changes.

    In ``fixed`` mode a block additionally ends every ``round(N)`` symbols.
    """
    parity = symbols // 2
    starts = np.zeros(len(symbols), dtype=bool)
    starts[1:] = parity[1:] != parity[:-1]
    if block_mode == "fixed":
        n = max(1, int(round(block_len_n)))
        starts[::n] = True
    elif block_mode != "geometric":
        raise ValueError(f"unknown block mode {block_mode!r}")
    starts[0] = False
    return np.cumsum(starts)


def random_dpts_symbols(n: int, params: SystemParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` symbols whose time parity forms blocks of mean length N.

    Geometric mode: the parity flips before each symbol with probability 1/N,
    giving geometric block lengths of mean N. Fixed mode: a fresh random
    parity every ``round(N)`` symbols.
    """
    phase = rng.integers(0, 2, size=n)
    if params.block_mode == "fixed":
        size = max(1, int(round(params.block_len_n)))
        per_block = rng.integers(0, 2, size=-(-n // size))
        parity = np.repeat(per_block, size)[:n]
    else:
        flips = rng.random(n) < 1.0 / params.block_len_n
        flips[0] = rng.random() < 0.5
        parity = np.cumsum(flips) % 2
    return (2 * parity + phase).astype(np.int64)


def encode_dpts(
    symbols: Sequence[int],
    params: SystemParams,
    rng_seed: int = 0,
    block_mode: Optional[str] = None,
) -> PulseTrain:
    syms = _as_int_array(symbols, "symbol")
    if np.any((syms < 0) | (syms > 3)):
        raise ValueError("DPTS symbols must be in {0, 1, 2, 3}")
    rng = np.random.default_rng(rng_seed)
    n = len(syms)
    block_id = assign_blocks(syms, params.block_len_n, block_mode or params.block_mode)

    sign = rng.integers(0, 2, size=n)
    decoy = rng.random(n) < params.decoy_prob_pd if params.decoy_prob_pd > 0 else np.zeros(n, bool)

    time_bit = syms // 2
    phase_bit = syms % 2
    amp = np.zeros((n, 4))
    ph = np.zeros((n, 4), dtype=np.int8)
    rows = np.arange(n)
    amp[rows, time_bit] = params.mu
    amp[rows, time_bit + 2] = params.mu
    ph[rows, time_bit] = sign
    ph[rows, time_bit + 2] = sign ^ phase_bit
    # decoy groups: four coherent pulses with a common random sign
    amp[decoy] = params.mu
    ph[decoy] = sign[decoy][:, None]

    recorded = syms.copy()
    recorded[decoy] = DECOY
    return PulseTrain(
        protocol=ProtocolId.DPTS,
        amplitude=amp.ravel(),
        phase_bit=ph.ravel(),
        slot_period=params.slot_period,
        symbols=recorded,
        decoy_mask=decoy,
        block_id=block_id,
    )


def encode_dps(bits: Sequence[int], params: SystemParams) -> PulseTrain:
    b = _as_int_array(bits, "bit")
    if np.any((b < 0) | (b > 1)):
        raise ValueError("DPS bits must be 0 or 1")
    phase = np.concatenate(([0], np.cumsum(b) % 2)).astype(np.int8)
    return PulseTrain(
        protocol=ProtocolId.DPS,
        amplitude=np.full(len(phase), params.mu),
        phase_bit=phase,
        slot_period=params.slot_period,
        symbols=b.copy(),
        decoy_mask=np.zeros(len(b), dtype=bool),
    )


def encode_cow(bits: Sequence[int], params: SystemParams, rng_seed: int = 0) -> PulseTrain:
    b = _as_int_array(bits, "bit")
    if np.any((b < 0) | (b > 1)):
        raise ValueError("COW bits must be 0 or 1")
    rng = np.random.default_rng(rng_seed)
    n = len(b)
    if params.decoy_prob_pd > 0:
        decoy = rng.random(n) < params.decoy_prob_pd
    else:
        decoy = np.zeros(n, dtype=bool)
    amp = np.zeros((n, 2))
    amp[np.arange(n), b] = params.mu
    amp[decoy] = params.mu
    recorded = b.copy()
    recorded[decoy] = DECOY
    return PulseTrain(
        protocol=ProtocolId.COW,
        amplitude=amp.ravel(),
        phase_bit=np.zeros(2 * n, dtype=np.int8),
        slot_period=params.slot_period,
        symbols=recorded,
        decoy_mask=decoy,
    )


# ---------------------------------------------------------------------------
# text export: one "index,amplitude,phase" record per slot; sifting metadata in
# '#' header lines


def format_train(train: PulseTrain) -> str:
    lines = [
        f"# protocol={train.protocol.value}",
        f"# slot_period={train.slot_period!r}",
        "# symbols=" + " ".join(map(str, train.symbols.tolist())),
    ]
    if train.protocol is ProtocolId.DPTS:
        lines.append("# block_id=" + " ".join(map(str, train.block_id.tolist())))
    lines.append("index,amplitude,phase")
    phases = train.phases
    lines.extend(f"{i},{a!r},{p!r}" for i, (a, p) in enumerate(zip(train.amplitude.tolist(), phases.tolist())))
    return "\n".join(lines) + "\n"


def write_train(train: PulseTrain, path) -> None:
    Path(path).write_text(format_train(train))


def parse_train(text: str) -> PulseTrain:
    meta: dict[str, str] = {}
    amps, phases = [], []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line and not line.startswith("index"):
            _, a, p = line.split(",")
            amps.append(float(a))
            phases.append(float(p))
    protocol = ProtocolId.parse(meta["protocol"])
    symbols = np.array(meta.get("symbols", "").split(), dtype=np.int64)
    phase_bit = (np.round(np.asarray(phases) / math.pi).astype(np.int64) % 2).astype(np.int8)
    block_id = np.array(meta.get("block_id", "").split(), dtype=np.int64)
    return PulseTrain(
        protocol=protocol,
        amplitude=np.asarray(amps, dtype=float),
        phase_bit=phase_bit,
        slot_period=float(meta["slot_period"]),
        symbols=symbols,
        decoy_mask=symbols == DECOY,
        block_id=block_id,
    )


def read_train(path) -> PulseTrain:
    return parse_train(Path(path).read_text())
