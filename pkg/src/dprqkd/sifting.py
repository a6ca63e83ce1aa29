"""Sifting: Bob's click positions plus Alice's preparation record -> correlated keys.

Bob never announces his measured bits. What he discloses per click:

* DPTS: the slot pair ``s // 2`` (both parities share it, so the time bit stays hidden)
* DPS: the slot ``s``
* COW data line: the bit pair ``s // 2``; monitor clicks: slot and port (public)

Alice answers with a keep/discard decision from her record (decoys, DPTS
block boundaries, empty windows). Positions announced more than once on the
key line (double clicks) are dropped by Bob before announcing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import PulseTrain
from .model import ProtocolId
from .receiver import Clicks, Detector

KEY_LINE = 0
MONITOR_PORT0 = 1
MONITOR_PORT_PI = 2


class Domain(enum.IntEnum):
    TIME = 0
    PHASE = 1


@dataclass
class SiftedKey:
    """Bits with their source window slot and domain tag.

    For DPTS both bits of one click share a slot, so ``(source_slot, domain)``
    pairs are strictly increasing rather than the slots alone.
    """

    bits: np.ndarray
    source_slot: np.ndarray
    domain_tag: np.ndarray

    @classmethod
    def empty(cls) -> "SiftedKey":
        return cls(np.zeros(0, np.uint8), np.zeros(0, np.int64), np.zeros(0, np.uint8))

    def __len__(self) -> int:
        return len(self.bits)

    def without(self, indices) -> "SiftedKey":
        keep = np.ones(len(self), dtype=bool)
        keep[np.asarray(indices, dtype=np.int64)] = False
        return SiftedKey(self.bits[keep], self.source_slot[keep], self.domain_tag[keep])

    def to_bytes(self) -> bytes:
        """8 bits per byte, most significant bit first."""
        return np.packbits(self.bits.astype(np.uint8)).tobytes()


@dataclass(frozen=True)
class QberReport:
    qber_total: float
    qber_time: float
    qber_phase: float
    n_sifted: int
    visibility_est: float = float("nan")
    n_time: int = 0
    n_phase: int = 0
    n_errors: int = 0


@dataclass
class SiftResult:
    alice: SiftedKey
    bob: SiftedKey
    visibility_est: float = float("nan")
    n_discarded: int = 0
    n_monitor_port0: int = 0
    n_monitor_port_pi: int = 0


@dataclass
class Announcement:
    """What Bob makes public for each click, plus the bits he keeps private."""

    position: np.ndarray
    line: np.ndarray
    slot: np.ndarray
    bob_bits: np.ndarray  # (n, 2): DPTS (time, phase); others use column 0
    n_double: int = 0

    def __len__(self) -> int:
        return len(self.position)


def bits_per_click(protocol: ProtocolId, dpts_bits: int = 2) -> int:
    return dpts_bits if protocol is ProtocolId.DPTS else 1


def announce(protocol: ProtocolId, clicks: Clicks, slot_period: float) -> Announcement:
    """Bob's side: map clicks to public positions; drop double clicks on the key line."""
    slots = clicks.slots(slot_period)
    det = clicks.detector.astype(np.int64)
    n = len(clicks)
    line = np.full(n, KEY_LINE, dtype=np.uint8)
    bits = np.zeros((n, 2), dtype=np.uint8)
    if protocol is ProtocolId.DPTS:
        position = slots // 2
        bits[:, 0] = slots % 2
        bits[:, 1] = det == int(Detector.PORT_PI)
        key = np.isin(det, [Detector.PORT0, Detector.PORT_PI])
    elif protocol is ProtocolId.DPS:
        position = slots.copy()
        bits[:, 0] = det == int(Detector.PORT_PI)
        key = np.isin(det, [Detector.PORT0, Detector.PORT_PI])
    elif protocol is ProtocolId.COW:
        key = det == int(Detector.DATA_LINE)
        position = np.where(key, slots // 2, slots)
        bits[:, 0] = np.where(key, slots % 2, 0)
        line[det == int(Detector.MONITOR_PORT0)] = MONITOR_PORT0
        line[det == int(Detector.MONITOR_PORT_PI)] = MONITOR_PORT_PI
        key = key | (line != KEY_LINE)
    else:
        raise ValueError(f"{protocol.value} is not sifted by this module")

    keep = key.copy()
    key_line = keep & (line == KEY_LINE)
    if key_line.any():
        pos = position[key_line]
        uniq, counts = np.unique(pos, return_counts=True)
        dup = np.isin(pos, uniq[counts > 1])
        idx = np.flatnonzero(key_line)
        keep[idx[dup]] = False
        n_double = int(dup.sum())
    else:
        n_double = 0
    order = np.flatnonzero(keep)
    order = order[np.lexsort((line[order], position[order]))]
    return Announcement(position[order], line[order], slots[order], bits[order], n_double)


# ---------------------------------------------------------------------------
# Alice's side


def dpts_valid_windows(train: PulseTrain) -> np.ndarray:
    """Window ``w`` (slots w-2 and w) usable for key: two signal pulses of one block."""
    n = len(train)
    valid = np.zeros(n, dtype=bool)
    if n <= 2:
        return valid
    amp = train.amplitude
    group = np.arange(n) // 4
    decoy = train.decoy_mask[group]
    block = train.block_id[group]
    w = np.arange(2, n)
    valid[2:] = (
        (amp[w] > 0)
        & (amp[w - 2] > 0)
        & ~decoy[w]
        & ~decoy[w - 2]
        & (block[w] == block[w - 2])
    )
    return valid


def retain(protocol: ProtocolId, train: PulseTrain, position: np.ndarray, line: np.ndarray):
    """Alice's decision per announced click.

    Returns ``(keep, alice_bits, source_slot)`` where ``alice_bits`` has the
    same (n, 2) layout as Bob's.
    """
    n = len(position)
    keep = np.zeros(n, dtype=bool)
    bits = np.zeros((n, 2), dtype=np.uint8)
    source = np.zeros(n, dtype=np.int64)
    if n == 0:
        return keep, bits, source
    n_slots = len(train)
    ph = train.phase_bit.astype(np.uint8)
    if protocol is ProtocolId.DPTS:
        valid_w = dpts_valid_windows(train)
        group = position // 2
        in_range = (position >= 0) & (group < len(train.symbols))
        g = np.where(in_range, group, 0)
        sym = train.symbols[g]
        signal = in_range & (sym >= 0)
        parity = np.where(signal, sym // 2, 0)
        w = 2 * position + parity
        ok = signal & (w < n_slots)
        w_safe = np.where(ok, w, 2)
        ok &= valid_w[w_safe]
        keep = ok
        bits[:, 0] = parity
        bits[:, 1] = ph[w_safe] ^ ph[np.maximum(w_safe - 2, 0)]
        source = w
    elif protocol is ProtocolId.DPS:
        ok = (position >= 1) & (position < n_slots)
        w_safe = np.where(ok, position, 1)
        keep = ok
        bits[:, 0] = ph[w_safe] ^ ph[w_safe - 1]
        source = position.astype(np.int64)
    elif protocol is ProtocolId.COW:
        key_line = line == KEY_LINE
        n_pairs = len(train.symbols)
        ok = key_line & (position >= 0) & (position < n_pairs)
        g = np.where(ok, position, 0)
        ok &= train.symbols[g] >= 0
        bits[:, 0] = np.where(ok, train.symbols[g], 0)
        source = np.where(key_line, 2 * position, position)
        # monitor: keep clicks in windows where both arms carry light
        mon = ~key_line & (position >= 1) & (position < n_slots)
        w_safe = np.where(mon, position, 1)
        amp = train.amplitude
        mon &= (amp[w_safe] > 0) & (amp[w_safe - 1] > 0)
        keep = ok | mon
    else:
        raise ValueError(f"{protocol.value} is not sifted by this module")
    return keep, bits, source


def build_keys(protocol: ProtocolId, ann: Announcement, keep, alice_bits, source, dpts_bits: int = 2):
    """Assemble aligned keys from retained key-line clicks."""
    sel = keep & (ann.line == KEY_LINE)
    src = source[sel]
    if protocol is ProtocolId.DPTS:
        if dpts_bits == 2:
            a = alice_bits[sel].ravel()
            b = ann.bob_bits[sel].ravel()
            slots = np.repeat(src, 2)
            tags = np.tile(np.array([Domain.TIME, Domain.PHASE], dtype=np.uint8), len(src))
        else:
            a = alice_bits[sel, 1]
            b = ann.bob_bits[sel, 1]
            slots = src
            tags = np.full(len(src), Domain.PHASE, dtype=np.uint8)
    else:
        a = alice_bits[sel, 0]
        b = ann.bob_bits[sel, 0]
        slots = src
        tag = Domain.TIME if protocol is ProtocolId.COW else Domain.PHASE
        tags = np.full(len(src), tag, dtype=np.uint8)
    return (
        SiftedKey(a.astype(np.uint8), slots.astype(np.int64), tags),
        SiftedKey(b.astype(np.uint8), slots.astype(np.int64), tags.copy()),
    )


def visibility_from_counts(n0: int, npi: int) -> float:
    total = n0 + npi
    return (n0 - npi) / total if total else float("nan")


def _sift(protocol: ProtocolId, clicks: Clicks, prep: PulseTrain, dpts_bits: int = 2) -> SiftResult:
    ann = announce(protocol, clicks, prep.slot_period)
    keep, a_bits, source = retain(protocol, prep, ann.position, ann.line)
    alice, bob = build_keys(protocol, ann, keep, a_bits, source, dpts_bits)
    n_key_line = int(np.sum(ann.line == KEY_LINE))
    n_kept = int(np.sum(keep & (ann.line == KEY_LINE)))
    mon_keep = keep & (ann.line != KEY_LINE)
    n0 = int(np.sum(mon_keep & (ann.line == MONITOR_PORT0)))
    npi = int(np.sum(mon_keep & (ann.line == MONITOR_PORT_PI)))
    return SiftResult(
        alice,
        bob,
        visibility_from_counts(n0, npi),
        n_discarded=n_key_line - n_kept + ann.n_double,
        n_monitor_port0=n0,
        n_monitor_port_pi=npi,
    )


def sift_dpts(clicks: Clicks, prep: PulseTrain, params=None) -> SiftResult:
    dpts_bits = params.bits_per_click_dpts if params is not None else 2
    return _sift(ProtocolId.DPTS, clicks, prep, dpts_bits)


def sift_dps(clicks: Clicks, prep: PulseTrain, params=None) -> SiftResult:
    return _sift(ProtocolId.DPS, clicks, prep)


def sift_cow(data_clicks: Clicks, monitor_clicks: Clicks, prep: PulseTrain, params=None) -> SiftResult:
    return _sift(ProtocolId.COW, Clicks.concat([data_clicks, monitor_clicks]), prep)


def sift(protocol: ProtocolId, clicks: Clicks, prep: PulseTrain, params=None) -> SiftResult:
    if protocol is ProtocolId.DPTS:
        return sift_dpts(clicks, prep, params)
    if protocol is ProtocolId.DPS:
        return sift_dps(clicks, prep, params)
    if protocol is ProtocolId.COW:
        data = clicks.for_detectors(Detector.DATA_LINE)
        monitor = clicks.for_detectors(Detector.MONITOR_PORT0, Detector.MONITOR_PORT_PI)
        return sift_cow(data, monitor, prep, params)
    raise ValueError(f"{protocol.value} is not sifted by this module")


def estimate_qber(key_a: SiftedKey, key_b: SiftedKey, visibility_est: float = float("nan")) -> QberReport:
    if len(key_a) != len(key_b):
        raise ValueError("keys differ in length")
    err = key_a.bits != key_b.bits
    time = key_a.domain_tag == Domain.TIME
    phase = ~time
    n_t, n_p = int(time.sum()), int(phase.sum())
    e_t, e_p = int(err[time].sum()), int(err[phase].sum())
    n = len(key_a)
    return QberReport(
        qber_total=(e_t + e_p) / n if n else 0.0,
        qber_time=e_t / n_t if n_t else 0.0,
        qber_phase=e_p / n_p if n_p else 0.0,
        n_sifted=n,
        visibility_est=visibility_est,
        n_time=n_t,
        n_phase=n_p,
        n_errors=e_t + e_p,
    )


def write_key(key: SiftedKey, path) -> None:
    """Raw bit file plus a ``.idx`` sidecar with ``source_slot,domain`` per bit."""
    path = Path(path)
    path.write_bytes(key.to_bytes())
    lines = ["source_slot,domain"]
    lines += [f"{s},{Domain(d).name}" for s, d in zip(key.source_slot.tolist(), key.domain_tag.tolist())]
    path.with_name(path.name + ".idx").write_text("\n".join(lines) + "\n")


def read_key(path) -> SiftedKey:
    path = Path(path)
    rows = path.with_name(path.name + ".idx").read_text().splitlines()[1:]
    n = len(rows)
    bits = np.unpackbits(np.frombuffer(path.read_bytes(), dtype=np.uint8))[:n]
    slots = np.array([int(r.split(",")[0]) for r in rows], dtype=np.int64)
    tags = np.array([Domain[r.split(",")[1]] for r in rows], dtype=np.uint8)
    return SiftedKey(bits.astype(np.uint8), slots, tags)
