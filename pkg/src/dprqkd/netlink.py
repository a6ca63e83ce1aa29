"""Alice/Bob sifting exchange over a TCP byte stream.

Wire format (all integers little-endian)::

    magic 0x51 0x54 | version u8 | msg_type u8 | payload_len u32 | payload

Bob connects and opens with HELLO; Alice listens. Bob then streams his click
positions in CLICK_ANNOUNCE frames, each answered by a SIFT_ACK bitmap
(LSB-first), closes the stream with an empty announce, discloses a seeded
random sample of his key bits for QBER estimation, and both sides finish
with DONE. Measured bits never cross the wire except in the disclosed
sample, which is then removed from both keys.
"""

from __future__ import annotations

import enum
import json
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .encoder import PulseTrain
from .model import Config, ProtocolId, config_digest
from .receiver import Clicks
from .sifting import (
    KEY_LINE,
    Announcement,
    QberReport,
    SiftedKey,
    announce,
    build_keys,
    estimate_qber,
    retain,
)

MAGIC = b"\x51\x54"
VERSION = 1
HEADER = struct.Struct("<2sBBI")
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
DEFAULT_SAMPLE_FRACTION = 0.1
CLICKS_PER_FRAME = 4096

PROTOCOL_CODES = {ProtocolId.DPTS: 0, ProtocolId.DPS: 1, ProtocolId.COW: 2}
_PROTOCOL_BY_CODE = {v: k for k, v in PROTOCOL_CODES.items()}


class MsgType(enum.IntEnum):
    HELLO = 0x01
    CLICK_ANNOUNCE = 0x02
    SIFT_ACK = 0x03
    QBER_SAMPLE = 0x04
    DONE = 0x05
    ABORT = 0xFF


class AbortReason(enum.IntEnum):
    DIGEST_MISMATCH = 1
    MALFORMED = 2
    TIMEOUT = 3
    UNEXPECTED = 4
    KEY_MISMATCH = 5
    PEER_ABORT = 6
    CONNECTION = 7


class NetlinkError(Exception):
    def __init__(self, reason: AbortReason, message: str = ""):
        self.reason = reason
        self.message = message
        super().__init__(f"{reason.name}: {message}")


class FrameError(NetlinkError):
    def __init__(self, message: str):
        super().__init__(AbortReason.MALFORMED, message)


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(frame.payload)} bytes exceeds the 16 MiB cap")
    return HEADER.pack(MAGIC, VERSION, int(frame.msg_type), len(frame.payload)) + frame.payload


def parse_header(header: bytes) -> tuple[MsgType, int]:
    if len(header) != HEADER.size:
        raise FrameError("short header")
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise FrameError(f"unknown message type 0x{msg_type:02x}") from None
    if length > MAX_PAYLOAD:
        raise FrameError("payload length exceeds the 16 MiB cap")
    return kind, length


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from the start of ``data``; returns the frame and bytes consumed."""
    kind, length = parse_header(bytes(data[: HEADER.size]))
    end = HEADER.size + length
    if len(data) < end:
        raise FrameError("truncated payload")
    return Frame(kind, bytes(data[HEADER.size : end])), end


# ---------------------------------------------------------------------------
# payload codecs


def pack_bitmap(flags) -> bytes:
    return np.packbits(np.asarray(flags, dtype=bool).astype(np.uint8), bitorder="little").tobytes()


def unpack_bitmap(data: bytes, n: int) -> np.ndarray:
    if len(data) != (n + 7) // 8:
        raise FrameError("bitmap length does not match its count")
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n, bitorder="little").astype(bool)


@dataclass(frozen=True)
class Hello:
    protocol: ProtocolId
    digest: bytes

    def encode(self) -> bytes:
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 bytes")
        return bytes([PROTOCOL_CODES[self.protocol]]) + self.digest

    @classmethod
    def decode(cls, payload: bytes) -> "Hello":
        if len(payload) != 33 or payload[0] not in _PROTOCOL_BY_CODE:
            raise FrameError("bad HELLO payload")
        return cls(_PROTOCOL_BY_CODE[payload[0]], payload[1:])


_CLICK = np.dtype([("position", "<u8"), ("line", "u1")])


@dataclass(frozen=True)
class ClickAnnounce:
    block_id: int
    position: np.ndarray
    line: np.ndarray

    def __len__(self) -> int:
        return len(self.position)

    def encode(self) -> bytes:
        n = len(self.position)
        if n > 0xFFFF:
            raise ValueError("at most 65535 clicks per frame")
        rec = np.empty(n, dtype=_CLICK)
        rec["position"] = self.position
        rec["line"] = self.line
        return struct.pack("<IH", self.block_id, n) + rec.tobytes()

    @classmethod
    def decode(cls, payload: bytes) -> "ClickAnnounce":
        if len(payload) < 6:
            raise FrameError("short CLICK_ANNOUNCE")
        block_id, n = struct.unpack_from("<IH", payload)
        if len(payload) != 6 + n * _CLICK.itemsize:
            raise FrameError("CLICK_ANNOUNCE length does not match its count")
        rec = np.frombuffer(payload, dtype=_CLICK, offset=6, count=n)
        return cls(block_id, rec["position"].astype(np.int64), rec["line"].astype(np.uint8))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ClickAnnounce)
            and self.block_id == other.block_id
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.line, other.line)
        )


@dataclass(frozen=True)
class SiftAck:
    keep: np.ndarray

    def encode(self) -> bytes:
        return pack_bitmap(self.keep)

    @classmethod
    def decode(cls, payload: bytes, n: int) -> "SiftAck":
        return cls(unpack_bitmap(payload, n))


@dataclass(frozen=True)
class QberSample:
    indices: np.ndarray
    bits: np.ndarray

    def encode(self) -> bytes:
        idx = np.asarray(self.indices, dtype="<u4")
        return struct.pack("<I", len(idx)) + idx.tobytes() + pack_bitmap(self.bits)

    @classmethod
    def decode(cls, payload: bytes) -> "QberSample":
        if len(payload) < 4:
            raise FrameError("short QBER_SAMPLE")
        (n,) = struct.unpack_from("<I", payload)
        if len(payload) != 4 + 4 * n + (n + 7) // 8:
            raise FrameError("QBER_SAMPLE length does not match its count")
        idx = np.frombuffer(payload, dtype="<u4", offset=4, count=n).astype(np.int64)
        bits = unpack_bitmap(payload[4 + 4 * n :], n).astype(np.uint8)
        return cls(idx, bits)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QberSample)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.bits, other.bits)
        )


@dataclass(frozen=True)
class Done:
    n_sifted: int
    qber_ppm: int

    def encode(self) -> bytes:
        return struct.pack("<QI", self.n_sifted, self.qber_ppm)

    @classmethod
    def decode(cls, payload: bytes) -> "Done":
        if len(payload) != 12:
            raise FrameError("bad DONE payload")
        return cls(*struct.unpack("<QI", payload))


@dataclass(frozen=True)
class Abort:
    reason: int
    message: str = ""

    def encode(self) -> bytes:
        return bytes([self.reason]) + self.message.encode("utf-8")

    @classmethod
    def decode(cls, payload: bytes) -> "Abort":
        if not payload:
            raise FrameError("empty ABORT payload")
        return cls(payload[0], payload[1:].decode("utf-8", errors="replace"))


# ---------------------------------------------------------------------------
# session state


class Phase(enum.IntEnum):
    HELLO = 0
    EXCHANGING = 1
    ESTIMATING = 2
    DONE = 3
    ABORTED = 4


@dataclass
class SessionState:
    role: str
    phase: Phase = Phase.HELLO
    protocol: Optional[ProtocolId] = None
    digest: bytes = b""
    key: SiftedKey = field(default_factory=SiftedKey.empty)
    sample_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    log: list = field(default_factory=list)

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            raise RuntimeError(f"phase cannot move back from {self.phase.name} to {phase.name}")
        self.phase = phase

    def record(self, event: str, **fields) -> None:
        entry = {"role": self.role, "phase": self.phase.name, "event": event}
        entry.update(fields)
        self.log.append(json.dumps(entry, sort_keys=True))

    def log_text(self) -> str:
        return "".join(line + "\n" for line in self.log)


@dataclass
class SessionOutcome:
    ok: bool
    state: SessionState
    key: Optional[SiftedKey] = None
    qber: Optional[QberReport] = None
    reason: Optional[AbortReason] = None

    @property
    def log(self) -> list:
        return self.state.log


class _Conn:
    def __init__(self, sock: socket.socket, timeout: float):
        self.sock = sock
        sock.settimeout(timeout)

    def send(self, msg_type: MsgType, payload: bytes = b"") -> None:
        try:
            self.sock.sendall(encode_frame(Frame(msg_type, payload)))
        except socket.timeout:
            raise NetlinkError(AbortReason.TIMEOUT, "send timed out") from None
        except OSError as exc:
            raise NetlinkError(AbortReason.CONNECTION, str(exc)) from None

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout:
                raise NetlinkError(AbortReason.TIMEOUT, "receive timed out") from None
            except OSError as exc:
                raise NetlinkError(AbortReason.CONNECTION, str(exc)) from None
            if not chunk:
                raise FrameError("stream closed mid-frame" if buf else "stream closed")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, *expected: MsgType) -> Frame:
        kind, length = parse_header(self._read_exact(HEADER.size))
        frame = Frame(kind, self._read_exact(length) if length else b"")
        if kind is MsgType.ABORT:
            peer = Abort.decode(frame.payload)
            raise NetlinkError(AbortReason.PEER_ABORT, f"peer aborted ({peer.reason}): {peer.message}")
        if expected and kind not in expected:
            raise NetlinkError(AbortReason.UNEXPECTED, f"expected {[e.name for e in expected]}, got {kind.name}")
        return frame


def _fail(conn: Optional[_Conn], state: SessionState, err: NetlinkError) -> SessionOutcome:
    state.phase = Phase.ABORTED
    state.key = SiftedKey.empty()
    state.record("abort", reason=err.reason.name, message=err.message)
    if conn is not None and err.reason not in (AbortReason.PEER_ABORT, AbortReason.CONNECTION):
        try:
            conn.send(MsgType.ABORT, Abort(int(err.reason), err.message).encode())
        except NetlinkError:
            pass
    return SessionOutcome(False, state, None, None, err.reason)


def _qber_ppm(q: float) -> int:
    return int(round(min(max(q, 0.0), 1.0) * 1e6))


def sample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted positions of the disclosed QBER sample, drawn without replacement."""
    k = int(round(n * fraction))
    if n == 0 or k == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=min(k, n), replace=False)).astype(np.int64)


def _sampled_report(a_bits: np.ndarray, b_bits: np.ndarray, key: SiftedKey, idx: np.ndarray) -> QberReport:
    ka = SiftedKey(a_bits.astype(np.uint8), key.source_slot[idx], key.domain_tag[idx])
    kb = SiftedKey(b_bits.astype(np.uint8), key.source_slot[idx], key.domain_tag[idx])
    return estimate_qber(ka, kb)


# ---------------------------------------------------------------------------
# sessions


Endpoint = Union[str, tuple]


def parse_endpoint(endpoint: Endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, _, port = endpoint.rpartition(":")
    if not host or not port:
        raise ValueError(f"endpoint must be HOST:PORT, got {endpoint!r}")
    return host, int(port)


def listen(endpoint: Endpoint) -> socket.socket:
    host, port = parse_endpoint(endpoint)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def alice_session(
    endpoint: Union[Endpoint, socket.socket],
    prep: PulseTrain,
    cfg: Config,
    protocol: Optional[ProtocolId] = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> SessionOutcome:
    """Serve one Bob connection; ``endpoint`` may be an already listening socket."""
    protocol = protocol or prep.protocol
    state = SessionState("alice", protocol=protocol, digest=config_digest(cfg, protocol))
    params = cfg.params_for(protocol)
    own = isinstance(endpoint, (str, tuple))
    server = listen(endpoint) if own else endpoint
    conn = None
    try:
        server.settimeout(timeout)
        try:
            sock, _ = server.accept()
        except socket.timeout:
            raise NetlinkError(AbortReason.TIMEOUT, "no connection") from None
        conn = _Conn(sock, timeout)
        hello = Hello.decode(conn.recv(MsgType.HELLO).payload)
        state.record("hello", protocol=hello.protocol.value, digest=hello.digest.hex())
        if hello.protocol is not protocol or hello.digest != state.digest:
            raise NetlinkError(AbortReason.DIGEST_MISMATCH, "protocol or parameter digest differs")
        conn.send(MsgType.HELLO, Hello(protocol, state.digest).encode())
        state.advance(Phase.EXCHANGING)

        keys = []
        n_announced = n_kept = 0
        while True:
            ann = ClickAnnounce.decode(conn.recv(MsgType.CLICK_ANNOUNCE).payload)
            if len(ann) == 0:
                break
            keep, a_bits, source = retain(protocol, prep, ann.position, ann.line)
            conn.send(MsgType.SIFT_ACK, SiftAck(keep).encode())
            pseudo = Announcement(ann.position, ann.line, ann.position, np.zeros((len(ann), 2), np.uint8))
            alice_key, _ = build_keys(protocol, pseudo, keep, a_bits, source, params.bits_per_click_dpts)
            keys.append(alice_key)
            n_announced += len(ann)
            n_kept += int(np.sum(keep & (ann.line == KEY_LINE)))
        key = _concat_keys(keys)
        state.key = key
        state.record("sifted", announced=n_announced, kept=n_kept, bits=len(key))
        state.advance(Phase.ESTIMATING)

        sample = QberSample.decode(conn.recv(MsgType.QBER_SAMPLE).payload)
        idx = sample.indices
        if len(idx) and (np.any(idx >= len(key)) or np.any(np.diff(idx) <= 0)):
            raise NetlinkError(AbortReason.MALFORMED, "sample indices out of range")
        mine = key.bits[idx]
        conn.send(MsgType.QBER_SAMPLE, QberSample(idx, mine).encode())
        report = _sampled_report(mine, sample.bits, key, idx)
        state.sample_indices = idx
        state.key = key.without(idx)
        state.record("sample", n=len(idx), errors=report.n_errors)

        done = Done.decode(conn.recv(MsgType.DONE).payload)
        if done.n_sifted != len(state.key):
            raise NetlinkError(AbortReason.KEY_MISMATCH, f"bob has {done.n_sifted} bits, alice {len(state.key)}")
        conn.send(MsgType.DONE, Done(len(state.key), _qber_ppm(report.qber_total)).encode())
        state.advance(Phase.DONE)
        state.record("done", n_sifted=len(state.key), qber_ppm=_qber_ppm(report.qber_total))
        return SessionOutcome(True, state, state.key, report)
    except NetlinkError as err:
        return _fail(conn, state, err)
    finally:
        if conn is not None:
            conn.sock.close()
        if own:
            server.close()


def bob_session(
    endpoint: Endpoint,
    clicks: Clicks,
    cfg: Config,
    protocol: ProtocolId,
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION,
    sample_seed: int = 0,
    timeout: float = DEFAULT_TIMEOUT,
) -> SessionOutcome:
    """Connect to Alice, sift ``clicks`` and estimate the QBER on a disclosed sample."""
    if not 0 <= sample_fraction < 1:
        raise ValueError("sample_fraction must lie in [0, 1)")
    state = SessionState("bob", protocol=protocol, digest=config_digest(cfg, protocol))
    params = cfg.params_for(protocol)
    conn = None
    try:
        sock = _connect(parse_endpoint(endpoint), timeout)
        conn = _Conn(sock, timeout)
        conn.send(MsgType.HELLO, Hello(protocol, state.digest).encode())
        hello = Hello.decode(conn.recv(MsgType.HELLO).payload)
        state.record("hello", protocol=hello.protocol.value, digest=hello.digest.hex())
        if hello.protocol is not protocol or hello.digest != state.digest:
            raise NetlinkError(AbortReason.DIGEST_MISMATCH, "protocol or parameter digest differs")
        state.advance(Phase.EXCHANGING)

        ann = announce(protocol, clicks, params.slot_period)
        keys = []
        n_kept = 0
        for block, lo in enumerate(range(0, len(ann), CLICKS_PER_FRAME)):
            sl = slice(lo, lo + CLICKS_PER_FRAME)
            msg = ClickAnnounce(block, ann.position[sl], ann.line[sl])
            conn.send(MsgType.CLICK_ANNOUNCE, msg.encode())
            keep = SiftAck.decode(conn.recv(MsgType.SIFT_ACK).payload, len(msg)).keep
            part = Announcement(ann.position[sl], ann.line[sl], ann.slot[sl], ann.bob_bits[sl])
            source = _bob_source(protocol, part)
            _, bob_key = build_keys(protocol, part, keep, part.bob_bits, source, params.bits_per_click_dpts)
            keys.append(bob_key)
            n_kept += int(np.sum(keep & (part.line == KEY_LINE)))
        n_blocks = -(-len(ann) // CLICKS_PER_FRAME)
        conn.send(MsgType.CLICK_ANNOUNCE, ClickAnnounce(n_blocks, np.zeros(0, np.int64), np.zeros(0, np.uint8)).encode())
        key = _concat_keys(keys)
        state.key = key
        state.record("sifted", announced=len(ann), kept=n_kept, bits=len(key), doubles=ann.n_double)
        state.advance(Phase.ESTIMATING)

        idx = sample_indices(len(key), sample_fraction, sample_seed)
        mine = key.bits[idx]
        conn.send(MsgType.QBER_SAMPLE, QberSample(idx, mine).encode())
        reply = QberSample.decode(conn.recv(MsgType.QBER_SAMPLE).payload)
        if not np.array_equal(reply.indices, idx):
            raise NetlinkError(AbortReason.MALFORMED, "sample reply indices differ")
        report = _sampled_report(reply.bits, mine, key, idx)
        state.sample_indices = idx
        state.key = key.without(idx)
        state.record("sample", n=len(idx), errors=report.n_errors)

        conn.send(MsgType.DONE, Done(len(state.key), _qber_ppm(report.qber_total)).encode())
        done = Done.decode(conn.recv(MsgType.DONE).payload)
        if done.n_sifted != len(state.key):
            raise NetlinkError(AbortReason.KEY_MISMATCH, f"alice has {done.n_sifted} bits, bob {len(state.key)}")
        state.advance(Phase.DONE)
        state.record("done", n_sifted=len(state.key), qber_ppm=_qber_ppm(report.qber_total))
        return SessionOutcome(True, state, state.key, report)
    except NetlinkError as err:
        return _fail(conn, state, err)
    finally:
        if conn is not None:
            conn.sock.close()


def _connect(address: tuple, timeout: float) -> socket.socket:
    """Connect, retrying refused attempts until ``timeout`` so Bob may start first."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection(address, timeout=timeout)
        except socket.timeout:
            raise NetlinkError(AbortReason.TIMEOUT, "connect timed out") from None
        except ConnectionRefusedError as exc:
            if time.monotonic() >= deadline:
                raise NetlinkError(AbortReason.TIMEOUT, f"no listener: {exc}") from None
            time.sleep(0.05)
        except OSError as exc:
            raise NetlinkError(AbortReason.CONNECTION, str(exc)) from None


def _bob_source(protocol: ProtocolId, ann: Announcement) -> np.ndarray:
    """Source slots Bob can compute himself; they mirror Alice's for kept key clicks."""
    if protocol is ProtocolId.DPTS:
        return ann.slot.astype(np.int64)
    if protocol is ProtocolId.COW:
        return np.where(ann.line == KEY_LINE, 2 * ann.position, ann.position)
    return ann.position.astype(np.int64)


def _concat_keys(keys: list) -> SiftedKey:
    keys = [k for k in keys if len(k)]
    if not keys:
        return SiftedKey.empty()
    return SiftedKey(
        np.concatenate([k.bits for k in keys]),
        np.concatenate([k.source_slot for k in keys]),
        np.concatenate([k.domain_tag for k in keys]),
    )
