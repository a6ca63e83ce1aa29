import math
import socket
import struct
import threading
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprqkd.model import DPR_PROTOCOLS, ProtocolId, default_config, ideal_config
from dprqkd.montecarlo import McRunConfig, run
from dprqkd.netlink import (
    HEADER,
    MAX_PAYLOAD,
    Abort,
    AbortReason,
    ClickAnnounce,
    Done,
    Frame,
    FrameError,
    Hello,
    MsgType,
    Phase,
    QberSample,
    SiftAck,
    alice_session,
    bob_session,
    decode_frame,
    encode_frame,
    listen,
    pack_bitmap,
    parse_endpoint,
    sample_indices,
    unpack_bitmap,
)
from dprqkd.receiver import Clicks

P = ProtocolId


# --- wire format -----------------------------------------------------------------


def test_header_golden_bytes():
    raw = encode_frame(Frame(MsgType.DONE, Done(7, 15000).encode()))
    assert raw[:8] == bytes([0x51, 0x54, 0x01, 0x05, 12, 0, 0, 0])
    assert raw[8:] == (7).to_bytes(8, "little") + (15000).to_bytes(4, "little")


def test_bitmap_is_lsb_first():
    assert pack_bitmap([1, 0, 0, 0, 0, 0, 0, 0, 0, 1]) == bytes([0x01, 0x02])
    assert pack_bitmap([0, 1, 1]) == bytes([0x06])
    assert unpack_bitmap(bytes([0x80]), 8).tolist() == [False] * 7 + [True]
    with pytest.raises(FrameError):
        unpack_bitmap(bytes([0, 0]), 8)


def test_click_announce_golden_bytes():
    payload = ClickAnnounce(3, np.array([1, 2**40]), np.array([0, 2], np.uint8)).encode()
    assert payload == struct.pack("<IHQBQB", 3, 2, 1, 0, 2**40, 2)


frames = st.one_of(
    st.builds(lambda p, d: Hello(p, d), st.sampled_from(DPR_PROTOCOLS), st.binary(min_size=32, max_size=32)),
    st.builds(
        lambda b, xs: ClickAnnounce(b, np.array([x for x, _ in xs], np.int64), np.array([l for _, l in xs], np.uint8)),
        st.integers(0, 2**32 - 1),
        st.lists(st.tuples(st.integers(0, 2**63 - 1), st.integers(0, 2)), max_size=50),
    ),
    st.builds(lambda xs: SiftAck(np.array(xs, bool)), st.lists(st.booleans(), max_size=70)),
    st.builds(
        lambda xs: QberSample(np.array([i for i, _ in xs], np.int64), np.array([b for _, b in xs], np.uint8)),
        st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 1)), max_size=40),
    ),
    st.builds(Done, st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1)),
    st.builds(Abort, st.integers(0, 255), st.text(max_size=30)),
)

_TYPES = {Hello: MsgType.HELLO, ClickAnnounce: MsgType.CLICK_ANNOUNCE, SiftAck: MsgType.SIFT_ACK,
          QberSample: MsgType.QBER_SAMPLE, Done: MsgType.DONE, Abort: MsgType.ABORT}


def _decode_payload(kind, payload, msg):
    cls = {v: k for k, v in _TYPES.items()}[kind]
    if cls is SiftAck:
        return SiftAck.decode(payload, len(msg.keep))
    return cls.decode(payload)


@settings(max_examples=300)
@given(frames)
def test_frame_round_trip(msg):
    raw = encode_frame(Frame(_TYPES[type(msg)], msg.encode()))
    frame, used = decode_frame(raw + b"trailing")
    assert used == len(raw)
    back = _decode_payload(frame.msg_type, frame.payload, msg)
    if isinstance(msg, SiftAck):
        assert np.array_equal(back.keep, msg.keep)
    else:
        assert back == msg


def test_malformed_frames_rejected():
    good = encode_frame(Frame(MsgType.DONE, Done(1, 2).encode()))
    for bad in (b"XX" + good[2:], good[:2] + b"\x02" + good[3:], good[:3] + b"\x09" + good[4:], good[:-1], good[:5]):
        with pytest.raises(FrameError):
            decode_frame(bad)
    with pytest.raises(FrameError):
        decode_frame(struct.pack("<2sBBI", b"QT", 1, 2, MAX_PAYLOAD + 1))
    with pytest.raises(FrameError):
        encode_frame(Frame(MsgType.ABORT, bytes(MAX_PAYLOAD + 1)))
    with pytest.raises(FrameError):
        Done.decode(b"\x00" * 11)
    with pytest.raises(FrameError):
        Hello.decode(b"\x07" + bytes(32))
    with pytest.raises(FrameError):
        ClickAnnounce.decode(struct.pack("<IH", 0, 2) + bytes(9))
    with pytest.raises(FrameError):
        QberSample.decode(struct.pack("<I", 3) + bytes(4))


def test_sample_indices():
    idx = sample_indices(1000, 0.1, 5)
    assert len(idx) == 100 and np.all(np.diff(idx) > 0) and idx.max() < 1000
    assert np.array_equal(idx, sample_indices(1000, 0.1, 5))
    assert len(sample_indices(0, 0.1, 5)) == 0
    assert parse_endpoint("127.0.0.1:9000") == ("127.0.0.1", 9000)
    with pytest.raises(ValueError):
        parse_endpoint("nohost")


# --- sessions over loopback --------------------------------------------------------


def _mc(protocol, cfg, n_pulses=200_000, seed=1):
    return run(McRunConfig.from_config(cfg, protocol, n_pulses, seed, emit_clicks=True))


def _loopback(train, clicks, cfg_a, cfg_b, protocol, **bob_kw):
    srv = listen(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    out = {}
    th = threading.Thread(target=lambda: out.setdefault("a", alice_session(srv, train, cfg_a, protocol, timeout=10)))
    th.start()
    bob = bob_session(("127.0.0.1", port), clicks, cfg_b, protocol, timeout=10, **bob_kw)
    th.join()
    srv.close()
    return out["a"], bob


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_noiseless_loopback_keys_equal(proto):
    cfg = ideal_config(3.0)
    res = _mc(proto, cfg)
    a, b = _loopback(res.train, res.clicks, cfg, cfg, proto)
    assert a.ok and b.ok and a.state.phase is Phase.DONE
    assert len(a.key) > 200
    assert np.array_equal(a.key.bits, b.key.bits)
    assert np.array_equal(a.key.bits, res.sift.alice.without(a.state.sample_indices).bits)
    assert np.array_equal(a.key.source_slot, b.key.source_slot)
    # disclosed sample bits are removed from the key
    assert len(a.key) == res.qber_meas.n_sifted - len(a.state.sample_indices)


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_link_adds_no_errors(proto):
    cfg = default_config().with_loss(3)
    res = _mc(proto, cfg)
    a, b = _loopback(res.train, res.clicks, cfg, cfg, proto)
    assert a.ok and b.ok
    mismatched = int(np.sum(a.key.bits != b.key.bits)) + a.qber.n_errors
    assert mismatched == res.qber_meas.n_errors
    assert len(a.key) + a.qber.n_sifted == res.qber_meas.n_sifted


def test_sampled_qber_within_hypergeometric_error():
    cfg = default_config().with_loss(0)
    cfg = replace(cfg, detector=replace(cfg.detector, dead_time_td=0.0))
    res = _mc(P.DPS, cfg, n_pulses=10_000_000, seed=4)
    a, b = _loopback(res.train, res.clicks, cfg, cfg, P.DPS, sample_fraction=0.1, sample_seed=3)
    N, K = res.qber_meas.n_sifted, res.qber_meas.n_errors
    n = b.qber.n_sifted
    assert N > 30_000
    p = K / N
    sigma = math.sqrt(p * (1 - p) / n * (N - n) / (N - 1))
    assert abs(b.qber.qber_total - p) <= 3 * sigma
    assert a.qber.n_errors == b.qber.n_errors


def test_digest_mismatch_aborts_both():
    cfg = default_config().with_loss(3)
    res = _mc(P.DPTS, cfg, n_pulses=20_000)
    a, b = _loopback(res.train, res.clicks, cfg, cfg.with_loss(4), P.DPTS)
    assert not a.ok and not b.ok
    assert a.reason is AbortReason.DIGEST_MISMATCH
    assert b.reason in (AbortReason.DIGEST_MISMATCH, AbortReason.PEER_ABORT)
    assert a.key is None and b.key is None
    assert a.state.phase is Phase.ABORTED and len(a.state.key) == 0


def test_zero_clicks_is_done_with_empty_key():
    cfg = default_config()
    res = _mc(P.DPTS, cfg, n_pulses=1000)
    a, b = _loopback(res.train, Clicks.empty(), cfg, cfg, P.DPTS)
    assert a.ok and b.ok and len(a.key) == 0 and len(b.key) == 0


def test_transcripts_are_deterministic():
    cfg = default_config().with_loss(3)
    res = _mc(P.DPTS, cfg, n_pulses=100_000)
    first = _loopback(res.train, res.clicks, cfg, cfg, P.DPTS, sample_seed=9)
    second = _loopback(res.train, res.clicks, cfg, cfg, P.DPTS, sample_seed=9)
    for x, y in zip(first, second):
        assert x.state.log_text() == y.state.log_text()
        assert np.array_equal(x.key.bits, y.key.bits)


def _fake_bob(behaviour, cfg, train, protocol=P.DPTS, alice_timeout=10.0):
    srv = listen(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    out = {}
    th = threading.Thread(target=lambda: out.setdefault("a", alice_session(srv, train, cfg, protocol, timeout=alice_timeout)))
    th.start()
    sock = socket.create_connection(("127.0.0.1", port))
    try:
        behaviour(sock)
    finally:
        th.join()
        sock.close()
        srv.close()
    return out["a"]


def _hello(sock, cfg, protocol=P.DPTS):
    from dprqkd.model import config_digest

    sock.sendall(encode_frame(Frame(MsgType.HELLO, Hello(protocol, config_digest(cfg, protocol)).encode())))
    reply = b""
    while len(reply) < HEADER.size + 33:
        reply += sock.recv(100)
    return reply


def test_truncated_stream_aborts_and_discards_key():
    cfg = default_config()
    res = _mc(P.DPTS, cfg, n_pulses=20_000)

    def truncated(sock):
        _hello(sock, cfg)
        raw = encode_frame(Frame(MsgType.CLICK_ANNOUNCE, ClickAnnounce(0, np.arange(10), np.zeros(10, np.uint8)).encode()))
        sock.sendall(raw[: len(raw) // 2])
        sock.shutdown(socket.SHUT_WR)

    a = _fake_bob(truncated, cfg, res.train)
    assert not a.ok and a.reason is AbortReason.MALFORMED and a.key is None
    assert len(a.state.key) == 0


def test_unknown_message_type_aborts():
    cfg = default_config()
    res = _mc(P.DPTS, cfg, n_pulses=20_000)

    def junk(sock):
        _hello(sock, cfg)
        sock.sendall(struct.pack("<2sBBI", b"QT", 1, 0x42, 0))

    a = _fake_bob(junk, cfg, res.train)
    assert a.reason is AbortReason.MALFORMED


def test_silent_peer_times_out():
    cfg = default_config()
    res = _mc(P.DPTS, cfg, n_pulses=20_000)
    a = _fake_bob(lambda sock: None, cfg, res.train, alice_timeout=0.3)
    assert not a.ok and a.reason is AbortReason.TIMEOUT


def test_bob_without_listener_times_out():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    b = bob_session(("127.0.0.1", port), Clicks.empty(), default_config(), P.DPTS, timeout=0.3)
    assert not b.ok and b.reason is AbortReason.TIMEOUT
