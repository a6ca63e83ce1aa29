import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import noiseless_clicks
from dprqkd.encoder import encode_cow, encode_dps, encode_dpts
from dprqkd.model import ChannelSpec, DetectorSpec, ProtocolId, SystemParams
from dprqkd.montecarlo import McRunConfig, run
from dprqkd.receiver import ClickRecord, Clicks, Detector
from dprqkd.sifting import (
    Domain,
    SiftedKey,
    announce,
    dpts_valid_windows,
    estimate_qber,
    read_key,
    sift,
    sift_cow,
    sift_dpts,
    sift_dps,
    write_key,
)

IDEAL = SystemParams(visibility_v=1.0, e_time=0.0, e_phase=0.0, decoy_prob_pd=0.0)


def _key(bits, domain=Domain.PHASE):
    bits = np.asarray(bits, dtype=np.uint8)
    return SiftedKey(bits, np.arange(len(bits), dtype=np.int64), np.full(len(bits), domain, np.uint8))


def _valid_window_oracle(train, w):
    """Direct restatement of the keep rule from the preparation record."""
    if w < 2 or w >= len(train):
        return False
    g1, g0 = w // 4, (w - 2) // 4
    return bool(
        train.amplitude[w] > 0
        and train.amplitude[w - 2] > 0
        and not train.decoy_mask[g1]
        and not train.decoy_mask[g0]
        and train.block_id[g1] == train.block_id[g0]
    )


def _strictly_increasing(key):
    pairs = list(zip(key.source_slot.tolist(), key.domain_tag.tolist()))
    return all(a < b for a, b in zip(pairs, pairs[1:]))


def test_dpts_exhaustive_noiseless_identity():
    checked = 0
    for n in range(1, 7):
        for syms in itertools.product(range(4), repeat=n):
            train = encode_dpts(syms, IDEAL, rng_seed=n)
            res = sift_dpts(noiseless_clicks(train, ProtocolId.DPTS), train)
            assert np.array_equal(res.alice.bits, res.bob.bits), syms
            assert estimate_qber(res.alice, res.bob).qber_total == 0.0
            n_valid = sum(_valid_window_oracle(train, w) for w in range(len(train)))
            assert len(res.alice) == 2 * n_valid
            assert _strictly_increasing(res.alice)
            checked += 1
    assert checked == sum(4**n for n in range(1, 7))


@pytest.mark.parametrize("symbol", range(4))
def test_dpts_single_symbol_bits(symbol):
    train = encode_dpts([symbol], IDEAL, rng_seed=9)
    res = sift_dpts(noiseless_clicks(train, ProtocolId.DPTS), train)
    assert res.bob.bits.tolist() == [symbol // 2, symbol % 2]
    assert res.bob.domain_tag.tolist() == [Domain.TIME, Domain.PHASE]


def test_dpts_one_bit_mode_keeps_phase_bit():
    p = replace(IDEAL, bits_per_click_dpts=1)
    train = encode_dpts([3, 1], p)
    res = sift_dpts(noiseless_clicks(train, ProtocolId.DPTS), train, p)
    # two blocks, one internal window each, both with phase bit 1
    assert res.bob.bits.tolist() == [1, 1]
    assert np.all(res.bob.domain_tag == Domain.PHASE)


def test_block_boundary_click_is_discarded():
    p = replace(IDEAL, block_len_n=1, block_mode="fixed")
    train = encode_dpts([0, 0], p)
    assert train.block_id.tolist() == [0, 1]
    # window 4 pairs slot 2 (block 0) with slot 4 (block 1)
    clicks = Clicks.from_records([ClickRecord(4 * train.slot_period, Detector.PORT0)])
    res = sift_dpts(clicks, train)
    assert len(res.alice) == 0
    assert res.n_discarded == 1


def test_out_of_range_click_is_discarded():
    train = encode_dpts([0], IDEAL)
    clicks = Clicks.from_records([ClickRecord(100 * train.slot_period, Detector.PORT0)])
    res = sift_dpts(clicks, train)
    assert len(res.bob) == 0 and res.n_discarded == 1


def test_double_click_dropped():
    train = encode_dpts([0], IDEAL)
    t = 2 * train.slot_period
    clicks = Clicks.from_records([ClickRecord(t, Detector.PORT0), ClickRecord(t, Detector.PORT_PI)])
    ann = announce(ProtocolId.DPTS, clicks, train.slot_period)
    assert len(ann) == 0 and ann.n_double == 2


def test_sifted_bits_never_from_decoys_or_boundaries():
    p = SystemParams(decoy_prob_pd=0.3, block_len_n=2.0, insertion_loss_lint=0.0)
    det = DetectorSpec(eta_det=1.0, dark_rate_rdc=1e6, dead_time_td=0)
    res = run(McRunConfig(ProtocolId.DPTS, p, ChannelSpec.explicit(0), det, 200_000, seed=4,
                          emit_clicks=True))
    train = res.train
    slots = np.unique(res.sift.alice.source_slot)
    assert len(slots) > 1000
    assert all(_valid_window_oracle(train, int(w)) for w in slots)
    assert np.array_equal(np.flatnonzero(dpts_valid_windows(train)),
                          [w for w in range(len(train)) if _valid_window_oracle(train, w)])


def test_dps_noiseless():
    train = encode_dps([1, 0, 1], IDEAL)
    res = sift_dps(noiseless_clicks(train, ProtocolId.DPS), train)
    assert res.bob.bits.tolist() == [1, 0, 1]
    assert res.alice.bits.tolist() == [1, 0, 1]
    assert np.all(res.bob.domain_tag == Domain.PHASE)


def test_dps_subset_of_clicks():
    train = encode_dps([1, 0, 1], IDEAL)
    clicks = noiseless_clicks(train, ProtocolId.DPS)
    res = sift_dps(clicks.select(clicks.slots(train.slot_period) != 2), train)
    assert res.bob.bits.tolist() == [1, 1]


def test_dps_no_clicks():
    train = encode_dps([1, 0, 1], IDEAL)
    res = sift_dps(Clicks.empty(), train)
    assert len(res.alice) == len(res.bob) == 0
    assert estimate_qber(res.alice, res.bob).n_sifted == 0


def test_cow_noiseless():
    train = encode_cow([0, 1, 0], IDEAL)
    clicks = noiseless_clicks(train, ProtocolId.COW)
    data = clicks.for_detectors(Detector.DATA_LINE)
    mon = clicks.for_detectors(Detector.MONITOR_PORT0, Detector.MONITOR_PORT_PI)
    res = sift_cow(data, mon, train)
    assert res.bob.bits.tolist() == [0, 1, 0]
    assert res.alice.bits.tolist() == [0, 1, 0]
    assert np.all(res.bob.domain_tag == Domain.TIME)


def test_cow_decoys_excluded_and_visibility_one():
    p = replace(IDEAL, decoy_prob_pd=0.4)
    train = encode_cow(np.arange(200) % 2, p, rng_seed=2)
    res = sift(ProtocolId.COW, noiseless_clicks(train, ProtocolId.COW), train)
    assert len(res.bob) == int((~train.decoy_mask).sum())
    assert np.array_equal(res.alice.bits, res.bob.bits)
    assert res.visibility_est == 1.0
    assert res.n_monitor_port_pi == 0 and res.n_monitor_port0 > 0


def test_cow_visibility_estimate_binomial():
    v, m = 0.98, 0.05
    p = SystemParams(mu=m / 0.5, tap_ratio=0.5, insertion_loss_lint=0.0, visibility_v=v, decoy_prob_pd=0.1)
    det = DetectorSpec(eta_det=1.0, dark_rate_rdc=0.0, dead_time_td=0.0, jitter_tj=0.0)
    res = run(McRunConfig(ProtocolId.COW, p, ChannelSpec.explicit(0), det, 12_000_000, seed=8))
    n0, npi = res.sift.n_monitor_port0, res.sift.n_monitor_port_pi
    n = n0 + npi
    assert n > 100_000
    # coherent window: each arm brings m/2, Port0 mean m(1+V)/2, PortPi m(1-V)/2
    q0 = -np.expm1(-m * (1 + v) / 2)
    qpi = -np.expm1(-m * (1 - v) / 2)
    expected = (q0 - qpi) / (q0 + qpi)
    f = q0 / (q0 + qpi)
    sigma = 2 * np.sqrt(f * (1 - f) / n)
    assert abs(res.sift.visibility_est - expected) < 3 * sigma
    assert abs(res.sift.visibility_est - v) < 3 * sigma + 1e-3


def test_estimate_qber_examples():
    a = _key(np.zeros(200))
    assert estimate_qber(a, a).qber_total == 0.0
    assert estimate_qber(a, _key(np.ones(200))).qber_total == 1.0
    b = np.zeros(200)
    b[[3, 50, 199]] = 1
    assert estimate_qber(a, _key(b)).qber_total == pytest.approx(0.015)
    with pytest.raises(ValueError):
        estimate_qber(a, _key(np.zeros(10)))


def test_estimate_qber_domains_weighted():
    tags = np.array([Domain.TIME] * 100 + [Domain.PHASE] * 300, np.uint8)
    slots = np.arange(400, dtype=np.int64)
    a = SiftedKey(np.zeros(400, np.uint8), slots, tags)
    bb = np.zeros(400, np.uint8)
    bb[:10] = 1  # 10 time errors
    bb[100:103] = 1  # 3 phase errors
    r = estimate_qber(a, SiftedKey(bb, slots, tags))
    assert r.qber_time == pytest.approx(0.1)
    assert r.qber_phase == pytest.approx(0.01)
    assert r.qber_total == pytest.approx((r.qber_time * 100 + r.qber_phase * 300) / 400)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=300))
def test_estimate_qber_symmetric(pairs):
    a = _key([x for x, _ in pairs])
    b = _key([y for _, y in pairs])
    assert estimate_qber(a, b) == estimate_qber(b, a)


def test_key_file_roundtrip(tmp_path):
    key = SiftedKey(
        np.array([1, 0, 1, 1, 0, 0, 0, 1, 1], np.uint8),
        np.array([2, 2, 5, 5, 9, 9, 14, 14, 20], np.int64),
        np.array([0, 1] * 4 + [0], np.uint8),
    )
    path = tmp_path / "k.bin"
    write_key(key, path)
    # MSB-first packing
    assert path.read_bytes() == bytes([0b10110001, 0b10000000])
    back = read_key(path)
    assert np.array_equal(back.bits, key.bits)
    assert np.array_equal(back.source_slot, key.source_slot)
    assert np.array_equal(back.domain_tag, key.domain_tag)
