import math
from dataclasses import replace

import numpy as np
import pytest

from dprqkd.keyrate import predict_rates
from dprqkd.model import DPR_PROTOCOLS, ChannelSpec, DetectorSpec, ProtocolId, SystemParams, default_config, ideal_config
from dprqkd.montecarlo import (
    McRunConfig,
    batch_seed,
    derive_seed,
    max_sifted_bits,
    run,
    run_batches,
    worker_count,
)
from dprqkd.receiver import Detector

P = ProtocolId


def _same(a, b):
    """Field-wise equality of two McResults (NaN-aware, arrays compared elementwise)."""
    qa, qb = a.qber_meas, b.qber_meas
    assert (qa.n_sifted, qa.n_errors, qa.n_time, qa.n_phase) == (qb.n_sifted, qb.n_errors, qb.n_time, qb.n_phase)
    assert np.array_equal([qa.qber_total, qa.visibility_est], [qb.qber_total, qb.visibility_est], equal_nan=True)
    assert (a.r_sift_meas, a.n_clicks_per_detector, a.n_dark) == (b.r_sift_meas, b.n_clicks_per_detector, b.n_dark)
    for side in ("alice", "bob"):
        ka, kb = getattr(a.sift, side), getattr(b.sift, side)
        assert np.array_equal(ka.bits, kb.bits) and np.array_equal(ka.source_slot, kb.source_slot)


def _cfg(protocol, cfg=None, **kw):
    return McRunConfig.from_config(cfg or default_config(), protocol, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(P.DPTS, n_pulses=0)
    with pytest.raises(ValueError):
        _cfg(P.BB84_DECOY, n_pulses=10)


def test_seed_derivation_is_fixed():
    a = derive_seed(7, 10).generate_state(2)
    b = derive_seed(7, 10).generate_state(2)
    c = derive_seed(7, 11).generate_state(2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert batch_seed(5, 0) == 5
    assert len({batch_seed(5, i) for i in range(50)}) == 50


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_deterministic(proto):
    cfg = _cfg(proto, default_config().with_loss(3), n_pulses=200_000, seed=11, emit_clicks=True)
    a, b = run(cfg), run(cfg)
    _same(a, b)
    assert np.array_equal(a.clicks.time, b.clicks.time)
    c = run(replace(cfg, seed=12))
    assert not np.array_equal(a.clicks.time, c.clicks.time)


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_ideal_config_zero_qber(proto):
    res = run(_cfg(proto, ideal_config(3.0), n_pulses=10**6, seed=1))
    assert res.qber_meas.n_sifted > 1000
    assert res.qber_meas.n_errors == 0
    assert res.qber_meas.qber_total == 0.0
    assert res.n_dark == 0


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_counts_consistent(proto):
    res = run(_cfg(proto, default_config().with_loss(0), n_pulses=300_000))
    assert res.qber_meas.n_sifted <= max_sifted_bits(res, res_params(proto), proto)
    assert res.n_dark <= res.n_clicks


def res_params(proto):
    return default_config().params_for(proto)


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_dead_time_spacing_on_emitted_clicks(proto):
    res = run(_cfg(proto, default_config().with_loss(0), n_pulses=5_000_000, emit_clicks=True))
    td = default_config().detector.dead_time_td
    clicks = res.clicks
    for d in np.unique(clicks.detector):
        t = np.sort(clicks.time[clicks.detector == d])
        assert len(t) > 100
        assert np.all(np.diff(t) >= td)


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_low_flux_click_rate(proto):
    # mu*t well below 0.01, no dead time, no darks: click counts are Poisson around the port flux
    cfg = default_config().with_loss(20)
    det = DetectorSpec(dark_rate_rdc=0.0, dead_time_td=0.0, jitter_tj=0.0)
    p = cfg.params_for(proto)
    assert p.mu * 10 ** -2 < 0.01
    res = run(McRunConfig(proto, p, cfg.channel, det, n_pulses=2_000_000, seed=3))
    rep = predict_rates(proto, p, cfg.channel, det)
    for name, rate in rep.raw_detector_rates.items():
        expected = rate * res.duration
        got = res.n_clicks_per_detector.get(name, 0)
        assert abs(got - expected) <= 3 * math.sqrt(expected) + 0.005 * expected, name


@pytest.mark.parametrize("proto", DPR_PROTOCOLS)
def test_rates_match_analytic_at_16_5_db(proto):
    cfg = default_config().with_loss(16.5)
    res = run(_cfg(proto, cfg, n_pulses=10**7, seed=5))
    rep = predict_rates(proto, cfg.params_for(proto), cfg.channel, cfg.detector)
    n = res.qber_meas.n_sifted
    sigma_q = math.sqrt(rep.qber_pred * (1 - rep.qber_pred) / n)
    assert abs(res.qber_meas.qber_total - rep.qber_pred) <= 3 * sigma_q + 0.1 * rep.qber_pred
    sigma_r = math.sqrt(n) / res.duration
    assert abs(res.r_sift_meas - rep.r_sift) <= 3 * sigma_r + 0.1 * rep.r_sift


def test_dps_intrinsic_floor():
    p = SystemParams(mu=0.13)
    det = DetectorSpec(dark_rate_rdc=0.0, dead_time_td=0.0)
    res = run(McRunConfig(P.DPS, p, ChannelSpec.explicit(0), det, n_pulses=2_000_000, seed=9))
    n = res.qber_meas.n_sifted
    floor = 0.01 + 0.005 - 2 * 0.01 * 0.005
    assert abs(res.qber_meas.qber_total - floor) <= 3 * math.sqrt(floor * (1 - floor) / n)


def test_single_batch_equals_run():
    cfg = _cfg(P.DPTS, default_config().with_loss(5), n_pulses=100_000, seed=4)
    series = run_batches(cfg, 1)
    assert len(series) == 1
    _same(series[0], run(cfg))
    assert series.std == 0.0
    with pytest.raises(ValueError):
        run_batches(cfg, 0)


def test_ideal_batches_all_zero():
    series = run_batches(_cfg(P.DPTS, ideal_config(3), n_pulses=50_000), 8, workers=1)
    assert np.all(series.qber == 0) and np.all(series.n_sifted > 0)


def test_batch_spread_is_binomial():
    # cheap high-count config: no dead time, no loss, so each batch holds many sifted bits
    cfg = default_config().with_loss(0)
    det = replace(cfg.detector, dead_time_td=0.0)
    base = McRunConfig(P.DPTS, cfg.params_for(P.DPTS), cfg.channel, det, n_pulses=200_000, seed=21)
    n_b = 40
    series = run_batches(base, n_b, workers=1)
    q = series.mean
    sigma = math.sqrt(q * (1 - q) / series.n_sifted.mean())
    # sampling spread of a standard deviation estimate from n_b samples
    assert abs(series.std - sigma) <= 3 * sigma / math.sqrt(2 * (n_b - 1))


def test_parallel_batches_match_serial():
    cfg = _cfg(P.DPS, default_config().with_loss(10), n_pulses=50_000, seed=2)
    serial = run_batches(cfg, 3, workers=1)
    parallel = run_batches(cfg, 3, workers=2)
    for a, b in zip(serial, parallel):
        _same(a, b)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("DPRQKD_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("DPRQKD_THREADS", "junk")
    assert worker_count() >= 1


def test_throughput():
    res = run(_cfg(P.DPTS, default_config().with_loss(11), n_pulses=4_000_000))
    assert res.n_pulses / res.wall_time >= 1e6


def test_batch_mean_matches_analytic_at_50_km():
    cfg = default_config().with_distance(50)
    series = run_batches(_cfg(P.DPTS, cfg, n_pulses=1_000_000, seed=8), 30)
    rep = predict_rates(P.DPTS, cfg.params_for(P.DPTS), cfg.channel, cfg.detector)
    n = series.n_sifted.sum()
    q = rep.qber_pred
    assert abs(series.mean - q) <= 3 * math.sqrt(q * (1 - q) / n) + 0.1 * q
