"""Command line entry point (``dprqkd``).

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or network failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import keyrate, montecarlo, netlink
from .channel import classical_background, classical_power_at_rx_dbm, sync_detectable
from .encoder import read_train, write_train
from .model import (
    DPR_PROTOCOLS,
    ClassicalChannelSpec,
    Config,
    ConfigError,
    ProtocolId,
    default_config,
    load_config,
    validation_errors,
)
from .receiver import read_clicks, write_clicks
from .sifting import write_key

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

CSV_HEADER = [
    "protocol",
    "loss_db",
    "distance_km",
    "r_sift_hz",
    "qber",
    "qber_time",
    "qber_phase",
    "i_ab",
    "i_ae",
    "r_sk_bps",
    "bound_valid",
    "saturated",
    "engine",
]
COPROP_EXTRA = ["background_rate_hz", "classical_power_at_rx_dbm", "sync_warning", "qber_no_classical"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class SweepSpec:
    axis: str  # "loss_db" or "distance_km"
    start: float
    stop: float
    step: float
    protocols: tuple
    engine: str = "analytic"

    def __post_init__(self):
        if self.start > self.stop:
            raise ValueError("sweep start must not exceed stop")
        if self.step <= 0:
            raise ValueError("sweep step must be positive")

    def points(self) -> list[float]:
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9))
        return [round(self.start + i * self.step, 10) for i in range(n + 1)]


def parse_range(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) == 1:
        v = float(parts[0])
        return v, v, 1.0
    if len(parts) != 3:
        raise ValueError(f"range must be A:B:STEP, got {text!r}")
    return tuple(float(p) for p in parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.10g}"
    return str(value)


def _protocols(text: Optional[str], default=DPR_PROTOCOLS) -> tuple:
    if not text:
        return tuple(default)
    return tuple(ProtocolId.parse(t) for t in text.split(",") if t.strip())


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    errors = validation_errors(cfg.params, cfg.channel, cfg.detector)
    if errors:
        raise ConfigError(errors)
    return cfg


def _at(cfg: Config, axis: str, value: float) -> Config:
    return cfg.with_loss(value) if axis == "loss_db" else cfg.with_distance(value)


def _axis(args) -> tuple[str, tuple]:
    if getattr(args, "distance_km", None):
        return "distance_km", parse_range(args.distance_km)
    if getattr(args, "loss_db", None):
        return "loss_db", parse_range(args.loss_db)
    return "", ()


def _row_from_report(r: keyrate.RateReport, engine: str) -> list:
    return [
        r.protocol.value, r.loss_db, r.distance_km, r.r_sift, r.qber_pred, r.qber_time, r.qber_phase,
        r.i_ab, r.i_ae, r.r_sk, r.bound_valid, r.saturated, engine,
    ]


def mc_report(cfg: Config, protocol: ProtocolId, n_pulses: int, seed: int) -> keyrate.RateReport:
    """MC measurement wrapped in the analytic report layout (secret fraction from measured QBER)."""
    params = cfg.params_for(protocol)
    res = montecarlo.run(montecarlo.McRunConfig.from_config(cfg, protocol, n_pulses, seed))
    ana = keyrate.predict_rates(protocol, params, cfg.channel, cfg.detector)
    q = res.qber_meas
    n = q.n_sifted
    qber = q.qber_total if n else 0.5
    i_ab = 1.0 - keyrate.binary_entropy(min(qber, 0.5))
    r_sk = res.r_sift_meas * max(0.0, i_ab - ana.i_ae) / params.ec_efficiency
    return replace(
        ana,
        r_sift=res.r_sift_meas,
        qber_pred=qber,
        qber_time=q.qber_time if q.n_time else float("nan"),
        qber_phase=q.qber_phase if q.n_phase else float("nan"),
        i_ab=i_ab,
        r_sk=r_sk,
    )


def _sweep_point(job) -> list:
    cfg, protocol, axis, value, engine, pulses, seed = job
    c = _at(cfg, axis, value)
    rows = []
    if engine in ("analytic", "both"):
        rows.append(_row_from_report(keyrate.rates(c, protocol), "analytic"))
    if engine in ("mc", "both"):
        rows.append(_row_from_report(mc_report(c, protocol, pulses, seed), "mc"))
    return rows


def _map(fn, jobs: list, parallel: bool) -> list:
    workers = min(montecarlo.worker_count(), len(jobs)) if parallel else 1
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _write_csv(rows: list, header: list, out: Optional[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    _emit(buf.getvalue(), out)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _engine(text: str) -> str:
    key = text.lower().replace("-", "").replace("_", "")
    mapping = {"analytic": "analytic", "mc": "mc", "montecarlo": "mc", "both": "both"}
    if key not in mapping:
        raise UsageError(f"unknown engine {text!r}")
    return mapping[key]


# ---------------------------------------------------------------------------
# subcommands


def cmd_rate_sweep(args) -> int:
    cfg = _config(args)
    axis, rng = _axis(args)
    if not axis:
        axis, rng = "loss_db", (5.0, 40.0, 5.0)
    spec = SweepSpec(axis, *rng, protocols=_protocols(args.protocol), engine=_engine(args.engine))
    jobs = [(cfg, p, axis, x, spec.engine, args.pulses, args.seed) for p in spec.protocols for x in spec.points()]
    rows = [r for part in _map(_sweep_point, jobs, spec.engine != "analytic") for r in part]
    _write_csv(rows, CSV_HEADER, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    axis, rng = _axis(args)
    if axis:
        cfg = _at(cfg, axis, rng[0])
    protocol = ProtocolId.parse(args.protocol or "DPTS")
    run_cfg = montecarlo.McRunConfig.from_config(cfg, protocol, args.pulses, args.seed, emit_clicks=True)
    res = montecarlo.run(run_cfg)
    q = res.qber_meas
    header = ["protocol", "loss_db", "n_pulses", "seed", "n_sifted", "r_sift_hz", "qber", "qber_time",
              "qber_phase", "visibility_est", "n_dark"] + [f"clicks_{k}" for k in sorted(res.n_clicks_per_detector)]
    row = [protocol.value, cfg.channel.total_loss_db, res.n_pulses, args.seed, q.n_sifted, res.r_sift_meas,
           q.qber_total, q.qber_time, q.qber_phase, q.visibility_est, res.n_dark]
    row += [res.n_clicks_per_detector[k] for k in sorted(res.n_clicks_per_detector)]
    _write_csv([row], header, args.out)
    if args.clicks_out:
        write_clicks(res.clicks, args.clicks_out)
    if args.train_out:
        write_train(res.train, args.train_out)
    return EXIT_OK


def cmd_optimize_mu(args) -> int:
    cfg = _config(args)
    axis, rng = _axis(args)
    if axis:
        cfg = _at(cfg, axis, rng[0])
    protocol = ProtocolId.parse(args.protocol or "DPTS")
    lo, hi = (float(v) for v in args.mu_range.split(":"))
    opt = keyrate.optimize_mu(protocol, cfg.params_for(protocol), cfg.channel, cfg.detector, (lo, hi))
    text = [f"# {protocol.value} at {cfg.channel.total_loss_db:g} dB: mu_opt={_fmt(opt.mu_opt)} "
            f"r_sk_opt={_fmt(opt.r_sk_opt)}" + (" (r_sk is zero over the whole range)" if opt.degenerate else "")]
    text.append("protocol,loss_db,mu_opt,r_sk_opt,degenerate")
    text.append(",".join(_fmt(v) for v in (protocol.value, cfg.channel.total_loss_db, opt.mu_opt, opt.r_sk_opt,
                                             opt.degenerate)))
    _emit("\n".join(text) + "\n", args.out)
    return EXIT_OK


def histogram_rows(values: np.ndarray, bins: int = 20) -> list:
    lo, hi = (float(values.min()), float(values.max())) if len(values) else (0.0, 0.0)
    if hi <= lo:
        hi = lo + 1e-9
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [[edges[i], edges[i + 1], int(c)] for i, c in enumerate(counts)]


def cmd_stability(args) -> int:
    cfg = _config(args)
    axis, rng = _axis(args)
    cfg = _at(cfg, axis, rng[0]) if axis else cfg.with_distance(50.0)
    protocol = ProtocolId.parse(args.protocol or "DPTS")
    if args.batches < 1:
        raise UsageError("--batches must be >= 1")
    run_cfg = montecarlo.McRunConfig.from_config(cfg, protocol, args.pulses, args.seed)
    series = montecarlo.run_batches(run_cfg, args.batches)
    qber, n = series.qber, series.n_sifted
    lines = ["batch,qber,n_sifted"]
    lines += [f"{i},{_fmt(float(q))},{int(k)}" for i, (q, k) in enumerate(zip(qber, n))]
    hist = ["# summary", f"# mean_qber={_fmt(series.mean)} std_qber={_fmt(series.std)} n_batches={len(series)}",
            "bin_lo,bin_hi,count"]
    hist += [",".join(_fmt(v) for v in row) for row in histogram_rows(qber)]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        Path(args.out + ".hist.csv").write_text("\n".join(hist) + "\n")
    else:
        sys.stdout.write("\n".join(lines + [""] + hist) + "\n")
    return EXIT_OK


def cmd_copropagation(args) -> int:
    cfg = _config(args)
    if args.launch_dbm is not None:
        base = cfg.channel.classical or ClassicalChannelSpec()
        cfg = replace(cfg, channel=replace(cfg.channel, classical=replace(base, launch_power_dbm=args.launch_dbm)))
    if cfg.channel.classical is None:
        raise ConfigError(["copropagation needs a classical channel (config 'classical = on' or --launch-dbm)"])
    axis, rng = _axis(args)
    if not axis:
        axis, rng = "distance_km", (10.0, 170.0, 40.0)
    protocols = _protocols(args.protocol, (ProtocolId.DPTS,))
    spec = SweepSpec(axis, *rng, protocols=protocols)
    rows = []
    for p in protocols:
        for x in spec.points():
            c = _at(cfg, axis, x)
            r = keyrate.rates(c, p)
            plain = keyrate.rates(replace(c, channel=replace(c.channel, classical=None)), p)
            cl = c.channel.classical
            rows.append(_row_from_report(r, "analytic") + [
                classical_background(cl, c.channel, c.detector),
                classical_power_at_rx_dbm(cl, c.channel),
                not sync_detectable(cl, c.channel),
                plain.qber_pred,
            ])
    _write_csv(rows, CSV_HEADER + COPROP_EXTRA, args.out)
    return EXIT_OK


def cmd_link(args) -> int:
    cfg = _config(args)
    protocol = ProtocolId.parse(args.protocol or "DPTS")
    if not args.endpoint:
        raise UsageError("--endpoint HOST:PORT is required")
    netlink.parse_endpoint(args.endpoint)
    if args.role == "alice":
        if not args.train:
            raise UsageError("alice needs --train (preparation record)")
        train = read_train(args.train)
        outcome = netlink.alice_session(args.endpoint, train, cfg, protocol, timeout=args.timeout)
    else:
        if not args.clicks:
            raise UsageError("bob needs --clicks (click record file)")
        clicks = read_clicks(args.clicks)
        outcome = netlink.bob_session(args.endpoint, clicks, cfg, protocol, sample_fraction=args.sample_fraction,
                                      sample_seed=args.seed, timeout=args.timeout)
    if args.log_out:
        Path(args.log_out).write_text(outcome.state.log_text())
    else:
        sys.stderr.write(outcome.state.log_text())
    if not outcome.ok:
        return EXIT_RUNTIME
    if args.key_out:
        write_key(outcome.key, args.key_out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dprqkd", description="Distributed-phase-reference QKD simulator")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, protocol_help="protocol(s), comma separated"):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--protocol", help=protocol_help)
        p.add_argument("--out", help="output file (default: standard output)")
        p.add_argument("--seed", type=int, default=0)

    def axis(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--loss-db", help="A:B:STEP, or a single value")
        g.add_argument("--distance-km", help="A:B:STEP, or a single value")

    p = sub.add_parser("rate-sweep", help="r_sk and QBER over loss or distance")
    common(p)
    axis(p)
    p.add_argument("--engine", default="analytic", help="analytic, mc or both")
    p.add_argument("--pulses", type=int, default=1_000_000)
    p.set_defaults(func=cmd_rate_sweep)

    p = sub.add_parser("simulate", help="one Monte Carlo run")
    common(p, "protocol")
    axis(p)
    p.add_argument("--pulses", type=int, default=1_000_000)
    p.add_argument("--clicks-out", help="write click records (replay input for link)")
    p.add_argument("--train-out", help="write Alice's preparation record")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize-mu", help="mean photon number maximizing r_sk")
    common(p, "protocol")
    axis(p)
    p.add_argument("--mu-range", default="0.01:2.0")
    p.set_defaults(func=cmd_optimize_mu)

    p = sub.add_parser("stability", help="QBER time series over Monte Carlo batches")
    common(p, "protocol")
    axis(p)
    p.add_argument("--batches", type=int, default=60)
    p.add_argument("--pulses", type=int, default=1_000_000, help="pulses per batch")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("link", help="run one side of the networked sifting exchange")
    common(p, "protocol")
    p.add_argument("--role", choices=("alice", "bob"), required=True)
    p.add_argument("--endpoint", help="HOST:PORT")
    p.add_argument("--clicks", help="bob: click record file")
    p.add_argument("--train", help="alice: preparation record file")
    p.add_argument("--key-out", help="final key file (.idx sidecar written alongside)")
    p.add_argument("--log-out", help="session log (JSON lines)")
    p.add_argument("--sample-fraction", type=float, default=netlink.DEFAULT_SAMPLE_FRACTION)
    p.add_argument("--timeout", type=float, default=netlink.DEFAULT_TIMEOUT)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("copropagation", help="rate sweep with classical-channel leakage")
    common(p)
    axis(p)
    p.add_argument("--launch-dbm", type=float, help="enable/override the classical launch power")
    p.set_defaults(func=cmd_copropagation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        return args.func(args)
    except (UsageError, ConfigError, ValueError, KeyError) as exc:
        sys.stderr.write(f"dprqkd: error: {exc}\n")
        return EXIT_INVALID
    except FileNotFoundError as exc:
        sys.stderr.write(f"dprqkd: error: {exc}\n")
        return EXIT_INVALID
    except (OSError, RuntimeError, netlink.NetlinkError) as exc:
        sys.stderr.write(f"dprqkd: runtime error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
