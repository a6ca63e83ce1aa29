import numpy as np
import pytest

from dprqkd.model import ProtocolId, ideal_config
from dprqkd.receiver import Clicks, Detector, InterferometerSpec, window_means


def noiseless_clicks(train, protocol, tap_ratio=0.1):
    """One click per lit window, on the brighter port; no randomness.

    With V=1 every window Alice can vouch for sends all its light to one port,
    so this is the 'every photon detected' limit of an ideal receiver.
    """
    slot = train.slot_period
    if protocol is ProtocolId.COW:
        lit = np.flatnonzero(train.amplitude > 0)
        data = Clicks(lit * slot, np.full(len(lit), int(Detector.DATA_LINE), np.int8), np.zeros(len(lit), bool))
        m0, mpi = window_means(train.amplitude * tap_ratio, train.phase_bit, InterferometerSpec(1, 1.0, 0.0))
        w = np.flatnonzero(m0 + mpi > 0)
        det = np.where(m0[w] >= mpi[w], int(Detector.MONITOR_PORT0), int(Detector.MONITOR_PORT_PI))
        mon = Clicks(w * slot, det.astype(np.int8), np.zeros(len(w), bool))
        return Clicks.concat([data, mon])
    delay = 2 if protocol is ProtocolId.DPTS else 1
    m0, mpi = window_means(train.amplitude, train.phase_bit, InterferometerSpec(delay, 1.0, 0.0))
    w = np.flatnonzero(m0 + mpi > 0)
    det = np.where(m0[w] >= mpi[w], int(Detector.PORT0), int(Detector.PORT_PI)).astype(np.int8)
    return Clicks(w * slot, det, np.zeros(len(w), bool))


@pytest.fixture
def ideal():
    return ideal_config()


# acceptance criteria register their verdicts here; printed once at the end of the run
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
