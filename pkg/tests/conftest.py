import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from immunids.config import SystemConfig  # noqa: E402
from immunids.traffic import FlowRecord, Label, LabeledDataset  # noqa: E402

FEATURES = ("f0", "f1")


def flow(t, *, src="192.168.1.10", dst="192.168.1.1", sport=40000, dport=80, bytes_in=100.0,
         bytes_out=1000.0, duration=0.5, label=None, features=(0.0, 0.0)):
    return FlowRecord(float(t), src, dst, sport, dport, "tcp", duration, bytes_in, bytes_out,
                      tuple(features), label or Label.unlabeled())


def toy_records(n_blocks=6, block=16, seed=0, start=0.0):
    """Alternating normal and attack blocks, one record per second.

    Normal traffic is small http sessions from a few clients. Attack traffic is an
    IRC-style flood from 10.0.0.66 to port 6667 with large byte counts.
    """
    rng = np.random.default_rng(seed)
    out, t = [], start
    for b in range(n_blocks):
        attack = b % 2 == 1
        for _ in range(block):
            if attack:
                out.append(flow(t, src="10.0.0.66", dst="192.168.1.1", sport=6000, dport=6667,
                                bytes_in=float(rng.integers(4000, 6000)), bytes_out=40.0,
                                duration=0.0, label=Label.attack("irc"),
                                features=(float(rng.integers(200, 255)), 1.0)))
            else:
                out.append(flow(t, src=f"192.168.1.{10 + int(rng.integers(0, 4))}",
                                sport=int(rng.integers(40000, 40004)), dport=80,
                                bytes_in=float(rng.integers(80, 160)),
                                bytes_out=float(rng.integers(900, 1500)),
                                duration=float(rng.integers(1, 4)), label=Label.normal(),
                                features=(float(rng.integers(1, 20)), 0.0)))
            t += 1.0
    return out


@pytest.fixture
def toy_dataset():
    return LabeledDataset(toy_records(), FEATURES)


@pytest.fixture
def toy_config():
    return SystemConfig(segment_len=4)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
