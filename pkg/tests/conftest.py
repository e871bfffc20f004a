import numpy as np
import pytest

from txalign.data import EventRecord, EventSequence

DAY = 86400


def make_seq(client_id="c0", n=10, seed=0, label=None, vocab=(6, 3), start=1_600_000_000):
    rng = np.random.default_rng(seed)
    ts = start + np.cumsum(rng.integers(600, 3 * DAY, size=n))
    records = [
        EventRecord(int(t), float(rng.choice([-1, 1]) * rng.integers(1, 5000)), int(rng.integers(vocab[0])),
                    int(rng.integers(vocab[1])))
        for t in ts
    ]
    return EventSequence.from_records(client_id, records, label)


@pytest.fixture
def seqs():
    return [make_seq(f"c{i}", n=3 + 2 * i, seed=i) for i in range(6)]


# PASS/FAIL lines from test_acceptance.py, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
