import pytest

from ndncec.netsim import build_topology

PERFECT_LAN = {"preset": "lan", "jitter": "none", "loss_prob": 0.0}


@pytest.fixture
def perfect():
    """Jitter-free, loss-free LAN network and its topology."""
    return build_topology(PERFECT_LAN, seed=1)


def midpoint(topo, net, consumer="Rcv"):
    hit, miss = topo.expected_rtts(consumer, net)
    return (hit + miss) // 2


_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
