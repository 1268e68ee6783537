import random

import pytest

from ndncec import harness
from ndncec.covert import Message
from ndncec.engine import MS, S, US
from ndncec.harness import (ConstraintViolation, ExperimentSpec, PrivacyPreconditionError, csv_text,
                            emit_csv, privacy_game, probe_write_check, read_csv, run_trial,
                            simulate_trial, sweep, wilson)
from ndncec.names import Interest
from ndncec.netsim import Network, TopologyError

from conftest import PERFECT_LAN

BG = {"rate_hz": 200, "popular": 30}


def spec(**kw):
    base = dict(topology=PERFECT_LAN, n=64, seed=7)
    base.update(kw)
    return ExperimentSpec(**base)


@pytest.mark.parametrize("tech,m", [("sbtc", 1), ("sbtp", 1), ("tdp", 1), ("matrix", 3), ("cpc", 3)])
def test_perfect_channel_trial_is_clean(tech, m):
    s = spec(technique=tech, m=m, params={"pair_spacing": 800 * US} if tech == "sbtp" else {})
    rep = run_trial(s)
    assert rep.errors == 0 and rep.correct == 64
    assert list(rep.sent) == rep.decoded


def test_decomposition_is_checked():
    rep = run_trial(spec(topology="lan", n=200))
    assert rep.correct + rep.write_errors + rep.read_errors + rep.erasures == rep.n
    with pytest.raises(AssertionError):
        harness.TrialReport("sbtc", 1, 1, None, (0, 1), [0, 1], 1, 0, 0, 0, 0, 0, 0, 0, 0, 0)


def test_one_dropped_write_is_one_write_error(monkeypatch):
    real = harness.build_topology

    def lossy(*a, **kw):
        topo, net = real(*a, **kw)
        net.links[("Snd", "Rt")].drop(lambda p: isinstance(p, Interest) and p.name.components[0] == b"cec", count=1)
        return topo, net

    monkeypatch.setattr(harness, "build_topology", lossy)
    run = simulate_trial(spec(n=100), 1 * MS, t_thresh=1300 * US)
    rep = run.report()
    assert (rep.write_errors, rep.read_errors, rep.erasures) == (1, 0, 0)
    first_one = run.message.bits.index(1)
    assert rep.decoded[first_one] == 0 and not run.written[first_one]


def test_write_verification_repairs_the_dropped_write(monkeypatch):
    real = harness.build_topology

    def lossy(*a, **kw):
        topo, net = real(*a, **kw)
        net.links[("Snd", "Rt")].drop(lambda p: isinstance(p, Interest) and p.name.components[0] == b"cec", count=1)
        return topo, net

    monkeypatch.setattr(harness, "build_topology", lossy)
    s = spec(n=100, t_thresh_values=[1300 * US], params={"verify_writes": True})
    assert run_trial(s).errors == 0


def test_read_past_freshness_is_a_constraint_violation():
    s = spec(n=1000, freshness=200 * MS)
    with pytest.raises(ConstraintViolation):
        simulate_trial(s, 1 * MS, t_thresh=1300 * US)
    # CPC reads one slot per row and fits where SBTC does not
    assert simulate_trial(spec(n=100, technique="cpc", m=4, freshness=200 * MS), 1 * MS).report().errors == 0


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(t_values=[])
    with pytest.raises(ValueError):
        spec(trials=0)
    with pytest.raises(ValueError):
        spec(t_values=[100])  # below the minimal spacing
    with pytest.raises(ValueError):
        spec(technique="tdp", m=2)
    assert spec(n=100).with_bits(1001).trials == 11


def test_trials_are_paired_across_techniques():
    a = simulate_trial(spec(technique="sbtc"), 1 * MS, 3, t_thresh=1300 * US)
    b = simulate_trial(spec(technique="tdp"), 1 * MS, 3)
    assert a.message == b.message and a.seed == b.seed
    c = simulate_trial(spec(technique="sbtc"), 1 * MS, 4, t_thresh=1300 * US)
    assert c.message != a.message


def test_sweep_grid_and_csv(tmp_path):
    s = spec(n=32, trials=2, t_values=[1 * MS, 2 * MS, 3 * MS],
             t_thresh_values=[None, 1000 * US, 1300 * US, 1600 * US])
    res = sweep(s)
    rows = res.rows()
    assert len(rows) == 12
    assert {(r["t_send_ns"], r["t_thresh_ns"]) for r in rows} >= {(1 * MS, 1300 * US), (3 * MS, 1000 * US)}
    # thresholds in the empty gap decode perfectly; one below all hits reads everything as 0
    by = {(r["t_send_ns"], r["t_thresh_ns"]): r for r in rows}
    assert by[(1 * MS, 1300 * US)]["error_rate"] == "0"
    assert float(by[(1 * MS, 1600 * US)]["error_rate"]) == 0
    assert len(res.rtt_rows) == 3 * 2 * 32
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(rows, p1)
    emit_csv(sweep(s).rows(), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = read_csv(p1)
    assert list(back[0]) == harness.POINT_COLUMNS and len(back) == 12


def test_empty_csv_is_header_only(tmp_path):
    p = tmp_path / "e.csv"
    emit_csv([], p)
    assert p.read_text() == ",".join(harness.POINT_COLUMNS) + "\n"
    assert csv_text([], ["a", "b"]) == "a,b\n"


def test_bitrate_scales_with_m():
    pts = {}
    for m in (1, 2, 4):
        res = sweep(spec(technique="matrix", m=m, n=64, t_values=[1 * MS]), keep_rtts=False)
        pts[m] = res.points[0]
    for m, p in pts.items():
        assert p.sender_bitrate == pytest.approx(m * pts[1].sender_bitrate)
        assert p.receiver_bitrate == pytest.approx(m / 2 ** m * 1000)
        assert p.bitrate == min(p.sender_bitrate, p.receiver_bitrate)
    cpc = sweep(spec(technique="cpc", m=4, n=64), keep_rtts=False).points[0]
    assert cpc.bitrate == pytest.approx(4000)


def test_wilson_interval_oracle():
    lo, hi = wilson(0, 1000)
    assert lo == 0 and hi == pytest.approx(3.84 / 1003.84, rel=1e-3)
    # textbook value for 10/100
    lo, hi = wilson(10, 100)
    assert lo == pytest.approx(0.0552, abs=1e-4) and hi == pytest.approx(0.1744, abs=1e-4)
    assert wilson(0, 0) == (0.0, 1.0)


def test_binary_rate_resolves_erasures_to_majority():
    run = simulate_trial(spec(n=40), 1 * MS, t_thresh=1300 * US)
    run.read.reads[0].probe.timed_out = True  # fake an erasure on bit 0
    run.read.reads[0].probe.rtt = None
    rep = run.report()
    assert rep.erasures == 1
    ones = sum(run.message.bits[1:])
    majority = 1 if 2 * ones > 39 else 0
    assert rep.binary_errors == int(run.message.bits[0] != majority)


def test_probe_write_check_agrees_with_ground_truth():
    s = spec(topology="testbed-like", n=150, t_values=[300 * US], freshness=120 * S,
             calibration_names=150)
    seen, truth = probe_write_check(s)
    disagree = sum(a != b for a, b in zip(seen, truth))
    assert disagree <= 3
    with pytest.raises(ValueError):
        probe_write_check(spec(technique="tdp"))


# privacy game ----------------------------------------------------------------------

@pytest.mark.parametrize("tech,m", [("sbtc", 1), ("sbtp", 1), ("tdp", 1), ("matrix", 2), ("cpc", 2)])
def test_privacy_game(tech, m):
    s = spec(technique=tech, m=m, n=16, background=BG, freshness=2 * S)
    rng = random.Random(1)
    m0, m1 = Message.random(16, rng), Message.random(16, rng)
    assert m0 != m1
    assert privacy_game(s, m0, m1).indistinguishable
    assert not privacy_game(s, m0, m1, compare="before").indistinguishable


def test_privacy_game_identical_messages_and_guards(monkeypatch):
    s = spec(n=16, background=BG, freshness=2 * S)
    m0 = Message.random(16, random.Random(2))
    assert privacy_game(s, m0, m0, compare="before").indistinguishable
    with pytest.raises(ValueError):
        privacy_game(s, m0, Message.random(8, random.Random(2)))
    with pytest.raises(ValueError):
        privacy_game(spec(n=16), m0, m0)
    with pytest.raises(TopologyError):
        no_bg_node = ExperimentSpec(topology={"preset": "lan", "background": False}, n=16, background=BG)
        privacy_game(no_bg_node, m0, m0)
    monkeypatch.setattr(Network, "expire_all", lambda self: None)
    with pytest.raises(PrivacyPreconditionError):
        privacy_game(s, m0, m0)
