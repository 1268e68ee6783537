"""Experiment runner: trials, sweeps, error metrics, privacy game, CSV output.

One trial builds a fresh network from the point's seed, publishes a
codebook, lets Snd write a random message and Rcv read it back, and
classifies every bit.  A sweep runs trials over a grid of interest
spacings ``t`` and thresholds; each (t, trial) is simulated once and
re-scored for every threshold.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import math
import random
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from . import covert
from .covert import (Calibration, Codebook, Message, MessageRead, ProtocolParams, Technique,
                     derive_codebook, estimate_pit_threshold, estimate_threshold)
from .engine import MS, S, derive_seed
from .names import DataPacket, Name, render_name
from .netsim import BackgroundTraffic, Network, Topology, TopologyError, build_topology


class ConstraintViolation(RuntimeError):
    """A trial's schedule breaks the technique's timing constraints."""


class PrivacyPreconditionError(RuntimeError):
    """Router state still references the message when it should have expired."""


CEC_NAMESPACE = "/cec"
CALIB_NAMESPACE = "/calib"
POPULAR_NAMESPACE = "/popular"


@dataclass
class ExperimentSpec:
    topology: Any = "lan"  # preset name or mapping for build_topology
    technique: Technique = Technique.SBTC
    m: int = 1
    n: int = 1000
    trials: int = 1
    seed: int = 0
    t_values: List[int] = field(default_factory=lambda: [1 * MS])
    # None entries mean "use the calibrated threshold"
    t_thresh_values: List[Optional[int]] = field(default_factory=lambda: [None])
    t_recv: Optional[int] = None  # defaults to t
    params: Dict[str, Any] = field(default_factory=dict)  # extra ProtocolParams fields
    freshness: int = 60 * S
    read_delay: int = 1 * MS  # gap between the sender going idle and the first read
    background: Optional[Dict[str, Any]] = None
    calibration_names: int = 300

    def __post_init__(self):
        self.technique = Technique.parse(self.technique)
        if not self.t_values:
            raise ValueError("t sweep list is empty")
        if not self.t_thresh_values:
            raise ValueError("t_thresh sweep list is empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.freshness <= 0:
            raise ValueError("freshness must be positive")
        if self.read_delay < 0:
            raise ValueError("read_delay must be >= 0")
        # fail early on bad protocol parameters
        self.protocol(self.t_values[0])

    def protocol(self, t: int, t_thresh: Optional[int] = None) -> ProtocolParams:
        kw = dict(self.params)
        kw.update(technique=self.technique, m=self.m, t_send=t,
                  t_recv=self.t_recv if self.t_recv is not None else t, t_thresh=t_thresh)
        return ProtocolParams(**kw)

    @property
    def bits_per_point(self) -> int:
        return self.n * self.trials

    def with_bits(self, bits: int) -> "ExperimentSpec":
        """Same spec with enough trials to cover ``bits`` covert bits per point."""
        return replace(self, trials=max(1, math.ceil(bits / self.n)))


# --------------------------------------------------------------------------
# reports

@dataclass
class TrialReport:
    technique: str
    t_send: int
    t_recv: int
    t_thresh: Optional[int]
    sent: Tuple[int, ...]
    decoded: List[Optional[int]]
    correct: int
    write_errors: int
    read_errors: int
    erasures: int
    binary_errors: int
    sender_bytes: int
    receiver_bytes: int
    sender_interests: int
    receiver_interests: int
    duration: int  # sim ns from start to the last read
    probes: List[Any] = field(default_factory=list, repr=False, compare=False)

    @property
    def samples(self) -> List[covert.RttSample]:
        """Receiver RTT samples in issue order (built on demand)."""
        return [p.sample for p in self.probes]

    @property
    def n(self) -> int:
        return len(self.sent)

    @property
    def errors(self) -> int:
        return self.write_errors + self.read_errors + self.erasures

    @property
    def error_rate(self) -> float:
        return self.errors / self.n

    def __post_init__(self):
        if self.correct + self.write_errors + self.read_errors + self.erasures != len(self.sent):
            raise AssertionError("error decomposition does not sum to n")


@dataclass
class TrialRun:
    """A simulated trial; score it at any threshold with :meth:`report`."""

    spec: ExperimentSpec
    params: ProtocolParams
    seed: int
    message: Message
    codebook: Codebook
    read: MessageRead
    written: List[bool]  # per row: did the sender's state reach Rt?
    net: Network
    topo: Topology
    sender_bytes: int
    receiver_bytes: int
    sender_interests: int
    receiver_interests: int
    duration: int
    calibration: Optional[Calibration] = None

    def report(self, t_thresh: Optional[int] = None) -> TrialReport:
        thresh = self.params.threshold if t_thresh is None else t_thresh + self.params.delta
        decoded = self.read.bits(thresh)
        m = self.codebook.m
        counts = Counter()
        for k, (s, d) in enumerate(zip(self.message.bits, decoded)):
            if d is None:
                counts["erasure"] += 1
            elif d == s:
                counts["correct"] += 1
            elif not self.written[k // m]:
                counts["write"] += 1
            else:
                counts["read"] += 1
        known = [d for d in decoded if d is not None]
        majority = 1 if known and 2 * sum(known) > len(known) else 0
        binary = sum(1 for s, d in zip(self.message.bits, decoded) if (majority if d is None else d) != s)
        return TrialReport(
            technique=self.params.technique.value, t_send=self.params.t_send, t_recv=self.params.t_recv,
            t_thresh=None if thresh is None else thresh - self.params.delta,
            sent=self.message.bits, decoded=decoded,
            correct=counts["correct"], write_errors=counts["write"], read_errors=counts["read"],
            erasures=counts["erasure"], binary_errors=binary,
            sender_bytes=self.sender_bytes, receiver_bytes=self.receiver_bytes,
            sender_interests=self.sender_interests, receiver_interests=self.receiver_interests,
            duration=self.duration, probes=self.read.probes())

    def rtt_rows(self, trial: int, t_thresh: Optional[int] = None) -> List[dict]:
        """One row per receiver probe, in issue order."""
        thresh = self.params.threshold if t_thresh is None else t_thresh + self.params.delta
        words = self.read.words(thresh)
        truth = self.message.words(self.codebook.m)
        rows = []
        idx = 0
        for i, r in enumerate(self.read.reads):
            for p in r.probes:
                rows.append({
                    "trial": trial, "technique": self.params.technique.value, "index": idx,
                    "name": render_name(p.name), "issued": p.issued_at,
                    "rtt": "" if p.timed_out else p.rtt,
                    "decoded": "E" if words[i] is None else words[i], "truth": truth[i],
                    "t_send": self.params.t_send, "t_recv": self.params.t_recv,
                })
                idx += 1
        return rows


# --------------------------------------------------------------------------
# trials

def trial_seed(master: int, t: int, trial: int) -> int:
    # technique is left out on purpose: techniques compared on one seed see
    # the same message, codebook seed and link draws
    return derive_seed(master, "trial", t, trial)


def _publish(net: Network, names: Iterable[Name], freshness: int) -> None:
    net.producer.publish(DataPacket(n, b"", freshness) for n in names)


def _start_background(net: Network, topo: Topology, spec: ExperimentSpec) -> Optional[BackgroundTraffic]:
    bg = spec.background
    if not bg:
        return None
    if "Bg" not in net.nodes:
        raise TopologyError("background traffic needs the topology's background option")
    ns = Name(bg.get("namespace", POPULAR_NAMESPACE))
    names = [ns.append(f"item{k}") for k in range(int(bg.get("popular", 50)))]
    _publish(net, names, int(float(bg.get("freshness_ms", 2000)) * MS))
    traffic = BackgroundTraffic(net.consumer("Bg"), names, float(bg.get("rate_hz", 100.0)))
    traffic.start()
    return traffic


def _check_unpopular(popular: Name) -> None:
    cec = Name(CEC_NAMESPACE)
    if popular.is_prefix_of(cec) or cec.is_prefix_of(popular):
        raise ValueError(f"codebook namespace {cec} overlaps the popular namespace {popular}")


def _topology_spec(spec: ExperimentSpec):
    topo = spec.topology
    if spec.background:
        topo = {"preset": topo} if isinstance(topo, str) else dict(topo)
        topo.setdefault("background", True)
    return topo


def calibrate(spec: ExperimentSpec, t: int, seed: Optional[int] = None) -> Calibration:
    """Learn the hit/miss threshold on a fresh network with probe-only names."""
    s = derive_seed(spec.seed if seed is None else seed, "calibrate", t)
    topo, net = build_topology(_topology_spec(spec), seed=s)
    _start_background(net, topo, spec)
    ns = Name(CALIB_NAMESPACE).append(f"{s:x}")
    names = [ns.append(f"c{k}") for k in range(spec.calibration_names)]
    _publish(net, names, spec.freshness)
    rcv = net.consumer("Rcv")
    start = rcv.now_local() + 1 * MS
    if spec.technique is Technique.SBTP:
        params = spec.protocol(t)
        snd = net.consumer("Snd")
        return estimate_pit_threshold(snd, rcv, names, params.pair_spacing, spacing=t, start=start)
    return estimate_threshold(rcv, names, repeats=2, spacing=t, start=start)


def _ground_truth(net: Network, topo: Topology, tech: Technique, message: Message,
                  codebook: Codebook) -> List[bool]:
    """Per row, whether the sender's write is present in Rt (simulator privilege)."""
    rt = net.nodes["Rt"]
    now = net.engine.now
    words = message.words(codebook.m)
    if tech is Technique.SBTP:
        face = topo.paths["Snd"][-2]
        log = rt.arrival_log
        return [w == 0 or (codebook.name(i, 0).components, face) in log for i, w in enumerate(words)]
    if tech is Technique.SBTC:
        return [w == 0 or rt.router.cs.has_fresh(codebook.name(i, 0), now) for i, w in enumerate(words)]
    return [rt.router.cs.has_fresh(codebook.name(i, w), now) for i, w in enumerate(words)]


def _receiver_slots(tech: Technique, codebook: Codebook) -> int:
    if tech in (Technique.SBTC, Technique.SBTP):
        return codebook.n
    if tech is Technique.CPC:
        return codebook.rows
    return codebook.rows * codebook.columns


def _check_window(params: ProtocolParams, codebook: Codebook, t0_true: int, read_true: int,
                  freshness: int, tech: Technique) -> None:
    slots_per_row = _receiver_slots(tech, codebook) // codebook.rows
    # the last probe of the last row is the latest read relative to its write
    worst = max(
        read_true + ((i + 1) * slots_per_row - 1) * params.t_recv - (t0_true + i * params.t_send)
        for i in (0, codebook.rows - 1))
    if worst >= freshness:
        raise ConstraintViolation(
            f"read scheduled {worst / MS:.3f} ms after its write, past the {freshness / MS:.3f} ms "
            f"freshness; shorten the read phase or raise freshness")


@contextmanager
def _gc_paused():
    # a trial allocates a few hundred thousand objects; generational passes over
    # them cost more than the cycles they would free before the trial ends
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def simulate_trial(spec: ExperimentSpec, t: int, trial: int = 0, t_thresh: Optional[int] = None,
                   calibration: Optional[Calibration] = None, trace: bool = False,
                   seed: Optional[int] = None) -> TrialRun:
    """Simulate one trial at spacing ``t``; the threshold is only used as the default for scoring."""
    with _gc_paused():
        return _simulate_trial(spec, t, trial, t_thresh, calibration, trace, seed)


def _simulate_trial(spec, t, trial, t_thresh, calibration, trace, seed) -> TrialRun:
    s = trial_seed(spec.seed, t, trial) if seed is None else seed
    tech = spec.technique
    if t_thresh is None and calibration is not None and tech is not Technique.CPC:
        t_thresh = calibration.t_thresh
    params = spec.protocol(t, t_thresh)
    topo, net = build_topology(_topology_spec(spec), seed=s, trace=trace)
    _start_background(net, topo, spec)

    msg = Message.random(spec.n, random.Random(derive_seed(s, "message")))
    m = 1 if tech in (Technique.SBTC, Technique.SBTP, Technique.TDP) else spec.m
    mode = "cpc" if tech is Technique.CPC else "matrix"
    codebook = derive_codebook(derive_seed(s, "codebook"), spec.n, m, CEC_NAMESPACE, mode)
    _publish(net, codebook.all_names(), spec.freshness)
    if spec.background:
        _check_unpopular(Name(spec.background.get("namespace", POPULAR_NAMESPACE)))

    snd = net.consumer("Snd")
    rcv = net.consumer("Rcv")
    rt = net.nodes["Rt"]
    rt.arrival_log = set() if tech is Technique.SBTP else None
    t0_true = snd.clock.true_time(params.t0)
    if t0_true < net.engine.now:
        raise ConstraintViolation("agreed start t0 lies in the past")

    if tech is Technique.SBTP:
        _, read = covert.sbtp_stream(snd, rcv, msg, codebook, params)
        net.run_until_idle([snd, rcv])
        written = _ground_truth(net, topo, tech, msg, codebook)
    else:
        if tech is Technique.SBTC:
            covert.sbtc_stream_send(snd, msg, codebook, params)
        elif tech is Technique.TDP:
            covert.tdp_stream_send(snd, msg, codebook, params)
        elif tech is Technique.MATRIX:
            covert.matrix_send(snd, msg, codebook, params)
        else:
            covert.cpc_send(snd, msg, codebook, params)
        net.run_until_idle([snd])
        written = _ground_truth(net, topo, tech, msg, codebook)
        start_true = max(net.engine.now, t0_true) + spec.read_delay
        _check_window(params, codebook, t0_true, start_true, spec.freshness, tech)
        start = rcv.clock.local(start_true)
        if tech is Technique.SBTC:
            read = covert.sbtc_stream_recv(rcv, codebook, params, start)
        elif tech is Technique.TDP:
            read = covert.tdp_stream_recv(rcv, codebook, params, start)
        elif tech is Technique.MATRIX:
            read = covert.matrix_recv(rcv, codebook, params, start)
        else:
            read = covert.cpc_recv(rcv, codebook, params, start)
        net.run_until_idle([rcv])

    return TrialRun(spec, params, s, msg, codebook, read, written, net, topo,
                    snd.bytes_exchanged, rcv.bytes_exchanged, snd.interests_sent, rcv.interests_sent,
                    net.engine.now - t0_true, calibration)


def run_trial(spec: ExperimentSpec, t: Optional[int] = None, trial: int = 0,
              t_thresh: Optional[int] = None, calibration: Optional[Calibration] = None) -> TrialReport:
    """Simulate and score one trial (calibrating first when no threshold is given)."""
    t = spec.t_values[0] if t is None else t
    if t_thresh is None:
        t_thresh = spec.t_thresh_values[0]
    if t_thresh is None and calibration is None and spec.technique is not Technique.CPC:
        calibration = calibrate(spec, t)
    return simulate_trial(spec, t, trial, t_thresh, calibration).report()


def probe_write_check(spec: ExperimentSpec, t: Optional[int] = None, trial: int = 0,
                      spacing: int = 100 * MS) -> Tuple[List[bool], List[bool]]:
    """Detect SBTC writes the way an outsider would: a slow re-read.

    Returns (probe_view, ground_truth) per bit.  At a low request rate the
    read itself is nearly error-free, so disagreements are write errors.
    """
    if spec.technique is not Technique.SBTC:
        raise ValueError("the probe write check is defined for SBTC")
    t = spec.t_values[0] if t is None else t
    cal = calibrate(spec, t)
    slow = replace(spec, t_recv=spacing)
    run = simulate_trial(slow, t, trial, calibration=cal, seed=trial_seed(spec.seed, t, trial))
    seen = [d == 1 for d in run.read.bits()]
    truth = [b == 1 and w for b, w in zip(run.message.bits, run.written)]
    return seen, truth


# --------------------------------------------------------------------------
# sweeps

def wilson(k: int, n: int, z: float = 1.96) -> Tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


POINT_COLUMNS = [
    "technique", "m", "n", "trials", "bits", "t_send_ns", "t_recv_ns", "t_thresh_ns", "calibrated",
    "correct", "write_errors", "read_errors", "erasures", "error_rate", "error_lo", "error_hi",
    "write_error_rate", "read_error_rate", "erasure_rate", "binary_error_rate", "binary_lo", "binary_hi",
    "sender_bitrate", "receiver_bitrate", "bitrate", "sender_bytes_per_bit", "receiver_bytes_per_bit",
    "hit_mean_ns", "miss_mean_ns", "overlap",
]

RTT_COLUMNS = ["trial", "technique", "index", "name", "issued", "rtt", "decoded", "truth", "t_send", "t_recv"]


@dataclass
class SweepPoint:
    technique: str
    m: int
    n: int
    t_send: int
    t_recv: int
    t_thresh: Optional[int]
    calibrated: bool
    reports: List[TrialReport] = field(repr=False)
    calibration: Optional[Calibration] = None

    def _sum(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.reports)

    @property
    def bits(self) -> int:
        return sum(r.n for r in self.reports)

    @property
    def errors(self) -> int:
        return self._sum("errors")

    @property
    def error_rate(self) -> float:
        return self.errors / self.bits

    @property
    def binary_error_rate(self) -> float:
        return self._sum("binary_errors") / self.bits

    def sender_slots(self) -> int:
        return math.ceil(self.n / self.m)

    def receiver_slots(self) -> int:
        rows = math.ceil(self.n / self.m)
        tech = Technique(self.technique)
        if tech in (Technique.SBTC, Technique.SBTP):
            return self.n
        if tech is Technique.CPC:
            return rows
        return rows * (1 << self.m)

    @property
    def sender_bitrate(self) -> float:
        """Covert bits per simulated second on the sender side."""
        return self.n / (self.sender_slots() * self.t_send / S)

    @property
    def receiver_bitrate(self) -> float:
        return self.n / (self.receiver_slots() * self.t_recv / S)

    @property
    def bitrate(self) -> float:
        return min(self.sender_bitrate, self.receiver_bitrate)

    def row(self) -> dict:
        bits = self.bits
        err = self.errors
        b_err = self._sum("binary_errors")
        lo, hi = wilson(err, bits)
        blo, bhi = wilson(b_err, bits)
        cal = self.calibration
        return {
            "technique": self.technique, "m": self.m, "n": self.n, "trials": len(self.reports),
            "bits": bits, "t_send_ns": self.t_send, "t_recv_ns": self.t_recv,
            "t_thresh_ns": "" if self.t_thresh is None else self.t_thresh,
            "calibrated": int(self.calibrated),
            "correct": self._sum("correct"), "write_errors": self._sum("write_errors"),
            "read_errors": self._sum("read_errors"), "erasures": self._sum("erasures"),
            "error_rate": _f(err / bits), "error_lo": _f(lo), "error_hi": _f(hi),
            "write_error_rate": _f(self._sum("write_errors") / bits),
            "read_error_rate": _f(self._sum("read_errors") / bits),
            "erasure_rate": _f(self._sum("erasures") / bits),
            "binary_error_rate": _f(b_err / bits), "binary_lo": _f(blo), "binary_hi": _f(bhi),
            "sender_bitrate": _f(self.sender_bitrate), "receiver_bitrate": _f(self.receiver_bitrate),
            "bitrate": _f(self.bitrate),
            "sender_bytes_per_bit": _f(self._sum("sender_bytes") / bits),
            "receiver_bytes_per_bit": _f(self._sum("receiver_bytes") / bits),
            "hit_mean_ns": "" if cal is None else _f(cal.rtt_hit_mean),
            "miss_mean_ns": "" if cal is None else _f(cal.rtt_miss_mean),
            "overlap": "" if cal is None else _f(cal.overlap),
        }


def _f(x: float) -> str:
    # fixed formatting keeps CSVs byte-identical across runs
    return f"{x:.6g}"


@dataclass
class SweepResult:
    spec: ExperimentSpec
    points: List[SweepPoint]
    rtt_rows: List[dict] = field(default_factory=list, repr=False)

    def rows(self) -> List[dict]:
        return [p.row() for p in self.points]

    def best(self) -> SweepPoint:
        return min(self.points, key=lambda p: (p.error_rate, p.t_send))


def sweep(spec: ExperimentSpec, keep_rtts: bool = True) -> SweepResult:
    """Cartesian sweep over (t, t_thresh); each (t, trial) is simulated once."""
    points: List[SweepPoint] = []
    rtt_rows: List[dict] = []
    needs_cal = spec.technique is not Technique.CPC and any(v is None for v in spec.t_thresh_values)
    for t in spec.t_values:
        cal = calibrate(spec, t) if needs_cal else None
        thresholds = [(thr is None and cal is not None, thr) for thr in spec.t_thresh_values]
        thresholds = [(c, cal.t_thresh if c else thr) for c, thr in thresholds]
        reports: List[List[TrialReport]] = [[] for _ in thresholds]
        for k in range(spec.trials):
            # score each trial right away so its network can be freed
            run = simulate_trial(spec, t, k, calibration=cal)
            for bucket, (_, use) in zip(reports, thresholds):
                bucket.append(run.report(use))
            if keep_rtts:
                rtt_rows.extend(run.rtt_rows(k))
            m, params = run.codebook.m, run.params
            del run
        for bucket, (calibrated, use) in zip(reports, thresholds):
            points.append(SweepPoint(spec.technique.value, m, spec.n, params.t_send, params.t_recv,
                                     use, calibrated, bucket, cal))
    return SweepResult(spec, points, rtt_rows)


def emit_csv(rows: Sequence[dict], path, columns: Sequence[str] = POINT_COLUMNS) -> None:
    """Write ``rows`` with a header and a fixed column order."""
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(rows, columns))


def csv_text(rows: Sequence[dict], columns: Sequence[str] = POINT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# privacy game

@dataclass
class PrivacyOutcome:
    indistinguishable: bool
    states: Tuple[str, str]
    compared_at: int


def _play(spec: ExperimentSpec, message: Message, seed: int):
    """Send and read ``message``; returns the network left running and the codebook."""
    tech = spec.technique
    t = spec.t_values[0]
    params = spec.protocol(t, spec.t_thresh_values[0])
    topo, net = build_topology(_topology_spec(spec), seed=seed)
    traffic = _start_background(net, topo, spec)
    if traffic is None:
        raise ValueError("the privacy game needs background traffic")
    _check_unpopular(Name(spec.background.get("namespace", POPULAR_NAMESPACE)))
    n = len(message)
    m = 1 if tech in (Technique.SBTC, Technique.SBTP, Technique.TDP) else spec.m
    codebook = derive_codebook(derive_seed(seed, "codebook"), n, m, CEC_NAMESPACE,
                               "cpc" if tech is Technique.CPC else "matrix")
    _publish(net, codebook.all_names(), spec.freshness)
    snd, rcv = net.consumer("Snd"), net.consumer("Rcv")
    if params.threshold is None and tech in (Technique.SBTC, Technique.SBTP):
        params.t_thresh = sum(topo.expected_rtts("Rcv", net)) // 2

    if tech is Technique.SBTP:
        covert.sbtp_stream(snd, rcv, message, codebook, params)
        net.run_until_idle([snd, rcv])
    else:
        send = {Technique.SBTC: covert.sbtc_stream_send, Technique.TDP: covert.tdp_stream_send,
                Technique.MATRIX: covert.matrix_send, Technique.CPC: covert.cpc_send}[tech]
        send(snd, message, codebook, params)
        net.run_until_idle([snd])
        # the read starts at an agreed time, not when this particular send finished
        start = rcv.clock.local(snd.clock.true_time(params.t0) + _send_span(params, codebook)
                                + spec.read_delay)
        recv = {Technique.SBTC: covert.sbtc_stream_recv, Technique.TDP: covert.tdp_stream_recv,
                Technique.MATRIX: covert.matrix_recv, Technique.CPC: covert.cpc_recv}[tech]
        recv(rcv, codebook, params, max(start, rcv.now_local()))
        net.run_until_idle([rcv])
    return net, traffic, codebook


def _send_span(params: ProtocolParams, codebook: Codebook) -> int:
    # last scheduled write plus a generous allowance for it to complete
    return codebook.rows * params.t_send + 1 * S


def _state_at(net: Network, traffic: BackgroundTraffic, codebook: Codebook, when: int, check: bool) -> str:
    net.engine.run(until=when)
    traffic.stop_at = when
    for nid in ("Snd", "Rcv"):
        net.consumer(nid).forget()
    if check:
        net.expire_all()
        left = set()
        for r in net.routers():
            left |= r.router.references(codebook.all_names())
        if left:
            raise PrivacyPreconditionError(
                f"{len(left)} codebook names still in router state, e.g. {sorted(left)[0]}")
    return json.dumps(net.snapshot(), sort_keys=True)


def privacy_game(spec: ExperimentSpec, m0: Message, m1: Message, compare: str = "expired",
                 seed: Optional[int] = None) -> PrivacyOutcome:
    """Run the game for a=0 and a=1 on identical seeds and compare full network state.

    Background traffic must be enabled; it draws from its own streams so
    both runs see the same popular-content activity.  With
    ``compare="before"`` the states are taken right after the read phase,
    which should tell the two messages apart.
    """
    if len(m0) != len(m1):
        raise ValueError("|M0| must equal |M1|")
    if compare not in ("expired", "before"):
        raise ValueError(f"compare must be 'expired' or 'before', not {compare!r}")
    s = derive_seed(spec.seed if seed is None else seed, "privacy")
    games = [_play(spec, msg, s) for msg in (m0, m1)]
    when = max(g[0].engine.now for g in games)
    if compare == "expired":
        cfg = games[0][0].router("Rt").config
        when += max(spec.freshness, cfg.pit_lifetime, cfg.admission_window) + 1 * S
    states = tuple(_state_at(net, tr, cb, when, compare == "expired") for net, tr, cb in games)
    return PrivacyOutcome(states[0] == states[1], states, when)
