"""Sender and receiver halves of the covert channels.

All five techniques share one shape: the sender touches router state by
requesting names from a pre-agreed codebook, and the receiver later probes
the same names (or their common prefixes) and decodes from either the
round-trip time or the identity of the returned data.

Send/receive functions only *schedule* interests on a
:class:`~ndncec.netsim.Consumer`; the returned read handles decode once
the simulation has run.  Decoding takes the threshold as an argument so
one simulated trace can be scored at many thresholds.

Erasures (nothing came back) are ``None``, never coerced to 0 or 1.
"""

from __future__ import annotations

import enum
import hashlib
import math
import statistics
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import MS, T_MIN, US
from .names import Name
from .netsim import Consumer, Probe, RttSample

ERASURE = None

__all__ = [
    "ERASURE", "Technique", "Message", "Codebook", "derive_codebook", "ProtocolParams",
    "RttSample", "Calibration", "estimate_threshold", "estimate_pit_threshold",
    "threshold_from_samples", "overlap_fraction", "decide_row",
    "BitRead", "RowRead", "PrefixRead", "MessageRead",
    "sbtc_send", "sbtc_recv", "sbtp_send", "sbtp_recv", "tdp_send", "tdp_recv",
    "matrix_send", "matrix_recv", "cpc_send", "cpc_recv", "multi_recipient_cpc",
    "sbtc_stream_send", "sbtc_stream_recv", "sbtp_stream", "tdp_stream_send", "tdp_stream_recv",
]


class Technique(enum.Enum):
    SBTC = "sbtc"
    SBTP = "sbtp"
    TDP = "tdp"
    MATRIX = "matrix"
    CPC = "cpc"

    @classmethod
    def parse(cls, value) -> "Technique":
        if isinstance(value, Technique):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown technique {value!r}; choose from "
                             f"{[t.value for t in cls]}") from None


class CalibrationWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# messages and codebooks

def word_to_bits(word: int, m: int) -> List[int]:
    return [(word >> (m - 1 - k)) & 1 for k in range(m)]


@dataclass(frozen=True)
class Message:
    bits: Tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) < 1:
            raise ValueError("a message has at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("message bits must be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def from_string(cls, text: str) -> "Message":
        return cls(tuple(int(c) for c in text.strip()))

    @classmethod
    def random(cls, n: int, rng) -> "Message":
        return cls(tuple(rng.getrandbits(1) for _ in range(n)))

    def __str__(self) -> str:
        return "".join(map(str, self.bits))

    def words(self, m: int) -> List[int]:
        """Split into m-bit words, MSB first; the last word is zero-padded."""
        out = []
        bits = self.bits
        for i in range(0, len(bits), m):
            chunk = list(bits[i:i + m]) + [0] * max(0, i + m - len(bits))
            w = 0
            for b in chunk:
                w = (w << 1) | b
            out.append(w)
        return out

    @classmethod
    def from_words(cls, words: Sequence[int], m: int, n: int) -> "Message":
        bits: List[int] = []
        for w in words:
            bits.extend(word_to_bits(w, m))
        return cls(tuple(bits[:n]))


@dataclass(frozen=True)
class Codebook:
    """Pre-agreed matrix of names: one row per word, 2**m columns."""

    names: Tuple[Tuple[Name, ...], ...]
    m: int
    n: int
    derivation_seed: int
    prefixes: Optional[Tuple[Name, ...]] = None
    _index: Dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def rows(self) -> int:
        return len(self.names)

    @property
    def columns(self) -> int:
        return 1 << self.m

    @property
    def cpc(self) -> bool:
        return self.prefixes is not None

    def name(self, row: int, col: int) -> Name:
        return self.names[row][col]

    def all_names(self) -> List[Name]:
        return [n for row in self.names for n in row]

    def locate(self, name: Name) -> Optional[Tuple[int, int]]:
        idx = self._index
        if not idx:
            for i, row in enumerate(self.names):
                for j, nm in enumerate(row):
                    idx[nm.components] = (i, j)
        return idx.get(name.components)


def _hasher(seed: int):
    return hashlib.blake2b(digest_size=32, key=str(int(seed)).encode()[:64])


def _row_tokens(base, mode: str, i: int, count: int) -> List[str]:
    """``count`` 12-hex-digit tokens for row ``i``: a keyed row digest stretched by SHAKE."""
    h = base.copy()
    h.update(f"{mode}|{i}".encode())
    stream = hashlib.shake_256(h.digest()).hexdigest(6 * count)
    return [stream[12 * j:12 * j + 12] for j in range(count)]


def derive_codebook(seed: int, n: int, m: int = 1, namespace="/cec", mode: str = "matrix") -> Codebook:
    """Derive the shared codebook from a secret seed.

    Both parties run this with the same inputs and get the same matrix.
    In "cpc" mode every row sits under its own prefix, and no row prefix
    matches a name from another row.
    """
    if not 1 <= m <= 8:
        raise ValueError(f"m={m} outside supported range [1, 8]")
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in ("matrix", "cpc"):
        raise ValueError(f"unknown codebook mode {mode!r}")
    ns = namespace if isinstance(namespace, Name) else Name(namespace)
    rows = math.ceil(n / m)
    cols = 1 << m
    names = []
    prefixes = [] if mode == "cpc" else None
    seen = set()
    hasher = _hasher(seed)
    trusted = Name._trusted
    for i in range(rows):
        tokens = _row_tokens(hasher, mode, i, cols + 1)
        if mode == "cpc":
            pref = ns.append("p" + tokens[cols])
            prefixes.append(pref)
            base = pref.components
        else:
            base = ns.components
        # hex tokens are always valid components
        row = tuple(trusted(base + (tok.encode(),)) for tok in tokens[:cols])
        for nm in row:
            if nm in seen:
                raise RuntimeError("codebook token collision; pick another seed")
            seen.add(nm)
        names.append(row)
    if prefixes is not None and len(set(prefixes)) != len(prefixes):
        raise RuntimeError("codebook prefix collision; pick another seed")
    return Codebook(tuple(names), m, n, seed, tuple(prefixes) if prefixes is not None else None)


# --------------------------------------------------------------------------
# parameters

@dataclass
class ProtocolParams:
    technique: Technique = Technique.SBTC
    m: int = 1
    t_send: int = 1 * MS  # spacing between sender interests
    t_recv: int = 1 * MS  # spacing between receiver probes
    t_thresh: Optional[int] = None  # plays RTT_hit + delta
    delta: int = 0
    t0: int = 1 * MS  # agreed start, sender's local clock
    retransmit: bool = False  # CPC only
    scope2: bool = False
    verify_writes: bool = False  # sender re-issues unanswered interests
    pair_spacing: int = 800 * US  # SBTP: receiver lags the sender by this much
    intra_pair: int = T_MIN  # TDP: gap between the C0 and C1 probes
    max_retries: int = 16

    def __post_init__(self):
        self.technique = Technique.parse(self.technique)
        if self.t_send < T_MIN or self.t_recv < T_MIN:
            raise ValueError(f"interest spacing must be >= t_min ({T_MIN} ns)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 1 <= self.m <= 8:
            raise ValueError("m must lie in [1, 8]")
        if self.technique in (Technique.SBTC, Technique.SBTP, Technique.TDP) and self.m != 1:
            raise ValueError(f"{self.technique.value} carries one bit per interest (m=1)")
        if self.retransmit and self.technique is not Technique.CPC:
            # re-reading a delay-based channel writes to it; only CPC can retry safely
            self.retransmit = False

    @property
    def threshold(self) -> Optional[int]:
        return None if self.t_thresh is None else self.t_thresh + self.delta

    @property
    def sender_retries(self) -> int:
        if self.technique is Technique.SBTP:
            return 0
        return self.max_retries if (self.verify_writes or self.retransmit) else 0


# --------------------------------------------------------------------------
# threshold calibration

@dataclass
class Calibration:
    t_thresh: int
    rtt_hit_mean: float
    rtt_miss_mean: float
    overlap: float
    separated: bool
    hits: List[int] = field(default_factory=list, repr=False)
    misses: List[int] = field(default_factory=list, repr=False)

    def __iter__(self):
        return iter((self.t_thresh, self.rtt_hit_mean, self.rtt_miss_mean))


def overlap_fraction(hits: Sequence[float], misses: Sequence[float], bins: int = 100) -> float:
    """Shared probability mass of the two RTT histograms (0 = disjoint, 1 = identical)."""
    if not hits or not misses:
        return 0.0
    h = np.asarray(hits, dtype=float)
    m = np.asarray(misses, dtype=float)
    if h.max() < m.min() or m.max() < h.min():
        return 0.0
    lo = min(h.min(), m.min())
    hi = max(h.max(), m.max())
    if hi == lo:
        return 1.0
    edges = np.linspace(lo, hi, bins + 1)
    ph, _ = np.histogram(h, edges)
    pm, _ = np.histogram(m, edges)
    return float(np.minimum(ph / len(h), pm / len(m)).sum())


def threshold_from_samples(hits: Sequence[int], misses: Sequence[int]) -> Tuple[int, bool]:
    """Midpoint of the gap between the slowest hit and fastest miss.

    Falls back to the midpoint of the means when the samples overlap.
    """
    if not hits or not misses:
        raise ValueError("need both hit and miss samples")
    if max(hits) < min(misses):
        return (max(hits) + min(misses)) // 2, True
    return int(round((statistics.fmean(hits) + statistics.fmean(misses)) / 2)), False


def _calibration(hits: List[int], misses: List[int]) -> Calibration:
    thresh, separated = threshold_from_samples(hits, misses)
    mh, mm = statistics.fmean(hits), statistics.fmean(misses)
    sigma = statistics.pstdev(hits + misses) if len(hits) + len(misses) > 1 else 0.0
    within = max(statistics.pstdev(hits) if len(hits) > 1 else 0.0,
                 statistics.pstdev(misses) if len(misses) > 1 else 0.0)
    if mm - mh <= within or (sigma and mm - mh <= 0):
        warnings.warn(f"hit/miss RTT means {mh:.0f}/{mm:.0f} ns are within one jitter sigma "
                      f"({within:.0f} ns); threshold is unreliable", CalibrationWarning, stacklevel=3)
    return Calibration(thresh, mh, mm, overlap_fraction(hits, misses), separated, hits, misses)


def estimate_threshold(receiver: Consumer, probe_names: Sequence[Name], repeats: int = 2,
                       spacing: int = 1 * MS, start: Optional[int] = None, run: bool = True) -> Calibration:
    """Probe unpopular names to learn the hit/miss split.

    The first request for each name is served by the producer (a miss);
    each later request goes out as soon as the previous one returns and is
    served from the nearby cache (a hit).
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    if not probe_names:
        raise ValueError("need at least one probe name")
    hits: List[int] = []
    misses: List[int] = []
    base = receiver.now_local() if start is None else start

    def chain(name: Name, left: int):
        def done(p: Probe):
            if p.timed_out:
                return
            (misses if p.tag == 0 else hits).append(p.rtt)
            if left > 0:
                receiver.express(name, on_done=chain(name, left - 1), tag=repeats - left)
        return done

    for k, name in enumerate(probe_names):
        receiver.express(name, base + k * spacing, on_done=chain(name, repeats - 1), tag=0)
    if run:
        receiver.net.run_until_idle([receiver])
    return _calibration(hits, misses)


def estimate_pit_threshold(sender: Consumer, receiver: Consumer, probe_names: Sequence[Name],
                           pair_spacing: int = 800 * US, spacing: int = 1 * MS,
                           start: Optional[int] = None) -> Calibration:
    """Learn the collapsed-vs-miss RTT split for the PIT channel.

    Even-indexed names are requested by both parties ``pair_spacing`` apart
    (the receiver's interest collapses into the sender's PIT entry);
    odd-indexed ones by the receiver alone.
    """
    if len(probe_names) < 2:
        raise ValueError("need at least two probe names")
    base = receiver.now_local() if start is None else start
    s_base = sender.clock.local(receiver.clock.true_time(base))
    reads = []
    for k, name in enumerate(probe_names):
        at = base + k * spacing
        if k % 2 == 0:
            sender.express(name, s_base + k * spacing)
        reads.append(receiver.express(name, at + pair_spacing, tag=k % 2))
    receiver.net.run_until_idle([sender, receiver])
    hits = [p.rtt for p in reads if p.tag == 0 and not p.timed_out]
    misses = [p.rtt for p in reads if p.tag == 1 and not p.timed_out]
    return _calibration(hits, misses)


# --------------------------------------------------------------------------
# read handles

def decide_row(rtts: Sequence[Optional[int]], thresh: Optional[int] = None) -> Optional[int]:
    """Column whose probe looked cached.

    The fastest column wins; ties go to the highest column (so TDP ties
    decode to 1).  When some probes timed out and no survivor beats the
    threshold, a single missing column is the best guess.
    """
    best = None
    best_j = None
    missing = []
    for j, r in enumerate(rtts):
        if r is None:
            missing.append(j)
        elif best is None or r <= best:
            best, best_j = r, j
    if best is None:
        return None
    if not missing or thresh is None or best < thresh:
        return best_j
    if len(missing) == 1:
        return missing[0]
    return best_j


class BitRead:
    """Single-bit read decoded against a threshold (SBTC, SBTP)."""

    __slots__ = ("probe", "t_thresh", "scope2")

    def __init__(self, probe: Probe, t_thresh: Optional[int], scope2: bool = False):
        self.probe = probe
        self.t_thresh = t_thresh
        self.scope2 = scope2

    def decode(self, t_thresh: Optional[int] = None) -> Optional[int]:
        p = self.probe
        if not p.done:
            raise RuntimeError(f"read of {p.name} has not completed; run the simulation first")
        if p.timed_out:
            # with scope 2 only a cache hit can come back, so silence means 0
            return 0 if self.scope2 else ERASURE
        if self.scope2:
            return 1
        thresh = self.t_thresh if t_thresh is None else t_thresh
        if thresh is None:
            raise ValueError("a threshold is needed to decode")
        return 1 if p.rtt < thresh else 0

    @property
    def symbol(self) -> Optional[int]:
        return self.decode()

    @property
    def probes(self) -> List[Probe]:
        return [self.probe]


class RowRead:
    """One codebook row probed column by column (TDP, matrix)."""

    __slots__ = ("probes", "t_thresh")

    def __init__(self, probes: List[Probe], t_thresh: Optional[int]):
        self.probes = probes
        self.t_thresh = t_thresh

    def rtts(self) -> List[Optional[int]]:
        out = []
        for p in self.probes:
            if not p.done:
                raise RuntimeError("row read has not completed; run the simulation first")
            out.append(None if p.timed_out else p.rtt)
        return out

    def decode(self, t_thresh: Optional[int] = None) -> Optional[int]:
        return decide_row(self.rtts(), self.t_thresh if t_thresh is None else t_thresh)

    @property
    def symbol(self) -> Optional[int]:
        return self.decode()


class PrefixRead:
    """One prefix interest per row; the returned name identifies the word (CPC)."""

    __slots__ = ("probe", "codebook", "row")

    def __init__(self, probe: Probe, codebook: Codebook, row: int):
        self.probe = probe
        self.codebook = codebook
        self.row = row

    def decode(self, t_thresh: Optional[int] = None) -> Optional[int]:
        p = self.probe
        if not p.done:
            raise RuntimeError("prefix read has not completed; run the simulation first")
        if p.timed_out or p.data is None:
            return ERASURE
        loc = self.codebook.locate(p.data.name)
        if loc is None or loc[0] != self.row:
            return ERASURE
        return loc[1]

    @property
    def symbol(self) -> Optional[int]:
        return self.decode()

    @property
    def probes(self) -> List[Probe]:
        return [self.probe]


class MessageRead:
    """Per-word reads assembled into a bit string with erasures."""

    def __init__(self, reads: list, m: int, n: int):
        self.reads = reads
        self.m = m
        self.n = n

    def words(self, t_thresh: Optional[int] = None) -> List[Optional[int]]:
        return [r.decode(t_thresh) for r in self.reads]

    def bits(self, t_thresh: Optional[int] = None) -> List[Optional[int]]:
        out: List[Optional[int]] = []
        for w in self.words(t_thresh):
            out.extend([ERASURE] * self.m if w is None else word_to_bits(w, self.m))
        return out[:self.n]

    def message(self, t_thresh: Optional[int] = None) -> Optional[Message]:
        bits = self.bits(t_thresh)
        if any(b is None for b in bits):
            return None
        return Message(tuple(bits))

    def probes(self) -> List[Probe]:
        return [p for r in self.reads for p in r.probes]


# --------------------------------------------------------------------------
# single-bit operations

def sbtc_send(sender: Consumer, bit: int, name: Name, params: ProtocolParams,
              at: Optional[int] = None) -> Optional[Probe]:
    """Write one bit into Rt's cache: request ``name`` for 1, stay silent for 0."""
    if not bit:
        return None
    return sender.express(name, params.t0 if at is None else at, retries=params.sender_retries)


def sbtc_recv(receiver: Consumer, name: Name, params: ProtocolParams, at: Optional[int] = None) -> BitRead:
    probe = receiver.express(name, at, scope=2 if params.scope2 else None)
    return BitRead(probe, params.threshold, params.scope2)


def sbtp_send(sender: Consumer, bit: int, name: Name, params: ProtocolParams,
              at: Optional[int] = None) -> Optional[Probe]:
    """Write one bit into Rt's PIT; a lost interest cannot be repaired in time."""
    if not bit:
        return None
    return sender.express(name, params.t0 if at is None else at)


def sbtp_recv(receiver: Consumer, name: Name, params: ProtocolParams, at: Optional[int] = None) -> BitRead:
    """Probe ``name`` while the sender's interest should still be pending at Rt.

    Defaults to ``t0 + pair_spacing`` on the receiver's clock.
    """
    when = params.t0 + params.pair_spacing if at is None else at
    probe = receiver.express(name, when, scope=2 if params.scope2 else None)
    return BitRead(probe, params.threshold, params.scope2)


def tdp_send(sender: Consumer, bit: int, pair: Sequence[Name], params: ProtocolParams,
             at: Optional[int] = None) -> Probe:
    return sender.express(pair[bit], params.t0 if at is None else at, retries=params.sender_retries)


def tdp_recv(receiver: Consumer, pair: Sequence[Name], params: ProtocolParams, at: Optional[int] = None) -> RowRead:
    """Request C0 then C1 back to back; the faster one was cached by the sender."""
    at = receiver.now_local() if at is None else at
    p0 = receiver.express(pair[0], at)
    p1 = receiver.express(pair[1], at + params.intra_pair)
    return RowRead([p0, p1], params.threshold)


# --------------------------------------------------------------------------
# streams

def sbtc_stream_send(sender: Consumer, message: Message, codebook: Codebook,
                     params: ProtocolParams) -> List[Probe]:
    out = []
    for i, b in enumerate(message.bits):
        p = sbtc_send(sender, b, codebook.name(i, 0), params, params.t0 + i * params.t_send)
        if p is not None:
            out.append(p)
    return out


def sbtc_stream_recv(receiver: Consumer, codebook: Codebook, params: ProtocolParams,
                     start: int, n: Optional[int] = None) -> MessageRead:
    n = codebook.n if n is None else n
    reads = [sbtc_recv(receiver, codebook.name(i, 0), params, start + i * params.t_recv) for i in range(n)]
    return MessageRead(reads, 1, n)


def sbtp_stream(sender: Consumer, receiver: Consumer, message: Message, codebook: Codebook,
                params: ProtocolParams) -> Tuple[List[Probe], MessageRead]:
    """Both halves of the PIT channel, bit i at t0 + i*t on each party's clock."""
    sent = []
    reads = []
    for i, b in enumerate(message.bits):
        at = params.t0 + i * params.t_send
        p = sbtp_send(sender, b, codebook.name(i, 0), params, at)
        if p is not None:
            sent.append(p)
        reads.append(sbtp_recv(receiver, codebook.name(i, 0), params, at + params.pair_spacing))
    return sent, MessageRead(reads, 1, len(message))


def tdp_stream_send(sender: Consumer, message: Message, codebook: Codebook, params: ProtocolParams) -> List[Probe]:
    return [tdp_send(sender, b, codebook.names[i], params, params.t0 + i * params.t_send)
            for i, b in enumerate(message.bits)]


def tdp_stream_recv(receiver: Consumer, codebook: Codebook, params: ProtocolParams, start: int) -> MessageRead:
    reads = [tdp_recv(receiver, codebook.names[i], params, start + i * params.t_recv)
             for i in range(codebook.rows)]
    return MessageRead(reads, 1, codebook.n)


def matrix_send(sender: Consumer, message: Message, codebook: Codebook, params: ProtocolParams) -> List[Probe]:
    """One interest per m-bit word, for the name in column W_i of row i."""
    _check_dims(message, codebook)
    return [sender.express(codebook.name(i, w), params.t0 + i * params.t_send, retries=params.sender_retries)
            for i, w in enumerate(message.words(codebook.m))]


def matrix_recv(receiver: Consumer, codebook: Codebook, params: ProtocolParams, start: int) -> MessageRead:
    """Probe every name of every row, in column order, ``t_recv`` apart."""
    cols = codebook.columns
    reads = []
    slot = 0
    for i in range(codebook.rows):
        probes = []
        for j in range(cols):
            probes.append(receiver.express(codebook.name(i, j), start + slot * params.t_recv))
            slot += 1
        reads.append(RowRead(probes, params.threshold))
    return MessageRead(reads, codebook.m, codebook.n)


def cpc_send(sender: Consumer, message: Message, codebook: Codebook, params: ProtocolParams) -> List[Probe]:
    if not codebook.cpc:
        raise ValueError("CPC needs a codebook derived in cpc mode")
    return matrix_send(sender, message, codebook, params)


def cpc_recv(receiver: Consumer, codebook: Codebook, params: ProtocolParams, start: int) -> MessageRead:
    """One prefix interest per row; whichever full name comes back is the word."""
    if not codebook.cpc:
        raise ValueError("CPC needs a codebook derived in cpc mode")
    retries = params.max_retries if params.retransmit else 0
    reads = [PrefixRead(receiver.express(pref, start + i * params.t_recv, retries=retries,
                                         scope=2 if params.scope2 else None), codebook, i)
             for i, pref in enumerate(codebook.prefixes)]
    return MessageRead(reads, codebook.m, codebook.n)


def multi_recipient_cpc(receivers: Sequence[Consumer], codebook: Codebook, params: ProtocolParams,
                        starts: Sequence[int]) -> List[MessageRead]:
    """Every receiver reads the same published message at its own start time."""
    if len(starts) != len(receivers):
        raise ValueError("one start time per receiver")
    return [cpc_recv(r, codebook, params, s) for r, s in zip(receivers, starts)]


def _check_dims(message: Message, codebook: Codebook) -> None:
    if math.ceil(len(message) / codebook.m) != codebook.rows:
        raise ValueError(f"codebook has {codebook.rows} rows but the message needs "
                         f"{math.ceil(len(message) / codebook.m)} words of {codebook.m} bits")
