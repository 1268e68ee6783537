"""Links, clocks, endpoints and the Snd/Rcv/Rt/Pr topology.

A :class:`Network` owns one :class:`~ndncec.engine.Engine`.  Every
directed link draws its loss and delay samples from its own named random
stream, split further by traffic flow ("cec" for the covert parties, "bg"
for background consumers), so runs that differ only in covert traffic see
identical background timing.
"""

from __future__ import annotations

import copy
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple

from .engine import MS, S, US, Engine, RngStreams, SchedulingError
from .names import DEFAULT_INTEREST_BYTES, DataPacket, Interest, Name, render_name
from .node import Producer, Router, RouterConfig

ROLES = ("Snd", "Rcv", "Rt", "Pr")


class TopologyError(ValueError):
    """The topology description is incomplete or inconsistent."""


# --------------------------------------------------------------------------
# links and clocks

@dataclass(frozen=True)
class Jitter:
    kind: str = "none"  # none | uniform | normal | lognormal
    a: float = 0.0  # half_width (uniform), sigma (normal), mu (lognormal); ns
    b: float = 0.0  # sigma of the underlying normal (lognormal)

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "normal", "lognormal"):
            raise TopologyError(f"unknown jitter kind {self.kind!r}")
        if self.kind in ("uniform", "normal") and self.a < 0:
            raise TopologyError("jitter width must be >= 0")
        if self.kind == "lognormal" and self.b < 0:
            raise TopologyError("lognormal sigma must be >= 0")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def uniform(cls, half_width: float):
        return cls("uniform", half_width)

    @classmethod
    def normal(cls, sigma: float):
        return cls("normal", sigma)

    @classmethod
    def lognormal(cls, mu: float, sigma: float):
        return cls("lognormal", mu, sigma)

    @property
    def sigma(self) -> float:
        if self.kind == "uniform":
            return self.a / math.sqrt(3)
        if self.kind == "normal":
            return self.a
        if self.kind == "lognormal":
            m, s = self.a, self.b
            return math.sqrt((math.exp(s * s) - 1) * math.exp(2 * m + s * s))
        return 0.0

    def draw(self, rng) -> float:
        # exactly one call on rng per draw
        kind = self.kind
        if kind == "none":
            rng.random()
            return 0.0
        if kind == "uniform":
            return (2.0 * rng.random() - 1.0) * self.a
        if kind == "normal":
            return rng.gauss(0.0, self.a)
        return rng.lognormvariate(self.a, self.b)


@dataclass(frozen=True)
class LinkModel:
    base_delay: int  # ns, one way
    jitter: Jitter = field(default_factory=Jitter.none)
    loss_prob: float = 0.0

    def __post_init__(self):
        if self.base_delay < 0:
            raise TopologyError("base_delay must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise TopologyError("loss_prob must lie in [0, 1]")

    def sample_delay(self, rng) -> int:
        # truncated at zero rather than resampled; this biases the mean up slightly
        d = self.base_delay + self.jitter.draw(rng)
        return int(d) if d > 0 else 0


@dataclass
class ClockModel:
    offset: int = 0  # ns
    drift: float = 1.0
    sync_error: Optional[int] = None

    def __post_init__(self):
        if self.drift <= 0:
            raise TopologyError("clock drift must be positive")
        if self.sync_error is not None and abs(self.offset) > self.sync_error:
            raise TopologyError(f"clock offset {self.offset} ns exceeds sync error {self.sync_error} ns")

    def local(self, true_time: int) -> int:
        if self.drift == 1.0:
            return true_time + self.offset
        return int(round(true_time * self.drift)) + self.offset

    def true_time(self, local_time: int) -> int:
        if self.drift == 1.0:
            return local_time - self.offset
        return int(round((local_time - self.offset) / self.drift))


class Link:
    """One direction of a point-to-point link."""

    __slots__ = ("src", "dst", "model", "streams", "_rngs", "transmits", "deliveries", "losses", "faults")

    def __init__(self, src: str, dst: str, model: LinkModel, streams: RngStreams):
        self.src = src
        self.dst = dst
        self.model = model
        self.streams = streams
        self._rngs: Dict[str, Any] = {}
        self.transmits = 0
        self.deliveries = 0
        self.losses = 0
        self.faults: List[List] = []  # [predicate, remaining]

    def rng(self, flow: str):
        r = self._rngs.get(flow)
        if r is None:
            r = self.streams.get(f"link:{self.src}->{self.dst}:{flow}")
            self._rngs[flow] = r
        return r

    def drop(self, predicate: Callable[[Any], bool], count: int = 1) -> None:
        """Force-drop the next ``count`` packets matching ``predicate``."""
        self.faults.append([predicate, count])

    def _forced(self, packet) -> bool:
        for f in self.faults:
            if f[1] > 0 and f[0](packet):
                f[1] -= 1
                return True
        return False


# --------------------------------------------------------------------------
# nodes

@dataclass
class RttSample:
    name: Name
    issued_at: int
    satisfied_at: Optional[int]
    rtt: Optional[int]
    timed_out: bool

    def __post_init__(self):
        if not self.timed_out and self.rtt != self.satisfied_at - self.issued_at:
            raise ValueError("rtt must equal satisfied_at - issued_at")


class NetNode:
    def __init__(self, node_id: str, net: "Network", processing_delay: int = 0, service_time: int = 0):
        self.node_id = node_id
        self.net = net
        self.processing_delay = processing_delay
        self.service_time = service_time
        self._busy_until = 0

    def arrive(self, packet, face, flow) -> None:
        if not self.service_time and not self.processing_delay:
            self.process(packet, face, flow)
            return
        engine = self.net.engine
        done = engine.now
        if self.service_time:
            start = self._busy_until if self._busy_until > done else done
            done = start + self.service_time
            self._busy_until = done
        engine.at(done + self.processing_delay, self.process, packet, face, flow)

    def process(self, packet, face, flow) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def snapshot(self) -> dict:
        return {"node": self.node_id}


class RouterNode(NetNode):
    def __init__(self, node_id, net, config: Optional[RouterConfig] = None, **kw):
        super().__init__(node_id, net, **kw)
        self.router = Router(node_id, config)
        # simulator-only ground truth: (name key, face) of every interest seen
        self.arrival_log: Optional[set] = None

    def process(self, packet, face, flow) -> None:
        net = self.net
        now = net.engine.now
        router = self.router
        if isinstance(packet, Interest):
            if self.arrival_log is not None:
                self.arrival_log.add((packet.name.components, face))
            outcome = router.handle_interest(packet, face, now)
            if net.trace is not None:
                net.record(now, self.node_id, "interest", packet.name, outcome.kind.value,
                           [f for _, f in outcome.emitted] or [face])
            for pkt, out in outcome.emitted:
                net.transmit(self.node_id, out, pkt, flow, outcome.delay)
        else:
            emitted = router.handle_data(packet, face, now)
            if net.trace is not None:
                net.record(now, self.node_id, "data", packet.name,
                           "forwarded" if emitted else "unsolicited", [f for _, f in emitted])
            for pkt, out in emitted:
                net.transmit(self.node_id, out, pkt, flow)

    def snapshot(self) -> dict:
        return self.router.snapshot()


class ProducerNode(NetNode):
    def __init__(self, node_id, net, producer: Optional[Producer] = None, **kw):
        super().__init__(node_id, net, **kw)
        self.producer = producer or Producer()
        self.served = 0

    def process(self, packet, face, flow) -> None:
        if not isinstance(packet, Interest):
            return
        data = self.producer.respond(packet)
        net = self.net
        if net.trace is not None:
            net.record(net.engine.now, self.node_id, "interest", packet.name,
                       "produced" if data is not None else "no_match", [face])
        if data is not None:
            self.served += 1
            net.transmit(self.node_id, face, data, flow)


class Probe:
    """One interest expressed by a consumer, with its eventual outcome."""

    __slots__ = ("name", "scope", "issued_at", "satisfied_at", "rtt", "timed_out", "data",
                 "attempts", "retries_left", "lifetime", "on_done", "done", "tag", "epoch")

    def __init__(self, name: Name, scope, lifetime: int, retries: int, on_done, tag=None):
        self.name = name
        self.scope = scope
        self.issued_at: Optional[int] = None
        self.satisfied_at: Optional[int] = None
        self.rtt: Optional[int] = None
        self.timed_out = False
        self.data: Optional[DataPacket] = None
        self.attempts = 0
        self.retries_left = retries
        self.lifetime = lifetime
        self.on_done = on_done
        self.done = False
        self.tag = tag
        self.epoch = 0

    @property
    def sample(self) -> RttSample:
        return RttSample(self.name, self.issued_at, self.satisfied_at, self.rtt, self.timed_out)

    def __repr__(self):
        state = "pending" if not self.done else ("timeout" if self.timed_out else f"rtt={self.rtt}")
        return f"<Probe {self.name} {state}>"


class Consumer(NetNode):
    """An application endpoint (Snd, Rcv, or a background client).

    Times handed to :meth:`express` are on the consumer's local clock;
    measured RTTs are too.
    """

    def __init__(self, node_id, net, clock: Optional[ClockModel] = None, lifetime: int = 4 * S,
                 flow: str = "cec", interest_bytes: int = DEFAULT_INTEREST_BYTES, **kw):
        super().__init__(node_id, net, **kw)
        self.clock = clock or ClockModel()
        self.lifetime = lifetime
        self.flow = flow
        self.interest_bytes = interest_bytes
        self.first_hop: Optional[str] = None
        self.pending: Dict[Tuple[bytes, ...], List[Probe]] = {}
        self._deadlines: List = []
        self._timer_token = 0
        self._timer_at: Optional[int] = None
        self._seq = 0
        self._scheduled = 0
        self._outstanding = 0
        self.interests_sent = 0
        self.data_received = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.unsolicited = 0
        self._nonce_rng = net.streams.get(f"nonce:{node_id}")
        self._epoch = 0

    @property
    def idle(self) -> bool:
        return self._scheduled == 0 and self._outstanding == 0

    @property
    def bytes_exchanged(self) -> int:
        return self.bytes_sent + self.bytes_received

    def reset_counters(self) -> None:
        self.interests_sent = self.data_received = 0
        self.bytes_sent = self.bytes_received = 0
        self.unsolicited = 0

    def now_local(self) -> int:
        return self.clock.local(self.net.engine.now)

    def express(self, name: Name, at: Optional[int] = None, *, scope: Optional[int] = None,
                lifetime: Optional[int] = None, retries: int = 0,
                on_done: Optional[Callable[[Probe], None]] = None, tag=None) -> Probe:
        """Schedule an interest for ``name`` at local time ``at`` (default: now)."""
        if scope not in (None, 1, 2):
            raise ValueError(f"scope must be 1 or 2, got {scope}")
        probe = Probe(name, scope, lifetime or self.lifetime, retries, on_done, tag)
        probe.epoch = self._epoch
        engine = self.net.engine
        when = engine.now if at is None else self.clock.true_time(at)
        if when < engine.now:
            raise SchedulingError(f"{self.node_id}: interest for {name} scheduled in the past")
        self._scheduled += 1
        engine.at(when, self._first_send, probe)
        return probe

    def _first_send(self, probe: Probe) -> None:
        if probe.epoch != self._epoch:
            return  # scheduled before forget()
        self._scheduled -= 1
        self._outstanding += 1
        self._send(probe)

    def _send(self, probe: Probe) -> None:
        net = self.net
        now = net.engine.now
        probe.attempts += 1
        probe.issued_at = self.clock.local(now)
        interest = Interest._trusted(probe.name, probe.scope, self._nonce_rng.getrandbits(64), self.interest_bytes)
        key = probe.name.components
        lst = self.pending.get(key)
        if lst is None:
            self.pending[key] = [probe]
        else:
            lst.append(probe)
        self.interests_sent += 1
        self.bytes_sent += interest.wire_size_bytes
        self._seq += 1
        deadline = now + probe.lifetime
        heapq.heappush(self._deadlines, (deadline, self._seq, probe, probe.attempts))
        if self._timer_at is None or deadline < self._timer_at:
            self._arm(deadline)
        if net.trace is not None:
            net.record(now, self.node_id, "interest", probe.name, "expressed", [self.first_hop])
        net.transmit(self.node_id, self.first_hop, interest, self.flow)

    def _arm(self, when: int) -> None:
        self._timer_token += 1
        self._timer_at = when
        self.net.engine.at(when, self._on_timer, self._timer_token)

    def _on_timer(self, token: int) -> None:
        if token != self._timer_token:
            return
        self._timer_at = None
        now = self.net.engine.now
        dl = self._deadlines
        while dl and dl[0][0] <= now:
            _, _, probe, attempt = heapq.heappop(dl)
            if probe.done or probe.attempts != attempt:
                continue
            lst = self.pending.get(probe.name.components)
            if lst is not None:
                try:
                    lst.remove(probe)
                except ValueError:
                    pass
                if not lst:
                    del self.pending[probe.name.components]
            if self.net.trace is not None:
                self.net.record(now, self.node_id, "interest", probe.name, "timeout", [])
            if probe.retries_left > 0:
                probe.retries_left -= 1
                self._send(probe)
            else:
                probe.timed_out = True
                self._finish(probe)
        # drop bookkeeping for probes that already completed
        while dl and dl[0][2].done:
            heapq.heappop(dl)
        if dl and self._timer_at is None:
            self._arm(dl[0][0])

    def _finish(self, probe: Probe) -> None:
        probe.done = True
        self._outstanding -= 1
        if probe.on_done is not None:
            probe.on_done(probe)
        if not self._outstanding and not self._scheduled and self.net._watched is not None:
            self.net._went_idle()

    def process(self, packet, face, flow) -> None:
        if isinstance(packet, Interest):
            return
        self.data_received += 1
        self.bytes_received += packet.wire_size_bytes
        comps = packet.name.components
        pending = self.pending
        matched = False
        now_local = None
        for k in range(len(comps), 0, -1):
            key = comps if k == len(comps) else comps[:k]
            lst = pending.pop(key, None)
            if not lst:
                continue
            matched = True
            if now_local is None:
                now_local = self.clock.local(self.net.engine.now)
            for probe in lst:
                probe.satisfied_at = now_local
                probe.rtt = now_local - probe.issued_at
                probe.data = packet
                self._finish(probe)
        if not matched:
            self.unsolicited += 1
        if self.net.trace is not None:
            self.net.record(self.net.engine.now, self.node_id, "data", packet.name,
                            "satisfied" if matched else "unsolicited", [face])

    def forget(self) -> None:
        """Delete all application state (sent/received messages, pending interests)."""
        self._epoch += 1
        self.pending.clear()
        self._deadlines.clear()
        self._timer_token += 1
        self._timer_at = None
        self._scheduled = 0
        self._outstanding = 0

    def snapshot(self) -> dict:
        return {"node": self.node_id,
                "pending": sorted(render_name(Name(k)) for k in self.pending)}


class BackgroundTraffic:
    """Poisson interest arrivals over a popular namespace.

    Draws only from its own streams, so its schedule is identical across
    runs that differ in covert traffic.
    """

    def __init__(self, consumer: Consumer, names: List[Name], rate_hz: float,
                 start: int = 0, stop: Optional[int] = None):
        if rate_hz <= 0:
            raise TopologyError("background rate must be positive")
        self.consumer = consumer
        self.names = list(names)
        self.rate_hz = rate_hz
        self.start_at = start
        self.stop_at = stop
        self.issued = 0
        self._rng = consumer.net.streams.get(f"bg:{consumer.node_id}")
        self._running = False

    def start(self, stop: Optional[int] = None) -> None:
        if stop is not None:
            self.stop_at = stop
        if self._running:
            return
        self._running = True
        engine = self.consumer.net.engine
        engine.at(max(engine.now, self.start_at) + self._gap(), self._tick)

    def _gap(self) -> int:
        return max(1, int(self._rng.expovariate(self.rate_hz) * S))

    def _tick(self) -> None:
        engine = self.consumer.net.engine
        if self.stop_at is not None and engine.now > self.stop_at:
            self._running = False
            return
        name = self.names[self._rng.randrange(len(self.names))]
        self.consumer.express(name)
        self.issued += 1
        nxt = engine.now + self._gap()
        if self.stop_at is None or nxt <= self.stop_at:
            engine.at(nxt, self._tick)
        else:
            self._running = False


# --------------------------------------------------------------------------
# network

class Network:
    def __init__(self, seed: int = 0, trace: bool = False):
        self.engine = Engine()
        self.seed = int(seed)
        self.streams = RngStreams(self.seed)
        self.nodes: Dict[str, NetNode] = {}
        self.links: Dict[Tuple[str, str], Link] = {}
        self.trace: Optional[List[dict]] = [] if trace else None
        self._watched: Optional[List["Consumer"]] = None

    # construction -------------------------------------------------------
    def _add(self, node: NetNode):
        if node.node_id in self.nodes:
            raise TopologyError(f"duplicate node {node.node_id}")
        self.nodes[node.node_id] = node
        return node

    def add_router(self, node_id: str, config: Optional[RouterConfig] = None, **kw) -> RouterNode:
        return self._add(RouterNode(node_id, self, config, **kw))

    def add_producer(self, node_id: str, producer: Optional[Producer] = None, **kw) -> ProducerNode:
        return self._add(ProducerNode(node_id, self, producer, **kw))

    def add_consumer(self, node_id: str, **kw) -> Consumer:
        return self._add(Consumer(node_id, self, **kw))

    def connect(self, a: str, b: str, model: LinkModel, back: Optional[LinkModel] = None) -> None:
        for x in (a, b):
            if x not in self.nodes:
                raise TopologyError(f"unknown node {x}")
        self.links[(a, b)] = Link(a, b, model, self.streams)
        self.links[(b, a)] = Link(b, a, back or model, self.streams)
        for x, y in ((a, b), (b, a)):
            node = self.nodes[x]
            if isinstance(node, Consumer) and node.first_hop is None:
                node.first_hop = y

    def neighbors(self, node_id: str) -> List[str]:
        return sorted(b for (a, b) in self.links if a == node_id)

    def router(self, node_id: str = "Rt") -> Router:
        return self.nodes[node_id].router

    def consumer(self, node_id: str) -> Consumer:
        return self.nodes[node_id]

    @property
    def producer(self) -> Producer:
        return self.nodes["Pr"].producer

    # packet movement ------------------------------------------------------
    def transmit(self, src: str, dst: str, packet, flow: str = "cec", extra_delay: int = 0) -> Optional[int]:
        """Send ``packet`` over link src->dst; returns the delivery time or None if lost."""
        link = self.links.get((src, dst))
        if link is None:
            raise TopologyError(f"no link {src}->{dst}")
        link.transmits += 1
        rng = link._rngs.get(flow) or link.rng(flow)
        model = link.model
        lost = rng.random() < model.loss_prob
        # same draws as LinkModel.sample_delay, inlined on this hot path
        jitter = model.jitter
        kind = jitter.kind
        if kind == "none":
            rng.random()
            delay = model.base_delay
        else:
            if kind == "uniform":
                d = model.base_delay + (2.0 * rng.random() - 1.0) * jitter.a
            else:
                d = model.base_delay + jitter.draw(rng)
            delay = int(d) if d > 0 else 0
        if link.faults and link._forced(packet):
            lost = True
        engine = self.engine
        if self.trace is not None:
            self.record(engine.now, src, "interest" if isinstance(packet, Interest) else "data",
                        packet.name, "lost" if lost else "tx", [dst])
        if lost:
            link.losses += 1
            return None
        link.deliveries += 1
        when = engine.now + delay + extra_delay
        # delays are never negative, so skip the past-time check in Engine.at
        seq = engine._seq
        engine._seq = seq + 1
        node = self.nodes[dst]
        if node.service_time:
            handler = node.arrive  # queues behind earlier packets
        else:
            # no queue to model: fold the fixed processing delay into delivery
            handler = node.process
            when += node.processing_delay
        heapq.heappush(engine._queue, (when, seq, handler, (packet, src, flow)))
        return when

    def record(self, time: int, node: str, kind: str, name: Name, outcome: str, faces) -> None:
        self.trace.append({"time": time, "node": node, "packet_kind": kind, "name": render_name(name),
                           "outcome": outcome, "faces": ";".join(str(f) for f in faces)})

    # clocks and state -------------------------------------------------------
    def local_clock(self, node_id: str, true_time: int) -> int:
        node = self.nodes[node_id]
        clock = getattr(node, "clock", None)
        return true_time if clock is None else clock.local(true_time)

    def expire_all(self) -> Tuple[int, int]:
        now = self.engine.now
        pit = stale = 0
        for node in self.nodes.values():
            if isinstance(node, RouterNode):
                p, s = node.router.expire(now)
                pit += p
                stale += s
        return pit, stale

    def routers(self) -> List[RouterNode]:
        return [n for n in self.nodes.values() if isinstance(n, RouterNode)]

    def snapshot(self) -> dict:
        return {nid: self.nodes[nid].snapshot() for nid in sorted(self.nodes)}

    def run_until_idle(self, consumers: Iterable[Consumer], limit: Optional[int] = None) -> None:
        cons = list(consumers)
        if all(c.idle for c in cons):
            return
        # consumers call _went_idle as they finish; cheaper than polling every event
        self._watched = cons
        try:
            self.engine.run(until=limit)
        finally:
            self._watched = None

    def _went_idle(self) -> None:
        watched = self._watched
        if watched is not None and all(c.idle for c in watched):
            self.engine.halt()


def local_clock(net: Network, node_id: str, true_time: int) -> int:
    return net.local_clock(node_id, true_time)


# --------------------------------------------------------------------------
# topology description

PRESETS: Dict[str, dict] = {
    # sub-millisecond LAN: hit ~0.8 ms, miss ~1.8 ms, jitter of a few us
    "lan": {
        "links": {
            "Snd-Rt": {"delay_us": 400, "jitter": {"kind": "uniform", "half_width_us": 10}},
            "Rcv-Rt": {"delay_us": 400, "jitter": {"kind": "uniform", "half_width_us": 10}},
            "Rt-Pr": {"delay_us": 400, "jitter": {"kind": "uniform", "half_width_us": 10}},
        },
        "nodes": {"Pr": {"processing_delay_us": 200}},
    },
    # wide-area path to Rt, short Rt->Pr hop: hit ~190 ms, miss ~193 ms,
    # overlap of a few percent; Rt's per-packet service time makes bursts queue
    "testbed-like": {
        "links": {
            "Snd-Rt": {"delay_us": 95000, "jitter": {"kind": "normal", "sigma_us": 530}},
            "Rcv-Rt": {"delay_us": 95000, "jitter": {"kind": "normal", "sigma_us": 530}},
            "Rt-Pr": {"delay_us": 1400, "jitter": {"kind": "normal", "sigma_us": 100}},
        },
        "nodes": {"Pr": {"processing_delay_us": 200}, "Rt": {"service_time_us": 20}},
    },
}


@dataclass
class Topology:
    preset: Optional[str]
    nodes: Dict[str, str]  # node id -> role
    links: Dict[Tuple[str, str], LinkModel]
    receivers: List[str]
    paths: Dict[str, List[str]]  # consumer -> node path to Rt (inclusive)
    background: Optional[dict] = None
    spec: dict = field(default_factory=dict)

    def path_delay(self, consumer: str) -> int:
        """One-way base delay from ``consumer`` to Rt."""
        p = self.paths[consumer]
        return sum(self.links[(a, b)].base_delay for a, b in zip(p, p[1:]))

    def expected_rtts(self, consumer: str, net: Optional[Network] = None) -> Tuple[int, int]:
        """Analytic (hit, miss) RTTs for ``consumer`` with no jitter or queueing."""
        p = self.paths[consumer]
        there = sum(self.links[(a, b)].base_delay for a, b in zip(p, p[1:]))
        back = sum(self.links[(b, a)].base_delay for a, b in zip(p, p[1:]))
        def cost(nid: str) -> int:
            if net is None:
                return 0
            n = net.nodes[nid]
            return n.processing_delay + n.service_time

        # intermediate routers see the interest and the data; Rt sees only the
        # interest on a hit, and both on a miss
        hit = there + back + cost(consumer) + cost("Rt") + sum(2 * cost(nid) for nid in p[1:-1])
        miss = (hit + self.links[("Rt", "Pr")].base_delay + self.links[("Pr", "Rt")].base_delay
                + cost("Pr") + cost("Rt"))
        return hit, miss


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in (override or {}).items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _us(d: Mapping, key: str, default: float = 0.0) -> int:
    v = d.get(key + "_us")
    if v is None:
        v = d.get(key + "_ms")
        return int(round(float(v) * MS)) if v is not None else int(round(default * US))
    return int(round(float(v) * US))


def parse_jitter(spec) -> Jitter:
    if spec is None or spec == "none" or spec == {}:
        return Jitter.none()
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = str(spec.get("kind", "none")).lower()
    if kind == "none":
        return Jitter.none()
    if kind == "uniform":
        return Jitter.uniform(_us(spec, "half_width"))
    if kind == "normal":
        return Jitter.normal(_us(spec, "sigma"))
    if kind == "lognormal":
        median = _us(spec, "median")
        if median <= 0:
            raise TopologyError("lognormal jitter needs a positive median")
        return Jitter.lognormal(math.log(median), float(spec.get("sigma", 0.5)))
    raise TopologyError(f"unknown jitter kind {kind!r}")


def parse_link(spec: Mapping, jitter_override=None, loss_override=None) -> LinkModel:
    if "delay_us" not in spec and "delay_ms" not in spec:
        raise TopologyError(f"link needs delay_us: {dict(spec)!r}")
    jitter = parse_jitter(spec.get("jitter")) if jitter_override is None else parse_jitter(jitter_override)
    loss = float(spec.get("loss_prob", 0.0)) if loss_override is None else float(loss_override)
    return LinkModel(_us(spec, "delay"), jitter, loss)


def parse_router_config(spec: Optional[Mapping]) -> RouterConfig:
    spec = dict(spec or {})
    kw: Dict[str, Any] = {}
    for key in ("cache_capacity",):
        if key in spec:
            kw[key] = int(spec[key])
    for key in ("serve_stale", "cache_on_first_pass", "refresh_on_hit"):
        if key in spec:
            kw[key] = bool(spec[key])
    if "replacement_policy" in spec:
        kw["replacement_policy"] = spec["replacement_policy"]
    for key in ("pit_lifetime", "cache_hit_extra_delay", "admission_window"):
        if key + "_us" in spec or key + "_ms" in spec:
            kw[key] = _us(spec, key)
    return RouterConfig(**kw)


def _link_key(spec_links: Mapping, a: str, b: str):
    for k in (f"{a}-{b}", f"{b}-{a}"):
        if k in spec_links:
            return k
    return None


def build_topology(spec=None, *, seed: Optional[int] = None, trace: bool = False) -> Tuple[Topology, Network]:
    """Build the Snd/Rcv/Rt/Pr network from a preset name or description.

    ``spec`` may name a preset ("lan", "testbed-like") or be a mapping with an
    optional ``preset`` key whose values are overridden by the rest.
    """
    if spec is None:
        spec = "lan"
    if isinstance(spec, str):
        spec = {"preset": spec}
    preset = spec.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise TopologyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        full = deep_merge(PRESETS[preset], {k: v for k, v in spec.items() if k != "preset"})
    else:
        full = deep_merge({}, spec)
    seed = int(full.get("seed", 0) if seed is None else seed)
    links = full.get("links") or {}
    jitter_override = full.get("jitter")
    loss_override = full.get("loss_prob")

    if _link_key(links, "Rt", "Pr") is None:
        raise TopologyError("missing Rt-Pr link")
    for role in ("Snd", "Rcv"):
        if _link_key(links, role, "Rt") is None:
            raise TopologyError(f"missing {role}-Rt link")

    net = Network(seed, trace=trace)
    node_cfg = full.get("nodes") or {}

    def kw_for(nid: str) -> dict:
        c = node_cfg.get(nid) or {}
        return {"processing_delay": _us(c, "processing_delay"), "service_time": _us(c, "service_time")}

    router_cfg = full.get("router")
    net.add_router("Rt", parse_router_config(router_cfg), **kw_for("Rt"))
    net.add_producer("Pr", Producer(), **kw_for("Pr"))

    consumer_cfg = full.get("consumer") or {}
    lifetime = _us(consumer_cfg, "lifetime") or parse_router_config(router_cfg).pit_lifetime
    sync_error = full.get("sync_error_us")
    clocks = full.get("clocks") or {}

    def clock_for(nid: str) -> ClockModel:
        c = clocks.get(nid) or {}
        return ClockModel(offset=_us(c, "offset"), drift=float(c.get("drift", 1.0)),
                          sync_error=None if sync_error is None else int(round(float(sync_error) * US)))

    n_recv = int(full.get("receivers", 1))
    if n_recv < 1:
        raise TopologyError("need at least one receiver")
    receivers = ["Rcv"] + [f"Rcv{k}" for k in range(2, n_recv + 1)]
    roles = {"Rt": "Rt", "Pr": "Pr", "Snd": "Snd"}
    for r in receivers:
        roles[r] = "Rcv"

    models: Dict[Tuple[str, str], LinkModel] = {}

    def join(a: str, b: str, model: LinkModel) -> None:
        net.connect(a, b, model)
        models[(a, b)] = model
        models[(b, a)] = model

    net.add_consumer("Snd", clock=clock_for("Snd"), lifetime=lifetime, **kw_for("Snd"))
    for r in receivers:
        net.add_consumer(r, clock=clock_for(r), lifetime=lifetime, **kw_for(r))

    extra_hops = full.get("extra_hops") or {}
    hop_link_spec = full.get("extra_hop_link")
    paths: Dict[str, List[str]] = {}
    for endpoint in ["Snd"] + receivers:
        role = roles[endpoint]
        key = _link_key(links, endpoint, "Rt") or _link_key(links, role, "Rt")
        edge = parse_link(links[key], jitter_override, loss_override)
        k = int(extra_hops.get(endpoint, extra_hops.get(role, 0) if endpoint == role else 0))
        chain = [endpoint]
        prev = endpoint
        for h in range(1, k + 1):
            rid = f"{endpoint}.R{h}"
            net.add_router(rid, parse_router_config(router_cfg), **kw_for(rid))
            hop_model = parse_link(hop_link_spec, jitter_override, loss_override) if hop_link_spec else edge
            join(prev, rid, edge if h == 1 else hop_model)
            chain.append(rid)
            prev = rid
        join(prev, "Rt", edge if k == 0 else (parse_link(hop_link_spec, jitter_override, loss_override)
                                              if hop_link_spec else edge))
        chain.append("Rt")
        paths[endpoint] = chain
        # intermediate routers send everything towards Rt
        for a, b in zip(chain[1:-1], chain[2:]):
            net.router(a).add_route(None, b)

    join("Rt", "Pr", parse_link(links[_link_key(links, "Rt", "Pr")], jitter_override, loss_override))
    net.router("Rt").add_route(None, "Pr")

    bg = full.get("background")
    if bg:
        net.add_consumer("Bg", flow="bg", lifetime=lifetime)
        bkey = _link_key(links, "Bg", "Rt") or _link_key(links, "Rcv", "Rt")
        join("Bg", "Rt", parse_link(links[bkey], jitter_override, loss_override))
        roles["Bg"] = "Bg"
        paths["Bg"] = ["Bg", "Rt"]

    _check_connected(net)
    topo = Topology(preset, roles, models, receivers, paths, bg, full)
    return topo, net


def _check_connected(net: Network) -> None:
    adj: Dict[str, List[str]] = {n: [] for n in net.nodes}
    for a, b in net.links:
        adj[a].append(b)
    start = next(iter(net.nodes))
    seen = {start}
    todo = deque([start])
    while todo:
        x = todo.popleft()
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                todo.append(y)
    if seen != set(net.nodes):
        raise TopologyError(f"disconnected nodes: {sorted(set(net.nodes) - seen)}")
