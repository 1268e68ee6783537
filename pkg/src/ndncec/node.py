"""Router, content store and producer state machines.

The router follows the classic NDN pipeline: content store first, then
the pending interest table (PIT), then the FIB.  Routers never generate
error packets; unanswerable interests simply sit in the PIT until they
expire.
"""

from __future__ import annotations

import bisect
import enum
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Set, Tuple, Union

from .engine import S
from .names import DataPacket, Interest, Name, render_name

Face = Hashable
Key = Tuple[bytes, ...]


class OutcomeKind(enum.Enum):
    PIT_MISS_FORWARDED = "pit_miss_forwarded"
    PIT_HIT_COLLAPSED = "pit_hit_collapsed"
    PIT_HIT_DUPLICATE_DROPPED = "pit_hit_duplicate_dropped"
    CACHE_HIT = "cache_hit"
    SCOPE_DROPPED = "scope_dropped"


class ReplacementPolicy(enum.Enum):
    LRU = "lru"
    LFU = "lfu"
    NONE = "none"


@dataclass
class RouterConfig:
    cache_capacity: int = 4096
    replacement_policy: ReplacementPolicy = ReplacementPolicy.LRU
    # the PIT expiration is never given for real routers; 4 s is arbitrary
    pit_lifetime: int = 4 * S
    serve_stale: bool = False
    cache_on_first_pass: bool = True
    cache_hit_extra_delay: int = 0
    # a cache hit restarts the freshness clock of the served entry
    refresh_on_hit: bool = True
    # how long a seen-once name is remembered when cache_on_first_pass is off
    admission_window: int = 10 * S

    def __post_init__(self):
        if isinstance(self.replacement_policy, str):
            self.replacement_policy = ReplacementPolicy(self.replacement_policy.lower())
        if self.cache_capacity < 0:
            raise ValueError("cache_capacity must be >= 0")
        if self.pit_lifetime <= 0:
            raise ValueError("pit_lifetime must be positive")
        if self.cache_hit_extra_delay < 0:
            raise ValueError("cache_hit_extra_delay must be >= 0")


@dataclass
class PitEntry:
    name: Name
    arrival_faces: Set[Face]
    created_at: int
    expires_at: int


@dataclass
class ContentStoreEntry:
    data: DataPacket
    inserted_at: int
    stale_at: int
    last_access: int
    access_count: int = 0
    # tie-breaker for recency when several accesses share a timestamp
    recency: int = 0

    def fresh(self, now: int) -> bool:
        return now < self.stale_at


@dataclass
class ForwardOutcome:
    kind: OutcomeKind
    emitted: List[Tuple[Union[Interest, DataPacket], Face]] = field(default_factory=list)
    no_route: bool = False
    # extra latency before emitted packets leave (cache-hit delaying defense)
    delay: int = 0


class ContentStore:
    """Bounded name -> data cache with LRU, LFU or no replacement."""

    def __init__(self, capacity: int = 4096, policy: ReplacementPolicy = ReplacementPolicy.LRU):
        self.capacity = capacity
        self.policy = ReplacementPolicy(policy)
        self._entries: "OrderedDict[Key, ContentStoreEntry]" = OrderedDict()
        # proper prefix -> full names cached under it, for prefix interests
        self._under: Dict[Key, Set[Key]] = {}
        self._tick = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: Union[Name, Key]) -> bool:
        key = name.components if isinstance(name, Name) else name
        return key in self._entries

    def get(self, name: Union[Name, Key]) -> Optional[ContentStoreEntry]:
        key = name.components if isinstance(name, Name) else name
        return self._entries.get(key)

    def names(self) -> List[Name]:
        return [e.data.name for e in self._entries.values()]

    def entries(self) -> List[ContentStoreEntry]:
        return list(self._entries.values())

    def has_fresh(self, name: Name, now: int) -> bool:
        e = self._entries.get(name.components)
        return e is not None and e.fresh(now)

    def lookup(self, key: Key, now: int, serve_stale: bool = False) -> Optional[ContentStoreEntry]:
        """Least-named entry whose name has ``key`` as prefix, if servable."""
        e = self._entries.get(key)
        if e is not None:
            if serve_stale or now < e.stale_at:
                return e
            self.remove(key)
        under = self._under.get(key)
        if not under:
            return None
        stale = []
        found = None
        for full in sorted(under):
            e = self._entries[full]
            if serve_stale or now < e.stale_at:
                found = e
                break
            stale.append(full)
        for full in stale:
            self.remove(full)
        return found

    def touch(self, entry: ContentStoreEntry, now: int, refresh: bool = False) -> None:
        self._tick += 1
        entry.last_access = now
        entry.access_count += 1
        entry.recency = self._tick
        if refresh:
            entry.inserted_at = now
            entry.stale_at = now + entry.data.freshness
        if self.policy is ReplacementPolicy.LRU:
            self._entries.move_to_end(entry.data.name.components)

    def insert(self, data: DataPacket, now: int) -> List[Name]:
        """Store ``data``; return the names evicted to make room."""
        if self.capacity <= 0:
            return []
        key = data.name.components
        self._tick += 1
        existing = self._entries.get(key)
        if existing is not None:
            existing.data = data
            existing.inserted_at = now
            existing.stale_at = now + data.freshness
            existing.last_access = now
            existing.recency = self._tick
            self._entries.move_to_end(key)
            return []
        evicted: List[Name] = []
        while len(self._entries) >= self.capacity:
            if self.policy is ReplacementPolicy.NONE:
                return evicted
            victim = self._victim()
            evicted.append(self._entries[victim].data.name)
            self.remove(victim)
            self.evictions += 1
        self._entries[key] = ContentStoreEntry(data, now, now + data.freshness, now, 0, self._tick)
        under = self._under
        for k in range(1, len(key)):
            p = key[:k]
            s = under.get(p)
            if s is None:
                under[p] = {key}
            else:
                s.add(key)
        return evicted

    def _victim(self) -> Key:
        if self.policy is ReplacementPolicy.LRU:
            return next(iter(self._entries))
        return min(self._entries.items(), key=lambda kv: (kv[1].access_count, kv[1].recency, kv[0]))[0]

    def remove(self, key: Union[Name, Key]) -> bool:
        if isinstance(key, Name):
            key = key.components
        if self._entries.pop(key, None) is None:
            return False
        under = self._under
        for k in range(1, len(key)):
            p = key[:k]
            s = under.get(p)
            if s is not None:
                s.discard(key)
                if not s:
                    del under[p]
        return True

    def expire(self, now: int) -> int:
        stale = [k for k, e in self._entries.items() if now >= e.stale_at]
        for k in stale:
            self.remove(k)
        return len(stale)

    def clear(self) -> None:
        self._entries.clear()
        self._under.clear()


class Router:
    def __init__(self, node_id: str, config: Optional[RouterConfig] = None):
        self.node_id = node_id
        self.config = config or RouterConfig()
        self.pit: Dict[Key, PitEntry] = {}
        self.cs = ContentStore(self.config.cache_capacity, self.config.replacement_policy)
        self.fib: Dict[Key, Face] = {}
        self._route_cache: Dict[Key, Optional[Face]] = {}
        self.seen_once: Dict[Key, int] = {}
        self.stats: Counter = Counter()

    def add_route(self, prefix: Union[Name, str, None], face: Face) -> None:
        """Route ``prefix`` (None or "/" for the default route) via ``face``."""
        if prefix is None or prefix == "/":
            key: Key = ()
        elif isinstance(prefix, Name):
            key = prefix.components
        else:
            key = Name(prefix).components
        self.fib[key] = face
        self._route_cache.clear()

    def route(self, name: Name) -> Optional[Face]:
        comps = name.components
        cache = self._route_cache
        if comps in cache:
            return cache[comps]
        fib = self.fib
        face = None
        for k in range(len(comps), -1, -1):
            face = fib.get(comps[:k])
            if face is not None:
                break
        if len(cache) > 65536:
            cache.clear()
        cache[comps] = face
        return face

    def live_pit_entry(self, name: Name, now: int) -> Optional[PitEntry]:
        e = self.pit.get(name.components)
        if e is not None and e.expires_at > now:
            return e
        return None

    def handle_interest(self, interest: Interest, face: Face, now: int) -> ForwardOutcome:
        cfg = self.config
        name = interest.name
        key = name.components
        hops = interest.hops + 1
        scope = interest.scope
        if scope is not None and hops >= scope:
            self.stats["scope_dropped"] += 1
            return ForwardOutcome(OutcomeKind.SCOPE_DROPPED)

        entry = self.cs.lookup(key, now, cfg.serve_stale)
        if entry is not None:
            self.cs.touch(entry, now, cfg.refresh_on_hit)
            self.stats["cache_hit"] += 1
            return ForwardOutcome(OutcomeKind.CACHE_HIT, [(entry.data, face)], delay=cfg.cache_hit_extra_delay)

        pit = self.pit
        pe = pit.get(key)
        if pe is not None and pe.expires_at <= now:
            del pit[key]
            pe = None
        if pe is not None:
            if face in pe.arrival_faces:
                self.stats["pit_duplicate"] += 1
                return ForwardOutcome(OutcomeKind.PIT_HIT_DUPLICATE_DROPPED)
            pe.arrival_faces.add(face)
            self.stats["pit_collapsed"] += 1
            return ForwardOutcome(OutcomeKind.PIT_HIT_COLLAPSED)

        if scope is not None and hops + 1 >= scope:
            self.stats["scope_dropped"] += 1
            return ForwardOutcome(OutcomeKind.SCOPE_DROPPED)

        pit[key] = PitEntry(name, {face}, now, now + cfg.pit_lifetime)
        self.stats["pit_miss"] += 1
        out = self.route(name)
        if out is None or out == face:
            self.stats["no_route"] += 1
            return ForwardOutcome(OutcomeKind.PIT_MISS_FORWARDED, no_route=True)
        fwd = interest if scope is None else replace(interest, hops=hops)
        return ForwardOutcome(OutcomeKind.PIT_MISS_FORWARDED, [(fwd, out)])

    def handle_data(self, data: DataPacket, face: Face, now: int) -> List[Tuple[DataPacket, Face]]:
        comps = data.name.components
        pit = self.pit
        faces: Set[Face] = set()
        matched = False
        for k in range(len(comps), 0, -1):
            key = comps if k == len(comps) else comps[:k]
            pe = pit.pop(key, None)
            if pe is None:
                continue
            if pe.expires_at <= now:
                continue
            matched = True
            faces |= pe.arrival_faces
        if not matched:
            self.stats["unsolicited"] += 1
            return []
        self.stats["data_forwarded"] += 1
        self._admit(data, now)
        if len(faces) == 1:
            (f,) = faces
            return [] if f == face else [(data, f)]
        return [(data, f) for f in sorted(faces, key=str) if f != face]

    def _admit(self, data: DataPacket, now: int) -> None:
        cs = self.cs
        if cs.capacity <= 0:
            return
        if self.config.cache_on_first_pass:
            cs.insert(data, now)
            return
        key = data.name.components
        seen = self.seen_once.get(key)
        if seen is not None and seen > now:
            del self.seen_once[key]
            cs.insert(data, now)
        else:
            self.seen_once[key] = now + self.config.admission_window

    def expire(self, now: int) -> Tuple[int, int]:
        """Drop PIT entries expiring at or before ``now`` and stale cache entries."""
        dead = [k for k, e in self.pit.items() if e.expires_at <= now]
        for k in dead:
            del self.pit[k]
        stale = 0 if self.config.serve_stale else self.cs.expire(now)
        for k in [k for k, t in self.seen_once.items() if t <= now]:
            del self.seen_once[k]
        return len(dead), stale

    def references(self, names: Iterable[Name]) -> Set[Name]:
        """Names from ``names`` that still appear anywhere in router state."""
        keys = {n.components: n for n in names}
        found = set()
        for k in list(self.pit) + list(self.cs._entries) + list(self.seen_once):
            if k in keys:
                found.add(keys[k])
        return found

    def snapshot(self) -> dict:
        """Forwarding state only: PIT, content store (in eviction order), seen-once set.

        Counters are diagnostics of the simulator, not state a router keeps.
        """
        pit = [
            {"name": render_name(e.name), "faces": sorted(map(str, e.arrival_faces)),
             "created_at": e.created_at, "expires_at": e.expires_at}
            for _, e in sorted(self.pit.items())
        ]
        cs = [
            {"name": render_name(e.data.name), "payload": e.data.payload.hex(),
             "freshness": e.data.freshness, "inserted_at": e.inserted_at, "stale_at": e.stale_at,
             "last_access": e.last_access, "access_count": e.access_count}
            for e in self.cs._entries.values()
        ]
        if self.cs.policy is not ReplacementPolicy.LRU:
            cs.sort(key=lambda d: d["name"])
        seen = [[render_name(Name(k)), t] for k, t in sorted(self.seen_once.items())]
        return {"node": self.node_id, "pit": pit, "cs": cs, "seen_once": seen}


class Producer:
    """Serves a fixed catalog; prefix interests get the least matching name."""

    def __init__(self, catalog: Optional[Mapping[Name, DataPacket]] = None):
        self._catalog: Dict[Key, DataPacket] = {}
        self._keys: List[Key] = []
        if catalog:
            self.publish(catalog.values())

    def __len__(self) -> int:
        return len(self._catalog)

    def __contains__(self, name: Name) -> bool:
        return name.components in self._catalog

    def publish(self, packets: Iterable[DataPacket]) -> None:
        for d in packets:
            self._catalog[d.name.components] = d
        self._keys = sorted(self._catalog)

    def respond(self, interest: Interest) -> Optional[DataPacket]:
        key = interest.name.components
        hit = self._catalog.get(key)
        if hit is not None:
            return hit
        keys = self._keys
        i = bisect.bisect_left(keys, key)
        if i < len(keys) and keys[i][:len(key)] == key:
            return self._catalog[keys[i]]
        return None


def producer_respond(catalog: Union[Producer, Mapping[Name, DataPacket]], interest: Interest) -> Optional[DataPacket]:
    if isinstance(catalog, Producer):
        return catalog.respond(interest)
    best = None
    for name, data in catalog.items():
        if interest.name.is_prefix_of(name) and (best is None or name < best.name):
            best = data
    return best
