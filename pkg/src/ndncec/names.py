"""Names, interests and data packets.

Names are hierarchical lists of byte components.  The canonical text form
joins components with "/" and percent-escapes anything that is not a
printable, unreserved ASCII byte, so ``parse_name(render_name(n)) == n``
holds for every name.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Tuple, Union

MAX_COMPONENTS = 32
MAX_COMPONENT_BYTES = 255

DEFAULT_INTEREST_BYTES = 41
DEFAULT_DATA_BYTES = 377

_SAFE = frozenset((string.ascii_letters + string.digits + "-._~+=,:@").encode())


class MalformedName(ValueError):
    pass


class Name:
    """Immutable hierarchical name.  Ordered by component tuples."""

    __slots__ = ("components", "_hash")

    def __init__(self, components: Union[str, Iterable[Union[bytes, str]]]):
        if isinstance(components, str):
            components = _split(components)
        comps = tuple(c.encode() if isinstance(c, str) else bytes(c) for c in components)
        if not comps:
            raise MalformedName("a name needs at least one component")
        if len(comps) > MAX_COMPONENTS:
            raise MalformedName(f"{len(comps)} components exceeds cap of {MAX_COMPONENTS}")
        for c in comps:
            if not c:
                raise MalformedName("empty name component")
            if len(c) > MAX_COMPONENT_BYTES:
                raise MalformedName(f"component of {len(c)} bytes exceeds cap of {MAX_COMPONENT_BYTES}")
        self.components: Tuple[bytes, ...] = comps
        self._hash = hash(comps)

    @classmethod
    def _trusted(cls, comps: Tuple[bytes, ...]) -> "Name":
        # skips validation; only for tuples sliced from an existing name
        obj = object.__new__(cls)
        obj.components = comps
        obj._hash = hash(comps)
        return obj

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if isinstance(other, Name):
            return self.components == other.components
        return NotImplemented

    def __lt__(self, other: "Name") -> bool:
        return self.components < other.components

    def __le__(self, other: "Name") -> bool:
        return self.components <= other.components

    def __gt__(self, other: "Name") -> bool:
        return self.components > other.components

    def __ge__(self, other: "Name") -> bool:
        return self.components >= other.components

    def __len__(self) -> int:
        return len(self.components)

    def __str__(self) -> str:
        return render_name(self)

    def __repr__(self) -> str:
        return f"Name({render_name(self)!r})"

    def __reduce__(self):
        return (Name, (self.components,))

    def prefix(self, k: int) -> "Name":
        if not 1 <= k <= len(self.components):
            raise ValueError(f"prefix length {k} out of range for {self}")
        return Name._trusted(self.components[:k])

    def append(self, *components: Union[bytes, str]) -> "Name":
        return Name(self.components + tuple(components))

    def is_prefix_of(self, other: "Name") -> bool:
        return is_prefix_of(self, other)

    def prefixes(self) -> Iterator["Name"]:
        """Yield every prefix, longest (the name itself) first."""
        for k in range(len(self.components), 0, -1):
            yield Name._trusted(self.components[:k])


def _escape(component: bytes) -> str:
    return "".join(chr(b) if b in _SAFE else f"%{b:02X}" for b in component)


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "%":
            hexpart = text[i + 1:i + 3]
            if len(hexpart) != 2:
                raise MalformedName(f"truncated escape in {text!r}")
            try:
                out.append(int(hexpart, 16))
            except ValueError:
                raise MalformedName(f"bad escape %{hexpart} in {text!r}") from None
            i += 3
        else:
            out.extend(ch.encode())
            i += 1
    return bytes(out)


def _split(text: str) -> Tuple[bytes, ...]:
    if not text.startswith("/"):
        raise MalformedName(f"name must start with '/': {text!r}")
    body = text[1:]
    # a single trailing slash is tolerated ("/common/prefix/")
    if body.endswith("/"):
        body = body[:-1]
    if not body:
        raise MalformedName("a name needs at least one component")
    parts = body.split("/")
    if any(p == "" for p in parts):
        raise MalformedName(f"empty component in {text!r}")
    return tuple(_unescape(p) for p in parts)


def parse_name(text: str) -> Name:
    return Name(_split(text))


def render_name(name: Name) -> str:
    return "/" + "/".join(_escape(c) for c in name.components)


def is_prefix_of(p: Name, n: Name) -> bool:
    k = len(p.components)
    return k <= len(n.components) and n.components[:k] == p.components


@dataclass(frozen=True)
class Interest:
    name: Name
    scope: Optional[int] = None
    nonce: int = 0
    wire_size_bytes: int = DEFAULT_INTEREST_BYTES
    # links traversed so far; only consulted when scope is set
    hops: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.scope is not None and self.scope not in (1, 2):
            raise ValueError(f"scope must be 1 or 2, got {self.scope}")
        if not 0 <= self.nonce < 2 ** 64:
            raise ValueError("nonce must fit in 64 bits")
        if self.wire_size_bytes < 1:
            raise ValueError("wire_size_bytes must be >= 1")

    @classmethod
    def _trusted(cls, name: Name, scope: Optional[int], nonce: int, wire_size_bytes: int) -> "Interest":
        """Skip validation; for callers that already checked their inputs."""
        obj = object.__new__(cls)
        obj.__dict__.update(name=name, scope=scope, nonce=nonce, wire_size_bytes=wire_size_bytes, hops=0)
        return obj


@dataclass(frozen=True)
class DataPacket:
    name: Name
    payload: bytes = b""
    freshness: int = 10_000_000_000  # ns
    wire_size_bytes: int = DEFAULT_DATA_BYTES

    def __post_init__(self):
        if self.freshness <= 0:
            raise ValueError("freshness must be positive")
        if self.wire_size_bytes < 1:
            raise ValueError("wire_size_bytes must be >= 1")


def matches(interest: Interest, data: DataPacket) -> bool:
    return is_prefix_of(interest.name, data.name)
