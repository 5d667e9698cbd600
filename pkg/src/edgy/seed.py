"""Trace records, the JSON Lines trace format, and candidate /48 selection."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, TextIO

from .netcore import Address128, AddressError, Prefix, format_address, parse_address, subnet_id


class TraceFormatError(ValueError):
    def __init__(self, msg: str, lineno: Optional[int] = None, source: str = ""):
        where = ""
        if source:
            where = f"{source}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + msg)
        self.lineno = lineno


@dataclass(frozen=True)
class Trace:
    """One traced destination.  ``hops[i]`` is the reply for TTL ``i + 1``;
    ``None`` marks an anonymous hop."""

    dst: Address128
    hops: tuple[Optional[Address128], ...]
    recv_ms: Optional[tuple[Optional[float], ...]] = None

    @property
    def last_ttl(self) -> Optional[int]:
        """TTL of the last responsive hop (1-based), or None."""
        for i in range(len(self.hops) - 1, -1, -1):
            if self.hops[i] is not None:
                return i + 1
        return None

    @property
    def last_hop(self) -> Optional[Address128]:
        ttl = self.last_ttl
        return None if ttl is None else self.hops[ttl - 1]

    @property
    def penultimate(self) -> Optional[Address128]:
        """Reply at the TTL right before the last responsive hop, if any."""
        ttl = self.last_ttl
        if ttl is None or ttl < 2:
            return None
        return self.hops[ttl - 2]

    def intermediate_hops(self) -> set[Address128]:
        ttl = self.last_ttl
        if ttl is None:
            return set()
        return {h for h in self.hops[: ttl - 1] if h is not None}

    def to_json(self) -> str:
        rec: dict = {
            "dst": format_address(self.dst),
            "hops": [None if h is None else format_address(h) for h in self.hops],
        }
        if self.recv_ms is not None:
            rec["recv_ms"] = list(self.recv_ms)
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def anonymous(cls, dst: Address128, length: int = 0) -> "Trace":
        return cls(dst, (None,) * length)


# Seeds and prober results share one shape.
SeedTrace = Trace
TraceResult = Trace


def _addr_field(value, name: str) -> Address128:
    if not isinstance(value, str):
        raise ValueError(f"field {name!r}: expected address string, got {value!r}")
    try:
        return parse_address(value)
    except AddressError as exc:
        raise ValueError(f"field {name!r}: {exc}") from None


def trace_from_record(rec: dict) -> Trace:
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    if "dst" not in rec:
        raise ValueError("missing field 'dst'")
    dst = _addr_field(rec["dst"], "dst")
    raw_hops = rec.get("hops", [])
    if not isinstance(raw_hops, list):
        raise ValueError("field 'hops' is not an array")
    hops = tuple(
        None if h is None else _addr_field(h, f"hops[{i}]") for i, h in enumerate(raw_hops)
    )
    recv = rec.get("recv_ms")
    if recv is not None:
        if not isinstance(recv, list) or len(recv) != len(hops):
            raise ValueError("field 'recv_ms' must be an array aligned with 'hops'")
        recv = tuple(recv)
    return Trace(dst, hops, recv)


def iter_traces(stream: TextIO, source: str = "") -> Iterator[Trace]:
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"malformed JSON: {exc.msg}", lineno, source) from None
        try:
            yield trace_from_record(rec)
        except ValueError as exc:
            raise TraceFormatError(str(exc), lineno, source) from None


def parse_seed_file(stream: TextIO, source: str = "") -> list[Trace]:
    return list(iter_traces(stream, source))


def write_traces(traces: Iterable[Trace], stream: TextIO) -> None:
    for t in traces:
        stream.write(t.to_json())
        stream.write("\n")


@dataclass
class CandidateSet:
    prefixes: set[Prefix] = field(default_factory=set)
    provenance: dict[Prefix, set[Address128]] = field(default_factory=dict)

    def sorted(self) -> list[Prefix]:
        return sorted(self.prefixes)

    def __len__(self) -> int:
        return len(self.prefixes)

    def __iter__(self):
        return iter(self.sorted())

    def provenance_json(self) -> dict:
        return {
            str(p): sorted(format_address(a) for a in self.provenance.get(p, ()))
            for p in self.sorted()
        }


def discover_init(traces: Iterable[Trace]) -> CandidateSet:
    """Select /48s nominated by a last hop seen from that /48 only."""
    density: dict[Address128, set[Prefix]] = defaultdict(set)
    for trace in traces:
        lh = trace.last_hop
        if lh is None:
            continue
        density[lh].add(subnet_id(trace.dst, 48))
    out = CandidateSet()
    for lh, dst48s in density.items():
        if len(dst48s) == 1:
            (p,) = dst48s
            out.prefixes.add(p)
            out.provenance.setdefault(p, set()).add(lh)
    return out
