"""Discard aliased, bogus and self replies before anything is counted."""

from __future__ import annotations

from typing import Iterable, NamedTuple, Optional, Sequence, TextIO

from .netcore import (
    ADDR_BITS,
    Address128,
    AddressError,
    AsnTable,
    Prefix,
    matching_msb,
    parse_prefix,
)

OK = "ok"
SELF_RESPONSE = "self_response"
ALIAS = "alias"
LINK_LOCAL = "link_local"
SITE_LOCAL = "site_local"
V4_IN_V6 = "v4_in_v6"
UNROUTABLE = "unroutable"
SPOOF_SUSPECT = "spoof_suspect"

REASONS = (OK, SELF_RESPONSE, ALIAS, LINK_LOCAL, SITE_LOCAL, V4_IN_V6, UNROUTABLE, SPOOF_SUSPECT)

LINK_LOCAL_NET = parse_prefix("fe80::/10")
SITE_LOCAL_NET = parse_prefix("fec0::/10")
V4_EMBEDDED_NETS = (
    parse_prefix("::ffff:0:0/96"),  # IPv4-mapped
    parse_prefix("::/96"),  # IPv4-compatible (deprecated)
    parse_prefix("64:ff9b::/96"),  # well-known NAT64
)

SPOOF_MSB_LIMIT = 16

_LINK_LOCAL_TOP = LINK_LOCAL_NET.base >> 118
_SITE_LOCAL_TOP = SITE_LOCAL_NET.base >> 118
_V4_EMBEDDED_TOPS = frozenset(net.base >> 32 for net in V4_EMBEDDED_NETS)


class AliasSet:
    """Union of aliased prefixes with containment queries."""

    def __init__(self, prefixes: Iterable[Prefix] = ()):
        self._by_len: dict[int, set[int]] = {}
        self.prefixes: set[Prefix] = set()
        self._lengths: list[int] = []
        for p in prefixes:
            self.add(p)

    def add(self, prefix: Prefix) -> None:
        self.prefixes.add(prefix)
        self._by_len.setdefault(prefix.length, set()).add(prefix.base >> (ADDR_BITS - prefix.length))
        self._lengths = sorted(self._by_len)

    def is_alias(self, a: Address128) -> bool:
        for length in self._lengths:
            if (a >> (ADDR_BITS - length)) in self._by_len[length]:
                return True
        return False

    __contains__ = is_alias

    def __len__(self) -> int:
        return len(self.prefixes)


def load_alias_file(stream: TextIO, source: str = "") -> AliasSet:
    aliases = AliasSet()
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            aliases.add(parse_prefix(line.split()[0]))
        except AddressError as exc:
            where = f"{source}:" if source else ""
            raise ValueError(f"{where}line {lineno}: {exc}") from None
    return aliases


class ResponseVerdict(NamedTuple):
    kept: bool
    reason: str


_VERDICTS = {r: ResponseVerdict(r == OK, r) for r in REASONS}


def looks_spoofed(
    target: Address128,
    lasthop: Address128,
    hop_count: int,
    hops: Sequence[Optional[Address128]],
) -> bool:
    """Reply unrelated to the target and to every other hop of its trace,
    arriving at a hop count below that of another responsive hop."""
    if matching_msb(target, lasthop) >= SPOOF_MSB_LIMIT:
        return False
    others = [(ttl, h) for ttl, h in enumerate(hops, 1) if h is not None and h != lasthop]
    if not others:
        return False
    if any(matching_msb(h, lasthop) >= SPOOF_MSB_LIMIT for _, h in others):
        return False
    return any(ttl > hop_count for ttl, _ in others)


def classify_response(
    target: Address128,
    lasthop: Address128,
    hop_count: int,
    aliases: AliasSet,
    routable: AsnTable,
    hops: Optional[Sequence[Optional[Address128]]] = None,
    spoof_check: bool = True,
) -> ResponseVerdict:
    """First matching rule wins.  The spoof rule needs the full hop list."""
    if lasthop == target:
        return _VERDICTS[SELF_RESPONSE]
    if aliases.is_alias(lasthop):
        return _VERDICTS[ALIAS]
    top10 = lasthop >> 118
    if top10 == _LINK_LOCAL_TOP:
        return _VERDICTS[LINK_LOCAL]
    if top10 == _SITE_LOCAL_TOP:
        return _VERDICTS[SITE_LOCAL]
    if (lasthop >> 32) in _V4_EMBEDDED_TOPS:
        return _VERDICTS[V4_IN_V6]
    # an empty table means "no routability data", not "nothing is routed"
    if routable and routable.lookup(lasthop) is None:
        return _VERDICTS[UNROUTABLE]
    if spoof_check and hops is not None and looks_spoofed(target, lasthop, hop_count, hops):
        return _VERDICTS[SPOOF_SUSPECT]
    return _VERDICTS[OK]


class ResponseFilter:
    """classify_response with its tables bound."""

    def __init__(self, aliases: Optional[AliasSet] = None, routable: Optional[AsnTable] = None,
                 spoof_check: bool = True):
        self.aliases = aliases if aliases is not None else AliasSet()
        self.routable = routable if routable is not None else AsnTable()
        self.spoof_check = spoof_check

    def classify(self, target, lasthop, hop_count, hops=None) -> ResponseVerdict:
        return classify_response(target, lasthop, hop_count, self.aliases, self.routable,
                                 hops, self.spoof_check)
