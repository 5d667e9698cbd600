"""IPv6 address and prefix arithmetic on plain 128-bit integers.

Addresses are ``int`` values in ``[0, 2**128)`` with bit 0 being the most
significant bit.  Prefixes are ``(base, length)`` named tuples whose host
bits are always zero.  Everything here is immutable and thread-safe.
"""

from __future__ import annotations

import logging
import re
from typing import Iterable, NamedTuple, Optional, TextIO

log = logging.getLogger(__name__)

ADDR_BITS = 128
ADDR_MAX = (1 << ADDR_BITS) - 1
IID_MASK = (1 << 64) - 1

Address128 = int
InterfaceId = int
MacAddress = int

_HEX_GROUP = re.compile(r"[0-9a-fA-F]{1,4}\Z")
_MAC_TEXT = re.compile(r"([0-9a-fA-F]{1,2})([:-][0-9a-fA-F]{1,2}){5}\Z")


class AddressError(ValueError):
    """Raised for malformed textual addresses, prefixes, and MACs."""


def _bad(text: str, token: str, pos: int, why: str = "") -> AddressError:
    msg = f"invalid IPv6 address {text!r}: bad token {token!r} at position {pos}"
    if why:
        msg += f" ({why})"
    return AddressError(msg)


def _parse_v4(text: str, token: str, pos: int) -> int:
    parts = token.split(".")
    if len(parts) != 4:
        raise _bad(text, token, pos, "embedded IPv4 needs four octets")
    value = 0
    for part in parts:
        if not part.isdigit() or len(part) > 3 or int(part) > 255:
            raise _bad(text, token, pos, "bad IPv4 octet")
        value = (value << 8) | int(part)
    return value


def _parse_groups(text: str, chunk: str, offset: int, allow_v4: bool) -> list[int]:
    if not chunk:
        return []
    groups: list[int] = []
    pos = offset
    tokens = chunk.split(":")
    for n, tok in enumerate(tokens):
        if allow_v4 and n == len(tokens) - 1 and "." in tok:
            v4 = _parse_v4(text, tok, pos)
            groups.extend((v4 >> 16, v4 & 0xFFFF))
        elif _HEX_GROUP.match(tok):
            groups.append(int(tok, 16))
        else:
            raise _bad(text, tok, pos)
        pos += len(tok) + 1
    return groups


def parse_address(text: str) -> Address128:
    """Parse full or compressed IPv6 text (embedded dotted IPv4 allowed)."""
    if not isinstance(text, str) or not text:
        raise AddressError(f"invalid IPv6 address {text!r}: empty")
    dc = text.find("::")
    if dc >= 0:
        second = text.find("::", dc + 1)
        if second >= 0:
            raise _bad(text, "::", second, "more than one '::'")
        head = _parse_groups(text, text[:dc], 0, allow_v4=False)
        tail = _parse_groups(text, text[dc + 2:], dc + 2, allow_v4=True)
        if len(head) + len(tail) > 7:
            raise _bad(text, "::", dc, "too many groups")
        groups = head + [0] * (8 - len(head) - len(tail)) + tail
    else:
        groups = _parse_groups(text, text, 0, allow_v4=True)
        if len(groups) != 8:
            raise _bad(text, text, 0, f"expected 8 groups, got {len(groups)}")
    value = 0
    for g in groups:
        value = (value << 16) | g
    return value


# runs of two or more zero groups; a lone zero group is never compressed
_ZERO_RUN = re.compile(r"(?:^|:)0(?::0)+(?::|$)")


def format_address(a: Address128) -> str:
    """Canonical lowercase, maximally compressed text (RFC 5952 rules)."""
    h = "%032x" % a
    text = ":".join([h[i:i + 4].lstrip("0") or "0" for i in range(0, 32, 4)])
    best = None
    for m in _ZERO_RUN.finditer(text):
        if best is None or len(m.group()) > len(best.group()):
            best = m
    if best is None:
        return text
    return text[:best.start()] + "::" + text[best.end():]


def matching_msb(a: Address128, b: Address128) -> int:
    """Length of the longest common most-significant-bit prefix of a and b."""
    return ADDR_BITS - (a ^ b).bit_length()


def mask_of(length: int) -> int:
    return (ADDR_MAX << (ADDR_BITS - length)) & ADDR_MAX


class Prefix(NamedTuple):
    base: Address128
    length: int

    def contains(self, a: Address128) -> bool:
        shift = ADDR_BITS - self.length
        return (a >> shift) == (self.base >> shift)

    def covers(self, other: "Prefix") -> bool:
        return other.length >= self.length and self.contains(other.base)

    @property
    def size(self) -> int:
        return 1 << (ADDR_BITS - self.length)

    @property
    def last(self) -> Address128:
        return self.base + self.size - 1

    def __str__(self) -> str:
        return f"{format_address(self.base)}/{self.length}"


def subnet_id(a: Address128, length: int) -> Prefix:
    if not 0 <= length <= ADDR_BITS:
        raise ValueError(f"prefix length {length} outside [0, 128]")
    return Prefix(a & mask_of(length), length)


def parse_prefix(text: str) -> Prefix:
    """Parse ``addr/len``; host bits are cleared.  A bare address is a /128."""
    addr, sep, length = text.partition("/")
    if sep:
        if not length.isdigit() or int(length) > ADDR_BITS:
            raise AddressError(f"invalid prefix {text!r}: bad length {length!r}")
        n = int(length)
    else:
        n = ADDR_BITS
    return subnet_id(parse_address(addr), n)


def iid(a: Address128) -> InterfaceId:
    return a & IID_MASK


# EUI-64

def mac_to_eui64(mac: MacAddress) -> InterfaceId:
    """Insert ff:fe between octets 3 and 4 and flip the universal/local bit."""
    hi = (mac >> 24) ^ 0x020000
    return (hi << 40) | (0xFFFE << 24) | (mac & 0xFFFFFF)


def eui64_to_mac(iid_value: InterfaceId, flip_ul: bool = True) -> Optional[MacAddress]:
    """Recover the MAC embedded in an EUI-64 IID, or None for other IIDs.

    With ``flip_ul=False`` the universal/local bit is left as found in the
    IID ("raw" MAC counting).
    """
    if (iid_value >> 24) & 0xFFFF != 0xFFFE:
        return None
    hi = iid_value >> 40
    if flip_ul:
        hi ^= 0x020000
    return (hi << 24) | (iid_value & 0xFFFFFF)


def is_eui64(a: Address128) -> bool:
    return (a >> 24) & 0xFFFF == 0xFFFE


def format_mac(mac: MacAddress) -> str:
    return ":".join("%02x" % ((mac >> (40 - 8 * i)) & 0xFF) for i in range(6))


def parse_mac(text: str) -> MacAddress:
    if not _MAC_TEXT.match(text):
        raise AddressError(f"invalid MAC address {text!r}")
    value = 0
    for part in re.split("[:-]", text):
        value = (value << 8) | int(part, 16)
    return value


def format_iid(value: InterfaceId) -> str:
    return ":".join("%04x" % ((value >> (48 - 16 * i)) & 0xFFFF) for i in range(4))


# Longest-prefix match

class AsnTable:
    """Prefix -> ASN mapping with longest-prefix-match lookup.

    Entries are bucketed by prefix length; a lookup probes each populated
    length from longest to shortest, which is cheap because real tables only
    use a few dozen distinct lengths.
    """

    def __init__(self, entries: Iterable[tuple[Prefix, int]] = ()):
        self._by_len: dict[int, dict[int, int]] = {}
        self._lengths: tuple[int, ...] = ()
        for prefix, asn in entries:
            self.add(prefix, asn)

    def add(self, prefix: Prefix, asn: int) -> None:
        bucket = self._by_len.setdefault(prefix.length, {})
        key = prefix.base >> (ADDR_BITS - prefix.length)
        if key in bucket and bucket[key] != asn:
            log.warning("duplicate prefix %s: AS%d replaces AS%d", prefix, asn, bucket[key])
        bucket[key] = asn
        self._lengths = tuple(sorted(self._by_len, reverse=True))

    def __len__(self) -> int:
        return sum(len(b) for b in self._by_len.values())

    def __bool__(self) -> bool:
        return bool(self._lengths)

    def entries(self) -> list[tuple[Prefix, int]]:
        out = []
        for length in sorted(self._by_len):
            shift = ADDR_BITS - length
            for key, asn in sorted(self._by_len[length].items()):
                out.append((Prefix(key << shift if length else 0, length), asn))
        return out

    def lookup(self, a: Address128) -> Optional[int]:
        for length in self._lengths:
            asn = self._by_len[length].get(a >> (ADDR_BITS - length))
            if asn is not None:
                return asn
        return None

    def lookup_prefix(self, a: Address128) -> Optional[Prefix]:
        for length in self._lengths:
            if (a >> (ADDR_BITS - length)) in self._by_len[length]:
                return subnet_id(a, length)
        return None


def asn_lookup(table: AsnTable, a: Address128) -> Optional[int]:
    return table.lookup(a)


def load_pfx2as(stream: TextIO) -> AsnTable:
    """Read ``prefix<TAB>asn`` lines; ``#`` comments and blank lines skipped.

    Also accepts CAIDA's three-column ``addr<TAB>len<TAB>asn`` layout and an
    ``AS`` prefix on the number.  Multi-origin ASNs (``1_2``) keep the first.
    """
    table = AsnTable()
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            if len(fields) == 3:
                prefix = parse_prefix(f"{fields[0]}/{fields[1]}")
            elif len(fields) == 2:
                prefix = parse_prefix(fields[0])
            else:
                raise ValueError(f"expected 2 or 3 fields, got {len(fields)}")
            asn_text = fields[-1].upper().removeprefix("AS")
            asn = int(re.split("[_,]", asn_text)[0])
            if not 0 <= asn < 1 << 32:
                raise ValueError(f"ASN {asn} out of range")
        except ValueError as exc:
            raise ValueError(f"pfx2as line {lineno}: {exc}") from None
        table.add(prefix, asn)
    return table
