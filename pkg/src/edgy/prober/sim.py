"""Deterministic ground-truth network for exercising the campaign offline.

A provider owns a core prefix, a chain of ``core_depth`` core routers, one
aggregation router per target /48 and the CPEs of the subnets it delegates
inside those /48s.  A trace to a delegated address walks the core chain,
the aggregation router and ends at the CPE serving that subnet.  Targets in
undelegated space stop at the aggregation router; aliased prefixes answer
from a fixed responder inside the alias prefix.

All randomness is derived from ``(seed, provider, ...)`` by hashing, so
responses depend only on the spec, the seed and the probe sequence.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import random
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Union

from ..filtering import AliasSet
from ..netcore import (
    Address128,
    AddressError,
    AsnTable,
    Prefix,
    mac_to_eui64,
    parse_mac,
    parse_prefix,
)
from ..seed import Trace
from .base import ProbeBatch

UNITS_PER_48 = 1 << 16  # /64s in a /48
_EIGHT_U64 = struct.Struct(">8Q")


class SimSpecError(ValueError):
    pass


def _interval_us(rate_hint: float) -> int:
    # integer microseconds keep the clock exact under fast_forward
    return max(1, round(1_000_000 / rate_hint))


def _h64(*parts: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p.to_bytes(17, "big", signed=True))
    return int.from_bytes(h.digest(), "big")


def _draws(n: int, *parts: int) -> list[int]:
    """``n`` independent 64-bit values for one key, eight per digest."""
    key = b"".join(p.to_bytes(17, "big", signed=True) for p in parts)
    out: list[int] = []
    block = 0
    while len(out) < n:
        digest = hashlib.blake2b(key + block.to_bytes(4, "big"), digest_size=64).digest()
        out.extend(_EIGHT_U64.unpack(digest))
        block += 1
    return out[:n]


@dataclass
class Group:
    """A run of ``count`` equal-sized delegations starting at /64 offset ``start``."""

    length: int
    start: int
    count: int
    ordinal0: int = 0
    stride: int = 1
    unit: int = field(init=False)
    end: int = field(init=False)

    def __post_init__(self):
        self.unit = 1 << (64 - self.length)
        self.end = self.start + self.count * self.unit


@dataclass
class Layout:
    prefix: Prefix
    index: int
    groups: list[Group]
    agg: Address128 = 0
    _starts: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.groups.sort(key=lambda g: g.start)
        self._starts = [g.start for g in self.groups]
        prev_end = 0
        for g in self.groups:
            if g.start < prev_end:
                raise SimSpecError(f"{self.prefix}: overlapping delegations")
            if g.start % g.unit:
                raise SimSpecError(f"{self.prefix}: /{g.length} block misaligned")
            prev_end = g.end
        if prev_end > UNITS_PER_48:
            raise SimSpecError(f"{self.prefix}: delegations exceed the /48")

    def locate(self, unit64: int) -> Optional[tuple[Group, int]]:
        i = bisect.bisect_right(self._starts, unit64) - 1
        if i < 0:
            return None
        g = self.groups[i]
        if unit64 >= g.end:
            return None
        return g, (unit64 - g.start) // g.unit

    @property
    def cpe_count(self) -> int:
        return sum(g.count for g in self.groups)


def _parse_policy(policy: Any, p48: Prefix, where: str) -> list[Group]:
    if isinstance(policy, str):
        if not policy.startswith("uniform"):
            raise SimSpecError(f"{where}: unknown delegation policy {policy!r}")
        policy = {"kind": "uniform", "length": policy[len("uniform"):]}
    if not isinstance(policy, dict) or "kind" not in policy:
        raise SimSpecError(f"{where}: delegation policy must be a string or an object with 'kind'")
    kind = policy["kind"]
    if kind == "uniform":
        try:
            length = int(policy["length"])
        except (KeyError, ValueError):
            raise SimSpecError(f"{where}: uniform policy needs an integer length") from None
        if not 48 <= length <= 64:
            raise SimSpecError(f"{where}: delegation length {length} outside [48, 64]")
        return [Group(length, 0, 1 << (length - 48))]
    if kind == "mixed":
        blocks = policy.get("blocks")
        if not blocks:
            raise SimSpecError(f"{where}: mixed policy needs 'blocks'")
        groups = []
        start = 0
        # coarsest blocks first keeps every block aligned to its own size
        for entry in sorted(blocks, key=lambda b: b[0]):
            length, fraction = int(entry[0]), float(entry[1])
            if not 48 <= length <= 64:
                raise SimSpecError(f"{where}: delegation length {length} outside [48, 64]")
            units = fraction * UNITS_PER_48
            unit = 1 << (64 - length)
            count = round(units / unit)
            if count <= 0 or not math.isclose(count * unit, units, abs_tol=1e-6):
                raise SimSpecError(
                    f"{where}: fraction {fraction} is not a whole number of /{length} blocks")
            groups.append(Group(length, start, count))
            start += count * unit
        if start != UNITS_PER_48:
            raise SimSpecError(f"{where}: mixed fractions must sum to 1 (cover {start}/65536 /64s)")
        return groups
    if kind == "explicit":
        groups = []
        for text in policy.get("subnets", []):
            try:
                sub = parse_prefix(text)
            except AddressError as exc:
                raise SimSpecError(f"{where}: {exc}") from None
            if not 48 <= sub.length <= 64 or not p48.covers(sub):
                raise SimSpecError(f"{where}: {sub} is not a /48../64 inside {p48}")
            groups.append(Group(sub.length, (sub.base >> 64) & 0xFFFF, 1))
        return groups
    raise SimSpecError(f"{where}: unknown delegation policy kind {kind!r}")


@dataclass
class Provider:
    index: int
    asn: int
    core_prefix: Prefix
    core_depth: int
    layouts: list[Layout]
    iid_kind: str
    iid_constant: int = 1
    mac_pool: list[int] = field(default_factory=list)
    alias_prefixes: list[Prefix] = field(default_factory=list)
    rotation_period: Optional[int] = None
    anon_prob: float = 0.0
    rate_limit: Optional[int] = None
    core_hops: tuple[Address128, ...] = ()
    rtt_ms: float = 0.0
    _iids: dict = field(default_factory=dict, repr=False)

    def cpe_iid(self, ordinal: int, seed: int) -> int:
        value = self._iids.get(ordinal)
        if value is not None:
            return value
        if self.iid_kind == "eui64":
            value = mac_to_eui64(self.mac_pool[ordinal % len(self.mac_pool)])
        elif self.iid_kind == "low_entropy":
            value = self.iid_constant
        else:
            value = _h64(seed, self.index, 1, ordinal)
            if (value >> 24) & 0xFFFF == 0xFFFE:
                value ^= 1 << 24
        self._iids[ordinal] = value
        return value

    def epoch_shift(self, epoch: int) -> int:
        if not self.rotation_period:
            return 0
        return epoch // self.rotation_period


class SimNetwork:
    """Materialized simulator; also the ``probe`` backend."""

    def __init__(self, providers: list[Provider], seed: int, spec: Optional[dict] = None):
        self.providers = providers
        self.seed = seed
        self.spec = spec or {}
        self._by48: dict[int, tuple[Provider, Layout]] = {}
        for prov in providers:
            for lay in prov.layouts:
                key = lay.prefix.base >> 80
                if key in self._by48:
                    raise SimSpecError(f"{lay.prefix} appears in more than one target pool")
                self._by48[key] = (prov, lay)
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        """Rewind clock, probe counter and rate-limit windows."""
        self.clock_us = 0
        self.probe_seq = 0
        self._windows: dict[int, deque] = {p.index: deque() for p in self.providers}

    def fast_forward(self, probes: int, rate_hint: float) -> None:
        """Advance the clock as if ``probes`` had been sent at ``rate_hint``.

        A resumed campaign calls this with its completed probe count so that
        timestamps continue where the interrupted run left off.  Rate-limit
        windows are not reconstructed.
        """
        self.clock_us += probes * _interval_us(rate_hint)
        self.probe_seq += probes

    # ground truth

    def owner(self, a: Address128) -> Optional[Provider]:
        hit = self._by48.get(a >> 80)
        if hit is not None:
            return hit[0]
        best = None
        for prov in self.providers:
            if prov.core_prefix.contains(a) and (best is None or
                                                 prov.core_prefix.length > best.core_prefix.length):
                best = prov
        return best

    def layout(self, p48: Prefix) -> Optional[Layout]:
        hit = self._by48.get(p48.base >> 80)
        return hit[1] if hit else None

    def _alias_responder(self, prov: Provider, a: Address128) -> Optional[Address128]:
        for ap in prov.alias_prefixes:
            if ap.contains(a):
                return ap.base | 1
        return None

    def _cpe(self, prov: Provider, lay: Layout, g: Group, slot: int, epoch: int) -> Address128:
        j = (slot - prov.epoch_shift(epoch) * g.stride) % g.count
        iid_value = prov.cpe_iid(g.ordinal0 + j, self.seed)
        return lay.prefix.base | ((g.start + slot * g.unit) << 64) | iid_value

    def ground_truth_lasthop(self, a: Address128, epoch: int = 0) -> Optional[Address128]:
        """Last hop a loss-free, unlimited probe to ``a`` would return."""
        hit = self._by48.get(a >> 80)
        if hit is None:
            prov = self.owner(a)
            return prov.core_hops[-1] if prov and prov.core_hops else None
        prov, lay = hit
        alias = self._alias_responder(prov, a)
        if alias is not None:
            return alias
        loc = lay.locate((a >> 64) & 0xFFFF)
        if loc is None:
            return lay.agg
        return self._cpe(prov, lay, loc[0], loc[1], epoch)

    def delegations(self, p48: Prefix, epoch: int = 0) -> Iterator[tuple[Prefix, Address128]]:
        """Yield (delegated subnet, CPE address) for every delegation in a /48."""
        hit = self._by48.get(p48.base >> 80)
        if hit is None:
            return
        prov, lay = hit
        for g in lay.groups:
            for slot in range(g.count):
                base = lay.prefix.base | ((g.start + slot * g.unit) << 64)
                yield Prefix(base, g.length), self._cpe(prov, lay, g, slot, epoch)

    def cpe_ordinal(self, p48: Prefix, unit64: int, epoch: int = 0) -> Optional[int]:
        hit = self._by48.get(p48.base >> 80)
        if hit is None:
            return None
        prov, lay = hit
        loc = lay.locate(unit64)
        if loc is None:
            return None
        g, slot = loc
        return g.ordinal0 + (slot - prov.epoch_shift(epoch) * g.stride) % g.count

    def asn_table(self) -> AsnTable:
        table = AsnTable()
        for prov in self.providers:
            table.add(prov.core_prefix, prov.asn)
            for lay in prov.layouts:
                if not prov.core_prefix.covers(lay.prefix):
                    table.add(lay.prefix, prov.asn)
            for ap in prov.alias_prefixes:
                if table.lookup(ap.base) is None:
                    table.add(ap, prov.asn)
        return table

    def alias_set(self) -> AliasSet:
        return AliasSet(ap for prov in self.providers for ap in prov.alias_prefixes)

    def target_prefixes(self) -> list[Prefix]:
        return [lay.prefix for prov in self.providers for lay in prov.layouts]

    # probing

    def _path(self, a: Address128, epoch: int) -> tuple[Optional[Provider], tuple]:
        hit = self._by48.get(a >> 80)
        if hit is None:
            prov = self.owner(a)
            if prov is None:
                return None, ()
            return prov, prov.core_hops
        prov, lay = hit
        last = self._alias_responder(prov, a)
        if last is None:
            loc = lay.locate((a >> 64) & 0xFFFF)
            if loc is None:
                return prov, prov.core_hops + (lay.agg,)
            last = self._cpe(prov, lay, loc[0], loc[1], epoch)
        return prov, prov.core_hops + (lay.agg, last)

    def probe(self, batch: ProbeBatch) -> list[Trace]:
        step = _interval_us(batch.rate_hint)
        with self._lock:
            return [self._probe_one(a, batch, step) for a in batch.targets]

    def _probe_one(self, a: Address128, batch: ProbeBatch, step: int) -> Trace:
        send_ms = self.clock_us / 1000.0
        self.clock_us += step
        self.probe_seq += 1
        prov, path = self._path(a, batch.epoch)
        if prov is None or not path:
            return Trace(a, ())
        path = path[: batch.max_ttl]
        hops = list(path)
        for ttl in range(1, batch.min_ttl):
            if ttl <= len(hops):
                hops[ttl - 1] = None
        if prov.anon_prob > 0:
            threshold = prov.anon_prob * 2.0 ** 64
            # keyed on (target, epoch) so replays and resumed runs lose the same hops
            for i, draw in enumerate(_draws(len(hops), self.seed, prov.index, 2, a, batch.epoch)):
                if hops[i] is not None and draw < threshold:
                    hops[i] = None
        recv = send_ms + prov.rtt_ms
        if prov.rate_limit is not None:
            window = self._windows[prov.index]
            while window and recv - window[0] >= 1000.0:
                window.popleft()
            for i in range(len(hops)):
                if hops[i] is None:
                    continue
                if len(window) >= prov.rate_limit:
                    hops[i] = None
                else:
                    window.append(recv)
        stamp = round(recv, 3)
        return Trace(a, tuple(hops), tuple(None if h is None else stamp for h in hops))


def _field(obj: dict, key: str, where: str, default: Any = ...):
    if key in obj:
        return obj[key]
    if default is ...:
        raise SimSpecError(f"{where}: missing field {key!r}")
    return default


def _build_provider(index: int, raw: dict, seed: int) -> Provider:
    where = f"providers[{index}]"
    if not isinstance(raw, dict):
        raise SimSpecError(f"{where}: expected an object")
    try:
        asn = int(_field(raw, "asn", where))
        core_prefix = parse_prefix(_field(raw, "core_prefix", where))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, SimSpecError):
            raise
        raise SimSpecError(f"{where}: {exc}") from None
    if core_prefix.length > 96:
        raise SimSpecError(f"{where}: core_prefix must be /96 or shorter")
    core_depth = int(_field(raw, "core_depth", where, 2))
    if core_depth < 0:
        raise SimSpecError(f"{where}: core_depth must be >= 0")

    default_policy = _field(raw, "delegation_policy", where, "uniform56")
    try:
        overrides = {parse_prefix(k): v for k, v in _field(raw, "delegation", where, {}).items()}
    except AddressError as exc:
        raise SimSpecError(f"{where}.delegation: {exc}") from None
    pool = _field(raw, "target_pool", where, [])
    if not isinstance(pool, list):
        raise SimSpecError(f"{where}: target_pool must be a list")
    layouts = []
    for i, text in enumerate(pool):
        try:
            p48 = parse_prefix(text)
        except AddressError as exc:
            raise SimSpecError(f"{where}.target_pool[{i}]: {exc}") from None
        if p48.length != 48:
            raise SimSpecError(f"{where}.target_pool[{i}]: {p48} is not a /48")
        policy = overrides.get(p48, default_policy)
        layouts.append(Layout(p48, i, _parse_policy(policy, p48, f"{where} {p48}")))
    stray = set(overrides) - {lay.prefix for lay in layouts}
    if stray:
        raise SimSpecError(f"{where}: delegation given for prefixes outside target_pool: "
                           + ", ".join(str(p) for p in sorted(stray)))

    style = _field(raw, "iid_style", where, "random")
    if isinstance(style, str):
        style = {"kind": style}
    kind = style.get("kind")
    mac_pool: list[int] = []
    constant = 1
    if kind == "eui64":
        spec_pool = style.get("mac_pool", 0)
        rng = random.Random(_h64(seed, index, 3))
        if isinstance(spec_pool, int):
            if spec_pool <= 0:
                raise SimSpecError(f"{where}: eui64 mac_pool must be a positive size or a list")
            seen: set[int] = set()
            while len(mac_pool) < spec_pool:
                mac = rng.getrandbits(48) & ~(0x03 << 40)
                if mac not in seen:
                    seen.add(mac)
                    mac_pool.append(mac)
        elif isinstance(spec_pool, list) and spec_pool:
            try:
                mac_pool = [parse_mac(m) for m in spec_pool]
            except AddressError as exc:
                raise SimSpecError(f"{where}: {exc}") from None
        else:
            raise SimSpecError(f"{where}: eui64 mac_pool must be a positive size or a list")
    elif kind == "low_entropy":
        constant = int(style.get("constant", 1))
        if not 0 <= constant < 1 << 64:
            raise SimSpecError(f"{where}: low_entropy constant must fit in 64 bits")
    elif kind != "random":
        raise SimSpecError(f"{where}: unknown iid_style {kind!r}")

    aliases = []
    for text in _field(raw, "alias_prefixes", where, []):
        try:
            aliases.append(parse_prefix(text))
        except AddressError as exc:
            raise SimSpecError(f"{where}.alias_prefixes: {exc}") from None

    rotation = _field(raw, "rotation", where, None)
    period = None
    if rotation is not None:
        period = int(rotation.get("period_rounds", 1))
        if period < 1:
            raise SimSpecError(f"{where}: rotation period_rounds must be >= 1")
        if int(rotation.get("rotate_bits", 16)) != 16:
            raise SimSpecError(f"{where}: only rotate_bits = 16 (the /48../64 subnet bits) is modeled")

    anon_prob = float(_field(raw, "anon_prob", where, 0.0))
    if not 0.0 <= anon_prob <= 1.0:
        raise SimSpecError(f"{where}: anon_prob must lie in [0, 1]")
    rate_limit = _field(raw, "rate_limit", where, None)
    if rate_limit is not None:
        rate_limit = int(rate_limit)
        if rate_limit < 0:
            raise SimSpecError(f"{where}: rate_limit must be >= 0")

    ordinal = 0
    for lay in layouts:
        lay.agg = core_prefix.base | ((lay.index + 1) << 16) | 1
        for gi, g in enumerate(lay.groups):
            g.ordinal0 = ordinal
            ordinal += g.count
            stride = (_h64(seed, index, 4, lay.index, gi) % g.count) | 1 if g.count > 1 else 1
            while math.gcd(stride, g.count) != 1:
                stride += 1
            g.stride = stride
    core_hops = tuple(core_prefix.base | k for k in range(1, core_depth + 1))
    return Provider(index, asn, core_prefix, core_depth, layouts, kind, constant, mac_pool,
                    aliases, period, anon_prob, rate_limit, core_hops,
                    rtt_ms=10.0 + 2.0 * core_depth)


def build_sim_network(spec: Union[dict, str], seed: Optional[int] = None) -> SimNetwork:
    """Materialize a simulator from a spec dict, JSON text, or a path to a JSON file."""
    if isinstance(spec, str):
        text = spec
        if not spec.lstrip().startswith("{"):
            with open(spec, encoding="utf-8") as fh:
                text = fh.read()
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SimSpecError(f"simulator spec is not valid JSON: {exc}") from None
    if not isinstance(spec, dict):
        raise SimSpecError("simulator spec must be a JSON object")
    if seed is None:
        seed = int(spec.get("seed", 0))
    raw_providers = spec.get("providers", [])
    if not isinstance(raw_providers, list):
        raise SimSpecError("'providers' must be a list")
    providers = [_build_provider(i, raw, seed) for i, raw in enumerate(raw_providers)]
    return SimNetwork(providers, seed, spec)
