"""Multi-round subnet discovery over candidate /48s.

Each candidate is probed at /56, /60, /62 and /64 granularity in turn, one
target per subnet, all sharing a per-prefix random IID offset.  After each
round the filtered last hops decide whether the prefix advances.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import os
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional

from .filtering import ResponseFilter
from .netcore import Address128, Prefix, format_address, parse_address, parse_prefix
from .prober.base import ProbeBatch, Prober, ProberError

log = logging.getLogger(__name__)

MASKS = (56, 60, 62, 64)
PROBES_PER_ROUND = {m: 1 << (m - 48) for m in MASKS}
FORMAT_VERSION = 1

PENDING = "pending"
ACTIVE = "active"
STOPPED = "stopped"
EXHAUSTED = "exhausted"


class Decision(str, enum.Enum):
    ADVANCE = "advance"
    STOP = "stop"


class CampaignInterrupted(RuntimeError):
    """A round could not be completed; state on disk is resumable."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class CampaignConfig:
    eta1: int = 16
    eta2: int = 256
    rng_seed: int = 0
    max_pps: float = 10_000.0
    max_ttl: int = 32
    min_ttl: int = 1
    spoof_check: bool = True
    alias_file: Optional[str] = None
    pfx2as_file: Optional[str] = None
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("eta thresholds must be non-negative")
        if not 1 <= self.min_ttl <= self.max_ttl:
            raise ValueError(f"bad TTL range [{self.min_ttl}, {self.max_ttl}]")
        if self.max_pps <= 0:
            raise ValueError("max_pps must be positive")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "CampaignConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(names[key].type, raw, key)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(type_name, raw, key):
    if raw is None or not isinstance(raw, str):
        return raw
    t = str(type_name)
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: bad value {raw!r}") from None
    return raw or None


def load_config_file(path) -> dict[str, str]:
    """Read ``key=value`` lines; ``#`` comments and blank lines ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:line {lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


@dataclass(frozen=True)
class LastHopRecord:
    target: Address128
    target_prefix: Prefix
    round_mask: int
    lasthop: Address128
    penultimate: Optional[Address128]
    hop_count: int
    recv_ms: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps({
            "target": format_address(self.target),
            "target_prefix": str(self.target_prefix),
            "round": self.round_mask,
            "lasthop": format_address(self.lasthop),
            "penultimate": None if self.penultimate is None else format_address(self.penultimate),
            "hop_count": self.hop_count,
            "recv_ms": self.recv_ms,
        }, separators=(",", ":"))

    @classmethod
    def from_dict(cls, rec: dict) -> "LastHopRecord":
        pen = rec.get("penultimate")
        return cls(
            parse_address(rec["target"]),
            parse_prefix(rec["target_prefix"]),
            int(rec["round"]),
            parse_address(rec["lasthop"]),
            None if pen is None else parse_address(pen),
            int(rec["hop_count"]),
            rec.get("recv_ms"),
        )


def read_records(stream, source: str = "") -> Iterator[LastHopRecord]:
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            yield LastHopRecord.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            where = f"{source}:" if source else ""
            raise ValueError(f"{where}line {lineno}: bad last-hop record: {exc}") from None


def write_records(records: Iterable[LastHopRecord], stream) -> int:
    n = 0
    for rec in records:
        stream.write(rec.to_json())
        stream.write("\n")
        n += 1
    return n


def generate_round_targets(prefix: Prefix, mask: int, t: int) -> list[Address128]:
    """One target per /mask subnet of a /48: ``base + (i << (128 - mask)) + t``."""
    if mask not in PROBES_PER_ROUND:
        raise ValueError(f"mask {mask} is not one of {MASKS}")
    if prefix.length != 48:
        raise ValueError(f"{prefix} is not a /48")
    if not 0 <= t < 1 << 64:
        raise ValueError("offset t must fit in 64 bits")
    step = 1 << (128 - mask)
    base = prefix.base + t
    return [base + i * step for i in range(1 << (mask - 48))]


def evaluate_round(
    prefix: Prefix,
    round_mask: int,
    filtered_lasthops: Mapping[Address128, Address128],
    eta1: int = 16,
    eta2: int = 256,
    lasthop_target_counts: Optional[Mapping[Address128, int]] = None,
) -> Decision:
    """Advance/stop rule for one prefix after one round.

    ``filtered_lasthops`` maps probe target to its kept last hop.  For the
    /62 round a last hop is prefix-unique when it was seen for exactly one
    target; ``lasthop_target_counts`` carries those counts campaign-wide and
    defaults to counting within ``filtered_lasthops``.
    """
    unique = len(set(filtered_lasthops.values()))
    if round_mask == 56:
        return Decision.ADVANCE if unique > eta1 else Decision.STOP
    if round_mask == 60:
        return Decision.ADVANCE if unique > eta2 else Decision.STOP
    if round_mask == 62:
        counts = lasthop_target_counts
        if counts is None:
            counts = Counter(filtered_lasthops.values())
        per60: dict[int, list[Address128]] = defaultdict(list)
        for target, lh in filtered_lasthops.items():
            if prefix.contains(target):
                per60[target >> 68].append(lh)
        for lhs in per60.values():
            if len(lhs) == 4 and len(set(lhs)) == 4 and all(counts.get(lh, 0) == 1 for lh in lhs):
                return Decision.ADVANCE
        return Decision.STOP
    if round_mask == 64:
        return Decision.STOP
    raise ValueError(f"mask {round_mask} is not one of {MASKS}")


@dataclass
class RoundSummary:
    probes: int
    responses: int
    kept: int
    unique_lasthops: int
    decision: str
    rejected: dict[str, int] = field(default_factory=dict)


@dataclass
class PrefixState:
    status: str
    t: int
    mask: Optional[int] = None
    rounds: dict[int, RoundSummary] = field(default_factory=dict)
    lasthops: dict[int, set[Address128]] = field(default_factory=dict)

    @property
    def next_mask(self) -> Optional[int]:
        if self.status in (STOPPED, EXHAUSTED):
            return None
        for m in MASKS:
            if m not in self.rounds:
                return m
        return None

    @property
    def probes(self) -> int:
        return sum(r.probes for r in self.rounds.values())

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "t": self.t,
            "mask": self.mask,
            "rounds": {str(m): dataclasses.asdict(r) for m, r in sorted(self.rounds.items())},
        }


@dataclass
class CampaignState:
    rng_seed: int
    config: dict
    prefixes: dict[Prefix, PrefixState] = field(default_factory=dict)
    completed: list[tuple[Prefix, int]] = field(default_factory=list)
    records: dict[tuple[Prefix, int], list[LastHopRecord]] = field(default_factory=dict, repr=False)
    # campaign-wide last hop -> distinct targets that produced it
    lasthop_targets: dict[Address128, set[Address128]] = field(default_factory=dict, repr=False)

    @classmethod
    def new(cls, candidates: Iterable[Prefix], config: CampaignConfig) -> "CampaignState":
        state = cls(config.rng_seed, config.to_dict())
        rng = random.Random(config.rng_seed)
        for p in sorted(set(candidates)):
            if p.length != 48:
                raise ValueError(f"candidate {p} is not a /48")
            state.prefixes[p] = PrefixState(PENDING, rng.getrandbits(64))
        return state

    @property
    def status(self) -> str:
        if any(ps.status in (PENDING, ACTIVE) for ps in self.prefixes.values()):
            return ACTIVE
        return EXHAUSTED

    @property
    def total_probes(self) -> int:
        return sum(ps.probes for ps in self.prefixes.values())

    def add_round(self, prefix: Prefix, mask: int, records: list[LastHopRecord],
                  summary: RoundSummary) -> None:
        ps = self.prefixes[prefix]
        ps.rounds[mask] = summary
        ps.lasthops[mask] = {r.lasthop for r in records}
        self.records[(prefix, mask)] = records
        for r in records:
            self.lasthop_targets.setdefault(r.lasthop, set()).add(r.target)
        self.completed.append((prefix, mask))

    def lasthop_target_counts(self) -> "_CountView":
        return _CountView(self.lasthop_targets)

    def iter_records(self) -> Iterator[LastHopRecord]:
        for key in self.completed:
            yield from self.records[key]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "rng_seed": self.rng_seed,
            "config": self.config,
            "prefixes": {str(p): ps.to_dict() for p, ps in sorted(self.prefixes.items())},
            "completed": [[str(p), m] for p, m in self.completed],
        }

    # persistence

    @staticmethod
    def round_file(directory: Path, prefix: Prefix, mask: int) -> Path:
        return Path(directory) / "rounds" / f"{prefix.base >> 80:012x}-{mask}.jsonl"

    def save_round(self, directory, prefix: Prefix, mask: int) -> None:
        path = self.round_file(directory, prefix, mask)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            write_records(self.records[(prefix, mask)], fh)
        os.replace(tmp, path)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "state.json"
        tmp = path.with_name("state.json.tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, directory) -> "CampaignState":
        directory = Path(directory)
        try:
            with open(directory / "state.json", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot load checkpoint from {directory}: {exc}") from exc
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{directory}/state.json: unsupported format_version {doc.get('format_version')!r}")
        state = cls(doc["rng_seed"], doc["config"])
        for text, raw in doc["prefixes"].items():
            ps = PrefixState(raw["status"], raw["t"], raw.get("mask"))
            for m, r in raw["rounds"].items():
                ps.rounds[int(m)] = RoundSummary(**r)
            state.prefixes[parse_prefix(text)] = ps
        for text, mask in doc["completed"]:
            prefix = parse_prefix(text)
            path = cls.round_file(directory, prefix, mask)
            try:
                with open(path, encoding="utf-8") as fh:
                    records = list(read_records(fh, str(path)))
            except OSError as exc:
                raise CheckpointError(f"missing round file {path}: {exc}") from exc
            summary = state.prefixes[prefix].rounds[mask]
            del state.prefixes[prefix].rounds[mask]
            state.add_round(prefix, mask, records, summary)
        return state


class _CountView(Mapping):
    def __init__(self, index: dict[Address128, set]):
        self._index = index

    def __getitem__(self, key):
        return len(self._index[key])

    def get(self, key, default=None):
        s = self._index.get(key)
        return default if s is None else len(s)

    def __iter__(self):
        return iter(self._index)

    def __len__(self):
        return len(self._index)


def make_filter(config: CampaignConfig, aliases=None, routable=None) -> ResponseFilter:
    from .filtering import load_alias_file
    from .netcore import load_pfx2as

    if aliases is None and config.alias_file:
        with open(config.alias_file, encoding="utf-8") as fh:
            aliases = load_alias_file(fh, config.alias_file)
    if routable is None and config.pfx2as_file:
        with open(config.pfx2as_file, encoding="utf-8") as fh:
            routable = load_pfx2as(fh)
    return ResponseFilter(aliases, routable, config.spoof_check)


def run_round(
    prefix: Prefix,
    mask: int,
    t: int,
    prober: Prober,
    rfilter: ResponseFilter,
    config: CampaignConfig,
    epoch: int,
) -> tuple[list[LastHopRecord], RoundSummary]:
    targets = generate_round_targets(prefix, mask, t)
    batch = ProbeBatch(targets, config.max_ttl, config.max_pps, epoch, config.min_ttl,
                       tag=f"{format_address(prefix.base)}-48-r{mask}")
    results = prober.probe(batch)
    if len(results) != len(targets):
        raise ProberError(f"prober returned {len(results)} results for {len(targets)} targets")
    records = []
    rejected: Counter = Counter()
    responses = 0
    for target, trace in zip(targets, results):
        ttl = trace.last_ttl
        if ttl is None:
            continue
        responses += 1
        lh = trace.hops[ttl - 1]
        verdict = rfilter.classify(target, lh, ttl, trace.hops)
        if not verdict.kept:
            rejected[verdict.reason] += 1
            continue
        recv = trace.recv_ms[ttl - 1] if trace.recv_ms is not None else None
        pen = trace.hops[ttl - 2] if ttl >= 2 else None
        records.append(LastHopRecord(target, prefix, mask, lh, pen, ttl, recv))
    summary = RoundSummary(len(targets), responses, len(records),
                           len({r.lasthop for r in records}), "", dict(sorted(rejected.items())))
    return records, summary


def run_campaign(
    candidates: Iterable[Prefix],
    prober: Prober,
    config: Optional[CampaignConfig] = None,
    state: Optional[CampaignState] = None,
    rfilter: Optional[ResponseFilter] = None,
    on_round: Optional[Callable[[Prefix, int, RoundSummary], None]] = None,
) -> CampaignState:
    """Run (or resume) the four probing rounds over ``candidates``.

    Rounds proceed breadth-first: every live prefix finishes /56 before any
    prefix is probed at /60.  With ``config.checkpoint_dir`` set, state is
    written after each (prefix, round); a prober failure saves state and
    raises CampaignInterrupted.
    """
    config = config or CampaignConfig()
    rfilter = rfilter or make_filter(config)
    if state is None:
        state = CampaignState.new(candidates, config)
    elif set(candidates) - set(state.prefixes):
        raise ValueError("resumed state does not cover every candidate prefix")
    ckpt = config.checkpoint_dir
    if ckpt:
        _persist(state, ckpt)

    counts = state.lasthop_target_counts()
    for epoch, mask in enumerate(MASKS):
        for prefix in sorted(state.prefixes):
            ps = state.prefixes[prefix]
            if ps.next_mask != mask:
                continue
            ps.status, ps.mask = ACTIVE, mask
            try:
                records, summary = run_round(prefix, mask, ps.t, prober, rfilter, config, epoch)
            except ProberError as exc:
                if ckpt:
                    _persist(state, ckpt)
                raise CampaignInterrupted(f"{prefix} round /{mask}: {exc}") from exc
            state.add_round(prefix, mask, records, summary)
            decision = evaluate_round(prefix, mask, {r.target: r.lasthop for r in records},
                                      config.eta1, config.eta2, counts)
            summary.decision = decision.value
            if decision is Decision.STOP:
                ps.status = EXHAUSTED if mask == MASKS[-1] else STOPPED
            else:
                ps.status = PENDING
            log.debug("%s /%d: %d probes, %d unique last hops -> %s", prefix, mask,
                      summary.probes, summary.unique_lasthops, decision.value)
            if ckpt:
                state.save_round(ckpt, prefix, mask)
                _persist(state, ckpt)
            if on_round:
                on_round(prefix, mask, summary)
    return state


def _persist(state: CampaignState, directory) -> None:
    try:
        state.save(directory)
    except OSError as exc:
        raise CheckpointError(f"checkpoint write to {directory} failed: {exc}") from exc


def candidate_prefixes(lines: Iterable[str]) -> list[Prefix]:
    """Parse a candidate list (one /48 per line, ``#`` comments allowed)."""
    out = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            p = parse_prefix(line)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if p.length != 48:
            raise ValueError(f"line {lineno}: {p} is not a /48")
        out.append(p)
    return out
