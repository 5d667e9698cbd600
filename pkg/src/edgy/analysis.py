"""Metrics over last-hop records: EUI-64/MAC statistics, IID entropy,
edginess, eta sensitivity, and subnet-boundary detection."""

from __future__ import annotations

import csv
import json
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .campaign import CampaignConfig, LastHopRecord, run_round
from .filtering import ResponseFilter
from .netcore import (
    ADDR_MAX,
    Address128,
    AsnTable,
    Prefix,
    eui64_to_mac,
    format_address,
    format_mac,
    iid,
    mask_of,
    matching_msb,
    subnet_id,
)
from .prober.base import ProbeBatch, Prober
from .seed import Trace

MSB_DOMAIN = 129


# EUI-64

def eui64_stats(records: Iterable[LastHopRecord], flip_ul: bool = True) -> tuple[int, dict[int, int]]:
    """Count distinct EUI-64 last hops and how many of them carry each MAC."""
    lasthops = {r.lasthop for r in records}
    hist: Counter = Counter()
    n = 0
    for a in lasthops:
        mac = eui64_to_mac(iid(a), flip_ul)
        if mac is not None:
            n += 1
            hist[mac] += 1
    return n, dict(hist)


# entropy

def iid_entropy(addr: Address128) -> float:
    """Shannon entropy of the IID's 16 nybbles, normalized to [0, 1]."""
    low = iid(addr)
    counts = Counter((low >> (4 * i)) & 0xF for i in range(16))
    h = 0.0
    for c in counts.values():
        p = c / 16
        h -= p * math.log2(p)
    return h / 4.0


# edginess

@dataclass
class EdginessReport:
    same_as_fraction: Optional[float]
    msb_histogram: list[int]
    periphery_only_fraction: Optional[float]
    unique_lasthops: int
    unique_final_edges: int
    scored: int
    flagged_lasthops: list[Address128] = field(default_factory=list)

    @property
    def median_msb(self) -> Optional[int]:
        if not self.scored:
            return None
        half = (self.scored + 1) // 2
        acc = 0
        for bits, n in enumerate(self.msb_histogram):
            acc += n
            if acc >= half:
                return bits
        return None


def records_from_traces(traces: Iterable[Trace]) -> list[LastHopRecord]:
    """Last-hop records for a corpus that only has full traces (no filtering)."""
    out = []
    for tr in traces:
        ttl = tr.last_ttl
        if ttl is None:
            continue
        recv = tr.recv_ms[ttl - 1] if tr.recv_ms is not None else None
        out.append(LastHopRecord(tr.dst, subnet_id(tr.dst, 48), 0, tr.hops[ttl - 1],
                                 tr.penultimate, ttl, recv))
    return out


def flag_busy_lasthops(records: Sequence[LastHopRecord], max_targets: int = 256,
                       window_ms: float = 60_000.0) -> list[Address128]:
    """Last hops answering for more than ``max_targets`` distinct targets
    within ``window_ms``: likely provider infrastructure or rotation churn."""
    seen: dict[Address128, list[tuple[float, Address128]]] = defaultdict(list)
    for r in records:
        seen[r.lasthop].append((r.recv_ms if r.recv_ms is not None else 0.0, r.target))
    flagged = []
    for lh, hits in seen.items():
        if len({t for _, t in hits}) <= max_targets:
            continue
        hits.sort()
        lo = 0
        window: Counter = Counter()
        for hi, (when, target) in enumerate(hits):
            window[target] += 1
            while when - hits[lo][0] > window_ms:
                old = hits[lo][1]
                window[old] -= 1
                if not window[old]:
                    del window[old]
                lo += 1
            if len(window) > max_targets:
                flagged.append(lh)
                break
    return sorted(flagged)


def edginess(
    records: Sequence[LastHopRecord],
    traces: Optional[Iterable[Trace]] = None,
    asn_table: Optional[AsnTable] = None,
    flag_targets: int = 256,
    flag_window_ms: float = 60_000.0,
) -> EdginessReport:
    """Same-AS fraction, target/last-hop matching-MSB histogram, and the share
    of last hops never seen as an intermediate hop of any trace in ``traces``.

    ``same_as_fraction`` is None without ASN data and
    ``periphery_only_fraction`` is None without traces.
    """
    hist = [0] * MSB_DOMAIN
    same = 0
    for r in records:
        hist[matching_msb(r.target, r.lasthop)] += 1
        if asn_table:
            asn = asn_table.lookup(r.lasthop)
            if asn is not None and asn == asn_table.lookup(r.target):
                same += 1
    scored = len(records)
    lasthops = {r.lasthop for r in records}
    edges = {(r.penultimate, r.lasthop) for r in records if r.penultimate is not None}

    same_frac = None
    if asn_table and scored:
        same_frac = same / scored
    periphery = None
    if traces is not None:
        intermediate: set[Address128] = set()
        for tr in traces:
            intermediate |= tr.intermediate_hops()
        if lasthops:
            periphery = len(lasthops - intermediate) / len(lasthops)
    return EdginessReport(same_frac, hist, periphery, len(lasthops), len(edges), scored,
                          flag_busy_lasthops(records, flag_targets, flag_window_ms))


# eta sensitivity

@dataclass(frozen=True)
class EtaSweepRow:
    eta: int
    selected_prefixes: int
    unique_lasthops: int
    probes_per_lasthop: Optional[float]
    projected: bool = False


def eta_sweep(
    round1_lasthops: Mapping[Prefix, set[Address128]],
    etas: Sequence[int],
    probes_per_prefix_next_round: int = 4096,
    round2_lasthops: Optional[Mapping[Prefix, set[Address128]]] = None,
) -> list[EtaSweepRow]:
    """Prefixes selected at each eta (round-1 count > eta) and the last hops
    the next round finds on that selection.

    Without ``round2_lasthops`` (or for prefixes missing from it) the
    round-1 last hops stand in, and the row is marked ``projected``.
    """
    if list(etas) != sorted(etas):
        raise ValueError("etas must be sorted ascending")
    rows = []
    for eta in etas:
        selected = [p for p, lhs in round1_lasthops.items() if len(lhs) > eta]
        found: set[Address128] = set()
        projected = False
        for p in selected:
            if round2_lasthops is not None and p in round2_lasthops:
                found |= round2_lasthops[p]
            else:
                found |= round1_lasthops[p]
                projected = True
        probes = len(selected) * probes_per_prefix_next_round
        ratio = probes / len(found) if found else None
        rows.append(EtaSweepRow(eta, len(selected), len(found), ratio, projected))
    return rows


def sweep_with_prober(
    prefixes: Iterable[Prefix],
    prober: Prober,
    etas: Sequence[int] = (4, 8, 16, 32, 64, 128),
    config: Optional[CampaignConfig] = None,
    rfilter: Optional[ResponseFilter] = None,
) -> tuple[list[EtaSweepRow], dict[Prefix, set], dict[Prefix, set]]:
    """Probe every prefix at /56 and /60, then sweep eta exactly."""
    config = config or CampaignConfig()
    rfilter = rfilter or ResponseFilter(spoof_check=config.spoof_check)
    rng = random.Random(config.rng_seed)
    r1: dict[Prefix, set] = {}
    r2: dict[Prefix, set] = {}
    offsets = {p: rng.getrandbits(64) for p in sorted(set(prefixes))}
    for epoch, (mask, out) in enumerate(((56, r1), (60, r2))):
        for p, t in offsets.items():
            records, _ = run_round(p, mask, t, prober, rfilter, config, epoch)
            out[p] = {r.lasthop for r in records}
    return eta_sweep(r1, etas, 1 << (60 - 48), r2), r1, r2


# subnet boundary detection

@dataclass(frozen=True)
class BoundaryResult:
    mask: int
    capped: bool
    iterations: int


def detect_boundary(
    prober: Prober,
    dst: Address128,
    max_mask: int = 96,
    rng: Optional[random.Random] = None,
    epoch: int = 0,
    max_ttl: int = 32,
) -> BoundaryResult:
    """Grow the mask from /64 until the subnets just below and just above
    ``dst``'s subnet answer with at most one distinct last hop."""
    if not 64 <= max_mask <= 127:
        raise ValueError("max_mask must lie in [64, 127]")
    rng = rng or random.Random(0)
    mask = 64
    iterations = 0
    while True:
        iterations += 1
        size = 1 << (128 - mask)
        t = rng.getrandbits(min(64, 128 - mask))
        net = dst & mask_of(mask)
        targets = [(net - size + t) & ADDR_MAX, (net + size + t) & ADDR_MAX]
        results = prober.probe(ProbeBatch(targets, max_ttl=max_ttl, epoch=epoch))
        lasthops = {tr.last_hop for tr in results if tr.last_hop is not None}
        if len(lasthops) <= 1:
            return BoundaryResult(mask, False, iterations)
        if mask >= max_mask:
            return BoundaryResult(mask, True, iterations)
        mask += 1


# reports

@dataclass
class Analysis:
    records: int
    rounds: dict[int, int]
    edginess: EdginessReport
    eui64_count: int
    mac_histogram: dict[int, int]
    entropies: dict[Address128, float]
    eta_rows: list[EtaSweepRow]


def analyze(
    records: Sequence[LastHopRecord],
    traces: Optional[Sequence[Trace]] = None,
    asn_table: Optional[AsnTable] = None,
    etas: Sequence[int] = (4, 8, 16, 32, 64, 128),
    flip_ul: bool = True,
) -> Analysis:
    per_round: dict[int, set] = defaultdict(set)
    r1: dict[Prefix, set] = defaultdict(set)
    r2: dict[Prefix, set] = defaultdict(set)
    for r in records:
        per_round[r.round_mask].add(r.lasthop)
        if r.round_mask == 56:
            r1[r.target_prefix].add(r.lasthop)
        elif r.round_mask == 60:
            r2[r.target_prefix].add(r.lasthop)
    eui_n, macs = eui64_stats(records, flip_ul)
    lasthops = sorted({r.lasthop for r in records})
    return Analysis(
        records=len(records),
        rounds={m: len(s) for m, s in sorted(per_round.items())},
        edginess=edginess(records, traces, asn_table),
        eui64_count=eui_n,
        mac_histogram=macs,
        entropies={a: iid_entropy(a) for a in lasthops},
        eta_rows=eta_sweep(r1, etas, 4096, r2) if r1 else [],
    )


def _csv(dest, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    if hasattr(dest, "write"):
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    try:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _csv(fh, header, rows)
    except OSError as exc:
        raise OSError(f"cannot write {dest}: {exc}") from exc


def write_eta_csv(rows: Sequence[EtaSweepRow], dest) -> None:
    """Write the sweep table to a path or an open text stream."""
    _csv(dest, ("eta", "selected_prefixes", "unique_lasthops", "probes_per_lasthop", "projected"),
         ((r.eta, r.selected_prefixes, r.unique_lasthops,
           "" if r.probes_per_lasthop is None else repr(r.probes_per_lasthop),
           int(r.projected)) for r in rows))


def emit_report(result: Analysis, outdir) -> dict:
    """Write the per-metric CSVs and ``summary.json``; returns the summary."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    e = result.edginess
    _csv(out / "msb_histogram.csv", ("matching_msb", "traces"), enumerate(e.msb_histogram))
    macs = sorted(result.mac_histogram.items(), key=lambda kv: (-kv[1], kv[0]))
    _csv(out / "mac_histogram.csv", ("mac", "lasthop_addresses"),
         ((format_mac(m), n) for m, n in macs))
    _csv(out / "iid_entropy.csv", ("lasthop", "entropy"),
         ((format_address(a), repr(h)) for a, h in result.entropies.items()))
    write_eta_csv(result.eta_rows, out / "eta_sweep.csv")

    ent = sorted(result.entropies.values())
    summary = {
        "records": result.records,
        "unique_lasthops": e.unique_lasthops,
        "unique_final_edges": e.unique_final_edges,
        "unique_lasthops_by_round": {str(m): n for m, n in result.rounds.items()},
        "eui64_lasthops": result.eui64_count,
        "distinct_macs": len(result.mac_histogram),
        "same_as_fraction": e.same_as_fraction,
        "median_matching_msb": e.median_msb,
        "periphery_only_fraction": e.periphery_only_fraction,
        "flagged_lasthops": [format_address(a) for a in e.flagged_lasthops],
        "median_iid_entropy": ent[(len(ent) - 1) // 2] if ent else None,
    }
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary
