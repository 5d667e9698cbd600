"""Command-line entry point: ``edgy {init,run,analyze,sweep,detect,simspec-check}``.

stdout carries data only; logs go to stderr.  Exit codes: 0 ok, 1 runtime
failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from .analysis import analyze, detect_boundary, emit_report, sweep_with_prober, write_eta_csv
from .campaign import (
    CampaignConfig,
    CampaignInterrupted,
    CampaignState,
    CheckpointError,
    candidate_prefixes,
    load_config_file,
    make_filter,
    read_records,
    run_campaign,
    write_records,
)
from .filtering import ResponseFilter
from .netcore import AddressError, format_address, load_pfx2as, parse_address
from .prober import AdapterProber, ProberError, SimSpecError, build_sim_network
from .seed import TraceFormatError, discover_init, iter_traces, parse_seed_file, write_traces

log = logging.getLogger("edgy")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
CONFIG_KEYS = ("eta1", "eta2", "rng_seed", "max_pps", "max_ttl", "min_ttl", "alias_file",
               "pfx2as_file", "checkpoint_dir")


class InputError(Exception):
    pass


def _write_text(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# init

def cmd_init(args) -> int:
    try:
        with open(args.seed_file, encoding="utf-8") as fh:
            traces = parse_seed_file(fh, args.seed_file)
    except TraceFormatError as exc:
        raise InputError(str(exc)) from None
    cands = discover_init(traces)
    text = "".join(f"{p}\n" for p in cands.sorted())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(str(out / "candidates.txt"), text)
        _dump_json(cands.provenance_json(), out / "provenance.json")
    else:
        _write_text(None, text)
    log.info("%d traces -> %d candidate /48s", len(traces), len(cands))
    return EXIT_OK


# backends

def _sim(args):
    try:
        return build_sim_network(args.spec, args.sim_seed)
    except OSError as exc:
        raise InputError(f"cannot read simulator spec: {exc}") from None


def _backend(args, config: Optional[CampaignConfig] = None):
    if args.backend == "sim":
        if not args.spec:
            raise InputError("--backend sim needs --spec")
        return _sim(args)
    if not args.adapter_dir:
        raise InputError("--backend adapter needs --adapter-dir")
    return AdapterProber(args.adapter_dir, command=args.adapter_command,
                         timeout_s=args.adapter_timeout, probe_budget=args.probe_budget,
                         authorized=args.i_have_authorization)


def _filter_for(backend, config: CampaignConfig) -> ResponseFilter:
    rfilter = make_filter(config)
    # with the simulator, fall back to its ground-truth alias and route tables
    if hasattr(backend, "alias_set"):
        if not config.alias_file:
            rfilter.aliases = backend.alias_set()
        if not config.pfx2as_file:
            rfilter.routable = backend.asn_table()
    return rfilter


class _TraceLog:
    """Prober wrapper appending every TraceResult to a JSON Lines file."""

    def __init__(self, inner, path: str):
        self.inner = inner
        self.path = path

    def probe(self, batch):
        results = self.inner.probe(batch)
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            write_traces(results, fh)
        return results


# run

def _campaign_config(args) -> CampaignConfig:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if args.no_spoof_check:
        values["spoof_check"] = False
    return CampaignConfig.from_mapping(values)


def cmd_run(args) -> int:
    config = _campaign_config(args)
    with open(args.candidates, encoding="utf-8") as fh:
        cands = candidate_prefixes(fh)
    backend = _backend(args, config)
    rfilter = _filter_for(backend, config)
    prober = _TraceLog(backend, args.traces_out) if args.traces_out else backend

    state = None
    if args.resume:
        if not config.checkpoint_dir:
            raise InputError("--resume needs a checkpoint_dir")
        if (Path(config.checkpoint_dir) / "state.json").exists():
            state = CampaignState.load(config.checkpoint_dir)
            if state.config != config.to_dict():
                log.warning("resuming with a config that differs from the checkpoint's")
            log.info("resuming: %d rounds already complete", len(state.completed))
            if hasattr(backend, "fast_forward"):
                backend.fast_forward(state.total_probes, config.max_pps)

    effective = {
        "subcommand": "run",
        "backend": args.backend,
        "spec": args.spec,
        "sim_seed": args.sim_seed,
        "adapter_dir": args.adapter_dir,
        "candidates": args.candidates,
        "config": config.to_dict(),
    }
    side_dir = config.checkpoint_dir or (str(Path(args.out).parent) if args.out else None)
    if side_dir:
        Path(side_dir).mkdir(parents=True, exist_ok=True)
        _dump_json(effective, Path(side_dir) / "effective-config.json")

    started = time.time()
    try:
        state = run_campaign(cands, prober, config, state=state, rfilter=rfilter)
    except CampaignInterrupted as exc:
        log.error("campaign interrupted: %s (re-run with --resume)", exc)
        return EXIT_RUNTIME
    if args.out in (None, "-"):
        write_records(state.iter_records(), sys.stdout)
    else:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            write_records(state.iter_records(), fh)
    if side_dir:
        _dump_json({"started": started, "finished": time.time(),
                    "total_probes": state.total_probes},
                   Path(side_dir) / "run-timestamps.json")
    log.info("campaign %s: %d probes, %d rounds", state.status, state.total_probes,
             len(state.completed))
    return EXIT_OK


# analyze / sweep / detect

def cmd_analyze(args) -> int:
    with open(args.records, encoding="utf-8") as fh:
        records = list(read_records(fh, args.records))
    traces = None
    if args.traces:
        with open(args.traces, encoding="utf-8") as fh:
            traces = list(iter_traces(fh, args.traces))
    table = None
    if args.pfx2as:
        with open(args.pfx2as, encoding="utf-8") as fh:
            table = load_pfx2as(fh)
    result = analyze(records, traces, table, args.etas, flip_ul=not args.raw_mac)
    summary = emit_report(result, args.outdir)
    _write_text(None, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _campaign_config(args)
    with open(args.candidates, encoding="utf-8") as fh:
        cands = candidate_prefixes(fh)
    backend = _backend(args, config)
    rows, _, _ = sweep_with_prober(cands, backend, args.etas, config, _filter_for(backend, config))
    if args.out in (None, "-"):
        write_eta_csv(rows, sys.stdout)
    else:
        write_eta_csv(rows, args.out)
    return EXIT_OK


def cmd_detect(args) -> int:
    import random

    try:
        dst = parse_address(args.dst)
    except AddressError as exc:
        raise InputError(str(exc)) from None
    backend = _backend(args)
    res = detect_boundary(backend, dst, args.max_mask, random.Random(args.rng_seed))
    print(res.mask)
    if res.capped:
        log.warning("no boundary found below /%d for %s", args.max_mask, format_address(dst))
    return EXIT_OK


def cmd_simspec_check(args) -> int:
    sim = _sim(args)
    summary = {
        "seed": sim.seed,
        "providers": [
            {
                "asn": p.asn,
                "core_prefix": str(p.core_prefix),
                "target_prefixes": len(p.layouts),
                "cpes": sum(lay.cpe_count for lay in p.layouts),
                "alias_prefixes": [str(a) for a in p.alias_prefixes],
            }
            for p in sim.providers
        ],
    }
    _write_text(None, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# parser

def _etas(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eta list {text!r}") from None
    if not vals or vals != sorted(vals):
        raise argparse.ArgumentTypeError("eta list must be non-empty and ascending")
    return vals


def _add_backend(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--backend", choices=("sim", "adapter"), default="sim")
    g.add_argument("--spec", help="simulator spec (JSON)")
    g.add_argument("--sim-seed", type=int, default=None, help="overrides the spec's seed")
    g.add_argument("--adapter-dir", help="exchange directory for the external prober")
    g.add_argument("--adapter-command",
                   help="command template run per batch; {targets} {results} {rate} {max_ttl} {min_ttl}")
    g.add_argument("--adapter-timeout", type=float, default=3600.0)
    g.add_argument("--probe-budget", type=int, default=100_000,
                   help="adapter refuses to emit more targets than this (default 100000)")
    g.add_argument("--i-have-authorization", action="store_true",
                   help="lift the adapter probe budget")


def _add_campaign(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("campaign")
    g.add_argument("--config", help="key=value config file (flags win)")
    g.add_argument("--eta1", type=int)
    g.add_argument("--eta2", type=int)
    g.add_argument("--rng-seed", dest="rng_seed", type=int)
    g.add_argument("--max-pps", dest="max_pps", type=float)
    g.add_argument("--max-ttl", dest="max_ttl", type=int)
    g.add_argument("--min-ttl", dest="min_ttl", type=int)
    g.add_argument("--alias-file", dest="alias_file")
    g.add_argument("--pfx2as-file", dest="pfx2as_file")
    g.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    g.add_argument("--no-spoof-check", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgy", description="IPv6 periphery discovery")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("init", help="select candidate /48s from seed traces")
    p.add_argument("seed_file")
    p.add_argument("--out", help="directory for candidates.txt and provenance.json")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("run", help="probe candidates round by round")
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", help="last-hop records (JSON Lines); default stdout")
    p.add_argument("--traces-out", help="append every trace result here (JSON Lines)")
    p.add_argument("--resume", action="store_true")
    _add_backend(p)
    _add_campaign(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="metrics over last-hop records")
    p.add_argument("--records", required=True)
    p.add_argument("--traces", help="full traces, needed for the periphery-only metric")
    p.add_argument("--pfx2as")
    p.add_argument("--outdir", required=True)
    p.add_argument("--etas", type=_etas, default=[4, 8, 16, 32, 64, 128])
    p.add_argument("--raw-mac", action="store_true", help="do not undo the U/L bit flip")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="probe /56 and /60 on every candidate and sweep eta")
    p.add_argument("--candidates", required=True)
    p.add_argument("--etas", type=_etas, default=[4, 8, 16, 32, 64, 128])
    p.add_argument("--out", help="CSV; default stdout")
    _add_backend(p)
    _add_campaign(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("detect", help="find the delegation boundary around an address")
    p.add_argument("dst")
    p.add_argument("--max-mask", type=int, default=96)
    p.add_argument("--rng-seed", type=int, default=0)
    _add_backend(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("simspec-check", help="validate a simulator spec")
    p.add_argument("spec")
    p.add_argument("--sim-seed", type=int, default=None)
    p.set_defaults(func=cmd_simspec_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (InputError, TraceFormatError, SimSpecError, AddressError, ValueError) as exc:
        print(f"edgy: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"edgy: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ProberError, CheckpointError, OSError) as exc:
        print(f"edgy: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
