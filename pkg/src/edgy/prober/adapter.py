"""File-exchange backend for an external high-speed tracer.

For every batch the adapter writes ``<name>.targets`` (one address per line)
into its work directory and expects ``<name>.results.jsonl`` back in the
trace JSON Lines format.  The external tool is either launched through a
command template or run by the operator; in the latter case the adapter
polls until the results appear or the timeout expires.
"""

from __future__ import annotations

import logging
import os
import re
import shlex
import subprocess
import time
from collections import defaultdict, deque
from pathlib import Path
from typing import Optional, Sequence

from ..netcore import Address128, format_address
from ..seed import Trace, TraceFormatError, iter_traces
from .base import ProbeBatch, ProberError, ProberUnavailable

log = logging.getLogger(__name__)


class ProbeBudgetExceeded(ProberError):
    pass


def adapter_write_targets(batch: ProbeBatch, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for a in batch.targets:
            fh.write(format_address(a))
            fh.write("\n")
    os.replace(tmp, path)
    return path


def adapter_read_results(path, targets: Optional[Sequence[Address128]] = None) -> list[Trace]:
    """Parse a results file.  With ``targets``, align the output to them and
    report targets without a record as fully anonymous."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            traces = list(iter_traces(fh, str(path)))
    except OSError as exc:
        raise ProberError(f"cannot read results {path}: {exc}") from exc
    if targets is None:
        return traces
    by_dst: dict[Address128, deque] = defaultdict(deque)
    for t in traces:
        by_dst[t.dst].append(t)
    out = []
    for a in targets:
        queue = by_dst.get(a)
        out.append(queue.popleft() if queue else Trace.anonymous(a))
    return out


def _safe_name(tag: str) -> str:
    return re.sub(r"[^0-9A-Za-z._-]+", "_", tag).strip("_") or "batch"


class AdapterProber:
    def __init__(
        self,
        workdir,
        command: Optional[str] = None,
        timeout_s: float = 3600.0,
        poll_s: float = 1.0,
        probe_budget: Optional[int] = None,
        authorized: bool = False,
    ):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.timeout_s = timeout_s
        self.poll_s = poll_s
        self.probe_budget = probe_budget
        self.authorized = authorized
        self.emitted = 0
        self._counter = 0

    def _paths(self, batch: ProbeBatch) -> tuple[Path, Path]:
        if batch.tag:
            name = _safe_name(batch.tag)
        else:
            name = f"batch-{self._counter:06d}"
            self._counter += 1
        return self.workdir / f"{name}.targets", self.workdir / f"{name}.results.jsonl"

    def probe(self, batch: ProbeBatch) -> list[Trace]:
        if (self.probe_budget is not None and not self.authorized
                and self.emitted + len(batch.targets) > self.probe_budget):
            raise ProbeBudgetExceeded(
                f"batch of {len(batch.targets)} would exceed the probe budget of "
                f"{self.probe_budget} ({self.emitted} already emitted); "
                "pass --i-have-authorization to proceed")
        targets_path, results_path = self._paths(batch)
        if not results_path.exists():
            adapter_write_targets(batch, targets_path)
            self.emitted += len(batch.targets)
            if self.command:
                self._run(batch, targets_path, results_path)
            else:
                self._wait(results_path)
        try:
            return adapter_read_results(results_path, batch.targets)
        except TraceFormatError as exc:
            raise ProberError(str(exc)) from exc

    def _run(self, batch: ProbeBatch, targets_path: Path, results_path: Path) -> None:
        cmd = self.command.format(
            targets=shlex.quote(str(targets_path)),
            results=shlex.quote(str(results_path)),
            rate=int(batch.rate_hint),
            max_ttl=batch.max_ttl,
            min_ttl=batch.min_ttl,
        )
        log.info("running prober: %s", cmd)
        try:
            proc = subprocess.run(cmd, shell=True, timeout=self.timeout_s)
        except subprocess.TimeoutExpired:
            raise ProberUnavailable(f"prober command timed out after {self.timeout_s}s") from None
        if proc.returncode != 0:
            raise ProberUnavailable(f"prober command exited with status {proc.returncode}")
        if not results_path.exists():
            raise ProberUnavailable(f"prober command produced no {results_path}")

    def _wait(self, results_path: Path) -> None:
        log.info("waiting for %s", results_path)
        deadline = time.monotonic() + self.timeout_s
        while not results_path.exists():
            if time.monotonic() >= deadline:
                raise ProberUnavailable(f"no results at {results_path} after {self.timeout_s}s")
            time.sleep(self.poll_s)
