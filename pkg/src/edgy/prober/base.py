from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

from ..netcore import Address128
from ..seed import TraceResult


class ProberError(RuntimeError):
    """A probe batch could not be completed."""


class ProberUnavailable(ProberError):
    """Backend not reachable right now; the batch may be retried later."""


@dataclass(frozen=True)
class ProbeBatch:
    targets: Sequence[Address128]
    max_ttl: int = 32
    rate_hint: float = 10_000.0
    # round ordinal; the simulator derives prefix-rotation epochs from it
    epoch: int = 0
    min_ttl: int = 1
    tag: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.targets:
            raise ValueError("probe batch has no targets")
        if not 1 <= self.min_ttl <= self.max_ttl:
            raise ValueError(f"bad TTL range [{self.min_ttl}, {self.max_ttl}]")
        if self.rate_hint <= 0:
            raise ValueError("rate_hint must be positive")


class Prober(Protocol):
    def probe(self, batch: ProbeBatch) -> list[TraceResult]:
        """One result per target, aligned with ``batch.targets``."""
        ...
