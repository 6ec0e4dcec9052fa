"""Audit records of pruning decisions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .errors import InvalidTrace


@dataclass
class TraceEntry:
    """One selection step.

    ``stream`` names the token stream being pruned ("encoder:<id>",
    "fused" or "decoder"); ``position`` is the block or layer index.
    ``kept`` holds local indices into the stream as it was before pruning.
    """

    stage: int
    stream: str
    position: int
    criterion: str
    scores_digest: str
    kept: list[int]
    count_before: int
    count_after: int
    warnings: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "stream": self.stream,
            "position": self.position,
            "criterion": self.criterion,
            "scores_digest": self.scores_digest,
            "kept": list(self.kept),
            "count_before": self.count_before,
            "count_after": self.count_after,
            "warnings": list(self.warnings),
            "extra": self.extra,
        }


@dataclass
class PruneTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def extend(self, entries) -> None:
        self.entries.extend(entries)

    def for_stream(self, stream: str) -> list[TraceEntry]:
        return [e for e in self.entries if e.stream == stream]

    def check_chain(self) -> None:
        """Raise InvalidTrace unless counts chain within every stream."""
        last: dict[str, int] = {}
        for i, e in enumerate(self.entries):
            if e.count_after > e.count_before or len(e.kept) != e.count_after:
                raise InvalidTrace(f"entry {i} ({e.stream}) has inconsistent counts")
            if e.stream in last and last[e.stream] != e.count_before:
                raise InvalidTrace(f"entry {i} ({e.stream}) breaks the count chain")
            last[e.stream] = e.count_after

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]
