"""Ordered log of public decisions for secure-vs-plaintext equivalence checks."""

from __future__ import annotations

import json


class DecisionLog:
    """Append-only (key, value) records; values must be JSON-serializable."""

    def __init__(self):
        self.entries: list[tuple[str, object]] = []

    def add(self, key: str, value) -> None:
        self.entries.append((key, value))

    def to_json(self) -> str:
        return json.dumps([{"key": k, "value": v} for k, v in self.entries], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DecisionLog":
        log = cls()
        for row in json.loads(text):
            log.add(row["key"], row["value"])
        return log

    def diff(self, other: "DecisionLog") -> list[str]:
        """Human-readable mismatches between two logs (empty means equal)."""
        problems = []
        mine = {k: v for k, v in self.entries}
        theirs = {k: v for k, v in other.entries}
        for key in sorted(set(mine) | set(theirs)):
            if key not in mine:
                problems.append(f"missing in first log: {key}")
            elif key not in theirs:
                problems.append(f"missing in second log: {key}")
            elif mine[key] != theirs[key]:
                problems.append(f"value mismatch at {key}: {mine[key]!r} != {theirs[key]!r}")
        return problems

    def stage_keys(self) -> list[str]:
        return [k for k, _ in self.entries]
