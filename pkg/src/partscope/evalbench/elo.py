"""Pairwise rating bookkeeping for head-to-head transcript comparisons.

Standard logistic-expectation ratings: every contestant starts at 1000,
the expected score of A against B is 1 / (1 + 10^((R_b - R_a) / 400)),
and a game moves both ratings by a single delta K * (S_a - E_a) -- added
to A and subtracted from B -- so the rating total is conserved to within
float rounding.  Games are logged and can be replayed from a JSONL file,
which reproduces the exact same ratings.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

INITIAL_RATING = 1000.0
K_FACTOR = 32.0

A_WINS = "A_WINS"
B_WINS = "B_WINS"
DRAW = "DRAW"
OUTCOMES = (A_WINS, B_WINS, DRAW)

_SCORE_A = {A_WINS: 1.0, B_WINS: 0.0, DRAW: 0.5}


def expected_score(rating_a: float, rating_b: float) -> float:
    """Expected score of A against B under the logistic rating model."""
    return 1.0 / (1.0 + 10.0 ** ((rating_b - rating_a) / 400.0))


def rating_delta(rating_a: float, rating_b: float, outcome: str, k: float = K_FACTOR) -> float:
    """Signed rating change for A (B moves by the exact negative)."""
    if outcome not in OUTCOMES:
        raise ValueError(f"outcome must be one of {OUTCOMES}, got {outcome!r}")
    return k * (_SCORE_A[outcome] - expected_score(rating_a, rating_b))


class EloTable:
    """Ratings plus an append-only game log."""

    def __init__(self, k: float = K_FACTOR, initial: float = INITIAL_RATING):
        self.k = float(k)
        self.initial = float(initial)
        self.ratings: dict[str, float] = {}
        self.games: list[dict] = []

    def rating(self, name: str) -> float:
        return self.ratings.setdefault(name, self.initial)

    def record(self, a: str, b: str, outcome: str) -> float:
        """Score one game; returns the delta applied to A."""
        if a == b:
            raise ValueError(f"a contestant cannot play itself: {a!r}")
        ra, rb = self.rating(a), self.rating(b)
        delta = rating_delta(ra, rb, outcome, self.k)
        new_a, new_b = ra + delta, rb - delta
        if not (math.isfinite(new_a) and math.isfinite(new_b)):
            raise ValueError("rating update produced a non-finite rating")
        self.ratings[a], self.ratings[b] = new_a, new_b
        self.games.append(
            {
                "game": len(self.games),
                "a": a,
                "b": b,
                "outcome": outcome,
                "delta": delta,
                "rating_a": new_a,
                "rating_b": new_b,
            }
        )
        return delta

    def standings(self) -> list[tuple[str, float]]:
        """(name, rating) pairs, best first; ties broken by name."""
        return sorted(self.ratings.items(), key=lambda kv: (-kv[1], kv[0]))

    def total_rating(self) -> float:
        return sum(self.ratings.values())

    def save(self, path: str | Path) -> None:
        """JSONL: one header row, then one row per game."""
        header = {
            "k": self.k,
            "initial": self.initial,
            "players": sorted(self.ratings),
        }
        rows = [json.dumps(header, sort_keys=True)]
        rows.extend(json.dumps(g, sort_keys=True) for g in self.games)
        Path(path).write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EloTable":
        """Rebuild a table by replaying the logged games in order."""
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"empty rating log: {path}")
        header = json.loads(lines[0])
        table = cls(k=header["k"], initial=header["initial"])
        for name in header.get("players", []):
            table.rating(name)
        for line in lines[1:]:
            row = json.loads(line)
            table.record(row["a"], row["b"], row["outcome"])
        return table


def elo_update(table: EloTable, a: str, b: str, outcome: str) -> EloTable:
    """Score one game in place and return the table (fluent form)."""
    table.record(a, b, outcome)
    return table
