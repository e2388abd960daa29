"""Parsing and aggregation of pairwise judge verdicts.

Judges answer in a boxed A/B format; the last boxed token in a response
wins. Because the two candidates are shown in randomized positions to
prevent order bias, swapped verdicts are un-swapped before tallying.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

_BOXED = re.compile(r"\\boxed\s*\{\s*([AB])\s*\}")


class VerdictParseError(ValueError):
    pass


@dataclass
class JudgeVerdict:
    raw_response: str
    choice: str  # "A" or "B"
    position_map: str = "identity"  # or "swapped"

    def effective_choice(self) -> str:
        """The choice in canonical (unswapped) position."""
        if self.position_map == "identity":
            return self.choice
        if self.position_map == "swapped":
            return "B" if self.choice == "A" else "A"
        raise ValueError(f"unknown position_map {self.position_map!r}")


def parse_judge_verdict(raw: str, position_map: str = "identity") -> JudgeVerdict:
    """Extract the last boxed A/B token from a judge response."""
    matches = _BOXED.findall(raw)
    if not matches:
        raise VerdictParseError("no boxed A/B verdict found in response")
    return JudgeVerdict(raw_response=raw, choice=matches[-1], position_map=position_map)


@dataclass
class VoteResult:
    winner: str  # "A", "B", or "tie"
    tally: dict[str, int]
    parse_errors: int = 0


def majority_vote(verdicts: list[JudgeVerdict], parse_errors: int = 0) -> VoteResult:
    """Majority vote over de-swapped verdicts; equal counts declare a tie."""
    if not verdicts:
        raise ValueError("majority_vote needs at least one parseable verdict")
    tally = {"A": 0, "B": 0}
    for v in verdicts:
        tally[v.effective_choice()] += 1
    if tally["A"] > tally["B"]:
        winner = "A"
    elif tally["B"] > tally["A"]:
        winner = "B"
    else:
        winner = "tie"
    return VoteResult(winner=winner, tally=tally, parse_errors=parse_errors)


def tally_fixtures(path) -> VoteResult:
    """Parse and vote over a JSON-lines fixture file.

    Each record is {"raw_response": ..., "position_map": "identity"|"swapped"}.
    Unparseable responses are counted, not fatal.
    """
    verdicts: list[JudgeVerdict] = []
    errors = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                verdicts.append(parse_judge_verdict(rec["raw_response"],
                                                    rec.get("position_map", "identity")))
            except VerdictParseError:
                errors += 1
    if not verdicts:
        raise ValueError("all judge responses were unparseable")
    return majority_vote(verdicts, parse_errors=errors)
