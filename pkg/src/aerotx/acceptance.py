"""Scripted acceptance suite tying every published number to a command.

Criteria are split into an arithmetic/property tier (no training, exact)
and a learning tier (seeded statistical checks on the desk-scale profile).
Failures are reported, never thrown.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass
class CriterionResult:
    cid: str
    name: str
    tier: str
    passed: bool | None         # None: skipped
    detail: str

    def to_dict(self):
        return {"id": self.cid, "name": self.name, "tier": self.tier,
                "passed": self.passed, "detail": self.detail}


def format_table(results) -> str:
    lines = [f"{'id':>4} {'tier':<10} {'verdict':<8} name"]
    for r in results:
        verdict = "SKIP" if r.passed is None else ("PASS" if r.passed else "FAIL")
        lines.append(f"{r.cid:>4} {r.tier:<10} {verdict:<8} {r.name}")
        if r.detail:
            lines.append(f"{'':>23} {r.detail}")
    return "\n".join(lines)


def run_suite(cfg, out_dir, artifacts_dir=None, skip_learning=False):
    from . import acceptance_checks
    return acceptance_checks.run_all(cfg, out_dir, artifacts_dir=artifacts_dir,
                                     skip_learning=skip_learning)
