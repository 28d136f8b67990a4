"""RIC-style arbitration between xApps that share one network.

Direct conflicts (two xApps setting the same slot to different values) are
resolved by a fixed priority order; the losers' values are dropped. Indirect
conflicts are caught after the fact: if the proportional-fairness KPI falls
by more than ``delta`` after an action, the RB and power settings are rolled
back to the previous snapshot and the network runs one more step with them.
Handover decisions are never reverted.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .env import KEEP, CellularEnv, Controls, StepMetrics
from .fileio import atomic_path

KEEP_DECISION = "keep"
ROLLBACK_DECISION = "rollback"


@dataclass
class ActionProposal:
    xapp: str
    indices: dict[str, int]  # slot name -> proposed index, owned slots only
    step: int = 0


@dataclass
class ConflictRecord:
    slot: str
    winner: str
    losers: list[str]


@dataclass
class MitigationVerdict:
    merged: np.ndarray
    direct_conflict_slots: list[ConflictRecord]
    rollback_applied: bool
    interrupts: int
    pf_before: Optional[float]
    pf_after: float
    observation: np.ndarray
    reward: float
    metrics: list[StepMetrics] = field(default_factory=list)


@dataclass(frozen=True)
class MitigationPolicy:
    priority: tuple[str, ...] = ("xapp1", "xapp2")
    delta: float = 0.0
    rollback: bool = True


class KpiHistory:
    """Recent PF values plus the last RB/power settings that were kept."""

    def __init__(self, window: int = 16):
        self.pf = deque(maxlen=window)
        self.snapshot: Optional[Controls] = None

    @property
    def previous(self) -> Optional[float]:
        return self.pf[-1] if self.pf else None

    def record(self, value: float) -> None:
        self.pf.append(float(value))

    def clear(self) -> None:
        self.pf.clear()
        self.snapshot = None


def detect_direct(proposals: Sequence[ActionProposal]) -> list[str]:
    """Slots for which at least two xApps propose different values."""
    seen: dict[str, set] = {}
    for p in proposals:
        for slot, value in p.indices.items():
            seen.setdefault(slot, set()).add(int(value))
    return sorted(slot for slot, values in seen.items() if len(values) > 1)


def _rank(priority: Sequence[str], proposals: Sequence[ActionProposal]) -> dict[str, int]:
    rank = {name: i for i, name in enumerate(priority)}
    missing = [p.xapp for p in proposals if p.xapp not in rank]
    if missing:
        raise ValueError(f"priority order does not cover xApps {missing}")
    return rank


def resolve_direct(proposals: Sequence[ActionProposal], conflicts: Sequence[str],
                   priority: Sequence[str], current: Mapping[str, int],
                   slots: Optional[Sequence[str]] = None) -> dict[str, int]:
    """Merge proposals into one value per slot.

    Conflicting slots take the highest-priority proposer's value, other
    proposed slots their proposer's value, and unproposed slots the current
    setting from ``current``.
    """
    rank = _rank(priority, proposals)
    ordered = sorted(proposals, key=lambda p: rank[p.xapp])
    merged: dict[str, int] = {}
    for p in ordered:
        for slot, value in p.indices.items():
            merged.setdefault(slot, int(value))
    conflict_set = set(conflicts)
    for slot in conflict_set:
        if slot not in merged:
            raise ValueError(f"conflict slot {slot} has no proposer")
    for slot in (slots if slots is not None else current.keys()):
        if slot not in merged:
            if slot not in current:
                raise ValueError(f"slot {slot} has no proposer and no current setting")
            merged[slot] = int(current[slot])
    return merged


def conflict_records(proposals: Sequence[ActionProposal], conflicts: Sequence[str],
                     priority: Sequence[str]) -> list[ConflictRecord]:
    rank = _rank(priority, proposals)
    out = []
    for slot in conflicts:
        owners = sorted((p for p in proposals if slot in p.indices), key=lambda p: rank[p.xapp])
        winner = owners[0]
        losers = [p.xapp for p in owners[1:] if p.indices[slot] != winner.indices[slot]]
        out.append(ConflictRecord(slot, winner.xapp, losers))
    return out


def monitor_indirect(history: KpiHistory, new_pf: float, delta: float = 0.0) -> str:
    prev = history.previous
    if prev is None:
        return KEEP_DECISION
    return ROLLBACK_DECISION if new_pf < prev - delta else KEEP_DECISION


def rollback(env: CellularEnv, snapshot: Optional[Controls]) -> Controls:
    """Restore the snapshot's RB requests and power levels on ``env``."""
    if snapshot is None:
        raise RuntimeError("rollback requested but no control snapshot exists")
    env.restore_controls(snapshot)
    return env.state.controls


class Arbiter:
    """One arbitration per network step; keeps interrupt counters and a log."""

    LOG_COLUMNS = ("step", "direct_conflicts", "winner", "rollback_flag", "pf_before", "pf_after")

    def __init__(self, policy: MitigationPolicy, slots: Sequence[str]):
        self.policy = policy
        self.slots = list(slots)
        self._pos = {s: i for i, s in enumerate(self.slots)}
        self.history = KpiHistory()
        self.direct_losers = 0
        self.direct_conflicts = 0
        self.rollbacks = 0
        self.log: list[tuple] = []

    @property
    def interrupts(self) -> int:
        return self.direct_losers + self.rollbacks

    def new_episode(self) -> None:
        self.history.clear()

    def merge(self, proposals: Sequence[ActionProposal]):
        conflicts = detect_direct(proposals)
        merged = resolve_direct(proposals, conflicts, self.policy.priority,
                                dict.fromkeys(self.slots, KEEP), self.slots)
        action = np.full(len(self.slots), KEEP, dtype=np.int64)
        for slot, value in merged.items():
            action[self._pos[slot]] = value
        return action, conflict_records(proposals, conflicts, self.policy.priority)

    def arbitrate(self, proposals: Sequence[ActionProposal], env: CellularEnv) -> MitigationVerdict:
        action, records = self.merge(proposals)
        losers = sum(len(r.losers) for r in records)
        self.direct_losers += losers
        self.direct_conflicts += len(records)

        before = env.snapshot_controls()
        if self.history.snapshot is None:
            self.history.snapshot = before
        pf_before = self.history.previous
        obs, pf_after, metrics = env.step(action)
        steps = [metrics]
        decision = KEEP_DECISION
        if self.policy.rollback:
            decision = monitor_indirect(self.history, pf_after, self.policy.delta)
        rolled = decision == ROLLBACK_DECISION
        reward = pf_after
        if rolled:
            rollback(env, self.history.snapshot)
            self.rollbacks += 1
            obs, pf_final, metrics = env.step(env.keep_action())
            steps.append(metrics)
            self.history.record(pf_final)
        else:
            self.history.record(pf_after)
            self.history.snapshot = env.snapshot_controls()

        step = proposals[0].step if proposals else env.steps_taken
        winners = sorted({r.winner for r in records})
        self.log.append((step, len(records), ";".join(winners), int(rolled),
                         pf_before, pf_after))
        return MitigationVerdict(action, records, rolled, losers + int(rolled),
                                 pf_before, pf_after, obs, reward, steps)

    def write_log(self, path) -> None:
        with atomic_path(path) as tmp, tmp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.LOG_COLUMNS)
            for step, n, winner, flag, before, after in self.log:
                w.writerow([step, n, winner, flag,
                            "" if before is None else repr(float(before)), repr(float(after))])
