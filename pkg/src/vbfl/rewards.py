"""Reward formulas, the stake ledger, worker flagging and blacklisting.

Rewards are integers (unit multiples) so stake comparisons in consensus are
exact. The ledger also keeps a per-role earnings decomposition, which lets
callers check where a device's stake came from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .protocol import Block, DeviceId, GENESIS_MINER

ROLE_SOURCES = ("worker", "validator", "miner")


def worker_reward(
    epochs: int, train_size: int, positives: int, negatives: int, unit: int
) -> int:
    """Training reward: epochs x shard size x unit, gated by the vote tally.

    A tie counts as qualified; a worker only loses its reward when Negative
    votes strictly outnumber Positive ones.
    """
    if min(epochs, train_size, unit) < 1:
        raise ValueError("epochs, train_size and unit must be positive")
    if min(positives, negatives) < 0:
        raise ValueError("vote counts must be non-negative")
    if positives >= negatives:
        return epochs * train_size * unit
    return 0


def validator_reward(n_verified_tx: int, n_votes: int, unit: int) -> int:
    """Duty reward: one unit per verified worker transaction plus one per vote.

    A validator never votes on a transaction whose signature it could not
    verify, so n_votes may not exceed n_verified_tx.
    """
    if min(n_verified_tx, n_votes) < 0:
        raise ValueError("counts must be non-negative")
    if n_votes > n_verified_tx:
        raise ValueError("cannot vote on more transactions than were verified")
    return (n_verified_tx + n_votes) * unit


def miner_reward(n_verified_vtx: int, unit: int) -> int:
    """Duty reward: one unit per verified validator transaction."""
    if n_verified_vtx < 0:
        raise ValueError("count must be non-negative")
    return n_verified_vtx * unit


@dataclass
class StakeLedger:
    """Per-device accumulated rewards, flag streaks and the blacklist.

    Stake only ever grows. The flag streak counts consecutive *worker-serving*
    rounds in which the device was flagged; rounds spent as validator or
    miner neither extend nor reset it, since a device submits no model in
    those rounds and so can demonstrate neither malice nor legitimacy.
    Reaching ``kick_r`` puts the device on the blacklist, which freezes its
    stake and excludes it from all further participation.
    """

    unit_reward: int = 1
    kick_r: int = 6
    stake: dict[DeviceId, int] = field(default_factory=dict)
    flag_streak: dict[DeviceId, int] = field(default_factory=dict)
    blacklist: frozenset[DeviceId] = frozenset()
    earned: dict[DeviceId, dict[str, int]] = field(default_factory=dict)

    def stake_of(self, device: DeviceId) -> int:
        return self.stake.get(device, 0)

    def streak_of(self, device: DeviceId) -> int:
        return self.flag_streak.get(device, 0)

    def earned_as(self, device: DeviceId, source: str) -> int:
        return self.earned.get(device, {}).get(source, 0)

    def clone(self) -> "StakeLedger":
        return StakeLedger(
            unit_reward=self.unit_reward,
            kick_r=self.kick_r,
            stake=dict(self.stake),
            flag_streak=dict(self.flag_streak),
            blacklist=self.blacklist,
            earned={d: dict(e) for d, e in self.earned.items()},
        )

    def _credit(self, device: DeviceId, amount: int, source: str):
        if amount == 0 or device in self.blacklist:
            return
        self.stake[device] = self.stake.get(device, 0) + amount
        self.earned.setdefault(device, {})[source] = (
            self.earned.get(device, {}).get(source, 0) + amount
        )


def apply_block(
    ledger: StakeLedger,
    block: Block,
    served_as_worker: Mapping[DeviceId, bool],
) -> tuple[StakeLedger, frozenset[DeviceId], frozenset[DeviceId]]:
    """Process one legitimate block: credit rewards, update flags, blacklist.

    Worker rewards are recomputed from the epochs and shard size embedded in
    each tally's transaction; a self-reported expected reward that disagrees
    is treated as dishonest reporting (reward denied, worker flagged), as is
    a tally where Negative votes outnumber Positive ones. Returns the new
    ledger plus the flagged and newly blacklisted device sets.
    """
    new = ledger.clone()
    unit = new.unit_reward
    flagged: set[DeviceId] = set()

    for tally in block.tallies:
        w = tally.worker
        due = worker_reward(
            tally.tx.epochs, tally.tx.train_size, tally.positives, tally.negatives, unit
        )
        honest_report = (
            tally.tx.expected_reward == tally.tx.epochs * tally.tx.train_size * unit
        )
        if due > 0 and honest_report:
            new._credit(w, due, "worker")
        else:
            flagged.add(w)

    for validator, reward in block.validator_rewards:
        new._credit(validator, reward, "validator")
    if block.miner != GENESIS_MINER:
        new._credit(block.miner, block.miner_reward, "miner")

    newly_blacklisted: set[DeviceId] = set()
    for device in flagged:
        streak = new.flag_streak.get(device, 0) + 1
        new.flag_streak[device] = streak
        if streak >= new.kick_r and device not in new.blacklist:
            newly_blacklisted.add(device)
    for device, served in served_as_worker.items():
        if served and device not in flagged:
            new.flag_streak[device] = 0
    if newly_blacklisted:
        new.blacklist = new.blacklist | newly_blacklisted

    return new, frozenset(flagged), frozenset(newly_blacklisted)


def block_reward_total(block: Block, unit: int) -> int:
    """Sum of all qualified rewards a block grants; the conservation oracle."""
    total = 0
    for tally in block.tallies:
        due = worker_reward(
            tally.tx.epochs, tally.tx.train_size, tally.positives, tally.negatives, unit
        )
        if due > 0 and tally.tx.expected_reward == tally.tx.epochs * tally.tx.train_size * unit:
            total += due
    total += sum(r for _, r in block.validator_rewards)
    if block.miner != GENESIS_MINER:
        total += block.miner_reward
    return total
