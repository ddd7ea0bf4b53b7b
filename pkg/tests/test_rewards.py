import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbfl.learning import ModelParams, softmax_arch
from vbfl.protocol import Block, VoteTally, WorkerTransaction, ZERO_HASH
from vbfl.rewards import (
    StakeLedger,
    apply_block,
    block_reward_total,
    miner_reward,
    validator_reward,
    worker_reward,
)

ARCH = softmax_arch(2, 2)


def dev(n: int) -> bytes:
    return bytes([n]) * 16


def update(seed=0) -> ModelParams:
    return ModelParams(np.random.default_rng(seed).normal(size=6), ARCH)


def wtx(worker, epochs=5, train_size=150, expected=None) -> WorkerTransaction:
    if expected is None:
        expected = epochs * train_size
    return WorkerTransaction(
        round=1,
        worker=dev(worker),
        update=update(worker),
        expected_reward=expected,
        epochs=epochs,
        train_size=train_size,
    )


def tally(worker, pos, neg, **kw) -> VoteTally:
    return VoteTally(wtx(worker, **kw), pos, neg, frozenset(dev(50 + i) for i in range(pos + neg)))


def make_block(tallies, miner=9, miner_rwd=60, validator_rwds=None, round=1) -> Block:
    return Block(
        round=round,
        miner=dev(miner),
        prev_hash=ZERO_HASH,
        tallies=tuple(tallies),
        miner_reward=miner_rwd,
        validator_rewards=validator_rwds or {},
    )


class TestWorkerReward:
    def test_qualified(self):
        assert worker_reward(5, 3000, 2, 1, 1) == 15000

    def test_voted_down(self):
        # The two-worker walkthrough: 0 Positive, 3 Negative earns nothing.
        assert worker_reward(5, 3000, 0, 3, 1) == 0

    def test_tie_counts_as_qualified(self):
        assert worker_reward(5, 3000, 2, 2, 1) == 15000

    def test_bad_args(self):
        with pytest.raises(ValueError):
            worker_reward(0, 10, 1, 0, 1)
        with pytest.raises(ValueError):
            worker_reward(1, 10, -1, 0, 1)


class TestValidatorReward:
    def test_full_participation(self):
        assert validator_reward(12, 12, 1) == 24

    def test_unverified_transaction_earns_no_vote(self):
        assert validator_reward(12, 11, 1) == 23

    def test_zero(self):
        assert validator_reward(0, 0, 1) == 0

    def test_votes_cannot_exceed_verified(self):
        with pytest.raises(ValueError):
            validator_reward(3, 4, 1)


class TestMinerReward:
    @pytest.mark.parametrize("n,unit,want", [(60, 1, 60), (0, 1, 0), (7, 3, 21)])
    def test_values(self, n, unit, want):
        assert miner_reward(n, unit) == want

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            miner_reward(-1, 1)


class TestApplyBlock:
    def ledger(self, **kw) -> StakeLedger:
        return StakeLedger(unit_reward=1, kick_r=6, **kw)

    def test_two_worker_walkthrough(self):
        # w1 polls (2 Positive, 1 Negative) and is credited; w2 polls
        # (0 Positive, 3 Negative), earns nothing and picks up a flag.
        block = make_block(
            [tally(1, 2, 1), tally(2, 0, 3)],
            validator_rwds={dev(5): 4, dev(6): 4, dev(7): 4},
        )
        served = {dev(1): True, dev(2): True}
        ledger, flagged, blacklisted = apply_block(self.ledger(), block, served)
        assert ledger.stake_of(dev(1)) == 750
        assert ledger.stake_of(dev(2)) == 0
        assert flagged == frozenset([dev(2)])
        assert ledger.streak_of(dev(2)) == 1
        assert not blacklisted
        assert ledger.stake_of(dev(9)) == 60
        assert ledger.stake_of(dev(5)) == 4

    def test_reward_recomputed_not_trusted(self):
        # An inflated self-report is denied and treated as a flag.
        block = make_block([tally(3, 3, 0, expected=10**6)])
        ledger, flagged, _ = apply_block(self.ledger(), block, {dev(3): True})
        assert ledger.stake_of(dev(3)) == 0
        assert flagged == frozenset([dev(3)])

    def test_blacklisted_on_kick_r_consecutive_worker_rounds(self):
        ledger = self.ledger()
        for round_no in range(1, 7):
            block = make_block([tally(4, 0, 3)], round=round_no, miner_rwd=0)
            ledger, flagged, blacklisted = apply_block(ledger, block, {dev(4): True})
            assert dev(4) in flagged
            if round_no < 6:
                assert not blacklisted, f"blacklisted too early at round {round_no}"
            else:
                assert blacklisted == frozenset([dev(4)])
        assert dev(4) in ledger.blacklist

    def test_non_worker_round_leaves_streak_unchanged(self):
        ledger = self.ledger(flag_streak={dev(4): 3})
        block = make_block([tally(1, 2, 0)], miner_rwd=0)
        ledger, _, _ = apply_block(ledger, block, {dev(1): True, dev(4): False})
        assert ledger.streak_of(dev(4)) == 3

    def test_positive_worker_round_resets_streak(self):
        ledger = self.ledger(flag_streak={dev(4): 5})
        block = make_block([tally(4, 3, 0)], miner_rwd=0)
        ledger, flagged, blacklisted = apply_block(ledger, block, {dev(4): True})
        assert not flagged and not blacklisted
        assert ledger.streak_of(dev(4)) == 0

    def test_zero_vote_worker_unrewarded_but_resets(self):
        # A worker whose transaction reached no validator has no tally: it
        # earns nothing and, being unflagged, clears its streak.
        ledger = self.ledger(flag_streak={dev(4): 2})
        block = make_block([tally(1, 2, 0)], miner_rwd=0)
        ledger, _, _ = apply_block(ledger, block, {dev(1): True, dev(4): True})
        assert ledger.stake_of(dev(4)) == 0
        assert ledger.streak_of(dev(4)) == 0

    def test_blacklisted_stake_frozen(self):
        ledger = self.ledger(stake={dev(4): 100}, blacklist=frozenset([dev(4)]))
        block = make_block([tally(4, 3, 0)], miner_rwd=0)
        ledger, _, _ = apply_block(ledger, block, {dev(4): True})
        assert ledger.stake_of(dev(4)) == 100

    def test_earnings_decomposition(self):
        block = make_block(
            [tally(1, 2, 1)], miner=9, miner_rwd=60, validator_rwds={dev(5): 24}
        )
        ledger, _, _ = apply_block(self.ledger(), block, {dev(1): True})
        assert ledger.earned_as(dev(1), "worker") == 750
        assert ledger.earned_as(dev(5), "validator") == 24
        assert ledger.earned_as(dev(9), "miner") == 60
        assert ledger.earned_as(dev(1), "miner") == 0

    def test_input_ledger_unmodified(self):
        before = self.ledger(stake={dev(1): 5})
        block = make_block([tally(1, 1, 0)], miner_rwd=0)
        apply_block(before, block, {dev(1): True})
        assert before.stake_of(dev(1)) == 5


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(1, 30),   # worker
            st.integers(0, 5),    # positives
            st.integers(0, 5),    # negatives
        ),
        max_size=8,
    ),
    st.integers(0, 100),
)
def test_stake_monotone_and_conserved(votes, miner_rwd):
    # Brute-force conservation oracle: total stake increase equals the
    # block's qualified reward total, and no stake ever decreases.
    seen = set()
    tallies = []
    for worker, pos, neg in votes:
        if worker in seen:
            continue
        seen.add(worker)
        tallies.append(tally(worker, pos, neg))
    block = make_block(tallies, miner_rwd=miner_rwd, validator_rwds={dev(40): 7})
    start = StakeLedger(unit_reward=1, kick_r=6, stake={dev(1): 3})
    after, _, _ = apply_block(start, block, {dev(w): True for w in seen})
    for d in set(start.stake) | set(after.stake):
        assert after.stake_of(d) >= start.stake_of(d)
    increase = sum(after.stake.values()) - sum(start.stake.values())
    assert increase == block_reward_total(block, 1)
