"""Brute-force reference interpreter for the registry state machine.

Written independently of the production contract and kept deliberately dumb:
flat dicts, full rescan of vote tallies after every transaction, no
incremental bookkeeping.  Used as the equivalence oracle for randomized
transaction sequences.
"""

from __future__ import annotations


class ReferenceRegistry:
    def __init__(self, genesis_number, genesis_members, cost):
        self.cur_number = genesis_number
        self.cur_members = tuple(genesis_members)
        self.cost = cost
        self.balance = 0
        self.collected = 0
        self.paid = 0
        self.rewards = {}  # node -> total paid out
        # registration rows: [id, fee, join_paid, leave_paid]
        self.regs = []
        # votes: (number, members tuple) -> list of voters in arrival order
        self.votes = {}

    # -- helpers ------------------------------------------------------------

    def _active_reg_exists(self, node):
        return any(r[0] == node and not (r[2] and r[3]) for r in self.regs)

    def _threshold(self):
        n = len(self.cur_members)
        return (n - 1) // 3 + 1

    # -- transactions -------------------------------------------------------

    def register(self, node, fee):
        if fee < self.cost:
            return False
        if self._active_reg_exists(node):
            return False
        self.regs.append([node, fee, False, False])
        self.balance += fee
        self.collected += fee
        return True

    def vote(self, number, members, voter):
        members = tuple(members)
        if voter not in self.cur_members:
            return False
        if number <= self.cur_number:
            return False
        key = (number, members)
        voters = self.votes.setdefault(key, [])
        if voter not in voters:
            voters.append(voter)
        self._settle()
        return True

    def _settle(self):
        while True:
            candidates = []
            for (number, members), voters in self.votes.items():
                counted = [p for p in voters if p in self.cur_members]
                if number > self.cur_number and len(counted) >= self._threshold():
                    candidates.append((number, members, counted))
            if not candidates:
                return
            number, members, counted = max(
                candidates, key=lambda c: (c[0], tuple(reversed(c[1])))
            )
            joining = set(members) - set(self.cur_members)
            leaving = set(self.cur_members) - set(members)
            reward = 0
            for r in self.regs:
                if r[0] in joining and not r[2]:
                    reward += r[1] // 2
                    r[2] = True
                if r[0] in leaving and not r[3]:
                    reward += r[1] // 2
                    r[3] = True
            share = reward // len(counted)
            for p in counted:
                self.rewards[p] = self.rewards.get(p, 0) + share
                self.balance -= share
                self.paid += share
            assert self.balance >= 0, "reference registry went insolvent"
            self.cur_number = number
            self.cur_members = members
            self.votes = {
                key: voters for key, voters in self.votes.items() if key[0] > number
            }

    # -- state snapshot for equivalence checks ------------------------------

    def snapshot(self):
        return {
            "config": (self.cur_number, self.cur_members),
            "balance": self.balance,
            "collected": self.collected,
            "paid": self.paid,
            "rewards": dict(sorted(self.rewards.items())),
            "regs": sorted((r[0], r[1], r[2], r[3]) for r in self.regs),
            "votes": {
                key: tuple(sorted(voters)) for key, voters in sorted(self.votes.items())
            },
        }
