"""Simulated single-chain ledger hosting the registry contract.

Blocks are produced at truncated-normal intervals; submitted transactions
become includable after a truncated-normal inclusion delay and execute, in
submission order, in the first block produced after that.  There are no forks:
finality is modeled purely through the confirmation depth that observers apply
to the head.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Callable

from bmsim.canonical import encode
from bmsim.contract import ExecutionReport, RegistryContract
from bmsim.errors import InvalidInputError
from bmsim.membership import Configuration, NodeId
from bmsim.simcore import SimulationCore, TruncatedNormal


@dataclass
class GasSchedule:
    """Gas charged per transaction.

    A vote pays the flat overhead, a storage write for the vote itself and a
    per-member scan of the stored configuration for the membership check.
    The first vote for a configuration initializes its bookkeeping; the vote
    that triggers an update additionally pays per member added to storage and
    is refunded per member freed.  Rejected transactions pay the overhead
    only.
    """

    g_base: int = 21_000
    g_vote_store: int = 10_000
    g_vote_per_member: int = 150
    g_first_vote_init: int = 12_000
    g_update_fixed: int = 8_000
    g_update_per_member: int = 20_000
    g_register: int = 65_000
    refund_per_freed_member: int = 4_800

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise InvalidInputError(f"gas constant {name} must be non-negative")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PriceModel:
    gas_price_gwei: float = 93.1
    eth_usd: float = 386.10

    def __post_init__(self):
        if self.gas_price_gwei <= 0 or self.eth_usd <= 0:
            raise InvalidInputError("price model values must be positive")


def usd_cost(gas: float, pm: PriceModel) -> float:
    """Gas -> Gwei -> Ether -> USD."""
    return gas * pm.gas_price_gwei * 1e-9 * pm.eth_usd


@dataclass(frozen=True)
class LedgerTransaction:
    kind: str                    # "register" | "vote"
    submitter: NodeId
    submitted_at: float
    attached_funds: int = 0
    node: NodeId | None = None          # register
    fee: int = 0                        # register
    config: Configuration | None = None  # vote

    def to_bytes(self) -> bytes:
        if self.kind == "register":
            body = (self.kind, self.node, self.fee, self.submitter, self.attached_funds)
        else:
            body = (
                self.kind,
                self.config.number,
                tuple(self.config.members),
                self.submitter,
            )
        return encode(body)


@dataclass
class TxReceipt:
    gas_used: int
    included_height: int
    accepted: bool


@dataclass
class TxRecord:
    tx_id: int
    tx: LedgerTransaction
    ready_at: float
    inclusion_delay: float
    included_height: int | None = None
    included_at: float | None = None
    receipt: TxReceipt | None = None
    report: ExecutionReport | None = None


@dataclass
class Block:
    height: int
    produced_at: float
    tx_ids: list[int] = field(default_factory=list)


class ObserverView:
    """A single observer's (possibly delayed) view of the chain.

    State is derived only from blocks at least `depth` below the observed
    head; the genesis configuration is public knowledge and visible from the
    start.
    """

    def __init__(self, ledger: "Ledger", delay: float = 0.0):
        self._ledger = ledger
        self.delay = delay
        self.head_height = 0
        self.head_time = 0.0

    def advance(self, height: int, produced_at: float) -> None:
        if height < self.head_height:
            raise InvalidInputError("observer view went backwards")
        self.head_height = height
        self.head_time = produced_at

    @property
    def confirmed_height(self) -> int:
        return max(0, self.head_height - self._ledger.confirmation_depth)

    def stored_config(self) -> Configuration:
        return self._ledger.stored_config_at(self.confirmed_height)

    def registration_visible(self, node: NodeId) -> bool:
        height = self._ledger.registration_height(node)
        return height is not None and height <= self.confirmed_height


class Ledger:
    """Block production, transaction inclusion and gas accounting."""

    def __init__(
        self,
        sim: SimulationCore,
        contract: RegistryContract,
        gas: GasSchedule | None = None,
        price: PriceModel | None = None,
        block_interval: TruncatedNormal | None = None,
        inclusion_delay: TruncatedNormal | None = None,
        confirmation_depth: int = 37,
    ):
        self.sim = sim
        self.contract = contract
        self.gas = gas or GasSchedule()
        self.price = price or PriceModel()
        self.block_interval = block_interval or TruncatedNormal(15.0, 2.0, 1.0)
        self.inclusion_delay = inclusion_delay or TruncatedNormal(27.7, 24.9, 0.0)
        self.confirmation_depth = confirmation_depth

        self.blocks: list[Block] = [Block(height=0, produced_at=0.0)]
        self.records: dict[int, TxRecord] = {}
        self._pending: list[int] = []
        self._tx_ids = itertools.count(1)
        # (height, config) for every stored-configuration change, genesis first
        self.config_log: list[tuple[int, Configuration]] = [(0, contract.c_cur)]
        self._config_heights: list[int] = [0]
        self.update_heights: list[tuple[int, float]] = []
        self._registration_heights: dict[NodeId, int] = {}
        self._observers: list[tuple[ObserverView, Callable[[], None] | None]] = []
        self._block_hooks: list[Callable[[Block], None]] = []
        self._started = False

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self._schedule_next_block()

    def _schedule_next_block(self) -> None:
        interval = self.block_interval.draw(self.sim.rng)
        self.sim.schedule_in(interval, self._produce_block, label="block")

    # -- transactions ----------------------------------------------------------

    def submit_tx(self, tx: LedgerTransaction) -> int:
        delay = self.inclusion_delay.draw(self.sim.rng)
        tx_id = next(self._tx_ids)
        self.records[tx_id] = TxRecord(
            tx_id=tx_id, tx=tx, ready_at=tx.submitted_at + delay, inclusion_delay=delay
        )
        self._pending.append(tx_id)
        return tx_id

    def _produce_block(self) -> None:
        height = len(self.blocks)
        block = Block(height=height, produced_at=self.sim.now)
        still_pending = []
        for tx_id in self._pending:
            record = self.records[tx_id]
            if record.ready_at <= self.sim.now:
                self._execute(record, block)
            else:
                still_pending.append(tx_id)
        self._pending = still_pending
        self.blocks.append(block)
        self.contract.check_conservation()
        for hook in self._block_hooks:
            hook(block)
        self._notify_observers(block)
        self._schedule_next_block()

    def _execute(self, record: TxRecord, block: Block) -> None:
        tx = record.tx
        if tx.kind == "register":
            report = self.contract.apply_register(tx.node, tx.fee)
            if report.accepted:
                self._registration_heights[tx.node] = block.height
        elif tx.kind == "vote":
            report = self.contract.apply_vote(tx.config, tx.submitter)
            for event in report.updates:
                self.config_log.append((block.height, event.new))
                self._config_heights.append(block.height)
                self.update_heights.append((block.height, self.sim.now))
        else:
            raise InvalidInputError(f"unknown transaction kind {tx.kind!r}")
        gas = self._meter(report)
        record.report = report
        record.receipt = TxReceipt(gas_used=gas, included_height=block.height, accepted=report.accepted)
        record.included_height = block.height
        record.included_at = self.sim.now
        block.tx_ids.append(record.tx_id)

    def _meter(self, report: ExecutionReport) -> int:
        g = self.gas
        if not report.accepted:
            return g.g_base
        if report.kind == "register":
            return g.g_register
        gas = g.g_base + g.g_vote_store + g.g_vote_per_member * report.scanned_members
        if report.first_vote:
            gas += g.g_first_vote_init
        for event in report.updates:
            gas += g.g_update_fixed
            gas += g.g_update_per_member * event.members_added
            gas -= g.refund_per_freed_member * event.members_removed
        return max(gas, g.g_base)

    # -- queries ------------------------------------------------------------------

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def is_confirmed(self, tx_id: int, depth: int | None = None) -> bool:
        record = self.records.get(tx_id)
        if record is None:
            raise InvalidInputError(f"unknown transaction {tx_id}")
        if record.included_height is None:
            return False
        depth = self.confirmation_depth if depth is None else depth
        return self.head.height - record.included_height >= depth

    def stored_config_at(self, height: int) -> Configuration:
        idx = bisect.bisect_right(self._config_heights, height) - 1
        return self.config_log[max(idx, 0)][1]

    def registration_height(self, node: NodeId) -> int | None:
        return self._registration_heights.get(node)

    # -- observers -------------------------------------------------------------------

    def attach_observer(self, delay: float = 0.0, on_advance: Callable[[], None] | None = None) -> ObserverView:
        view = ObserverView(self, delay)
        # a freshly booting observer syncs the existing chain before watching
        view.advance(self.head.height, self.head.produced_at)
        self._observers.append((view, on_advance))
        return view

    def add_block_hook(self, hook: Callable[[Block], None]) -> None:
        self._block_hooks.append(hook)

    def _notify_observers(self, block: Block) -> None:
        for view, callback in self._observers:
            if view.delay <= 0.0:
                view.advance(block.height, block.produced_at)
                if callback is not None:
                    callback()
            else:
                self.sim.schedule_in(
                    view.delay,
                    lambda v=view, cb=callback, b=block: self._advance_delayed(v, cb, b),
                    label="observe",
                )

    @staticmethod
    def _advance_delayed(view: ObserverView, callback, block: Block) -> None:
        view.advance(block.height, block.produced_at)
        if callback is not None:
            callback()

    # -- reporting ----------------------------------------------------------------------

    def pending_records(self) -> list[TxRecord]:
        return [self.records[tx_id] for tx_id in self._pending]

    def vote_records(self) -> list[TxRecord]:
        return [r for r in self.records.values() if r.tx.kind == "vote" and r.receipt]

    def executed_records(self) -> list[TxRecord]:
        out = []
        for block in self.blocks:
            for tx_id in block.tx_ids:
                out.append(self.records[tx_id])
        return out
