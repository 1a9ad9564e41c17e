"""Wires a scenario into a full deterministic run: engine, ledger, contract,
replicas, churn driver, adversary and client."""

from __future__ import annotations

from dataclasses import dataclass, field

from bmsim.adversary import AdversaryController
from bmsim.client import ClientMode, ClusterClient
from bmsim.contract import RegistryContract
from bmsim.errors import InvariantViolation
from bmsim.ledger import Ledger, PriceModel
from bmsim.membership import Configuration, symmetric_difference
from bmsim.metrics import (
    ConfigRecord,
    JoinRecord,
    RunMonitor,
    UpdateRecord,
    VoteRecord,
)
from bmsim.node import BftNode, JoinerAgent, LeaverAgent, NodeParams, TotalOrderBroadcast
from bmsim.scenario import ScenarioConfig
from bmsim.simcore import NetworkConfig, SimulationCore, TruncatedNormal


@dataclass
class RunResult:
    scenario_name: str
    seed: int
    end_time: float
    completed: bool
    joins: list[JoinRecord]
    votes: list[VoteRecord]
    updates: list[UpdateRecord]
    configs: list[ConfigRecord]
    client_outcomes: list
    price: PriceModel
    block_rows: list[tuple] = field(default_factory=list)

    @property
    def forged_accepted(self) -> int:
        return sum(1 for o in self.client_outcomes if o.forged)

    @property
    def honest_accepted(self) -> int:
        return sum(1 for o in self.client_outcomes if not o.forged)


class ChurnDriver:
    """Paces the churn sequence: the next membership change starts only when
    the previous one is fully settled (admitted, any triggered publication
    executed, confirmed and observed by every correct replica)."""

    POLL = 5.0

    def __init__(self, run: "SimulationRun"):
        self.run = run
        self.ops = list(run.scenario.churn)
        self.index = 0
        self.done = False
        self._current_agent: JoinerAgent | None = None
        self._current_op = None

    def start(self) -> None:
        self._next_op()

    def _next_op(self) -> None:
        if self.index >= len(self.ops):
            self.done = True
            return
        op = self.ops[self.index]
        self.index += 1
        self._current_op = op
        run = self.run
        if op.op == "join":
            node = run.new_node(op.node)
            agent = JoinerAgent(node)
            self._current_agent = agent
            agent.start()
            delay = run.ledger.records[agent.register_tx_id].inclusion_delay
            run.monitor.join_started(op.node, run.sim.now, delay)
        elif op.op == "leave":
            LeaverAgent(run.nodes[op.node]).start()
        elif op.op == "evict":
            submitter = op.by or next(
                m for m in run.nodes[op.node].c_cur.members if m != op.node
            )
            payload = ("evict_request", op.node, self.index, ("pom", op.node))
            for member in run.nodes[submitter].c_cur.members:
                run.sim.send(submitter, member, payload)
        run.sim.schedule_in(self.POLL, self._poll, label="driver-poll")

    def _poll(self) -> None:
        if self._settled():
            self._current_agent = None
            self._next_op()
        else:
            self.run.sim.schedule_in(self.POLL, self._poll, label="driver-poll")

    def _settled(self) -> bool:
        op = self._current_op
        run = self.run
        if op.op == "join":
            if self._current_agent is None or not self._current_agent.admitted:
                return False
        else:
            target = run.nodes[op.node]
            if not target.retired:
                return False
        return run.quiescent()


class SimulationRun:
    def __init__(self, scenario: ScenarioConfig):
        scenario.validate()
        self.scenario = scenario
        network = NetworkConfig(
            gst=scenario.gst,
            delta=scenario.delta,
            pre_gst_drop_probability=scenario.pre_gst_drop_probability,
            pre_gst_max_delay=scenario.pre_gst_max_delay,
        )
        self.sim = SimulationCore(seed=scenario.seed, network=network)
        genesis = Configuration(0, scenario.initial_members())
        self.genesis = genesis
        self.contract = RegistryContract(genesis, cost=scenario.registration_cost)
        self.monitor = RunMonitor(
            enforce_overlap=True,
            enforce_checkpoint_bound=False,
            checkpoint_interval=scenario.checkpoint_interval,
        )
        self.monitor.contract = self.contract
        self.monitor.bypass = scenario.bypass_validation
        self.ledger = Ledger(
            self.sim,
            self.contract,
            gas=scenario.gas,
            price=scenario.price,
            block_interval=TruncatedNormal(scenario.block_mean, scenario.block_sd, scenario.block_min),
            inclusion_delay=TruncatedNormal(scenario.tx_mean, scenario.tx_sd, scenario.tx_min),
            confirmation_depth=scenario.confirmation_depth,
        )
        self.tob = TotalOrderBroadcast(self.sim, latency=scenario.tob_latency)
        self.params = NodeParams(
            checkpoint_interval=scenario.checkpoint_interval,
            policy=scenario.policy,
            fixed_t=scenario.fixed_t,
            revote_timeout=scenario.revote_after(),
            leavers_vote=scenario.leavers_vote,
            registration_fee=scenario.registration_fee,
            pom_validator=lambda node, pom: node in scenario.valid_poms,
        )

        self.nodes: dict[str, BftNode] = {}
        for member in genesis.members:
            node = self._make_node(member)
            node.activate(from_log_index=0)

        self.adversary = AdversaryController(
            self.sim, self.monitor, grace_p=scenario.grace_p(), bypass=scenario.bypass_validation
        )
        self.adversary.setup(scenario.corruption, self.nodes, genesis)
        self._wire_publications()

        self.client: ClusterClient | None = None
        if scenario.client is not None:
            mode = ClientMode(scenario.client.mode)
            p_bound = scenario.client.p_bound or scenario.grace_p()
            self.client = ClusterClient(
                self.sim, "client", self.ledger, mode, p_bound, monitor=self.monitor
            )

        self.driver = ChurnDriver(self)
        self._client_scheduled = False

    # -- construction helpers ----------------------------------------------------

    def _make_node(self, node_id: str) -> BftNode:
        node = BftNode(
            self.sim, node_id, self.tob, self.ledger, self.genesis, self.params, self.monitor
        )
        self.nodes[node_id] = node
        return node

    def new_node(self, node_id: str) -> BftNode:
        return self._make_node(node_id)

    def _wire_publications(self) -> None:
        seen = {self.contract.c_cur.key()}

        def hook(block):
            stored = self.contract.c_cur
            if stored.key() not in seen:
                seen.add(stored.key())
                self.adversary.on_publication(stored, self.sim.now)

        self.ledger.add_block_hook(hook)

    # -- checkpointing -------------------------------------------------------------

    def _checkpoint_tick(self) -> None:
        for node in list(self.nodes.values()):
            if node.active:
                node.on_checkpoint()
        self.sim.schedule_in(
            self.scenario.checkpoint_interval, self._checkpoint_tick, label="checkpoint"
        )

    # -- quiescence -------------------------------------------------------------------

    def correct_active_nodes(self) -> list[BftNode]:
        return [
            n
            for n in self.nodes.values()
            if n.active and n.id not in self.monitor.byzantine
        ]

    def quiescent(self) -> bool:
        if any(r.tx.kind == "vote" for r in self.ledger.pending_records()):
            return False
        stored_key = self.contract.c_cur.key()
        for node in self.correct_active_nodes():
            if node.pending:
                return False
            if node.published().key() != stored_key:
                return False
            if symmetric_difference(node.latest_registry_config(), node.c_cur) >= node._t():
                return False
        return True

    # -- main loop -----------------------------------------------------------------------

    def run(self, max_time: float | None = None, step: float = 50.0) -> RunResult:
        cap = max_time if max_time is not None else self.scenario.max_sim_time
        self.ledger.start()
        self.sim.schedule_in(
            self.scenario.checkpoint_interval, self._checkpoint_tick, label="checkpoint"
        )
        if self.client is not None:
            self.client.bootstrap()
        self.driver.start()

        completed = False
        while self.sim.now < cap:
            self.sim.run(until=min(self.sim.now + step, cap))
            self._maybe_fire_client()
            if self._complete():
                completed = True
                break
        if completed:
            self._final_checks()
        return self._collect(completed)

    def _maybe_fire_client(self) -> None:
        if self.client is None or self._client_scheduled or not self.driver.done:
            return
        if self.scenario.corruption and self.adversary.all_activated_at is None:
            return
        self._client_scheduled = True
        offset = self.scenario.client.reconnect_offset
        base = self.adversary.all_activated_at if self.scenario.corruption else self.sim.now
        fire_at = max(self.sim.now, base + offset)
        self.sim.schedule(fire_at, self.client.submit_request, label="client-reconnect")

    def _complete(self) -> bool:
        if not self.driver.done:
            return False
        if self.scenario.corruption and self.adversary.all_activated_at is None:
            return False
        if self.client is not None and not self.client.outcomes:
            return False
        return True

    def _final_checks(self) -> None:
        chains = {}
        for node in self.correct_active_nodes():
            chains.setdefault(node.c_cur.key(), []).append(node.id)
        if len(chains) > 1:
            raise InvariantViolation(f"correct replicas disagree on the final configuration: {chains}")

    # -- result assembly --------------------------------------------------------------------

    def _collect(self, completed: bool) -> RunResult:
        joins = sorted(self.monitor.completed_joins, key=lambda r: r.processed_at)
        votes = []
        gas_by_key: dict[tuple, int] = {}
        for record in self.ledger.vote_records():
            report = record.report
            key = record.tx.config.key()
            votes.append(
                VoteRecord(
                    size=report.proposed_size,
                    config_number=report.proposed_number,
                    gas_used=record.receipt.gas_used,
                    is_first_vote=report.first_vote,
                    is_update_vote=report.triggered_update,
                    accepted=report.accepted,
                    config_key=key,
                )
            )
            if report.accepted:
                gas_by_key[key] = gas_by_key.get(key, 0) + record.receipt.gas_used

        updates = []
        for event, (height, at) in zip(self.contract.update_log, self.ledger.update_heights):
            updates.append(
                UpdateRecord(
                    size=event.new.size,
                    joiners=event.members_added,
                    leavers=event.members_removed,
                    total_gas=gas_by_key.get(event.new.key(), 0),
                    number=event.new.number,
                    height=height,
                    time=at,
                )
            )

        configs = [
            ConfigRecord(
                number=self.genesis.number,
                size=self.genesis.size,
                height=0,
                time=0.0,
                members=self.genesis.members,
            )
        ]
        for update in updates:
            event = next(e for e in self.contract.update_log if e.new.number == update.number)
            configs.append(
                ConfigRecord(
                    number=event.new.number,
                    size=event.new.size,
                    height=update.height,
                    time=update.time,
                    members=event.new.members,
                )
            )

        block_rows = []
        for block in self.ledger.blocks:
            for tx_id in block.tx_ids:
                record = self.ledger.records[tx_id]
                block_rows.append(
                    (
                        block.height,
                        block.produced_at,
                        record.tx.kind,
                        record.receipt.gas_used,
                        record.receipt.accepted,
                    )
                )

        return RunResult(
            scenario_name=self.scenario.name,
            seed=self.scenario.seed,
            end_time=self.sim.now,
            completed=completed,
            joins=joins,
            votes=votes,
            updates=updates,
            configs=configs,
            client_outcomes=list(self.monitor.client_outcomes),
            price=self.scenario.price,
            block_rows=block_rows,
        )


def run_scenario(scenario: ScenarioConfig, max_time: float | None = None) -> RunResult:
    return SimulationRun(scenario).run(max_time=max_time)
