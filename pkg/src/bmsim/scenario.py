"""Scenario files: experiment inputs, validation, and the long-range attack
generator.

Scenarios are plain JSON.  Validation happens before any event runs and names
the offending field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from bmsim.adversary import CorruptionEntry, validate_schedule
from bmsim.errors import ScenarioValidationError
from bmsim.ledger import GasSchedule, PriceModel
from bmsim.membership import Configuration, Policy, max_batch_threshold, max_correct_leavers, policy_threshold
from bmsim.node import Behavior

DEFAULT_BLOCK_MEAN = 15.0
DEFAULT_BLOCK_SD = 2.0
DEFAULT_BLOCK_MIN = 1.0
DEFAULT_TX_MEAN = 27.7
DEFAULT_TX_SD = 24.9
DEFAULT_TX_MIN = 0.0
DEFAULT_DEPTH = 37
DEFAULT_CHECKPOINT = 20.0
DEFAULT_TOB_LATENCY = 0.95
DEFAULT_COST = 100


@dataclass
class ChurnOp:
    op: str            # "join" | "leave" | "evict"
    node: str
    by: str | None = None   # evict: the member that submits the request


@dataclass
class ClientSettings:
    mode: str = "with_bms"           # "with_bms" | "no_bms"
    p_bound: float | None = None     # defaults to publish grace period
    reconnect_offset: float = 60.0   # after corruption completes


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 1
    initial_size: int = 4
    churn: list[ChurnOp] = field(default_factory=list)
    policy: Policy = Policy.EVERY
    fixed_t: int | None = None
    checkpoint_interval: float = DEFAULT_CHECKPOINT
    confirmation_depth: int = DEFAULT_DEPTH
    block_mean: float = DEFAULT_BLOCK_MEAN
    block_sd: float = DEFAULT_BLOCK_SD
    block_min: float = DEFAULT_BLOCK_MIN
    tx_mean: float = DEFAULT_TX_MEAN
    tx_sd: float = DEFAULT_TX_SD
    tx_min: float = DEFAULT_TX_MIN
    gas: GasSchedule = field(default_factory=GasSchedule)
    price: PriceModel = field(default_factory=PriceModel)
    gst: float = 0.0
    delta: float = 0.05
    pre_gst_drop_probability: float = 0.0
    pre_gst_max_delay: float = 1.0
    tob_latency: float = DEFAULT_TOB_LATENCY
    registration_cost: int = DEFAULT_COST
    registration_fee: int = DEFAULT_COST
    corruption: list[CorruptionEntry] = field(default_factory=list)
    client: ClientSettings | None = None
    leavers_vote: bool = True
    bypass_validation: bool = False
    revote_timeout: float | None = None
    publish_grace: float | None = None   # the grace period P
    valid_poms: list[str] = field(default_factory=list)
    max_sim_time: float = 2_000_000.0

    # -- derived defaults -----------------------------------------------------

    def grace_p(self) -> float:
        if self.publish_grace is not None:
            return self.publish_grace
        return self.confirmation_depth * self.block_mean + self.delta

    def revote_after(self) -> float:
        if self.revote_timeout is not None:
            return self.revote_timeout
        return 2.0 * self.confirmation_depth * self.block_mean

    def initial_members(self) -> tuple[str, ...]:
        return tuple(f"n{i}" for i in range(self.initial_size))

    def projected_member_sets(self) -> list[tuple[str, ...]]:
        """Membership after each churn op, starting from genesis."""
        members = list(self.initial_members())
        out = [tuple(members)]
        for op in self.churn:
            if op.op == "join":
                members.append(op.node)
            else:
                members.remove(op.node)
            out.append(tuple(members))
        return out

    # -- validation --------------------------------------------------------------

    def validate(self) -> None:
        if self.initial_size < 1:
            raise ScenarioValidationError("initial_size", "must be at least 1")
        if self.registration_fee < self.registration_cost:
            raise ScenarioValidationError(
                "registration_fee", "below registration_cost: every join would be rejected"
            )
        if self.policy is Policy.FIXED and (self.fixed_t is None or self.fixed_t < 1):
            raise ScenarioValidationError("fixed_t", "fixed policy needs fixed_t >= 1")

        members = set(self.initial_members())
        for i, op in enumerate(self.churn):
            label = f"churn[{i}]"
            if op.op not in ("join", "leave", "evict"):
                raise ScenarioValidationError(label, f"unknown op {op.op!r}")
            if op.op == "join":
                if op.node in members:
                    raise ScenarioValidationError(label, f"{op.node} is already a member")
                members.add(op.node)
            else:
                if op.node not in members:
                    raise ScenarioValidationError(label, f"{op.node} is not a member at that point")
                if op.op == "evict" and op.node not in self.valid_poms:
                    raise ScenarioValidationError(label, f"no valid misbehavior proof for {op.node}")
                members.remove(op.node)

        declared = set(self.initial_members()) | {op.node for op in self.churn if op.op == "join"}
        for i, entry in enumerate(self.corruption):
            if entry.node not in declared:
                raise ScenarioValidationError(f"corruption[{i}]", f"unknown node {entry.node}")

        if not self.bypass_validation:
            for member_set in self.projected_member_sets():
                config = Configuration(0, member_set)
                t = policy_threshold(self.policy, config, self.fixed_t)
                bound = max_batch_threshold(config)
                if t > bound:
                    raise ScenarioValidationError(
                        "policy",
                        f"threshold {t} exceeds the batching bound {bound} at size {len(member_set)}",
                    )

        validate_schedule(self.corruption, self.projected_member_sets(), self.bypass_validation)

    # -- serialization ---------------------------------------------------------------

    def to_json(self) -> str:
        def entry_dict(entry: CorruptionEntry) -> dict:
            d = {"node": entry.node, "behaviors": [b.value for b in entry.behaviors]}
            if entry.at_time is not None:
                d["at_time"] = entry.at_time
            if entry.after_retirement:
                d["after_retirement"] = True
            return d

        data = {
            "name": self.name,
            "seed": self.seed,
            "initial_size": self.initial_size,
            "churn": [asdict(op) for op in self.churn],
            "policy": self.policy.value,
            "fixed_t": self.fixed_t,
            "checkpoint_interval": self.checkpoint_interval,
            "confirmation_depth": self.confirmation_depth,
            "block": {"mean": self.block_mean, "sd": self.block_sd, "min": self.block_min},
            "tx_inclusion": {"mean": self.tx_mean, "sd": self.tx_sd, "min": self.tx_min},
            "gas": self.gas.as_dict(),
            "price": {"gas_price_gwei": self.price.gas_price_gwei, "eth_usd": self.price.eth_usd},
            "network": {
                "gst": self.gst,
                "delta": self.delta,
                "pre_gst_drop_probability": self.pre_gst_drop_probability,
                "pre_gst_max_delay": self.pre_gst_max_delay,
            },
            "tob_latency": self.tob_latency,
            "registration_cost": self.registration_cost,
            "registration_fee": self.registration_fee,
            "corruption": [entry_dict(e) for e in self.corruption],
            "client": asdict(self.client) if self.client else None,
            "leavers_vote": self.leavers_vote,
            "bypass_validation": self.bypass_validation,
            "revote_timeout": self.revote_timeout,
            "publish_grace": self.publish_grace,
            "valid_poms": self.valid_poms,
            "max_sim_time": self.max_sim_time,
        }
        return json.dumps(data, indent=2)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    sc = ScenarioConfig()
    sc.name = data.get("name", sc.name)
    sc.seed = data.get("seed", sc.seed)
    sc.initial_size = data.get("initial_size", sc.initial_size)

    for i, op in enumerate(data.get("churn", [])):
        if "op" not in op or "node" not in op:
            raise ScenarioValidationError(f"churn[{i}]", "needs 'op' and 'node'")
        sc.churn.append(ChurnOp(op=op["op"], node=op["node"], by=op.get("by")))

    policy = data.get("policy", "every")
    try:
        sc.policy = Policy(policy)
    except ValueError:
        raise ScenarioValidationError("policy", f"unknown policy {policy!r}") from None
    sc.fixed_t = data.get("fixed_t")

    sc.checkpoint_interval = data.get("checkpoint_interval", sc.checkpoint_interval)
    sc.confirmation_depth = data.get("confirmation_depth", sc.confirmation_depth)
    block = data.get("block", {})
    sc.block_mean = block.get("mean", sc.block_mean)
    sc.block_sd = block.get("sd", sc.block_sd)
    sc.block_min = block.get("min", sc.block_min)
    tx = data.get("tx_inclusion", {})
    sc.tx_mean = tx.get("mean", sc.tx_mean)
    sc.tx_sd = tx.get("sd", sc.tx_sd)
    sc.tx_min = tx.get("min", sc.tx_min)

    if "gas" in data:
        known = GasSchedule().as_dict()
        for key in data["gas"]:
            if key not in known:
                raise ScenarioValidationError("gas", f"unknown gas constant {key!r}")
        sc.gas = GasSchedule(**{**known, **data["gas"]})
    if "price" in data:
        sc.price = PriceModel(**data["price"])

    network = data.get("network", {})
    sc.gst = network.get("gst", sc.gst)
    sc.delta = network.get("delta", sc.delta)
    sc.pre_gst_drop_probability = network.get("pre_gst_drop_probability", sc.pre_gst_drop_probability)
    sc.pre_gst_max_delay = network.get("pre_gst_max_delay", sc.pre_gst_max_delay)

    sc.tob_latency = data.get("tob_latency", sc.tob_latency)
    sc.registration_cost = data.get("registration_cost", sc.registration_cost)
    sc.registration_fee = data.get("registration_fee", sc.registration_cost)
    if "registration_fee" in data:
        sc.registration_fee = data["registration_fee"]

    for i, entry in enumerate(data.get("corruption", [])):
        label = f"corruption[{i}]"
        if "node" not in entry:
            raise ScenarioValidationError(label, "needs 'node'")
        behaviors = []
        for b in entry.get("behaviors", []):
            try:
                behaviors.append(Behavior(b))
            except ValueError:
                raise ScenarioValidationError(label, f"unknown behavior {b!r}") from None
        at_time = entry.get("at_time")
        after_retirement = entry.get("after_retirement", False)
        if (at_time is None) == (not after_retirement):
            raise ScenarioValidationError(label, "needs exactly one of at_time / after_retirement")
        sc.corruption.append(
            CorruptionEntry(
                node=entry["node"],
                behaviors=tuple(behaviors),
                at_time=at_time,
                after_retirement=after_retirement,
            )
        )

    if data.get("client"):
        c = data["client"]
        mode = c.get("mode", "with_bms")
        if mode not in ("with_bms", "no_bms"):
            raise ScenarioValidationError("client.mode", f"unknown mode {mode!r}")
        sc.client = ClientSettings(
            mode=mode,
            p_bound=c.get("p_bound"),
            reconnect_offset=c.get("reconnect_offset", 60.0),
        )

    sc.leavers_vote = data.get("leavers_vote", sc.leavers_vote)
    sc.bypass_validation = data.get("bypass_validation", sc.bypass_validation)
    sc.revote_timeout = data.get("revote_timeout")
    sc.publish_grace = data.get("publish_grace")
    sc.valid_poms = data.get("valid_poms", [])
    sc.max_sim_time = data.get("max_sim_time", sc.max_sim_time)
    return sc


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ScenarioValidationError("file", f"not valid JSON: {exc}") from None
    sc = scenario_from_dict(data)
    sc.validate()
    return sc


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def growth_scenario(
    policy: Policy,
    from_size: int = 4,
    to_size: int = 100,
    seed: int = 1,
    gas: GasSchedule | None = None,
) -> ScenarioConfig:
    """Sequential growth by single joins, the measurement workload."""
    sc = ScenarioConfig(name=f"growth-{policy.value}-{from_size}-{to_size}", seed=seed)
    sc.initial_size = from_size
    sc.policy = policy
    if gas is not None:
        sc.gas = gas
    sc.churn = [ChurnOp("join", f"m{i}") for i in range(to_size - from_size)]
    sc.validate()
    return sc


def long_range_scenario(
    mode: str = "with_bms",
    seed: int = 1,
    initial_size: int = 4,
    leaves_per_publish: int = 1,
) -> ScenarioConfig:
    """Full turnover of the initial membership followed by corruption of the
    retired nodes and a stale client reconnecting."""
    if initial_size < 4:
        raise ScenarioValidationError("initial_size", "turnover needs at least 4 nodes")
    genesis = Configuration(0, tuple(f"n{i}" for i in range(initial_size)))
    if leaves_per_publish > max_correct_leavers(genesis):
        raise ScenarioValidationError(
            "leaves_per_publish",
            f"{leaves_per_publish} correct departures per publication exceeds "
            f"the bound {max_correct_leavers(genesis)}: the turnover would be unpublishable",
        )
    sc = ScenarioConfig(name=f"long-range-{mode}", seed=seed)
    sc.initial_size = initial_size
    sc.policy = Policy.EVERY
    sc.churn = [ChurnOp("join", f"m{i}") for i in range(initial_size)]
    sc.churn += [ChurnOp("leave", f"n{i}") for i in range(initial_size)]
    sc.corruption = [
        CorruptionEntry(
            node=f"n{i}",
            behaviors=(Behavior.STALE_QUORUM, Behavior.FORGE_CONFIG_RESPONSE),
            after_retirement=True,
        )
        for i in range(initial_size)
    ]
    sc.client = ClientSettings(mode=mode)
    sc.validate()
    return sc
