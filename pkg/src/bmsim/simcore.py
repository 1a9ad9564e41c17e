"""Deterministic discrete-event engine, network model and simulated signatures.

A run is single-threaded: events fire in (time, insertion-sequence) order, so
identical scenarios with identical seeds replay identically.  Messages obey an
eventually-synchronous model: before the global stabilization time they may be
dropped or delayed up to a configured bound, afterwards correct-to-correct
delivery takes at most `delta`.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

from bmsim.canonical import encode
from bmsim.errors import InvalidInputError

SimTime = float


@dataclass
class NetworkConfig:
    gst: SimTime = 0.0
    delta: SimTime = 0.05
    pre_gst_drop_probability: float = 0.0
    pre_gst_max_delay: SimTime = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise InvalidInputError("delta must be positive")
        if not 0.0 <= self.pre_gst_drop_probability <= 1.0:
            raise InvalidInputError("drop probability must be within [0, 1]")


@dataclass(frozen=True)
class Envelope:
    sender: str
    receiver: str
    payload: tuple
    sent_at: SimTime
    signature: str


class AuthRegistry:
    """Engine-enforced unforgeable tags standing in for real signatures.

    Per-node secrets are derived from the run seed; a tag verifies only for
    the (node, payload) pair it was produced over.  Nodes may sign arbitrary
    payloads of their own but can never produce another node's tag.
    """

    def __init__(self, seed: int):
        self._seed = seed
        self._secrets: dict[str, bytes] = {}

    def register(self, node_id: str) -> None:
        if node_id not in self._secrets:
            material = f"{self._seed}:{node_id}".encode()
            self._secrets[node_id] = hashlib.sha256(material).digest()

    def known(self, node_id: str) -> bool:
        return node_id in self._secrets

    def sign(self, node_id: str, payload) -> str:
        secret = self._secrets.get(node_id)
        if secret is None:
            raise InvalidInputError(f"unknown node {node_id!r}")
        return hashlib.sha256(secret + b"|" + encode(payload)).hexdigest()

    def verify(self, node_id: str, payload, tag: str) -> bool:
        if node_id not in self._secrets:
            raise InvalidInputError(f"unknown node {node_id!r}")
        return self.sign(node_id, payload) == tag


class EventQueue:
    """Priority queue of (time, seq, callback); seq breaks ties by insertion."""

    def __init__(self):
        self._heap: list[tuple[SimTime, int, str, Callable[[], None]]] = []
        self._seq = 0

    def push(self, at: SimTime, label: str, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (at, self._seq, label, fn))
        self._seq += 1

    def pop(self):
        return heapq.heappop(self._heap)

    def peek_time(self) -> SimTime:
        return self._heap[0][0]

    def __len__(self):
        return len(self._heap)


class SimulationCore:
    """Clock, event queue, RNG, authentication and message transport."""

    def __init__(self, seed: int, network: NetworkConfig | None = None, trace: bool = False):
        import random

        self.seed = seed
        self.rng = random.Random(seed)
        self.network = network or NetworkConfig()
        self.auth = AuthRegistry(seed)
        self.now: SimTime = 0.0
        self._queue = EventQueue()
        self._handlers: dict[str, Callable[[Envelope], None]] = {}
        self._trace: list[tuple[SimTime, str]] | None = [] if trace else None
        self._stopped = False

    # -- scheduling ---------------------------------------------------------

    def schedule(self, at: SimTime, fn: Callable[[], None], label: str = "event") -> None:
        if at < self.now:
            raise InvalidInputError(f"cannot schedule at {at} before now {self.now}")
        self._queue.push(at, label, fn)

    def schedule_in(self, delay: SimTime, fn: Callable[[], None], label: str = "event") -> None:
        self.schedule(self.now + delay, fn, label)

    def stop(self) -> None:
        self._stopped = True

    def run(self, until: SimTime | None = None) -> None:
        while len(self._queue) and not self._stopped:
            if until is not None and self._queue.peek_time() > until:
                self.now = until
                return
            at, _, label, fn = self._queue.pop()
            self.now = at
            if self._trace is not None:
                self._trace.append((at, label))
            fn()

    @property
    def trace(self) -> list[tuple[SimTime, str]]:
        if self._trace is None:
            raise InvalidInputError("run was created without trace capture")
        return self._trace

    # -- messaging ----------------------------------------------------------

    def register_handler(self, node_id: str, handler: Callable[[Envelope], None]) -> None:
        self.auth.register(node_id)
        self._handlers[node_id] = handler

    def send(self, sender: str, receiver: str, payload: tuple) -> None:
        """Queue a message for delivery under the synchrony model."""
        if not self.auth.known(sender):
            raise InvalidInputError(f"unknown sender {sender!r}")
        sig = self.auth.sign(sender, payload)
        env = Envelope(sender, receiver, payload, self.now, sig)
        net = self.network
        if self.now >= net.gst:
            deliver_at = self.now + self.rng.uniform(0.0, net.delta)
        else:
            if self.rng.random() < net.pre_gst_drop_probability:
                return
            adversarial = self.now + self.rng.uniform(0.0, net.pre_gst_max_delay)
            bound = net.gst + self.rng.uniform(0.0, net.delta)
            deliver_at = min(adversarial, bound)
        self.schedule(deliver_at, lambda: self._deliver(env), label=f"deliver:{payload[0]}")

    def _deliver(self, env: Envelope) -> None:
        handler = self._handlers.get(env.receiver)
        if handler is not None:
            handler(env)


# ---------------------------------------------------------------------------
# Truncated-normal sampling
# ---------------------------------------------------------------------------


def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def truncated_mean(mu: float, sigma: float, lower: float) -> float:
    a = (lower - mu) / sigma
    tail = 1.0 - _cdf(a)
    if tail <= 1e-300:
        return lower
    return mu + sigma * _phi(a) / tail


def solve_truncation_location(target_mean: float, sigma: float, lower: float) -> float:
    """Location parameter such that the lower-truncated normal has the target
    mean.  Truncation pulls the mean up, so the location sits at or below the
    target."""
    if target_mean <= lower:
        raise InvalidInputError("target mean must exceed the truncation bound")
    lo, hi = lower - 12.0 * sigma, target_mean
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if truncated_mean(mid, sigma, lower) < target_mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class TruncatedNormal:
    """Lower-truncated normal whose realized mean equals `mean`."""

    mean: float
    sd: float
    minimum: float
    _location: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.sd <= 0:
            raise InvalidInputError("sd must be positive")
        self._location = solve_truncation_location(self.mean, self.sd, self.minimum)

    def draw(self, rng) -> float:
        while True:
            x = rng.normalvariate(self._location, self.sd)
            if x >= self.minimum:
                return x
