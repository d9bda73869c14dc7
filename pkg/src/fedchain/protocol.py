"""Server and client state machines for one federated round over ledger events.

Round life-cycle as seen on the ledger::

    INIT_ROUND (server, plaintext: round id, round public key, global model)
    LOCAL_MODEL x K (clients, encrypted)
    CONTRIB_NOTICE (server, plaintext basis points)
    GLOBAL_MODEL (server, plaintext aggregated model)

Receiving, encrypting and aggregating produce no events. Nodes share no
state; everything crosses the ledger.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .aggregation import AggregationConfig, fed_avg, importance_from_sample_counts
from .contribution import ContributionReport, contribution_reports, federated_contribution, to_fixed_point
from .crypto import (RoundKeyPair, SystemEntropy, decrypt_model, derive_entropy, encrypt_model,
                     generate_round_keypair, load_public_key)
from .errors import (CryptoError, EmptyDataset, PhaseError, RoundAborted, SerializationError,
                     ZeroTotalContribution)
from .ledger import CONTRIB_NOTICE, GLOBAL_MODEL, INIT_ROUND, LOCAL_MODEL, Ledger, LedgerEvent
from .model import ModelWeights, TrainConfig, init_model, train_local
from .wire import SERVER_CLIENT_ID, ModelMetadata, deserialize_model, read_model, serialize_model

log = logging.getLogger(__name__)

SERVER_NODE = "server"
DEFAULT_DEADLINE_TICKS = 10


def client_node_id(client_id: int) -> str:
    return f"client-{client_id}"


# event bodies

def encode_init(round_id: int, public_der: bytes, global_model: ModelWeights) -> bytes:
    meta = ModelMetadata(SERVER_CLIENT_ID, round_id, 0)
    return (struct.pack("<QI", round_id, len(public_der)) + public_der
            + serialize_model(global_model, meta))


def decode_init(body: bytes) -> tuple[int, bytes, ModelWeights]:
    try:
        round_id, key_len = struct.unpack_from("<QI", body, 0)
    except struct.error as exc:
        raise SerializationError("INIT_ROUND body truncated") from exc
    der = body[12:12 + key_len]
    if len(der) != key_len:
        raise SerializationError("INIT_ROUND public key truncated")
    model, meta, end = read_model(body, 12 + key_len)
    if end != len(body) or meta.round_id != round_id:
        raise SerializationError("INIT_ROUND model record inconsistent")
    return round_id, der, model


@dataclass(frozen=True)
class ContributionNotice:
    round_id: int
    basis_points: tuple[int, ...]
    excluded: tuple[int, ...] = ()

    def encode(self) -> bytes:
        k = len(self.basis_points)
        return (struct.pack("<QH", self.round_id, k)
                + struct.pack(f"<{k}I", *self.basis_points)
                + struct.pack("<H", len(self.excluded))
                + struct.pack(f"<{len(self.excluded)}H", *self.excluded))

    @classmethod
    def decode(cls, body: bytes) -> "ContributionNotice":
        try:
            round_id, k = struct.unpack_from("<QH", body, 0)
            pos = 10
            bps = struct.unpack_from(f"<{k}I", body, pos)
            pos += 4 * k
            excluded: tuple[int, ...] = ()
            if pos < len(body):
                (n,) = struct.unpack_from("<H", body, pos)
                pos += 2
                excluded = struct.unpack_from(f"<{n}H", body, pos)
                pos += 2 * n
        except struct.error as exc:
            raise SerializationError("CONTRIB_NOTICE body truncated") from exc
        if pos != len(body):
            raise SerializationError("trailing bytes in CONTRIB_NOTICE")
        return cls(round_id, tuple(bps), tuple(excluded))


def event_round_id(event: LedgerEvent) -> Optional[int]:
    """Round id of a plaintext event; None for encrypted or unparseable bodies."""
    try:
        if event.event_type == INIT_ROUND:
            return struct.unpack_from("<Q", event.body, 0)[0]
        if event.event_type == CONTRIB_NOTICE:
            return ContributionNotice.decode(event.body).round_id
        if event.event_type == GLOBAL_MODEL:
            return deserialize_model(event.body)[1].round_id
    except (struct.error, SerializationError):
        return None
    return None


# server

class Phase(enum.Enum):
    IDLE = "idle"
    AWAITING_MODELS = "awaiting_models"
    AGGREGATING = "aggregating"
    DONE = "done"


_NEXT_PHASE = {
    Phase.IDLE: Phase.AWAITING_MODELS,
    Phase.AWAITING_MODELS: Phase.AGGREGATING,
    Phase.AGGREGATING: Phase.DONE,
    Phase.DONE: Phase.IDLE,
}


@dataclass
class RoundState:
    round_id: int = 0
    phase: Phase = Phase.IDLE
    keypair: Optional[RoundKeyPair] = None
    received: dict[int, bytes] = field(default_factory=dict)
    deadline: int = 0

    def advance(self, to: Phase) -> None:
        if _NEXT_PHASE[self.phase] is not to:
            raise PhaseError(f"cannot move from {self.phase.value} to {to.value}")
        self.phase = to


@dataclass
class RoundResult:
    round_id: int
    global_before: ModelWeights
    global_after: ModelWeights
    reports: list[ContributionReport]
    basis_points: list[int]
    excluded: list[int]
    sample_counts: dict[int, int]
    accuracy: Optional[float] = None
    seqs: list[int] = field(default_factory=list)

    def report_for(self, client_id: int) -> Optional[ContributionReport]:
        return next((r for r in self.reports if r.client_id == client_id), None)


class AggregationServer:
    """Aggregator node: owns the round keys and the Contribution contract."""

    def __init__(self, ledger: Ledger, client_nodes: Sequence[str], *, node_id: str = SERVER_NODE,
                 seed: Optional[int] = None, importance: str = "samples", server_rate: float = 1.0,
                 deadline_ticks: int = DEFAULT_DEADLINE_TICKS,
                 evaluate: Optional[Callable[[ModelWeights], float]] = None):
        if importance not in ("samples", "uniform"):
            raise ValueError(f"importance mode must be 'samples' or 'uniform', not {importance!r}")
        self.node_id = node_id
        self.ledger = ledger
        self.client_nodes = list(client_nodes)
        self._index = {node: k for k, node in enumerate(self.client_nodes)}
        self.seed = seed
        self.importance = importance
        self.server_rate = server_rate
        self.deadline_ticks = deadline_ticks
        self.evaluate = evaluate
        ledger.register_node(node_id)
        ledger.deploy(node_id, len(self.client_nodes))
        self.inbox = ledger.subscribe(node_id, {LOCAL_MODEL})
        self.state = RoundState()
        self.global_model: Optional[ModelWeights] = None
        self.results: list[RoundResult] = []
        self.aborted: list[int] = []
        self.rounds_remaining = 0

    @property
    def client_count(self) -> int:
        return len(self.client_nodes)

    def bootstrap_genesis(self, genesis_dataset, architecture: Sequence[int], cfg: TrainConfig,
                          seed: int = 0) -> ModelWeights:
        x, y = genesis_dataset
        if len(y) == 0:
            raise EmptyDataset("genesis split is empty")
        self.global_model = train_local(init_model(architecture, seed), (x, y), cfg)
        return self.global_model

    def _entropy(self, *labels):
        return SystemEntropy() if self.seed is None else derive_entropy(self.seed, *labels)

    def initiate_round(self, now: int, global_model: Optional[ModelWeights] = None) -> int:
        if self.state.phase is not Phase.IDLE:
            raise PhaseError(f"round {self.state.round_id} still in {self.state.phase.value}")
        if global_model is not None:
            self.global_model = global_model
        if self.global_model is None:
            raise PhaseError("no global model; bootstrap the genesis model first")
        round_id = self.state.round_id + 1
        keypair = generate_round_keypair(round_id, self._entropy("round-key", round_id))
        self.state = RoundState(round_id, Phase.IDLE, keypair, {}, now + self.deadline_ticks)
        self.state.advance(Phase.AWAITING_MODELS)
        body = encode_init(round_id, keypair.public_der, self.global_model)
        return self.ledger.publish(self.node_id, now, False, INIT_ROUND, body)

    def _receive(self, event: LedgerEvent) -> None:
        k = self._index.get(event.sender)
        if k is None:
            log.warning("LOCAL_MODEL from unregistered node %s ignored", event.sender)
        elif self.state.phase is not Phase.AWAITING_MODELS:
            log.info("late LOCAL_MODEL from %s ignored", event.sender)
        elif k in self.state.received:
            log.info("duplicate LOCAL_MODEL from %s in round %d ignored", event.sender,
                     self.state.round_id)
        else:
            self.state.received[k] = event.body

    def step(self, now: int) -> None:
        for event in self.inbox.drain():
            self._receive(event)
        st = self.state
        if st.phase is Phase.AWAITING_MODELS:
            if len(st.received) == self.client_count or now >= st.deadline:
                try:
                    self.collect_and_aggregate(now)
                except RoundAborted as exc:
                    log.warning("%s", exc)
        elif st.phase is Phase.IDLE and self.rounds_remaining > 0:
            self.rounds_remaining -= 1
            self.initiate_round(now)

    def _open(self, k: int, raw: bytes):
        model, meta = decrypt_model(raw, self.state.keypair.private_key)
        if meta.client_id != k or meta.round_id != self.state.round_id:
            raise SerializationError("payload metadata does not match sender / round")
        if meta.sample_count < 1 or not model.congruent(self.global_model):
            raise SerializationError("payload declares no samples or has the wrong shape")
        if not all(np.isfinite(a).all() for a in model.arrays()):
            raise SerializationError("payload contains non-finite weights")
        return model, meta

    def collect_and_aggregate(self, now: int) -> RoundResult:
        st = self.state
        if st.phase is not Phase.AWAITING_MODELS:
            raise PhaseError(f"nothing to aggregate in phase {st.phase.value}")
        st.advance(Phase.AGGREGATING)
        models: dict[int, ModelWeights] = {}
        counts: dict[int, int] = {}
        excluded = []
        for k in sorted(st.received):
            try:
                models[k], meta = self._open(k, st.received[k])
                counts[k] = meta.sample_count
            except (CryptoError, SerializationError) as exc:
                log.warning("round %d: excluding client %d (%s)", st.round_id, k, exc)
                excluded.append(k)
        if not models:
            st.advance(Phase.DONE)
            st.advance(Phase.IDLE)
            self.aborted.append(st.round_id)
            raise RoundAborted(f"round {st.round_id}: no usable submissions, global model unchanged")

        ids = sorted(models)
        if self.importance == "samples":
            p = importance_from_sample_counts([counts[k] for k in ids])
        else:
            p = [1.0 / len(ids)] * len(ids)
        before = self.global_model
        after = fed_avg(before, [models[k] for k in ids], AggregationConfig(p, self.server_rate))

        bps = [0] * self.client_count
        try:
            reports = contribution_reports(before, models, st.round_id)
        except ZeroTotalContribution:
            log.warning("round %d: every submission equals the global model; no contribution update",
                        st.round_id)
            reports = []
            for k in ids:
                gamma, norms = federated_contribution(before, models[k])
                reports.append(ContributionReport(k, gamma, 0.0, norms, st.round_id))
        else:
            for r in reports:
                bps[r.client_id] = to_fixed_point(r.gamma_rel)
            for k in range(self.client_count):
                self.ledger.set_contribution(self.node_id, k, bps[k], st.round_id)

        notice = ContributionNotice(st.round_id, tuple(bps), tuple(excluded))
        total = sum(counts.values())
        seqs = [
            self.ledger.publish(self.node_id, now, False, CONTRIB_NOTICE, notice.encode()),
            self.ledger.publish(self.node_id, now, False, GLOBAL_MODEL, serialize_model(
                after, ModelMetadata(SERVER_CLIENT_ID, st.round_id, total))),
        ]
        self.global_model = after
        accuracy = self.evaluate(after) if self.evaluate else None
        result = RoundResult(st.round_id, before, after, reports, bps, excluded, counts,
                             accuracy, seqs)
        self.results.append(result)
        st.advance(Phase.DONE)
        st.advance(Phase.IDLE)
        return result


# client

@dataclass
class ClientState:
    client_id: int
    local_model: Optional[ModelWeights]
    dataset: object
    current_round: int = 0


def client_train_seed(seed: int, client_id: int, round_id: int) -> int:
    return int(np.random.SeedSequence([seed, client_id, round_id]).generate_state(1)[0])


class FederatedClient:
    def __init__(self, client_id: int, ledger: Ledger, dataset, train_cfg: TrainConfig, *,
                 node_id: Optional[str] = None, seed: Optional[int] = None):
        self.node_id = node_id or client_node_id(client_id)
        self.ledger = ledger
        self.train_cfg = train_cfg
        self.seed = seed
        self.state = ClientState(client_id, None, dataset)
        self.last_submitted = 0
        self.last_trained: Optional[ModelWeights] = None
        self.entropy = SystemEntropy() if seed is None else derive_entropy(seed, "client", client_id)
        ledger.register_node(self.node_id)
        self.inbox = ledger.subscribe(self.node_id, {INIT_ROUND, GLOBAL_MODEL})

    @property
    def client_id(self) -> int:
        return self.state.client_id

    @property
    def sample_count(self) -> int:
        _, labels = self.state.dataset
        return len(labels)

    def step(self, now: int) -> None:
        for event in self.inbox.drain():
            if event.event_type == INIT_ROUND:
                self.handle_init(event, now)
            elif event.event_type == GLOBAL_MODEL:
                try:
                    self.handle_global(event)
                except SerializationError as exc:
                    log.warning("%s: bad GLOBAL_MODEL ignored (%s)", self.node_id, exc)

    def train(self, global_model: ModelWeights, round_id: int) -> ModelWeights:
        seed = client_train_seed(self.seed or 0, self.client_id, round_id)
        return train_local(global_model, self.state.dataset, self.train_cfg.with_seed(seed))

    def seal_payload(self, model: ModelWeights, round_id: int, public_key) -> bytes:
        meta = ModelMetadata(self.client_id, round_id, self.sample_count)
        return encrypt_model(model, meta, public_key, self.entropy).to_bytes()

    def handle_init(self, event: LedgerEvent, now: int) -> Optional[int]:
        round_id, der, global_model = decode_init(event.body)
        if round_id <= self.state.current_round or round_id <= self.last_submitted:
            log.info("%s: stale INIT_ROUND %d ignored", self.node_id, round_id)
            return None
        public_key = load_public_key(der)
        self.state.local_model = global_model
        trained = self.train(global_model, round_id)
        self.last_trained = trained
        body = self.seal_payload(trained, round_id, public_key)
        self.last_submitted = round_id
        return self.ledger.publish(self.node_id, now, True, LOCAL_MODEL, body)

    def handle_global(self, event: LedgerEvent) -> ClientState:
        model, meta = deserialize_model(event.body)
        if self.state.local_model is not None and not model.congruent(self.state.local_model):
            raise SerializationError("GLOBAL_MODEL does not match the local architecture")
        self.state.local_model = model
        self.state.current_round = meta.round_id
        return self.state


# deterministic scheduler

class Simulation:
    """Round-robin stepping: server first, then clients in id order, one block per step."""

    def __init__(self, ledger: Ledger, server: AggregationServer, clients: Sequence[FederatedClient]):
        self.ledger = ledger
        self.server = server
        self.clients = list(clients)
        self.now = 0

    def tick(self) -> None:
        for node in [self.server, *self.clients]:
            with self.ledger.batch():
                node.step(self.now)
        self.now += 1

    def run(self, rounds: int, max_ticks: Optional[int] = None) -> list[RoundResult]:
        server = self.server
        target = len(server.results) + len(server.aborted) + rounds
        server.rounds_remaining += rounds
        limit = max_ticks or rounds * (server.deadline_ticks + 4) + 4
        for _ in range(limit):
            if len(server.results) + len(server.aborted) >= target and server.state.phase is Phase.IDLE:
                break
            self.tick()
        return server.results


def build_simulation(client_datasets: Sequence, train_cfg: TrainConfig, *, seed: Optional[int] = 0,
                     importance: str = "samples", server_rate: float = 1.0,
                     deadline_ticks: int = DEFAULT_DEADLINE_TICKS, evaluate=None,
                     ledger: Optional[Ledger] = None, client_factory=FederatedClient) -> Simulation:
    ledger = ledger or Ledger()
    nodes = [client_node_id(k) for k in range(len(client_datasets))]
    server = AggregationServer(ledger, nodes, seed=seed, importance=importance,
                               server_rate=server_rate, deadline_ticks=deadline_ticks,
                               evaluate=evaluate)
    clients = [client_factory(k, ledger, ds, train_cfg, seed=seed)
               for k, ds in enumerate(client_datasets)]
    return Simulation(ledger, server, clients)


# log audits

def check_round_order(events: Iterable[LedgerEvent], client_count: int) -> list[str]:
    """Violations of INIT_ROUND -> K x LOCAL_MODEL -> CONTRIB_NOTICE -> GLOBAL_MODEL."""
    problems = []
    expect = INIT_ROUND
    current = None
    locals_seen = 0
    for ev in events:
        t = ev.event_type
        if t == INIT_ROUND and expect in (INIT_ROUND,):
            current, locals_seen, expect = event_round_id(ev), 0, LOCAL_MODEL
        elif t == LOCAL_MODEL and expect == LOCAL_MODEL and locals_seen < client_count:
            if not ev.is_encrypted:
                problems.append(f"seq {ev.seq}: LOCAL_MODEL published in plaintext")
            locals_seen += 1
        elif t == CONTRIB_NOTICE and expect == LOCAL_MODEL:
            if locals_seen != client_count:
                problems.append(f"round {current}: {locals_seen} LOCAL_MODEL events, "
                                f"expected {client_count}")
            if event_round_id(ev) != current:
                problems.append(f"seq {ev.seq}: CONTRIB_NOTICE for round {event_round_id(ev)}")
            expect = GLOBAL_MODEL
        elif t == GLOBAL_MODEL and expect == GLOBAL_MODEL:
            if event_round_id(ev) != current:
                problems.append(f"seq {ev.seq}: GLOBAL_MODEL for round {event_round_id(ev)}")
            expect = INIT_ROUND
        else:
            problems.append(f"seq {ev.seq}: unexpected {t.decode()} (expected {expect.decode()})")
    if expect != INIT_ROUND:
        problems.append(f"round {current} incomplete at end of log")
    return problems


def replay_contributions(events: Iterable[LedgerEvent], client_count: int,
                         owner: str = SERVER_NODE) -> tuple[list[int], dict[int, list[int]]]:
    """Rebuild the Contribution contract array (and per-round history) from the log.

    An all-zero notice marks a round without contribution writes.
    """
    state = [0] * client_count
    history: dict[int, list[int]] = {}
    for ev in events:
        if ev.event_type != CONTRIB_NOTICE or ev.sender != owner:
            continue
        notice = ContributionNotice.decode(ev.body)
        if any(notice.basis_points):
            state = list(notice.basis_points)
            history[notice.round_id] = list(notice.basis_points)
    return state, history
