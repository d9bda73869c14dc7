"""Simulated consortium ledger: a hash-chained, totally ordered event log.

A single sequencer stands in for consensus. Two contracts live on it:
``Communication`` (event emission, the only channel between nodes) and
``Contribution`` (owner-gated array of basis-point contributions).

Events become visible to subscribers when their block is sealed. Outside a
``ledger.batch()`` block every publish seals its own block.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
import threading
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

from .errors import (AlreadyDeployed, IndexOutOfRange, InvalidEventType, LogFormatError,
                     NotDeployed, Unauthorized, UnknownNode)

log = logging.getLogger(__name__)

INIT_ROUND = b"INIT_ROUND"
LOCAL_MODEL = b"LOCAL_MODEL"
GLOBAL_MODEL = b"GLOBAL_MODEL"
CONTRIB_NOTICE = b"CONTRIB_NOTICE"
EVENT_TYPES = frozenset({INIT_ROUND, LOCAL_MODEL, GLOBAL_MODEL, CONTRIB_NOTICE})

DEFAULT_HASH = "sha256"
_EVENT_FIXED = struct.Struct("<QQ?")


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    timestamp: int
    sender: str
    event_type: bytes
    is_encrypted: bool
    body: bytes

    def encode(self) -> bytes:
        sender = self.sender.encode("utf-8")
        return b"".join([
            _EVENT_FIXED.pack(self.seq, self.timestamp, self.is_encrypted),
            struct.pack("<H", len(sender)), sender,
            struct.pack("<H", len(self.event_type)), self.event_type,
            struct.pack("<Q", len(self.body)), self.body,
        ])


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    prev_hash: bytes
    payload_hash: bytes
    events: tuple[LedgerEvent, ...]
    block_hash: bytes


def payload_digest(events: Sequence[LedgerEvent], hash_name: str = DEFAULT_HASH) -> bytes:
    h = hashlib.new(hash_name)
    h.update(struct.pack("<Q", len(events)))
    for ev in events:
        h.update(ev.encode())
    return h.digest()


def block_digest(height: int, prev_hash: bytes, payload_hash: bytes,
                 hash_name: str = DEFAULT_HASH) -> bytes:
    return hashlib.new(hash_name, struct.pack("<Q", height) + prev_hash + payload_hash).digest()


def make_block(height: int, prev_hash: bytes, events: Sequence[LedgerEvent],
               hash_name: str = DEFAULT_HASH) -> LedgerBlock:
    events = tuple(events)
    payload = payload_digest(events, hash_name)
    return LedgerBlock(height, prev_hash, payload, events,
                       block_digest(height, prev_hash, payload, hash_name))


def genesis_block(hash_name: str = DEFAULT_HASH) -> LedgerBlock:
    return make_block(0, bytes(hashlib.new(hash_name).digest_size), (), hash_name)


def verify_chain(blocks: Sequence[LedgerBlock], hash_name: str = DEFAULT_HASH) -> bool:
    return first_invalid_height(blocks, hash_name) is None


def first_invalid_height(blocks: Sequence[LedgerBlock], hash_name: str = DEFAULT_HASH
                         ) -> Optional[int]:
    """Height of the first block that fails to verify, or None for a sound chain."""
    if not blocks:
        return 0
    prev = None
    for i, block in enumerate(blocks):
        expected_prev = bytes(len(block.prev_hash)) if prev is None else prev.block_hash
        if block.height != i or block.prev_hash != expected_prev:
            return block.height if block.height == i else i
        if payload_digest(block.events, hash_name) != block.payload_hash:
            return i
        if block_digest(block.height, block.prev_hash, block.payload_hash, hash_name) != block.block_hash:
            return i
        prev = block
    return None


class EventStream:
    """Per-subscriber FIFO of delivered events."""

    def __init__(self, node_id: str, types: Optional[frozenset[bytes]]):
        self.node_id = node_id
        self.types = types
        self._queue: deque[LedgerEvent] = deque()
        self.delivered = 0

    def accepts(self, event: LedgerEvent) -> bool:
        return self.types is None or event.event_type in self.types

    def _deliver(self, event: LedgerEvent) -> None:
        self._queue.append(event)
        self.delivered += 1

    def __len__(self) -> int:
        return len(self._queue)

    def poll(self) -> Optional[LedgerEvent]:
        return self._queue.popleft() if self._queue else None

    def drain(self) -> list[LedgerEvent]:
        out = list(self._queue)
        self._queue.clear()
        return out


class CommunicationContract:
    def __init__(self, ledger: "Ledger"):
        self._ledger = ledger

    def publish(self, sender: str, timestamp: int, is_encrypted: bool,
                event_type: bytes, body: bytes) -> int:
        """Emit one event; returns its sequence number as the ack."""
        return self._ledger._append(sender, timestamp, is_encrypted, event_type, body)


class ContributionContract:
    """Fixed-length array of relative contributions; only the owner may write."""

    def __init__(self, owner: str, client_count: int):
        self.owner = owner
        self._clients = [0] * client_count
        self.history: dict[int, list[int]] = {}
        self._acks = 0

    @property
    def client_count(self) -> int:
        return len(self._clients)

    def set_contribution(self, sender: str, client_id: int, relative_contribution: int,
                         round_id: Optional[int] = None) -> int:
        if sender != self.owner:
            raise Unauthorized(f"{sender!r} is not the contract owner")
        if not 0 <= client_id < len(self._clients):
            raise IndexOutOfRange(f"client_id {client_id} outside [0, {len(self._clients)})")
        if relative_contribution < 0:
            raise ValueError("contribution is an unsigned quantity")
        self._clients[client_id] = int(relative_contribution)
        if round_id is not None:
            self.history.setdefault(round_id, [0] * len(self._clients))[client_id] = int(relative_contribution)
        self._acks += 1
        return self._acks

    def get_contributions(self) -> list[int]:
        return list(self._clients)


@dataclass
class Contracts:
    communication: CommunicationContract
    contribution: ContributionContract


class Ledger:
    def __init__(self, hash_name: str = DEFAULT_HASH):
        hashlib.new(hash_name)  # fail early on an unknown algorithm
        self.hash_name = hash_name
        self.blocks: list[LedgerBlock] = [genesis_block(hash_name)]
        self._pending: list[LedgerEvent] = []
        self._next_seq = 1
        self._batch_depth = 0
        self._lock = threading.RLock()
        self._nodes: set[str] = set()
        self._streams: list[EventStream] = []
        self.contracts: Optional[Contracts] = None

    # membership and contracts

    def register_node(self, node_id: str) -> None:
        with self._lock:
            self._nodes.add(node_id)

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self._nodes)

    def deploy(self, owner: str, client_count: int) -> Contracts:
        with self._lock:
            if self.contracts is not None:
                raise AlreadyDeployed("contracts already deployed on this ledger")
            if client_count < 1:
                raise ValueError("client_count must be positive")
            self._nodes.add(owner)
            self.contracts = Contracts(CommunicationContract(self),
                                       ContributionContract(owner, client_count))
            return self.contracts

    def _require_contracts(self) -> Contracts:
        if self.contracts is None:
            raise NotDeployed("deploy the contracts first")
        return self.contracts

    @property
    def communication(self) -> CommunicationContract:
        return self._require_contracts().communication

    @property
    def contribution(self) -> ContributionContract:
        return self._require_contracts().contribution

    def publish(self, sender: str, timestamp: int, is_encrypted: bool,
                event_type: bytes, body: bytes) -> int:
        return self.communication.publish(sender, timestamp, is_encrypted, event_type, body)

    def set_contribution(self, sender: str, client_id: int, relative_contribution: int,
                         round_id: Optional[int] = None) -> int:
        return self.contribution.set_contribution(sender, client_id, relative_contribution, round_id)

    def get_contributions(self) -> list[int]:
        return self.contribution.get_contributions()

    # event log

    def subscribe(self, node_id: str, types: Optional[Iterable[bytes]] = None) -> EventStream:
        with self._lock:
            if node_id not in self._nodes:
                raise UnknownNode(node_id)
            wanted = None if types is None else frozenset(types)
            if wanted is not None and not wanted <= EVENT_TYPES:
                raise InvalidEventType(f"unknown event types {sorted(wanted - EVENT_TYPES)}")
            stream = EventStream(node_id, wanted)
            self._streams.append(stream)
            return stream

    def _append(self, sender, timestamp, is_encrypted, event_type, body) -> int:
        event_type = bytes(event_type)
        if event_type not in EVENT_TYPES:
            raise InvalidEventType(f"unknown event type {event_type!r}")
        with self._lock:
            self._require_contracts()
            if sender not in self._nodes:
                raise UnknownNode(sender)
            event = LedgerEvent(self._next_seq, int(timestamp), sender, event_type,
                                bool(is_encrypted), bytes(body))
            self._next_seq += 1
            self._pending.append(event)
            if self._batch_depth == 0:
                self.seal()
            return event.seq

    @contextmanager
    def batch(self):
        """Group every publish inside the block into one ledger block."""
        with self._lock:
            self._batch_depth += 1
        try:
            yield self
        finally:
            with self._lock:
                self._batch_depth -= 1
                if self._batch_depth == 0:
                    self.seal()

    def seal(self) -> Optional[LedgerBlock]:
        with self._lock:
            if not self._pending:
                return None
            head = self.blocks[-1]
            block = make_block(head.height + 1, head.block_hash, self._pending, self.hash_name)
            self._pending = []
            self.blocks.append(block)
            for event in block.events:
                for stream in self._streams:
                    if stream.accepts(event):
                        stream._deliver(event)
            return block

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    def events(self) -> Iterator[LedgerEvent]:
        for block in self.blocks:
            yield from block.events

    def verify(self) -> bool:
        return verify_chain(self.blocks, self.hash_name)

    def export_log(self, fp) -> int:
        return export_log(self.blocks, fp)


# Export format: one JSON object per event, keys in a fixed order, compact
# separators, lowercase hex for bytes. Import rejects any non-canonical line.

_RECORD_KEYS = ("seq", "height", "timestamp", "sender", "event_type", "is_encrypted",
                "body", "block_hash")
_HEX = re.compile(r"\A(?:[0-9a-f]{2})*\Z")


@dataclass(frozen=True)
class LogRecord:
    seq: int
    height: int
    timestamp: int
    sender: str
    event_type: bytes
    is_encrypted: bool
    body: bytes
    block_hash: bytes

    def to_line(self) -> str:
        return json.dumps({
            "seq": self.seq, "height": self.height, "timestamp": self.timestamp,
            "sender": self.sender, "event_type": self.event_type.decode("ascii"),
            "is_encrypted": self.is_encrypted, "body": self.body.hex(),
            "block_hash": self.block_hash.hex(),
        }, separators=(",", ":"), ensure_ascii=True)

    def event(self) -> LedgerEvent:
        return LedgerEvent(self.seq, self.timestamp, self.sender, self.event_type,
                           self.is_encrypted, self.body)


def log_records(blocks: Iterable[LedgerBlock]) -> Iterator[LogRecord]:
    for block in blocks:
        for ev in block.events:
            yield LogRecord(ev.seq, block.height, ev.timestamp, ev.sender, ev.event_type,
                            ev.is_encrypted, ev.body, block.block_hash)


def export_log(blocks: Iterable[LedgerBlock], fp) -> int:
    n = 0
    for record in log_records(blocks):
        fp.write(record.to_line() + "\n")
        n += 1
    return n


_HEIGHT_HINT = re.compile(r'"height":(\d+)')


def parse_log_line(line: str, line_number: int = 0) -> LogRecord:
    text = line.rstrip("\n")
    hint = _HEIGHT_HINT.search(text)
    height_hint = int(hint.group(1)) if hint else None

    def fail(msg):
        raise LogFormatError(f"line {line_number}: {msg}", line_number, height_hint)

    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        fail(f"not valid JSON ({exc.msg})")
    if not isinstance(raw, dict) or tuple(raw) != _RECORD_KEYS:
        fail("unexpected record keys")
    for key in ("seq", "height", "timestamp"):
        if type(raw[key]) is not int or raw[key] < 0:
            fail(f"{key} must be a non-negative integer")
    if type(raw["is_encrypted"]) is not bool or not isinstance(raw["sender"], str):
        fail("bad field types")
    for key in ("body", "block_hash"):
        if not isinstance(raw[key], str) or not _HEX.match(raw[key]):
            fail(f"{key} is not lowercase hex")
    try:
        event_type = raw["event_type"].encode("ascii")
    except (AttributeError, UnicodeEncodeError):
        fail("event_type is not ascii")
    record = LogRecord(raw["seq"], raw["height"], raw["timestamp"], raw["sender"], event_type,
                       raw["is_encrypted"], bytes.fromhex(raw["body"]),
                       bytes.fromhex(raw["block_hash"]))
    if record.to_line() != text:
        fail("record is not in canonical form")
    return record


def read_log(lines: Iterable[str]) -> list[LogRecord]:
    return [parse_log_line(line, i) for i, line in enumerate(lines, 1) if line.strip()]


def blocks_from_records(records: Sequence[LogRecord], hash_name: str = DEFAULT_HASH
                        ) -> list[LedgerBlock]:
    """Rebuild the chain from exported records, keeping the recorded block hashes."""
    genesis = genesis_block(hash_name)
    blocks = [genesis]
    groups: list[list[LogRecord]] = []
    for rec in records:
        if groups and groups[-1][0].height == rec.height:
            groups[-1].append(rec)
        else:
            groups.append([rec])
    prev = genesis.block_hash
    for group in groups:
        events = tuple(r.event() for r in group)
        recorded = {r.block_hash for r in group}
        block_hash = group[0].block_hash if len(recorded) == 1 else b""
        blocks.append(LedgerBlock(group[0].height, prev, payload_digest(events, hash_name),
                                  events, block_hash))
        prev = block_hash
    return blocks


def verify_records(records: Sequence[LogRecord], hash_name: str = DEFAULT_HASH) -> Optional[int]:
    """First failing height of an exported log, or None when it verifies."""
    expected_seq = 1
    for rec in records:
        if rec.seq != expected_seq or rec.event_type not in EVENT_TYPES:
            return rec.height
        expected_seq += 1
    return first_invalid_height(blocks_from_records(records, hash_name), hash_name)


def import_log(lines: Iterable[str], hash_name: str = DEFAULT_HASH) -> list[LedgerBlock]:
    return blocks_from_records(read_log(lines), hash_name)
