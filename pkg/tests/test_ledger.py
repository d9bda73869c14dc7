import dataclasses
import io
import random
import threading

import pytest

from fedchain.errors import (AlreadyDeployed, IndexOutOfRange, InvalidEventType, LogFormatError,
                             NotDeployed, Unauthorized, UnknownNode)
from fedchain.ledger import (CONTRIB_NOTICE, GLOBAL_MODEL, INIT_ROUND, LOCAL_MODEL, Ledger, export_log,
                             first_invalid_height, genesis_block, import_log, read_log, verify_chain,
                             verify_records)

K = 5


def fresh(nodes=("server", "c0", "c1", "c2", "c3", "c4")):
    ledger = Ledger()
    ledger.deploy(nodes[0], K)
    for n in nodes[1:]:
        ledger.register_node(n)
    return ledger


def filled(blocks=10):
    ledger = fresh()
    for i in range(blocks):
        ledger.publish("server" if i % 2 else "c1", i, i % 3 == 0, LOCAL_MODEL, bytes([i]) * (i + 1))
    return ledger


def exported(ledger) -> bytes:
    buf = io.StringIO()
    ledger.export_log(buf)
    return buf.getvalue().encode("utf-8")


def log_detects_tamper(data: bytes) -> bool:
    try:
        records = read_log(data.decode("utf-8").splitlines())
    except (UnicodeDecodeError, LogFormatError):
        return True
    return verify_records(records) is not None


# contracts

def test_deploy_state():
    ledger = Ledger()
    contracts = ledger.deploy("server", K)
    assert ledger.get_contributions() == [0] * K
    assert contracts.contribution.owner == "server"
    with pytest.raises(AlreadyDeployed):
        ledger.deploy("server", K)


def test_undeployed_ledger_refuses_publish():
    ledger = Ledger()
    ledger.register_node("a")
    with pytest.raises(NotDeployed):
        ledger.publish("a", 0, False, INIT_ROUND, b"")


def test_set_contribution_rules():
    ledger = fresh()
    ledger.set_contribution("server", 3, 2000)
    assert ledger.get_contributions()[3] == 2000
    with pytest.raises(Unauthorized):
        ledger.set_contribution("c1", 3, 9999)
    assert ledger.get_contributions()[3] == 2000
    with pytest.raises(IndexOutOfRange):
        ledger.set_contribution("server", 5, 1)
    for k in range(K):
        ledger.set_contribution("server", k, 2000)
    assert ledger.get_contributions() == [2000] * K
    # the view is a copy
    ledger.get_contributions()[0] = 7
    assert ledger.get_contributions() == [2000] * K


def test_contribution_history_per_round():
    ledger = fresh()
    ledger.set_contribution("server", 1, 500, round_id=1)
    ledger.set_contribution("server", 1, 700, round_id=2)
    assert ledger.contribution.history == {1: [0, 500, 0, 0, 0], 2: [0, 700, 0, 0, 0]}


def test_adversarial_call_sequences_never_reach_state():
    rng = random.Random(2024)
    senders = ["server", "c0", "c1", "c2", "c3", "c4", "mallory", ""]
    for _ in range(1000):
        ledger = fresh()
        model = [0] * K
        for _ in range(rng.randint(1, 20)):
            sender = rng.choice(senders)
            cid = rng.randint(-2, K + 2)
            value = rng.randint(0, 10000)
            if sender != "server":
                with pytest.raises(Unauthorized):
                    ledger.set_contribution(sender, cid, value)
            elif 0 <= cid < K:
                ledger.set_contribution(sender, cid, value)
                model[cid] = value
            else:
                with pytest.raises(IndexOutOfRange):
                    ledger.set_contribution(sender, cid, value)
            assert ledger.get_contributions() == model


# publish / subscribe

def test_publish_appends_exact_bytes():
    ledger = fresh()
    body = bytes(range(256))
    seq = ledger.publish("c2", 17, True, LOCAL_MODEL, body)
    tail = list(ledger.events())[-1]
    assert (tail.seq, tail.body, tail.sender, tail.timestamp, tail.is_encrypted) == (seq, body, "c2", 17, True)


def test_sequence_numbers_follow_arrival():
    ledger = fresh()
    a = ledger.publish("c0", 0, False, LOCAL_MODEL, b"a")
    b = ledger.publish("c1", 0, False, LOCAL_MODEL, b"b")
    assert (a, b) == (1, 2)
    assert [e.body for e in ledger.events()] == [b"a", b"b"]


def test_unknown_sender_and_type_rejected():
    ledger = fresh()
    with pytest.raises(UnknownNode):
        ledger.publish("ghost", 0, False, INIT_ROUND, b"")
    with pytest.raises(InvalidEventType):
        ledger.publish("server", 0, False, b"TRANSFER", b"")
    with pytest.raises(UnknownNode):
        ledger.subscribe("ghost")
    with pytest.raises(InvalidEventType):
        ledger.subscribe("c0", {b"NOPE"})


def test_broadcast_reaches_every_subscriber():
    ledger = fresh()
    streams = [ledger.subscribe(n) for n in ("c0", "c1", "c2")]
    for i in range(4):
        ledger.publish("server", i, False, INIT_ROUND, b"x")
    assert sum(s.delivered for s in streams) == 3 * 4
    assert all(len(s) == 4 for s in streams)


def test_filter_drops_other_types():
    ledger = fresh()
    stream = ledger.subscribe("c0", {GLOBAL_MODEL})
    ledger.publish("server", 0, False, INIT_ROUND, b"i")
    ledger.publish("server", 0, False, GLOBAL_MODEL, b"g")
    assert [e.event_type for e in stream.drain()] == [GLOBAL_MODEL]


def test_delivery_in_seq_order_and_batch_is_one_block():
    ledger = fresh()
    stream = ledger.subscribe("c0")
    with ledger.batch():
        ledger.publish("server", 1, False, CONTRIB_NOTICE, b"n")
        ledger.publish("server", 1, False, GLOBAL_MODEL, b"g")
        assert len(stream) == 0  # not visible until sealed
    assert ledger.height == 1 and len(ledger.blocks[1].events) == 2
    ledger.publish("c3", 2, True, LOCAL_MODEL, b"l")
    seqs = [e.seq for e in stream.drain()]
    assert seqs == sorted(seqs) == [1, 2, 3]


def test_concurrent_publishers_get_gapless_seqs():
    ledger = fresh()
    acks = []
    lock = threading.Lock()

    def worker(name):
        for i in range(200):
            seq = ledger.publish(name, i, False, LOCAL_MODEL, name.encode())
            with lock:
                acks.append(seq)

    threads = [threading.Thread(target=worker, args=(f"c{k}",)) for k in range(K)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(acks) == list(range(1, 1001))
    assert [e.seq for e in ledger.events()] == list(range(1, 1001))
    assert ledger.verify()


# chain integrity

def test_genesis_only_chain_verifies():
    assert verify_chain([genesis_block()])
    assert fresh().verify()


def test_untampered_chain_verifies():
    ledger = filled(10)
    assert ledger.height == 10 and ledger.verify()


def test_tampered_block_detected():
    ledger = filled(10)
    blocks = list(ledger.blocks)
    ev = blocks[4].events[0]
    forged = dataclasses.replace(ev, body=bytes([ev.body[0] ^ 1]) + ev.body[1:])
    blocks[4] = dataclasses.replace(blocks[4], events=(forged,))
    assert not verify_chain(blocks)
    assert first_invalid_height(blocks) == 4


def test_export_import_round_trip_is_bit_exact():
    ledger = filled(6)
    with ledger.batch():
        ledger.publish("server", 9, False, CONTRIB_NOTICE, b"\x00\x01")
        ledger.publish("server", 9, False, GLOBAL_MODEL, b"\xff")
    data = exported(ledger)
    blocks = import_log(data.decode().splitlines())
    assert blocks == ledger.blocks
    assert verify_chain(blocks)
    out = io.StringIO()
    export_log(blocks, out)
    assert out.getvalue().encode() == data


def test_non_canonical_line_rejected():
    data = exported(filled(2)).decode()
    first = data.splitlines()[0]
    with pytest.raises(LogFormatError) as err:
        read_log([first.replace(",", ", ", 1)])
    assert err.value.line_number == 1


def test_every_single_byte_mutation_is_detected():
    data = exported(filled(3))
    rng = random.Random(7)
    for pos in range(len(data)):
        for _ in range(3):
            value = rng.randrange(256)
            if value == data[pos]:
                continue
            mutated = data[:pos] + bytes([value]) + data[pos + 1:]
            assert log_detects_tamper(mutated), (pos, value)


def test_dropped_line_detected():
    lines = exported(filled(4)).decode().splitlines()
    del lines[1]
    assert verify_records(read_log(lines)) is not None
