"""Virtual-time engine checks: latency math, delivery, drops, log integrity.

A scripted relay protocol stands in for real overlays so every expectation
here is computable by hand.
"""

import hashlib
import io

import pytest

from dpsim.churn import PeerState
from dpsim.engine import (
    BROADCASTABLE_KINDS,
    DISP_DELIVERED,
    DISP_RECEIVER_DOWN,
    DISP_UNDELIVERABLE,
    Data,
    Engine,
    MessageKind,
    NetworkModel,
)
from dpsim.errors import (
    DuplicateId,
    ForbiddenBroadcastKind,
    IllegalTransition,
    OriginDown,
    QuiescenceTimeout,
)


class Relay:
    """Forwards SEARCH along a fixed next-hop map; records completions."""

    def __init__(self, next_hop):
        self.next_hop = next_hop
        self.delivered_at = []
        self.failures = []

    def handle(self, eng, peer, msg):
        nxt = self.next_hop.get(peer.id)
        if msg.kind == MessageKind.SEARCH and nxt is not None:
            msg.receiver = nxt
            eng.send(msg)
        else:
            self.delivered_at.append((peer.id, eng.now, tuple(msg.path), msg.hops))

    def on_undeliverable(self, eng, msg, disp):
        self.failures.append((msg.receiver, disp))


def make_engine(n=4, protocol=None, **net):
    eng = Engine(NetworkModel(**net), protocol)
    for i in range(n):
        eng.add_peer(i)
    return eng


def chain_engine(path):
    proto = Relay({a: b for a, b in zip(path, path[1:])})
    eng = Engine(NetworkModel(), proto)
    for i in sorted(set(path)):
        eng.add_peer(i)
    return eng, proto


def start_search(eng, origin, first_hop, op=1):
    msg = eng.new_message(MessageKind.SEARCH, origin, Data(key=0), op=op)
    msg.receiver = first_hop
    eng.send(msg)
    return msg


def test_unit_latency_delivery_tick():
    eng = make_engine()
    eng.now = 10
    msg = eng.new_message(MessageKind.MAINTENANCE, 0, Data(), op=1)
    msg.receiver = 1
    eng.send(msg)
    assert msg.deliver_time == 11


def test_per_node_step_scales_latency():
    eng = make_engine(per_node_step={1: 3})
    eng.now = 10
    msg = eng.new_message(MessageKind.MAINTENANCE, 0, Data(), op=1)
    msg.receiver = 1
    eng.send(msg)
    assert msg.deliver_time == 13


def test_three_hop_chain_takes_three_ticks():
    eng, proto = chain_engine([0, 1, 2, 3])
    start_search(eng, 0, 1)
    ticks = eng.run_until_quiescent()
    assert ticks == 3
    assert proto.delivered_at == [(3, 3, (0, 1, 2, 3), 3)]


def test_path_and_hops_invariants():
    eng, proto = chain_engine([0, 1, 2, 3])
    msg = start_search(eng, 0, 1)
    eng.run_until_quiescent()
    assert msg.path[0] == 0
    assert msg.hops == len(msg.path) - 1


def test_quiescent_no_messages_returns_zero():
    eng = make_engine()
    assert eng.run_until_quiescent() == 0


def test_run_until_quiescent_timeout():
    # two nodes bouncing a message forever
    proto = Relay({0: 1, 1: 0})
    eng = Engine(NetworkModel(), proto)
    eng.add_peer(0)
    eng.add_peer(1)
    start_search(eng, 0, 1)
    with pytest.raises(QuiescenceTimeout):
        eng.run_until_quiescent(max_ticks=50)


def test_duplicate_peer_rejected():
    eng = make_engine()
    with pytest.raises(DuplicateId):
        eng.add_peer(0)


def test_send_to_unknown_receiver_logged():
    eng = make_engine(2)
    msg = eng.new_message(MessageKind.MAINTENANCE, 0, Data(), op=1)
    msg.receiver = 99
    eng.send(msg)
    assert eng.log.disposition_counts()[DISP_UNDELIVERABLE] == 1
    # failed transmission does not extend the path
    assert msg.path == [0] and msg.hops == 0


def test_send_to_failed_receiver_invokes_hook():
    proto = Relay({})
    eng = Engine(NetworkModel(), proto)
    eng.add_peer(0)
    eng.add_peer(1)
    eng.peer(1).set_state(PeerState.FAILED)
    msg = eng.new_message(MessageKind.SEARCH, 0, Data(key=5), op=1)
    msg.receiver = 1
    eng.send(msg)
    assert proto.failures == [(1, DISP_RECEIVER_DOWN)]
    assert eng.log.disposition_counts()[DISP_RECEIVER_DOWN] == 1


def test_receiver_fails_while_message_in_flight():
    proto = Relay({})
    eng = Engine(NetworkModel(base_latency=3), proto)
    eng.add_peer(0)
    eng.add_peer(1)
    msg = eng.new_message(MessageKind.SEARCH, 0, Data(key=5), op=1)
    msg.receiver = 1
    eng.send(msg)
    eng.peer(1).set_state(PeerState.FAILED)
    eng.run_until_quiescent()
    assert proto.failures == [(1, DISP_RECEIVER_DOWN)]
    assert proto.delivered_at == []


def test_sender_must_be_alive():
    eng = make_engine()
    eng.peer(0).set_state(PeerState.VOLUNTARILY_LEFT)
    msg = eng.new_message(MessageKind.MAINTENANCE, 0, Data(), op=1)
    msg.receiver = 1
    with pytest.raises(OriginDown):
        eng.send(msg)


def test_conservation_of_dispositions():
    eng, proto = chain_engine([0, 1, 2, 3])
    eng.peer(2).set_state(PeerState.FAILED)
    start_search(eng, 0, 1)  # dies at hop into 2
    msg = eng.new_message(MessageKind.MAINTENANCE, 0, Data(), op=2)
    msg.receiver = 42  # unknown
    eng.send(msg)
    start_search(eng, 1, 3, op=3)  # clean single hop
    eng.run_until_quiescent()
    counts = eng.log.disposition_counts()
    assert counts[DISP_DELIVERED] == 2  # 0->1 and 1->3
    assert counts[DISP_UNDELIVERABLE] == 1
    assert counts[DISP_RECEIVER_DOWN] == 1
    assert sum(counts.values()) == len(eng.log)


def test_peer_state_transitions():
    eng = make_engine()
    p = eng.peer(0)
    p.set_state(PeerState.CANDIDATE_SUBSTITUTE)
    p.set_state(PeerState.WORKING)
    p.set_state(PeerState.FAILED)
    with pytest.raises(IllegalTransition):
        p.set_state(PeerState.WORKING)
    assert p.state == PeerState.FAILED
    q = eng.peer(1)
    q.set_state(PeerState.VOLUNTARILY_LEFT)
    with pytest.raises(IllegalTransition):
        q.set_state(PeerState.FAILED)


def test_broadcast_rejects_query_kinds():
    eng = make_engine()
    for kind in (MessageKind.SEARCH, MessageKind.INSERT, MessageKind.DELETE, MessageKind.RANGE):
        assert kind not in BROADCASTABLE_KINDS
        with pytest.raises(ForbiddenBroadcastKind):
            eng.broadcast(0, kind, Data(), range(4))


def test_broadcast_skips_dead_targets():
    eng = make_engine(10)
    for nid in (3, 5, 7):
        eng.peer(nid).set_state(PeerState.FAILED)
    emitted = eng.broadcast(0, MessageKind.MAINTENANCE, Data(), range(10))
    assert emitted == 7
    counts = eng.log.disposition_counts()
    assert counts[DISP_RECEIVER_DOWN] == 3
    assert len(eng.log) == 10


def test_inbox_capacity_drops_oldest():
    eng = Engine(NetworkModel(queue_cap=4), None)
    for i in range(8):
        eng.add_peer(i)
    for i in range(1, 7):  # six same-tick deliveries to node 0
        msg = eng.new_message(MessageKind.MAINTENANCE, i, Data(), op=i)
        msg.receiver = 0
        eng.send(msg)
    eng.run_until_quiescent()
    counts = eng.log.disposition_counts()
    assert counts[DISP_DELIVERED] == 4
    assert counts[DISP_UNDELIVERABLE] == 2
    assert eng.log.overflow_drops == 2


def test_log_export_format_and_digest():
    eng, _ = chain_engine([0, 1, 2])
    start_search(eng, 0, 1, op=7)
    eng.run_until_quiescent()
    out = io.StringIO()
    eng.log.export(out)
    text = out.getvalue()
    kind = int(MessageKind.SEARCH)
    assert text == f"0,{kind},0,1,1\n1,{kind},1,2,2\n"
    assert eng.log.digest() == hashlib.sha256(text.encode()).hexdigest()


def test_log_count_by_kind():
    eng, _ = chain_engine([0, 1, 2])
    start_search(eng, 0, 1)
    eng.broadcast(2, MessageKind.MAINTENANCE, Data(), [0, 1])
    eng.run_until_quiescent()
    assert eng.log.count(MessageKind.SEARCH) == 2
    assert eng.log.count(MessageKind.MAINTENANCE) == 2
    assert eng.log.count(MessageKind.JOIN_RESP) == 0


def test_log_snapshot_is_stable():
    eng, _ = chain_engine([0, 1, 2])
    start_search(eng, 0, 1)
    eng.run_until_quiescent()
    snap = eng.log.snapshot()
    assert len(snap) == 2
    start_search(eng, 0, 1, op=2)
    eng.run_until_quiescent()
    assert len(snap) == 2
    assert len(eng.log) == 4
    assert snap.count(MessageKind.SEARCH) == 2


def test_log_receiver_counts_window():
    eng, _ = chain_engine([0, 1, 2, 3])
    start_search(eng, 0, 1)
    eng.run_until_quiescent()
    mark = len(eng.log)
    start_search(eng, 1, 3, op=2)
    eng.run_until_quiescent()
    counts = eng.log.receiver_counts(start=mark)
    assert counts == {3: 1}


def test_background_traffic_deterministic():
    def run():
        eng = make_engine(6, background_traffic_rate=2, seed=99)
        eng.step()
        eng.step()
        return [tuple(r) for r in eng.log.records()]

    a, b = run(), run()
    assert a == b
    assert len(a) == 4
    assert all(r[1] == int(MessageKind.MAINTENANCE) for r in a)
    # background pairs are live nodes and never self-loops
    assert all(r[2] != r[3] for r in a)


def test_background_traffic_default_off():
    eng = make_engine(6)
    eng.step()
    eng.step()
    assert len(eng.log) == 0


def test_network_model_validation():
    with pytest.raises(ValueError):
        NetworkModel(base_latency=0).validate()
    with pytest.raises(ValueError):
        NetworkModel(per_node_step={1: 0}).validate()
    with pytest.raises(ValueError):
        NetworkModel(background_traffic_rate=-1).validate()
