"""Balanced multi-way tree checks against a slot-replay reference model.

The reference below rebuilds the expected tree shape, in-order adjacency,
key-range assignment and sideways-table targets purely from the fanout and
the join order, with no messages involved. The implementation must agree
on every link and every range.
"""

import random

import pytest

from dpsim.churn import ChurnPlan, DepartureReport, PeerState, depart, fail
from dpsim.engine import MessageKind, NetworkModel
from dpsim.errors import InvalidParams, OriginDown
from dpsim.protocols import ProtocolSpec, make_overlay


# -- reference model -----------------------------------------------------------

class TreeOracle:
    def __init__(self, m, bits):
        self.m = m
        self.space = 1 << bits
        self.left_block = (m + 1) // 2
        self.count = 0
        self.ranges = {}

    def level_pos(self, slot):
        base, width, level = 0, 1, 0
        while slot >= base + width:
            base += width
            width *= self.m
            level += 1
        return level, slot - base, base, width

    def parent(self, slot):
        return (slot - 1) // self.m if slot else None

    def children(self, slot):
        return [c for c in range(self.m * slot + 1, self.m * slot + self.m + 1)
                if c < self.count]

    def in_order(self, root=0):
        if root >= self.count:
            return []
        kids = [self.m * root + i for i in range(1, self.m + 1)]
        out = []
        for c in kids[:self.left_block]:
            out.extend(self.in_order(c))
        out.append(root)
        for c in kids[self.left_block:]:
            out.extend(self.in_order(c))
        return out

    def add(self):
        slot = self.count
        self.count += 1
        if slot == 0:
            self.ranges[0] = (0, self.space)
            return 0
        order = self.in_order()
        at = order.index(slot)
        succ = order[at + 1] if at + 1 < len(order) else None
        if succ is not None:
            lo, hi = self.ranges[succ]
            mid = (lo + hi) // 2
            self.ranges[succ] = (mid, hi)
            self.ranges[slot] = (lo, mid)
        else:
            pred = order[at - 1]
            lo, hi = self.ranges[pred]
            mid = (lo + hi) // 2
            self.ranges[pred] = (lo, mid)
            self.ranges[slot] = (mid, hi)
        return slot

    def grow(self, n):
        for _ in range(n - self.count):
            self.add()
        return self

    def neighbors(self, slot):
        order = self.in_order()
        at = order.index(slot)
        pred = order[at - 1] if at > 0 else None
        succ = order[at + 1] if at + 1 < len(order) else None
        return pred, succ

    def owner(self, key):
        for slot, (lo, hi) in self.ranges.items():
            if lo <= key < hi:
                return slot
        raise AssertionError(f"no owner for {key}")

    def sideways(self, slot):
        level, pos, base, width = self.level_pos(slot)
        dists, step = [], 1
        while step < width:
            dists.extend(c * step for c in range(1, self.m))
            step *= self.m
        dists = sorted(set(d for d in dists if d < width))
        left = [(d, base + pos - d) for d in dists
                if pos - d >= 0 and base + pos - d < self.count]
        right = [(d, base + pos + d) for d in dists
                 if pos + d < width and base + pos + d < self.count]
        return left, right

    def height(self):
        return self.level_pos(self.count - 1)[0]

    def route(self, slot, key):
        # Forward to the farthest link that does not overshoot the key.
        # When the key lies beyond every link on a side whose sideways
        # table stops short of the level edge, climb to the parent
        # instead of crawling hop by hop along the growth frontier.
        path, avoid = [slot], set()
        while True:
            lo, hi = self.ranges[slot]
            if lo <= key < hi:
                return path
            assert len(path) <= 4 * self.count, "reference walk cycled"
            level, pos, base, width = self.level_pos(slot)
            parent = self.parent(slot)
            pred, succ = self.neighbors(slot)
            left, right = self.sideways(slot)
            cands = set(self.children(slot))
            cands.update(s for _, s in left)
            cands.update(s for _, s in right)
            for extra in (parent, pred, succ):
                if extra is not None:
                    cands.add(extra)
            cands -= avoid
            sign = 1 if key >= hi else -1
            side = right if key >= hi else left
            d_last = max((d for d, _ in side), default=0)
            dists, step = set(), 1
            while step < width:
                dists.update(c * step for c in range(1, self.m))
                step *= self.m
            short = any(d > d_last and 0 <= pos + sign * d < width
                        for d in dists if d < width)
            if key >= hi:
                beyond = all(self.ranges[c][1] <= key for c in cands)
            else:
                beyond = all(self.ranges[c][0] > key for c in cands)
            if short and beyond and parent is not None and parent not in avoid:
                avoid.add(slot)
                path.append(parent)
                slot = parent
                continue
            best = None
            if key >= hi:
                for c in cands:
                    clo, chi = self.ranges[c]
                    if clo <= key and chi > hi and (
                            best is None or (clo, -c) > (best[0], -best[1])):
                        best = (clo, c)
            else:
                for c in cands:
                    clo, chi = self.ranges[c]
                    if chi > key and clo < lo and (
                            best is None or (chi, c) < (best[0], best[1])):
                        best = (chi, c)
            assert best is not None, f"reference walk stuck at {slot}"
            slot = best[1]
            path.append(slot)


BITS = 20


def build_baton(n, m, bits=BITS):
    ov = make_overlay(ProtocolSpec("baton_star", fanout=m, key_bits=bits),
                      model=NetworkModel())
    ov.build(n, ids=range(n))
    return ov


def node_of(ov, nid):
    return ov.engine.peer(nid).node


# -- shape ------------------------------------------------------------------------

def test_bootstrap_owns_everything():
    ov = build_baton(1, 2)
    nd = node_of(ov, 0)
    assert (nd.lo, nd.hi) == (0, 1 << BITS)
    assert ov.lookup(0, 12345).hops == 0
    assert ov.height() == 0


def test_seven_node_tree_is_complete():
    ov = build_baton(7, 2)
    assert ov.height() == 2
    for nid in range(7):
        nd = node_of(ov, nid)
        assert nd.slot == nid
        expect_parent = (nid - 1) // 2 if nid else -1
        assert nd.parent == expect_parent
    assert sorted(node_of(ov, 1).kids()) == [3, 4]


def test_eighth_join_attaches_at_leaf_level():
    ov = build_baton(8, 2)
    nd = node_of(ov, 7)
    assert nd.slot == 7
    assert nd.parent == 3
    assert ov.height() == 3


@pytest.mark.parametrize("m,n", [(2, 1), (2, 2), (2, 13), (2, 40),
                                 (3, 29), (4, 23), (5, 61), (10, 35)])
def test_links_and_ranges_match_oracle(m, n):
    ov = build_baton(n, m)
    oracle = TreeOracle(m, BITS).grow(n)
    for slot in range(n):
        nd = node_of(ov, slot)
        level, pos, _, _ = oracle.level_pos(slot)
        assert (nd.level, nd.pos) == (level, pos)
        assert (nd.lo, nd.hi) == oracle.ranges[slot]
        pred, succ = oracle.neighbors(slot)
        assert nd.ladj == (pred if pred is not None else -1)
        assert nd.radj == (succ if succ is not None else -1)
        assert sorted(nd.kids()) == oracle.children(slot)
        want_left, want_right = oracle.sideways(slot)
        assert sorted(nd.table_pairs("left")) == want_left
        assert sorted(nd.table_pairs("right")) == want_right


@pytest.mark.parametrize("m,n", [(2, 21), (4, 30)])
def test_cached_ranges_are_fresh(m, n):
    ov = build_baton(n, m)
    def true_range(nid):
        nd = node_of(ov, nid)
        return (nd.lo, nd.hi)
    for nid in range(n):
        nd = node_of(ov, nid)
        for cid, clo, chi in nd.link_candidates():
            assert (clo, chi) == true_range(cid), (nid, cid)


def test_ranges_partition_key_space():
    for m, n in ((2, 33), (5, 44)):
        ov = build_baton(n, m)
        spans = sorted((node_of(ov, i).lo, node_of(ov, i).hi) for i in range(n))
        assert spans[0][0] == 0
        assert spans[-1][1] == 1 << BITS
        for (alo, ahi), (blo, bhi) in zip(spans, spans[1:]):
            assert ahi == blo


@pytest.mark.parametrize("m", [2, 3, 4])
def test_height_stays_logarithmic(m):
    ov = make_overlay(ProtocolSpec("baton_star", fanout=m, key_bits=BITS),
                      model=NetworkModel())
    import math
    for n in range(1, 81):
        ov.join(n - 1)
        bound = math.ceil(math.log(max(n, 2), m)) + 1
        assert ov.height() <= bound, (m, n)


def test_join_accounting():
    ov = build_baton(40, 2)
    assert ov.metrics.summary("join_hops").count == 39
    assert ov.engine.log.count(MessageKind.JOIN_RESP) == 39


# -- exact-match routing --------------------------------------------------------------

def test_lookup_owner_matches_oracle():
    m, n = 3, 85
    ov = build_baton(n, m)
    oracle = TreeOracle(m, BITS).grow(n)
    rng = random.Random(9)
    keys = [rng.randrange(1 << BITS) for _ in range(30)]
    for origin in range(0, n, 7):
        for key in keys:
            res = ov.lookup(origin, key)
            assert not res.failed
            assert res.owner == oracle.owner(key)
            assert res.hops == len(res.path) - 1
            assert res.hops <= 14


def test_lookup_on_own_key_is_free():
    ov = build_baton(20, 2)
    nd = node_of(ov, 13)
    res = ov.lookup(13, nd.lo)
    assert res.hops == 0 and res.owner == 13 and res.path == (13,)


def test_truncated_table_edge_ascends_to_parent():
    # deepest level holds positions 0..214 of 256; the node at pos 202 has
    # right-table entries only up to distance 12 although distance 16 would
    # still land inside the level, so a far-right key climbs to the parent
    ov = build_baton(300, 4)
    res = ov.lookup(95, (1 << BITS) - 1)
    assert res.path == (95, 287, 71, 83, 84)
    assert res.owner == 84


def test_routing_matches_reference_paths():
    for m, n in ((2, 93), (4, 300), (5, 711)):
        ov = build_baton(n, m)
        oracle = TreeOracle(m, BITS).grow(n)
        rng = random.Random(4)
        for _ in range(150):
            origin = rng.randrange(n)
            key = rng.randrange(1 << BITS)
            res = ov.lookup(origin, key)
            assert not res.failed
            assert list(res.path) == oracle.route(origin, key), (m, origin, key)


def test_partial_level_traffic_has_no_hotspot():
    # without the parent escape, the in-order boundary pair at the growth
    # frontier relays every bottom-origin query headed past it
    n, m = 3000, 4
    ov = build_baton(n, m)
    mark = len(ov.engine.log)
    rng = random.Random(11)
    for _ in range(1500):
        ov.lookup(rng.randrange(n), rng.randrange(1 << BITS))
    counts = ov.engine.log.receiver_counts(start=mark)
    assert max(counts.values()) <= 40


def test_mean_hops_non_increasing_in_fanout():
    n = 400
    rng = random.Random(77)
    pairs = [(rng.randrange(n), rng.randrange(1 << BITS)) for _ in range(300)]
    means = []
    for m in (2, 4, 8):
        ov = build_baton(n, m)
        means.append(sum(ov.lookup(o, k).hops for o, k in pairs) / len(pairs))
    assert means[0] >= means[1] >= means[2], means


def test_table_length_grows_with_fanout_and_size():
    small2 = build_baton(200, 2).mean_table_length()
    big2 = build_baton(800, 2).mean_table_length()
    big4 = build_baton(800, 4).mean_table_length()
    big8 = build_baton(800, 8).mean_table_length()
    assert small2 < big2
    assert big2 < big4 < big8


def test_insert_routes_like_lookup():
    ov = build_baton(60, 2)
    rng = random.Random(5)
    for _ in range(25):
        origin, key = rng.randrange(60), rng.randrange(1 << BITS)
        ins = ov.insert(origin, key, "x")
        ref = ov.lookup(origin, key)
        assert ins.hops == ref.hops
        assert ins.owner == ref.owner


def test_insert_delete_roundtrip():
    ov = build_baton(25, 3)
    ov.insert(7, 1000, "v1")
    res = ov.lookup(19, 1000)
    assert res.found and res.value == "v1"
    assert ov.delete(2, 1000).found
    assert not ov.lookup(19, 1000).found
    assert not ov.delete(3, 999).found


# -- range queries -----------------------------------------------------------------------

def test_range_on_own_span_is_free():
    ov = build_baton(15, 2)
    nd = node_of(ov, 8)
    ov.insert(0, nd.lo, "edge")
    res = ov.range_query(8, nd.lo, nd.lo)
    assert res.hops == 0
    assert res.matches == ((nd.lo, "edge"),)
    assert res.visited_owners == (8,)


def test_range_walks_consecutive_owners():
    ov = build_baton(15, 2)
    order = sorted(range(15), key=lambda i: node_of(ov, i).lo)
    a, b, c = order[4], order[5], order[6]
    lo = node_of(ov, a).hi - 1
    hi = node_of(ov, c).lo
    ov.insert(0, lo, "first")
    ov.insert(0, node_of(ov, b).lo, "mid")
    ov.insert(0, hi, "last")
    ov.insert(0, hi + 1, "outside")
    origin = order[-1]
    locate = ov.lookup(origin, lo)
    res = ov.range_query(origin, lo, hi)
    assert res.visited_owners == (a, b, c)
    assert res.hops == locate.hops + 2
    assert res.matches == ((lo, "first"), (node_of(ov, b).lo, "mid"), (hi, "last"))


def test_empty_range_still_visits_owners():
    ov = build_baton(15, 2)
    order = sorted(range(15), key=lambda i: node_of(ov, i).lo)
    origin = order[-1]
    lo = node_of(ov, order[2]).lo
    locate = ov.lookup(origin, lo)
    res = ov.range_query(origin, lo, lo + 1)
    assert res.matches == ()
    assert res.hops >= locate.hops


def test_range_rejects_inverted_bounds():
    ov = build_baton(5, 2)
    with pytest.raises(InvalidParams):
        ov.range_query(0, 10, 9)


# -- departures ------------------------------------------------------------------------------

def check_partition(ov, ids):
    live = [i for i in ids if ov.engine.peer(i).state == PeerState.WORKING]
    spans = sorted((node_of(ov, i).lo, node_of(ov, i).hi) for i in live)
    assert spans[0][0] == 0 and spans[-1][1] == 1 << BITS
    for (alo, ahi), (blo, bhi) in zip(spans, spans[1:]):
        assert ahi == blo


def test_leaf_departure_merges_range():
    ov = build_baton(12, 2)
    victim = 9
    absorber = node_of(ov, victim).ladj
    lo_before = node_of(ov, victim).lo
    ov.insert(0, lo_before, "kept")
    hops = ov.depart_sync(victim)
    assert hops == 0
    assert ov.engine.peer(victim).state == PeerState.VOLUNTARILY_LEFT
    assert ov.engine.log.count(MessageKind.REPLACEMENT_RESP) == 0
    check_partition(ov, range(12))
    res = ov.lookup(0, lo_before)
    assert res.owner == absorber and res.value == "kept"


def test_leaf_slot_is_reused():
    ov = build_baton(12, 2)
    ov.depart_sync(9)
    ov.join(50)
    nd = node_of(ov, 50)
    assert nd.slot == 9
    check_partition(ov, [*range(12), 50])
    oracle = TreeOracle(2, BITS).grow(12)
    pred, succ = oracle.neighbors(9)
    assert nd.ladj == pred and nd.radj == succ


def test_internal_departure_uses_substitute():
    ov = build_baton(20, 2)
    victim = 2
    old_range = (node_of(ov, victim).lo, node_of(ov, victim).hi)
    last = 19
    hops = ov.depart_sync(victim)
    assert hops and hops > 0
    assert ov.engine.log.count(MessageKind.REPLACEMENT_RESP) == 1
    assert ov.engine.peer(victim).state == PeerState.VOLUNTARILY_LEFT
    sub = node_of(ov, last)
    assert sub.slot == 2
    assert ov.engine.peer(last).state == PeerState.WORKING
    check_partition(ov, range(20))
    assert ov.lookup(0, old_range[0]).owner == last
    for kid in sub.kids():
        assert node_of(ov, kid).parent == last


def test_root_departure_promotes_substitute():
    ov = build_baton(10, 2)
    hops = ov.depart_sync(0)
    assert hops and hops > 0
    assert ov.bootstrap_id == 9
    assert node_of(ov, 9).slot == 0
    check_partition(ov, range(10))
    ov.join(33)
    check_partition(ov, [*range(10), 33])


def test_ten_internal_departures_yield_ten_responses():
    ov = build_baton(120, 2)
    internals = [i for i in range(120) if node_of(ov, i).kids()][:10]
    for v in internals:
        assert ov.depart_sync(v) > 0
    assert ov.engine.log.count(MessageKind.REPLACEMENT_RESP) == 10
    check_partition(ov, range(120))


def test_concurrent_substitute_departure_reports_not_found():
    class Driver:
        def __init__(self, ov):
            self.ov = ov
            self.engine = ov.engine
        def new_op(self):
            return self.ov.new_op()
        def contacts(self, nid):
            return self.ov.contacts(nid)
        def initiate_departure(self, nid, op):
            self.ov.initiate_departure(nid, op)

    ov = build_baton(10, 2)
    report = depart(Driver(ov), ChurnPlan(kind="departure", ids=(1, 9),
                                          mode="concurrent"))
    assert isinstance(report, DepartureReport)
    assert report.not_found == (1,)
    assert ov.engine.peer(1).state == PeerState.WORKING
    assert ov.engine.peer(9).state == PeerState.VOLUNTARILY_LEFT
    check_partition(ov, range(10))


# -- failures ----------------------------------------------------------------------------------

def test_failed_owner_yields_queryfailed():
    ov = build_baton(30, 2)
    victim = 17
    key = node_of(ov, victim).lo
    fail(ov.engine, ChurnPlan(kind="failure", ids=(victim,)))
    res = ov.lookup(0, key)
    assert res.failed and res.owner is None
    assert ov.engine.log.count(MessageKind.QUERYFAILED_RES) == 1


def test_midroute_failure_is_retried():
    ov = build_baton(63, 2)
    origin = min(range(63), key=lambda i: node_of(ov, i).lo)
    target = max(range(63), key=lambda i: node_of(ov, i).lo)
    key = node_of(ov, target).lo
    clean = ov.lookup(origin, key)
    assert len(clean.path) > 2
    blocker = clean.path[1]
    fail(ov.engine, ChurnPlan(kind="failure", ids=(blocker,)))
    res = ov.lookup(origin, key)
    assert not res.failed and res.owner == target
    assert blocker not in res.path
    assert ov.engine.log.count(MessageKind.QUERYFAILED_RES) == 0


def test_lookup_from_failed_origin_rejected():
    ov = build_baton(10, 2)
    fail(ov.engine, ChurnPlan(kind="failure", ids=(4,)))
    with pytest.raises(OriginDown):
        ov.lookup(4, 0)


# -- contact graph -------------------------------------------------------------------------------

def test_contacts_are_a_band_of_the_full_table():
    ov = build_baton(63, 2)
    deep_mid = 45
    contacts = ov.contacts(deep_mid)
    table = ov.routing_table(deep_mid)
    assert len(contacts) <= 2 * 2 + 1 + 2
    assert len(table) > len(contacts)
    assert set(contacts) <= {n for _, n in table.entries} | set(contacts)


def test_fanout_rejected_outside_bounds():
    with pytest.raises(InvalidParams):
        ProtocolSpec("baton_star", fanout=11).validate()
    with pytest.raises(InvalidParams):
        ProtocolSpec("baton_star", fanout=1).validate()
