"""Churn toolkit checks against independent graph oracles.

Partition detection is compared with a hand-rolled BFS on the materialized
edge list; separation cost is compared with the two-sum formulation
(total entries minus internal entries) computed by separate code.
"""

import pytest
from hypothesis import given, strategies as st

from dpsim.churn import (
    ChurnPlan,
    PeerState,
    depart,
    fail,
    is_partitioned,
    resistance_experiment,
    sample_live,
    select_nodes,
    separation_cost,
)
from dpsim.distributions import DistributionSpec, Sampler
from dpsim.engine import Data, Engine, MessageKind, NetworkModel
from dpsim.errors import InvalidParams, NoEligibleNode, UnknownNode


def uniform_sampler(seed):
    return Sampler(DistributionSpec("uniform", {"lo": 0.0, "hi": 1.0}, seed))


def bfs_components(working, contacts):
    """Independent reachability oracle on the undirected closure."""
    adj = {n: set() for n in working}
    for v in adj:
        for u in contacts(v):
            if u in adj and u != v:
                adj[v].add(u)
                adj[u].add(v)
    seen, comps = set(), []
    for n in sorted(adj):
        if n in seen:
            continue
        comp, frontier = set(), [n]
        while frontier:
            x = frontier.pop()
            if x in comp:
                continue
            comp.add(x)
            frontier.extend(adj[x] - comp)
        seen |= comp
        comps.append(frozenset(comp))
    return sorted(comps, key=min)


# -- partition detection -----------------------------------------------------

def test_empty_network_not_partitioned():
    report = is_partitioned([], lambda n: ())
    assert report.partitioned is False
    assert report.components == ()


def test_fresh_line_is_single_component():
    graph = {0: [1], 1: [2], 2: [3], 3: []}
    report = is_partitioned(graph, graph.__getitem__)
    assert report.partitioned is False
    assert report.components == (frozenset({0, 1, 2, 3}),)
    assert report.s_values == (0,)


def test_two_nodes_one_failed_single_live_component():
    graph = {0: [1], 1: [0]}
    report = is_partitioned([0], graph.__getitem__)
    assert report.partitioned is False
    assert report.components == (frozenset({0}),)
    # the surviving node's one pointer is broken
    assert report.s_values == (1,)


def test_path_graph_middle_failures_split():
    graph = {i: [j for j in (i - 1, i + 1) if 0 <= j <= 5] for i in range(6)}
    report = is_partitioned([0, 1, 4, 5], graph.__getitem__)
    assert report.partitioned is True
    assert report.components == (frozenset({0, 1}), frozenset({4, 5}))
    assert report.s_values == (1, 1)


def test_one_way_contact_still_connects():
    graph = {0: [1], 1: []}
    report = is_partitioned([0, 1], graph.__getitem__)
    assert report.partitioned is False
    assert report.components == (frozenset({0, 1}),)


@st.composite
def contact_graphs(draw):
    n = draw(st.integers(min_value=1, max_value=40))
    ids = range(n)
    edges = draw(st.lists(
        st.tuples(st.sampled_from(ids), st.sampled_from(ids)), max_size=120))
    working = draw(st.sets(st.sampled_from(ids), max_size=n))
    graph = {i: [] for i in ids}
    for a, b in edges:
        graph[a].append(b)
    return graph, sorted(working)


@given(contact_graphs())
def test_partition_matches_bfs_oracle(case):
    graph, working = case
    report = is_partitioned(working, graph.__getitem__)
    expected = bfs_components(working, graph.__getitem__)
    assert list(report.components) == expected
    assert report.partitioned == (len(expected) > 1)


# -- separation cost ---------------------------------------------------------

def test_separation_whole_set_is_zero():
    graph = {0: [1, 2], 1: [0], 2: [0, 1]}
    assert separation_cost({0, 1, 2}, graph.__getitem__, known=graph) == 0


def test_separation_triangle_singleton():
    graph = {0: [1, 2], 1: [0, 2], 2: [0, 1]}
    assert separation_cost({0}, graph.__getitem__, known=graph) == 2


def test_separation_ignores_self_loops():
    graph = {0: [0, 1, 2], 1: [], 2: []}
    assert separation_cost({0}, graph.__getitem__, known=graph) == 2


def test_separation_unknown_member():
    graph = {0: [1], 1: []}
    with pytest.raises(UnknownNode):
        separation_cost({0, 9}, graph.__getitem__, known=graph)
    with pytest.raises(InvalidParams):
        separation_cost(set(), graph.__getitem__, known=graph)


@given(contact_graphs(), st.data())
def test_separation_matches_two_sum_formula(case, data):
    graph, _ = case
    ids = sorted(graph)
    group = data.draw(st.sets(st.sampled_from(ids), min_size=1))
    total = sum(len(graph[v]) for v in group)
    internal = sum(1 for v in group for u in graph[v] if u == v or u in group)
    assert separation_cost(group, graph.__getitem__, known=graph) == total - internal


# -- node sampling -----------------------------------------------------------

def make_engine(n):
    eng = Engine(NetworkModel())
    for i in range(n):
        eng.add_peer(i)
    return eng


def test_sample_live_last_eligible_always_returned():
    eng = make_engine(5)
    smp = uniform_sampler(3)
    for _ in range(10):
        assert sample_live(eng, smp, exceptions={0, 1, 2, 4}) == 3


def test_sample_live_no_eligible():
    eng = make_engine(2)
    with pytest.raises(NoEligibleNode):
        sample_live(eng, uniform_sampler(0), exceptions={0, 1})


def test_sample_live_uniform_frequencies():
    eng = make_engine(1000)
    smp = uniform_sampler(42)
    eligible = list(range(1000))
    counts = [0] * 1000
    for _ in range(100_000):
        counts[sample_live(eng, smp, eligible=eligible)] += 1
    # spec tolerance: each node 100 +- 5*sqrt(100)
    assert min(counts) >= 50 and max(counts) <= 150


def test_sample_live_skips_failed_after_tick():
    eng = make_engine(4)
    smp = uniform_sampler(7)
    eng.peer(2).set_state(PeerState.FAILED)
    for _ in range(200):
        assert sample_live(eng, smp) != 2


def test_select_nodes_deterministic_and_distinct():
    eng = make_engine(50)
    a = select_nodes(eng, 10, uniform_sampler(9))
    b = select_nodes(eng, 10, uniform_sampler(9))
    assert a == b
    assert len(set(a)) == 10


# -- plans and failure injection ----------------------------------------------

def test_plan_validation():
    with pytest.raises(InvalidParams):
        ChurnPlan(kind="reboot", fraction=0.1).validate()
    with pytest.raises(InvalidParams):
        ChurnPlan(kind="failure", mode="eventually", fraction=0.1).validate()
    with pytest.raises(InvalidParams):
        ChurnPlan(kind="failure").validate()  # no selection
    with pytest.raises(InvalidParams):
        ChurnPlan(kind="failure", ids=[1], fraction=0.5).validate()
    with pytest.raises(InvalidParams):
        ChurnPlan(kind="failure", fraction=1.5).validate()
    with pytest.raises(InvalidParams):
        ChurnPlan(kind="failure", fraction=-0.1).validate()
    ChurnPlan(kind="failure", fraction=0.0).validate()
    ChurnPlan(kind="departure", mode="sequential", ids=[1, 2]).validate()


def test_fail_fraction_is_exact_and_reproducible():
    def run():
        eng = make_engine(1000)
        report = fail(eng, ChurnPlan(kind="failure", fraction=0.1),
                      sampler=uniform_sampler(5))
        return report, frozenset(
            p.id for p in eng.peers() if p.state == PeerState.FAILED)

    r1, failed1 = run()
    r2, failed2 = run()
    assert r1.count == 100 and len(failed1) == 100
    assert failed1 == failed2
    assert r1.ids == r2.ids


def test_fail_fraction_zero_is_noop():
    eng = make_engine(10)
    report = fail(eng, ChurnPlan(kind="failure", fraction=0.0))
    assert report.count == 0
    assert eng.live_count() == 10


def test_fail_explicit_requires_working_nodes():
    eng = make_engine(4)
    eng.peer(1).set_state(PeerState.FAILED)
    with pytest.raises(InvalidParams):
        fail(eng, ChurnPlan(kind="failure", ids=[0, 1]))
    report = fail(eng, ChurnPlan(kind="failure", ids=[0, 2]))
    assert report.count == 2 and report.ids == (0, 2)


def test_fail_rejects_departure_plan():
    eng = make_engine(4)
    with pytest.raises(InvalidParams):
        fail(eng, ChurnPlan(kind="departure", ids=[0]))


# -- departure orchestration ---------------------------------------------------

class ScriptedDriver:
    """Minimal overlay stand-in: substitution = one hop to a helper node.

    Node 0 acts as the always-on helper; a REPLACEMENT_REQ reaches it in one
    hop and it reports completion, emitting one REPLACEMENT_RESP.
    """

    def __init__(self, n, stranded=()):
        self.engine = Engine(NetworkModel(), self)
        for i in range(n):
            self.engine.add_peer(i)
        self.stranded = set(stranded)
        self.initiated_at = {}
        self._ops = 0

    def new_op(self):
        self._ops += 1
        return self._ops

    def contacts(self, nid):
        return ()

    def initiate_departure(self, nid, op):
        eng = self.engine
        self.initiated_at[nid] = eng.now
        if nid in self.stranded:
            eng.peer(nid).set_state(PeerState.VOLUNTARILY_LEFT)
            return
        eng.unicast(MessageKind.REPLACEMENT_REQ, nid, 0, Data(key=nid), op)
        eng.peer(nid).set_state(PeerState.VOLUNTARILY_LEFT)

    def handle(self, eng, peer, msg):
        if msg.kind == MessageKind.REPLACEMENT_REQ:
            eng.unicast(MessageKind.REPLACEMENT_RESP, peer.id, 1,
                        Data(key=msg.data.key), msg.op)
            eng.finish_op(msg.op, replacement_hops=msg.hops, ok=True)

    def on_undeliverable(self, eng, msg, disp):
        pass


def test_sequential_departures_serialize():
    drv = ScriptedDriver(8)
    plan = ChurnPlan(kind="departure", mode="sequential", ids=[3, 4, 5])
    report = depart(drv, plan)
    assert report.replacement_hops == {3: 1, 4: 1, 5: 1}
    assert report.not_found == ()
    assert drv.engine.log.count(MessageKind.REPLACEMENT_RESP) == 3
    # each initiation waits for the previous completion
    ticks = [drv.initiated_at[n] for n in (3, 4, 5)]
    assert ticks[0] < ticks[1] < ticks[2]
    for nid in (3, 4, 5):
        assert drv.engine.peer(nid).state == PeerState.VOLUNTARILY_LEFT


def test_concurrent_departures_share_a_tick():
    drv = ScriptedDriver(8)
    plan = ChurnPlan(kind="departure", mode="concurrent", ids=[3, 4, 5])
    report = depart(drv, plan)
    assert report.replacement_hops == {3: 1, 4: 1, 5: 1}
    assert len(set(drv.initiated_at.values())) == 1


def test_departure_substitute_not_found_reported():
    drv = ScriptedDriver(8, stranded={4})
    plan = ChurnPlan(kind="departure", mode="concurrent", ids=[3, 4])
    report = depart(drv, plan)
    assert report.replacement_hops == {3: 1}
    assert report.not_found == (4,)


# -- resistance sweep ----------------------------------------------------------

class StaticOverlay:
    """Driver over a frozen contact graph, for sweep mechanics tests."""

    def __init__(self, graph):
        self.engine = Engine(NetworkModel())
        for nid in graph:
            self.engine.add_peer(nid)
        self.graph = graph

    def contacts(self, nid):
        return self.graph[nid]


def test_resistance_two_node_floor():
    drv = StaticOverlay({0: [1], 1: [0]})
    assert resistance_experiment(drv, 0.5, 0.01, seed=1) == 0.5


def test_resistance_ring_returns_valid_fraction():
    n = 24
    graph = {i: [(i - 1) % n, (i + 1) % n] for i in range(n)}
    frac = resistance_experiment(drv := StaticOverlay(graph), 0.1, 0.05, seed=3)
    assert 0.0 < frac <= 1.0
    # a ring partitions as soon as two non-adjacent nodes fail
    assert drv.engine.live_count() >= 1


def test_resistance_reproducible():
    def run():
        n = 30
        graph = {i: [(i - 1) % n, (i + 1) % n, (i + 5) % n] for i in range(n)}
        return resistance_experiment(StaticOverlay(graph), 0.1, 0.02, seed=11)

    assert run() == run()


def test_resistance_validates_inputs():
    drv = StaticOverlay({0: [1], 1: [0]})
    with pytest.raises(InvalidParams):
        resistance_experiment(drv, 0.0, 0.01)
    with pytest.raises(InvalidParams):
        resistance_experiment(drv, 0.5, 0.0)
