"""Peer lifecycle, failure injection, and partition analysis.

Voluntary departures are orchestrated here but executed by the overlay
driver, which owns the substitution mechanics and reports one completion
per departing node.  Partition detection runs on the undirected closure of
the maintained contact graph restricted to WORKING nodes; separation cost
counts the directed entries leaving a group regardless of target state, so
a surviving component's score reads as "pointers broken so far" while the
whole working set of a fresh overlay scores zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

from .distributions import DistributionSpec, Sampler
from .errors import (
    IllegalTransition,
    InvalidParams,
    NoEligibleNode,
    UnknownNode,
)

log = logging.getLogger(__name__)


class PeerState(IntEnum):
    WORKING = 1
    CANDIDATE_SUBSTITUTE = 2
    VOLUNTARILY_LEFT = 3
    FAILED = 4


# left/failed are absorbing; a substitute either takes over or never existed
_ALLOWED = {
    (PeerState.WORKING, PeerState.CANDIDATE_SUBSTITUTE),
    (PeerState.WORKING, PeerState.VOLUNTARILY_LEFT),
    (PeerState.WORKING, PeerState.FAILED),
    (PeerState.CANDIDATE_SUBSTITUTE, PeerState.WORKING),
}

ALIVE_STATES = (PeerState.WORKING, PeerState.CANDIDATE_SUBSTITUTE)


def check_transition(node_id, current, target):
    if (current, target) not in _ALLOWED:
        log.warning("illegal state change on node %s: %s -> %s",
                    node_id, current.name, target.name)
        raise IllegalTransition(
            f"node {node_id}: {current.name} -> {target.name}")


# -- partition analysis --------------------------------------------------------

@dataclass(frozen=True)
class SeparationReport:
    partitioned: bool
    components: tuple
    s_values: tuple

    def to_json_dict(self):
        return {
            "partitioned": self.partitioned,
            "components": [sorted(c) for c in self.components],
            "s_values": list(self.s_values),
        }


def is_partitioned(working, contacts):
    """Connected components of the live contact graph.

    `working` iterates the WORKING node ids; `contacts(nid)` lists nid's
    maintained contact entries.  An edge exists when either live endpoint
    lists the other.  Each component's S value counts its directed entries
    whose target lies outside the component (alive or not).
    """
    parent = {n: n for n in working}

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for v in parent:
        for u in contacts(v):
            if u != v and u in parent:
                ru, rv = find(u), find(v)
                if ru != rv:
                    parent[ru] = rv
    groups = {}
    for n in parent:
        groups.setdefault(find(n), []).append(n)
    components = sorted((frozenset(g) for g in groups.values()), key=min)
    s_values = tuple(_leaving_entries(comp, contacts) for comp in components)
    return SeparationReport(len(components) > 1, tuple(components), s_values)


def _leaving_entries(group, contacts):
    s = 0
    for v in group:
        for u in contacts(v):
            if u != v and u not in group:
                s += 1
    return s


def separation_cost(group, contacts, known):
    """Directed contact entries leaving `group` (self-loops excluded)."""
    if not group:
        raise InvalidParams("group must be nonempty")
    for v in group:
        if v not in known:
            raise UnknownNode(f"node {v} is not part of the overlay")
    return _leaving_entries(group, contacts)


# -- live-node sampling ----------------------------------------------------------

def _working_ids(engine, exceptions=frozenset()):
    return sorted(p.id for p in engine.peers()
                  if p.state == PeerState.WORKING and p.id not in exceptions)


def sample_live(engine, sampler, exceptions=frozenset(), eligible=None):
    """Draw one WORKING node id by rank under the sampler's distribution.

    Pass a prebuilt `eligible` list (sorted WORKING ids) to amortize the
    scan across bulk draws.
    """
    if eligible is None:
        eligible = _working_ids(engine, exceptions)
    if not eligible:
        raise NoEligibleNode("no WORKING node outside the exception list")
    return eligible[sampler.draw_rank(len(eligible))]


def select_from(eligible, count, sampler):
    """Draw `count` distinct entries; ranks index the shrinking pool."""
    eligible = list(eligible)
    count = min(count, len(eligible))
    return [eligible.pop(sampler.draw_rank(len(eligible)))
            for _ in range(count)]


def select_nodes(engine, count, sampler, exceptions=frozenset()):
    """Draw `count` distinct WORKING nodes; ranks index the id-sorted list."""
    return select_from(_working_ids(engine, exceptions), count, sampler)


def _default_sampler(engine, seed=None):
    spec = DistributionSpec("uniform", {"lo": 0.0, "hi": 1.0},
                            engine.model.seed if seed is None else seed)
    return Sampler(spec)


# -- churn plans ------------------------------------------------------------------

@dataclass
class ChurnPlan:
    kind: str
    mode: str = "concurrent"
    ids: list | None = None
    fraction: float | None = None
    distribution: DistributionSpec | None = None

    def validate(self):
        if self.kind not in ("failure", "departure"):
            raise InvalidParams(f"unknown churn kind {self.kind!r}")
        if self.mode not in ("concurrent", "sequential"):
            raise InvalidParams(f"unknown churn mode {self.mode!r}")
        if (self.ids is None) == (self.fraction is None):
            raise InvalidParams("exactly one of ids or fraction must be given")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise InvalidParams("fraction must lie in [0, 1]")
        if self.distribution is not None:
            self.distribution.validate()
        return self


@dataclass(frozen=True)
class FailureReport:
    count: int
    tick: int
    ids: tuple


@dataclass(frozen=True)
class DepartureReport:
    replacement_hops: dict
    not_found: tuple
    tick: int


def _plan_targets(engine, plan, sampler):
    if plan.ids is not None:
        ids = list(plan.ids)
        for nid in ids:
            if not engine.has_peer(nid):
                raise UnknownNode(f"node {nid} is not part of the overlay")
            if engine.peer(nid).state != PeerState.WORKING:
                raise InvalidParams(f"node {nid} is not WORKING")
        return ids
    count = round(plan.fraction * engine.live_count())
    if sampler is None:
        sampler = (Sampler(plan.distribution) if plan.distribution
                   else _default_sampler(engine))
    return select_nodes(engine, count, sampler)


def fail(engine, plan, sampler=None):
    """Set the selected nodes FAILED instantly, with no protocol traffic."""
    plan.validate()
    if plan.kind != "failure":
        raise InvalidParams("fail() requires a failure plan")
    ids = _plan_targets(engine, plan, sampler)
    for nid in ids:
        engine.peer(nid).set_state(PeerState.FAILED)
    return FailureReport(len(ids), engine.now, tuple(ids))


def depart(driver, plan, sampler=None):
    """Run voluntary departures through the overlay driver.

    Sequential mode serializes on each substitution completing; concurrent
    mode initiates every departure within one tick.  The driver reports per
    node via engine.finish_op(op, replacement_hops=..., ok=...); a missing
    or not-ok completion is the substitute-not-found path.
    """
    plan.validate()
    if plan.kind != "departure":
        raise InvalidParams("depart() requires a departure plan")
    engine = driver.engine
    ids = _plan_targets(engine, plan, sampler)
    hops, not_found, ops = {}, [], {}

    def collect():
        for op, info in engine.drain_completions():
            nid = ops.pop(op, None)
            if nid is None:
                continue
            if info.get("ok"):
                hops[nid] = info.get("replacement_hops", 0)
            else:
                not_found.append(nid)

    if plan.mode == "sequential":
        for nid in ids:
            op = driver.new_op()
            ops[op] = nid
            driver.initiate_departure(nid, op)
            engine.run_until_quiescent()
            collect()
    else:
        for nid in ids:
            op = driver.new_op()
            ops[op] = nid
            driver.initiate_departure(nid, op)
        engine.run_until_quiescent()
        collect()
    not_found.extend(ops.values())
    if not_found:
        log.warning("substitute not found for %d departing node(s): %s",
                    len(not_found), sorted(not_found)[:20])
    return DepartureReport(hops, tuple(sorted(not_found)), engine.now)


# -- failure-resistance sweep -------------------------------------------------------

def resistance_experiment(driver, initial_fraction, increment,
                          seed=0, distribution=None):
    """Fail nodes in rounds until the live contact graph splits.

    Fails `initial_fraction` of the starting population, then grows the
    cumulative target by `increment` per round, checking for a partition
    after each.  Returns the realized failed fraction at the first
    partitioned report, or when at most one WORKING node remains.
    """
    if not 0.0 < initial_fraction < 1.0:
        raise InvalidParams("initial_fraction must lie in (0, 1)")
    if increment <= 0.0:
        raise InvalidParams("increment must be positive")
    engine = driver.engine
    n0 = engine.live_count()
    if n0 == 0:
        raise InvalidParams("no WORKING nodes to fail")
    sampler = Sampler(distribution) if distribution else _default_sampler(engine, seed)
    target = initial_fraction
    failed = 0
    while True:
        desired = round(target * n0)
        delta = max(1, desired - failed)
        picked = select_nodes(engine, delta, sampler)
        for nid in picked:
            engine.peer(nid).set_state(PeerState.FAILED)
        failed += len(picked)
        live = _working_ids(engine)
        if len(live) <= 1:
            return failed / n0
        if is_partitioned(live, driver.contacts).partitioned:
            return failed / n0
        target += increment
