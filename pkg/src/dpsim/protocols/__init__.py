"""Overlay protocol contract and the driver base class.

A protocol implementation supplies message handlers (run inside engine
ticks, touching only the receiving peer's state) and an overlay driver
exposing synchronous operations for experiments: build, join, lookup,
insert, delete, range_query, departures, plus contact and routing-table
introspection for the churn and stats layers.

Operations initiate messages at the origin node and complete when a
handler calls engine.finish_op; drivers collect completions after
quiescence, so every op outcome travels through the message plane and the
same code runs under single-process and sharded execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..churn import PeerState
from ..engine import Engine, NetworkModel
from ..errors import InvalidParams, OriginDown, UnknownNode, UnsupportedOperation
from ..stats import MetricRegistry

# names accepted in configs; only the first three are implemented here,
# the rest are reserved for external plug-ins
KNOWN_PROTOCOLS = ("chord", "baton_star", "dummy", "art", "nbdt")


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    fanout: int = 2
    key_bits: int = 32

    def validate(self):
        if self.name not in KNOWN_PROTOCOLS:
            raise InvalidParams(f"unknown protocol {self.name!r}")
        if self.name == "baton_star" and not 2 <= self.fanout <= 10:
            raise InvalidParams("baton_star fanout must lie in [2, 10]")
        if not 1 <= self.key_bits <= 64:
            raise InvalidParams("key_bits must lie in [1, 64]")
        return self

    @property
    def key_space(self):
        return 1 << self.key_bits


@dataclass(frozen=True)
class RoutingTable:
    """Snapshot of one node's maintained entries, unique by neighbor."""

    entries: tuple  # of (slot, neighbor) pairs

    def __len__(self):
        return len(self.entries)

    @staticmethod
    def build(node_id, pairs):
        seen, entries = {node_id}, []
        for slot, neighbor in pairs:
            if neighbor is None or neighbor in seen:
                continue
            seen.add(neighbor)
            entries.append((slot, neighbor))
        return RoutingTable(tuple(entries))


@dataclass(frozen=True)
class JoinReport:
    node: int
    hops: int


@dataclass(frozen=True)
class LookupResult:
    owner: int | None
    hops: int
    path: tuple
    failed: bool
    found: bool = False
    value: object = None


@dataclass(frozen=True)
class MutationResult:
    owner: int | None
    hops: int
    failed: bool
    found: bool = False


@dataclass(frozen=True)
class RangeResult:
    matches: tuple  # of (key, value)
    hops: int
    visited_owners: tuple
    failed: bool = False


_METRIC_OF = {
    "join": "join_hops",
    "lookup": "lookup_hops",
    "insert": "insert_hops",
    "delete": "delete_hops",
    "range": "range_hops",
    "departure": "replacement_hops",
}


class Overlay:
    """Driver base: op lifecycle, metric recording, synchronous wrappers."""

    name = None

    def __init__(self, spec, model=None, metrics=None, log=None):
        self.spec = spec.validate()
        self.engine = Engine(model or NetworkModel(), protocol=self, log=log)
        self.metrics = metrics if metrics is not None else MetricRegistry()
        self.bootstrap_id = None
        self._results = {}
        self._next_op = 0

    # -- op bookkeeping ------------------------------------------------------

    def new_op(self):
        self._next_op += 1
        return self._next_op

    def collect(self):
        """Pull finished ops out of the engine, recording metrics once."""
        for op, info in self.engine.drain_completions():
            self._record(info)
            self._results[op] = info

    def _record(self, info):
        metric = _METRIC_OF.get(info.get("kind"))
        if metric is None or info.get("failed") or info.get("bootstrap"):
            return
        if info.get("kind") == "departure" and not info.get("ok"):
            return
        hops = info.get("replacement_hops" if metric == "replacement_hops" else "hops")
        if hops is not None:
            self.metrics.record(metric, hops)

    def _await(self, op):
        self.engine.run_until_quiescent()
        self.collect()
        return self._results.pop(op)

    def _origin_peer(self, origin):
        if not self.engine.has_peer(origin):
            raise UnknownNode(f"node {origin} is not part of the overlay")
        peer = self.engine.peer(origin)
        if peer.state != PeerState.WORKING:
            raise OriginDown(f"node {origin} is not WORKING")
        return peer

    def _check_key(self, key):
        if not 0 <= key < self.spec.key_space:
            raise InvalidParams(f"key {key} outside [0, 2^{self.spec.key_bits})")

    # -- construction ---------------------------------------------------------

    def default_ids(self, n):
        space = self.spec.key_space
        return [k * space // n for k in range(n)]

    def build(self, n, ids=None):
        ids = list(ids) if ids is not None else self.default_ids(n)
        for i, nid in enumerate(ids):
            self.join(nid)
            self._after_join(i + 1, len(ids))
        self._after_build()
        return ids

    def _after_join(self, joined, total):
        pass

    def _after_build(self):
        pass

    def build_maintenance(self, joined, total):
        """Maintenance pass due after the joined-th of total build joins.

        Returns None or the name of an initiation hook ("stabilize"), so a
        sharded build can run the same passes at the same points without the
        synchronous wrappers.
        """
        return None

    # -- synchronous operation wrappers ----------------------------------------

    def join(self, new_id):
        op = self.new_op()
        self.initiate_join(new_id, op)
        info = self._await(op)
        return JoinReport(new_id, info["hops"])

    def lookup(self, origin, key):
        op = self.new_op()
        self.initiate_lookup(origin, key, op)
        info = self._await(op)
        return LookupResult(info.get("owner"), info["hops"],
                            tuple(info.get("path", ())), info.get("failed", False),
                            info.get("found", False), info.get("value"))

    def insert(self, origin, key, value):
        op = self.new_op()
        self.initiate_insert(origin, key, value, op)
        info = self._await(op)
        return MutationResult(info.get("owner"), info["hops"],
                              info.get("failed", False), True)

    def delete(self, origin, key):
        op = self.new_op()
        self.initiate_delete(origin, key, op)
        info = self._await(op)
        return MutationResult(info.get("owner"), info["hops"],
                              info.get("failed", False), info.get("found", False))

    def range_query(self, origin, lo, hi):
        op = self.new_op()
        self.initiate_range(origin, lo, hi, op)
        info = self._await(op)
        return RangeResult(tuple(info.get("matches", ())), info["hops"],
                           tuple(info.get("visited", ())), info.get("failed", False))

    def depart_sync(self, nid):
        """Run one departure to completion; replacement hops or None."""
        op = self.new_op()
        self.initiate_departure(nid, op)
        info = self._await(op)
        return info.get("replacement_hops") if info.get("ok") else None

    # -- protocol hooks (implementations override) -------------------------------

    def handle(self, engine, peer, msg):
        raise NotImplementedError

    def on_undeliverable(self, engine, msg, disp):
        pass

    def initiate_join(self, new_id, op):
        raise NotImplementedError

    def initiate_lookup(self, origin, key, op):
        raise NotImplementedError

    def initiate_insert(self, origin, key, value, op):
        raise NotImplementedError

    def initiate_delete(self, origin, key, op):
        raise NotImplementedError

    def initiate_range(self, origin, lo, hi, op):
        raise UnsupportedOperation(
            f"{self.name} does not support range queries")

    def initiate_departure(self, nid, op):
        raise NotImplementedError

    def contacts(self, nid):
        """Maintained contact ids; feeds partition detection."""
        raise NotImplementedError

    def routing_table(self, nid):
        """Full table snapshot; feeds the table-length metric."""
        raise NotImplementedError

    def mean_table_length(self):
        peers = [p for p in self.engine.peers() if p.state == PeerState.WORKING]
        if not peers:
            return 0.0
        return sum(len(self.routing_table(p.id)) for p in peers) / len(peers)


def make_overlay(spec, model=None, metrics=None, log=None):
    spec.validate()
    if spec.name == "dummy":
        from .dummy import DummyOverlay as cls
    elif spec.name == "chord":
        from .chord import ChordOverlay as cls
    elif spec.name == "baton_star":
        from .baton import BatonOverlay as cls
    else:
        raise UnsupportedOperation(
            f"protocol {spec.name!r} is reserved for plug-ins")
    return cls(spec, model=model, metrics=metrics, log=log)
