"""Single-directory overlay used to exercise the simulation pipeline.

The first node to join holds a global directory and every key. All
operations route to it in exactly one hop, so hop metrics, the message
log and the op lifecycle can be validated without any real topology.
"""

from __future__ import annotations

from ..engine import Data, MessageKind
from ..errors import InvalidParams
from . import Overlay, RoutingTable


class DummyNode:
    __slots__ = ("id", "store", "members")

    def __init__(self, nid):
        self.id = nid
        self.store = {}
        self.members = []


class DummyOverlay(Overlay):
    name = "dummy"

    # -- initiation -----------------------------------------------------------

    def initiate_join(self, new_id, op):
        if self.bootstrap_id is None:
            peer = self.engine.add_peer(new_id)
            peer.node = DummyNode(new_id)
            peer.node.members.append(new_id)
            self.bootstrap_id = new_id
            self.engine.finish_op(op, kind="join", hops=0, bootstrap=True)
            return
        self.engine.add_peer(new_id)
        self.engine.unicast(MessageKind.JOIN_REQ, new_id, self.bootstrap_id,
                            Data(key=new_id), op)

    def _query(self, kind, origin, key, value, op, op_kind):
        self._origin_peer(origin)
        self._check_key(key)
        self.engine.unicast(kind, origin, self.bootstrap_id,
                            Data(key=key, value=value), op,
                            meta={"op_kind": op_kind})

    def initiate_lookup(self, origin, key, op):
        self._query(MessageKind.SEARCH, origin, key, None, op, "lookup")

    def initiate_insert(self, origin, key, value, op):
        self._query(MessageKind.INSERT, origin, key, value, op, "insert")

    def initiate_delete(self, origin, key, op):
        self._query(MessageKind.DELETE, origin, key, None, op, "delete")

    def initiate_departure(self, nid, op):
        peer = self._origin_peer(nid)
        if nid == self.bootstrap_id:
            raise InvalidParams("directory node cannot depart")
        from ..churn import PeerState
        self.engine.unicast(MessageKind.MAINTENANCE, nid, self.bootstrap_id,
                            Data(key=nid), op, meta={"leave": True})
        peer.set_state(PeerState.VOLUNTARILY_LEFT)
        self.engine.finish_op(op, kind="departure", ok=True, replacement_hops=0)

    # -- handlers ---------------------------------------------------------------

    def handle(self, engine, peer, msg):
        node, kind = peer.node, msg.kind
        if kind == MessageKind.JOIN_REQ:
            node.members.append(msg.data.key)
            engine.unicast(MessageKind.JOIN_RESP, peer.id, msg.data.key,
                           Data(value=msg.hops), msg.op)
        elif kind == MessageKind.JOIN_RESP:
            peer.node = DummyNode(peer.id)
            engine.finish_op(msg.op, kind="join", hops=msg.data.value)
        elif kind == MessageKind.SEARCH:
            key = msg.data.key
            engine.finish_op(msg.op, kind="lookup", owner=peer.id,
                             hops=msg.hops, path=list(msg.path), failed=False,
                             found=key in node.store,
                             value=node.store.get(key))
        elif kind == MessageKind.INSERT:
            node.store[msg.data.key] = msg.data.value
            engine.finish_op(msg.op, kind="insert", owner=peer.id,
                             hops=msg.hops, failed=False)
        elif kind == MessageKind.DELETE:
            found = msg.data.key in node.store
            node.store.pop(msg.data.key, None)
            engine.finish_op(msg.op, kind="delete", owner=peer.id,
                             hops=msg.hops, failed=False, found=found)
        elif kind == MessageKind.MAINTENANCE and msg.meta.get("leave"):
            if msg.data.key in node.members:
                node.members.remove(msg.data.key)

    # -- introspection ------------------------------------------------------------

    def contacts(self, nid):
        if nid == self.bootstrap_id:
            node = self.engine.peer(nid).node
            return tuple(m for m in node.members if m != nid)
        return (self.bootstrap_id,)

    def routing_table(self, nid):
        if not self.engine.has_peer(nid):
            from ..errors import UnknownNode
            raise UnknownNode(f"node {nid} is not part of the overlay")
        return RoutingTable.build(nid, [(i, m) for i, m in
                                        enumerate(self.contacts(nid))])
