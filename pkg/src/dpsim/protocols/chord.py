"""Ring overlay with power-of-two fingers and greedy routing.

Each node keeps a successor, a predecessor and one finger per key bit,
finger i pointing at the first node clockwise from n + 2^i. A node owns
the half-open arc (predecessor, self]. Queries forward to the farthest
finger that precedes the key and finish at the owner; the successor link
is the always-valid fallback, so routing stays correct while fingers lag
behind membership.

Fingers are refreshed by maintenance rounds: the driver broadcasts the
sorted live id array and every node rebuilds its entries locally from it.
Rounds run at a fixed cadence during construction and once at the end, so
a finished build has exact tables.
"""

from __future__ import annotations

from ..churn import PeerState
from ..engine import Data, MessageKind
from ..errors import UnknownNode
from . import Overlay, RoutingTable

RETRIABLE = (MessageKind.SEARCH, MessageKind.INSERT, MessageKind.DELETE,
             MessageKind.JOIN_REQ)


def _in_half(a, x, b, space):
    """x in cyclic interval (a, b]; a == b spans the whole ring."""
    if a == b:
        return True
    return (x - a) % space <= (b - a) % space and x != a


class ChordNode:
    __slots__ = ("id", "succ", "pred", "fingers", "store")

    def __init__(self, nid, bits):
        self.id = nid
        self.succ = nid
        self.pred = nid
        self.fingers = [nid] * bits
        self.store = {}


class ChordOverlay(Overlay):
    name = "chord"

    # -- construction ----------------------------------------------------------

    def initiate_join(self, new_id, op):
        self._check_key(new_id)
        if self.bootstrap_id is None:
            peer = self.engine.add_peer(new_id)
            peer.node = ChordNode(new_id, self.spec.key_bits)
            self.bootstrap_id = new_id
            self.engine.finish_op(op, kind="join", hops=0, bootstrap=True)
            return
        self.engine.add_peer(new_id)
        self.engine.unicast(MessageKind.JOIN_REQ, new_id, self.bootstrap_id,
                            Data(key=new_id), op)

    def build_maintenance(self, joined, total):
        cadence = max(1, total // 64)
        if joined == total or joined % cadence == 0:
            return "stabilize"
        return None

    def _after_join(self, joined, total):
        if joined < total and self.build_maintenance(joined, total):
            self.stabilize()

    def _after_build(self):
        self.stabilize()

    def stabilize(self):
        """Broadcast the live membership so nodes rebuild exact fingers."""
        live = tuple(sorted(p.id for p in self.engine.peers()
                            if p.state == PeerState.WORKING))
        if not live:
            return
        self.initiate_stabilize(live, self.new_op())
        self.engine.run_until_quiescent()
        self.collect()

    def initiate_stabilize(self, live, op):
        """Fan the membership list out from its lowest member."""
        live = tuple(live)
        if self.engine.has_peer(live[0]):
            self.engine.broadcast(live[0], MessageKind.MAINTENANCE,
                                  Data(value=live), targets=live, op=op)

    # -- operation initiation -----------------------------------------------------

    def _initiate_query(self, kind, origin, key, value, op, op_kind):
        peer = self._origin_peer(origin)
        self._check_key(key)
        nd = peer.node
        space = self.spec.key_space
        if _in_half(nd.pred, key, nd.id, space):
            self._complete_at_owner(self.engine, nd, op_kind, key, value,
                                    op, 0, [origin])
            return
        nxt = self._next_hop(nd, key)
        self.engine.unicast(kind, origin, nxt, Data(key=key, value=value),
                            op, meta={"op_kind": op_kind})

    def initiate_lookup(self, origin, key, op):
        self._initiate_query(MessageKind.SEARCH, origin, key, None, op, "lookup")

    def initiate_insert(self, origin, key, value, op):
        self._initiate_query(MessageKind.INSERT, origin, key, value, op, "insert")

    def initiate_delete(self, origin, key, op):
        self._initiate_query(MessageKind.DELETE, origin, key, None, op, "delete")

    def initiate_departure(self, nid, op):
        peer = self._origin_peer(nid)
        nd = peer.node
        if nd.succ != nid:
            self.engine.unicast(MessageKind.MAINTENANCE, nid, nd.pred,
                                Data(key=nd.succ), op, meta={"set_succ": True})
            self.engine.unicast(MessageKind.MAINTENANCE, nid, nd.succ,
                                Data(key=nd.pred, value=dict(nd.store)), op,
                                meta={"set_pred": True})
            nd.store.clear()
        peer.set_state(PeerState.VOLUNTARILY_LEFT)
        if nid == self.bootstrap_id:
            self.bootstrap_id = nd.succ if nd.succ != nid else None
        self.engine.finish_op(op, kind="departure", ok=True, replacement_hops=0)

    # -- routing --------------------------------------------------------------------

    def _next_hop(self, nd, key):
        space = self.spec.key_space
        if _in_half(nd.id, key, nd.succ, space):
            return nd.succ
        best, best_dist = None, -1
        for f in nd.fingers:
            if f != nd.id and _in_half(nd.id, f, key, space):
                dist = (f - nd.id) % space
                if dist > best_dist:
                    best, best_dist = f, dist
        return best if best is not None else nd.succ

    def _complete_at_owner(self, engine, nd, op_kind, key, value, op, hops, path):
        if op_kind == "lookup":
            engine.finish_op(op, kind="lookup", owner=nd.id, hops=hops,
                             path=path, failed=False,
                             found=key in nd.store, value=nd.store.get(key))
        elif op_kind == "insert":
            nd.store[key] = value
            engine.finish_op(op, kind="insert", owner=nd.id, hops=hops,
                             path=path, failed=False)
        else:
            found = key in nd.store
            nd.store.pop(key, None)
            engine.finish_op(op, kind="delete", owner=nd.id, hops=hops,
                             path=path, failed=False, found=found)

    # -- handlers ----------------------------------------------------------------------

    def handle(self, engine, peer, msg):
        kind = msg.kind
        if kind in (MessageKind.SEARCH, MessageKind.INSERT, MessageKind.DELETE):
            self._handle_query(engine, peer, msg)
        elif kind == MessageKind.JOIN_REQ:
            self._handle_join_req(engine, peer, msg)
        elif kind == MessageKind.JOIN_RESP:
            self._handle_join_resp(engine, peer, msg)
        elif kind == MessageKind.QUERYFAILED_RES:
            meta = msg.meta or {}
            engine.finish_op(msg.op, kind=meta.get("op_kind", "lookup"),
                             owner=None, hops=meta.get("q_hops", msg.hops),
                             path=list(msg.path), failed=True)
        elif kind == MessageKind.MAINTENANCE:
            self._handle_maintenance(engine, peer, msg)

    def _handle_query(self, engine, peer, msg):
        nd = peer.node
        key = msg.data.key
        space = self.spec.key_space
        if _in_half(nd.pred, key, nd.id, space):
            self._complete_at_owner(engine, nd, (msg.meta or {})["op_kind"],
                                    key, msg.data.value, msg.op, msg.hops,
                                    list(msg.path))
            return
        msg.receiver = self._next_hop(nd, key)
        engine.send(msg)

    def _handle_join_req(self, engine, peer, msg):
        nd = peer.node
        new_id = msg.data.key
        space = self.spec.key_space
        if not _in_half(nd.pred, new_id, nd.id, space):
            msg.receiver = self._next_hop(nd, new_id)
            engine.send(msg)
            return
        old_pred = nd.pred
        moved = {k: v for k, v in nd.store.items()
                 if _in_half(old_pred, k, new_id, space)}
        for k in moved:
            del nd.store[k]
        if old_pred == nd.id:
            nd.succ = new_id
        else:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, old_pred,
                           Data(key=new_id), msg.op, meta={"set_succ": True})
        nd.pred = new_id
        engine.unicast(MessageKind.JOIN_RESP, nd.id, new_id,
                       Data(key=new_id, value=(msg.hops, old_pred, moved)),
                       msg.op)

    def _handle_join_resp(self, engine, peer, msg):
        hops, old_pred, moved = msg.data.value
        nd = ChordNode(peer.id, self.spec.key_bits)
        nd.succ = msg.sender
        nd.pred = old_pred
        nd.fingers = [nd.succ] * self.spec.key_bits
        nd.store.update(moved)
        peer.node = nd
        engine.finish_op(msg.op, kind="join", hops=hops)

    def _handle_maintenance(self, engine, peer, msg):
        nd = peer.node
        meta = msg.meta
        if meta is None:
            live = msg.data.value
            self._refresh_from(nd, live)
        elif meta.get("set_succ"):
            nd.succ = msg.data.key
        elif meta.get("set_pred"):
            nd.pred = msg.data.key
            if msg.data.value:
                nd.store.update(msg.data.value)

    def _refresh_from(self, nd, live):
        import bisect
        space = self.spec.key_space
        n = len(live)
        idx = bisect.bisect_left(live, nd.id)
        nd.pred = live[idx - 1]
        nd.succ = live[(idx + 1) % n] if live[idx % n] == nd.id else live[idx % n]
        fingers = []
        for i in range(self.spec.key_bits):
            target = (nd.id + (1 << i)) % space
            j = bisect.bisect_left(live, target)
            fingers.append(live[j % n])
        nd.fingers = fingers

    # -- failure recovery ------------------------------------------------------------------

    def on_undeliverable(self, engine, msg, disp):
        if msg.kind == MessageKind.QUERYFAILED_RES:
            meta = msg.meta or {}
            engine.finish_op(msg.op, kind=meta.get("op_kind", "lookup"),
                             owner=None, hops=meta.get("q_hops", msg.hops),
                             path=list(msg.path), failed=True)
            return
        if msg.kind not in RETRIABLE:
            return
        sender = engine.peer(msg.sender)
        if not sender.alive:
            engine.finish_op(msg.op, kind=(msg.meta or {}).get("op_kind", "join"),
                             owner=None, hops=msg.hops, failed=True)
            return
        nd = sender.node
        dead = msg.receiver
        key = msg.data.key
        space = self.spec.key_space
        if msg.avoid is None:
            msg.avoid = set()
        msg.avoid.add(dead)
        if dead == nd.succ and _in_half(nd.id, key, dead, space):
            self._give_up(engine, msg)
            return
        best, best_dist = None, -1
        for f in set(nd.fingers):
            if f != nd.id and f not in msg.avoid and _in_half(nd.id, f, key, space):
                dist = (f - nd.id) % space
                if dist > best_dist:
                    best, best_dist = f, dist
        if best is None and nd.succ not in msg.avoid and nd.succ != nd.id:
            best = nd.succ
        if best is None:
            self._give_up(engine, msg)
            return
        msg.receiver = best
        engine.send(msg)

    def _give_up(self, engine, msg):
        if msg.kind == MessageKind.JOIN_REQ:
            engine.finish_op(msg.op, kind="join", hops=msg.hops, failed=True)
            return
        meta = msg.meta or {}
        engine.unicast(MessageKind.QUERYFAILED_RES, msg.sender, msg.path[0],
                       Data(key=msg.data.key), msg.op,
                       meta={"op_kind": meta.get("op_kind", "lookup"),
                             "q_hops": msg.hops})

    # -- introspection -------------------------------------------------------------------------

    def _node(self, nid):
        if not self.engine.has_peer(nid):
            raise UnknownNode(f"node {nid} is not part of the overlay")
        return self.engine.peer(nid).node

    def contacts(self, nid):
        nd = self._node(nid)
        seen, out = {nid}, []
        for c in [*nd.fingers, nd.succ, nd.pred]:
            if c not in seen:
                seen.add(c)
                out.append(c)
        return tuple(out)

    def routing_table(self, nid):
        nd = self._node(nid)
        bits = self.spec.key_bits
        pairs = [(i, f) for i, f in enumerate(nd.fingers)]
        pairs.append((bits, nd.succ))
        pairs.append((bits + 1, nd.pred))
        return RoutingTable.build(nid, pairs)
