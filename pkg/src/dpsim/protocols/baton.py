"""Balanced fanout-m tree overlay with digit-decomposed sideways tables.

Nodes occupy heap-ordered slots of a complete m-ary tree that fills level
by level; the root assigns slots and reuses the ones freed by departures.
Key ownership follows the in-order traversal (left half of the children
before the node, right half after), every node holding one contiguous
half-open range. A joining node takes the left half of its in-order
successor's range, or the right half of its predecessor's when it joins
as the global rightmost.

Each node links to its parent, children, both in-order adjacents and two
sideways tables holding the same-level nodes at distances c * m^j for
c in [1, m); a horizontal jump therefore resolves one base-m digit of the
remaining distance per hop. All links cache the partner's key range and
every range change fans out to the link partners, so a quiescent tree
routes greedily without overshooting: going left, pick the candidate with
the smallest upper bound still above the key; going right, the largest
lower bound not beyond it. The in-order adjacents make the candidate set
non-empty, and range scans walk right-adjacent links from the owner of
the lower bound.

A departing leaf merges its range into an adjacent, notifies its link
partners and returns its slot to the root. An internal departure asks the
root for the occupant of the highest slot; that leaf extracts itself as a
substitute (passing through the candidate state), then adopts the
departing node's entire position via a single replacement response while
the link partners are rebound to the new id.
"""

from __future__ import annotations

from array import array

from ..churn import PeerState
from ..engine import Data, MessageKind
from ..errors import InvalidParams, UnknownNode
from . import Overlay, RoutingTable

_QUERY = (MessageKind.SEARCH, MessageKind.INSERT, MessageKind.DELETE,
          MessageKind.RANGE)


def _level_pos(slot, m):
    base, width, level = 0, 1, 0
    while slot >= base + width:
        base += width
        width *= m
        level += 1
    return level, slot - base, base, width


def _tbl_set(tbl, d, nid, lo, hi):
    for k in range(0, len(tbl), 4):
        if tbl[k] == d:
            tbl[k + 1], tbl[k + 2], tbl[k + 3] = nid, lo, hi
            return
    tbl.extend((d, nid, lo, hi))


def _tbl_drop_id(tbl, nid):
    for k in range(len(tbl) - 4, -1, -4):
        if tbl[k + 1] == nid:
            del tbl[k:k + 4]


def _tbl_update_id(tbl, nid, lo, hi):
    for k in range(0, len(tbl), 4):
        if tbl[k + 1] == nid:
            tbl[k + 2], tbl[k + 3] = lo, hi


def _tbl_rebind(tbl, old, new, lo, hi):
    for k in range(0, len(tbl), 4):
        if tbl[k + 1] == old:
            tbl[k + 1], tbl[k + 2], tbl[k + 3] = new, lo, hi


class BatonNode:
    __slots__ = ("id", "slot", "level", "pos", "lo", "hi",
                 "parent", "plo", "phi",
                 "kid_ids", "kid_lo", "kid_hi",
                 "ladj", "ladj_lo", "ladj_hi",
                 "radj", "radj_lo", "radj_hi",
                 "ltab", "rtab", "store", "next_slot", "free_slots")

    def __init__(self, nid, slot, level, pos, lo, hi):
        self.id = nid
        self.slot = slot
        self.level = level
        self.pos = pos
        self.lo = lo
        self.hi = hi
        self.parent = -1
        self.plo = self.phi = 0
        self.kid_ids = None
        self.kid_lo = None
        self.kid_hi = None
        self.ladj = -1
        self.ladj_lo = self.ladj_hi = 0
        self.radj = -1
        self.radj_lo = self.radj_hi = 0
        self.ltab = array("q")
        self.rtab = array("q")
        self.store = {}
        self.next_slot = 0
        self.free_slots = None

    def kids(self):
        if self.kid_ids is None:
            return []
        return [k for k in self.kid_ids if k != -1]

    def table_pairs(self, side):
        tbl = self.ltab if side == "left" else self.rtab
        return [(tbl[k], tbl[k + 1]) for k in range(0, len(tbl), 4)]

    def link_candidates(self):
        if self.parent != -1:
            yield (self.parent, self.plo, self.phi)
        if self.kid_ids is not None:
            for k, x in enumerate(self.kid_ids):
                if x != -1:
                    yield (x, self.kid_lo[k], self.kid_hi[k])
        if self.ladj != -1:
            yield (self.ladj, self.ladj_lo, self.ladj_hi)
        if self.radj != -1:
            yield (self.radj, self.radj_lo, self.radj_hi)
        for tbl in (self.ltab, self.rtab):
            for k in range(0, len(tbl), 4):
                yield (tbl[k + 1], tbl[k + 2], tbl[k + 3])


class BatonOverlay(Overlay):
    name = "baton_star"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._dist_cache = {}

    # -- geometry helpers ---------------------------------------------------

    @property
    def m(self):
        return self.spec.fanout

    @property
    def left_block(self):
        return (self.m + 1) // 2

    def _distances(self, width):
        dists = self._dist_cache.get(width)
        if dists is None:
            out, step = set(), 1
            while step < width:
                out.update(c * step for c in range(1, self.m))
                step *= self.m
            dists = self._dist_cache[width] = sorted(d for d in out if d < width)
        return dists

    def height(self):
        return max((p.node.level for p in self.engine.peers()
                    if p.state == PeerState.WORKING and p.node is not None),
                   default=0)

    # -- joins ----------------------------------------------------------------

    def initiate_join(self, new_id, op):
        if self.bootstrap_id is None:
            peer = self.engine.add_peer(new_id)
            nd = BatonNode(new_id, 0, 0, 0, 0, self.spec.key_space)
            nd.next_slot = 1
            nd.free_slots = set()
            peer.node = nd
            self.bootstrap_id = new_id
            self.engine.finish_op(op, kind="join", hops=0, bootstrap=True)
            return
        self.engine.add_peer(new_id)
        self.engine.unicast(MessageKind.JOIN_REQ, new_id, self.bootstrap_id,
                            Data(key=new_id), op, meta={"phase": "assign"})

    def _hop_toward_slot(self, nd, target_slot):
        # -1 when the pointer is gone: the occupant departed concurrently
        t = target_slot
        while (t - 1) // self.m != nd.slot:
            t = (t - 1) // self.m
        if nd.kid_ids is None:
            return -1
        return nd.kid_ids[t - self.m * nd.slot - 1]

    def _handle_join_req(self, engine, peer, msg):
        nd = peer.node
        meta = msg.meta
        if meta["phase"] == "assign":
            if nd.free_slots:
                slot = min(nd.free_slots)
                nd.free_slots.discard(slot)
                fresh = False
            else:
                slot = nd.next_slot
                nd.next_slot += 1
                fresh = True
            msg.meta = {"phase": "descend", "slot": slot, "fresh": fresh}
            meta = msg.meta
        slot = meta["slot"]
        parent_slot = (slot - 1) // self.m
        if parent_slot == nd.slot:
            self._attach(engine, peer, msg, slot, meta["fresh"])
            return
        nxt = self._hop_toward_slot(nd, parent_slot)
        if nxt == -1:
            engine.finish_op(msg.op, kind="join", hops=msg.hops, failed=True)
            return
        msg.receiver = nxt
        engine.send(msg)

    def _attach(self, engine, parent_peer, msg, slot, fresh):
        pn = parent_peer.node
        m, j = self.m, self.left_block
        new_id = msg.data.key
        i = slot - m * pn.slot
        level, pos, _, _ = _level_pos(slot, m)
        if pn.kid_ids is None:
            pn.kid_ids = [-1] * m
            pn.kid_lo = [0] * m
            pn.kid_hi = [0] * m
        pn.kid_ids[i - 1] = new_id
        pn.kid_lo[i - 1] = pn.kid_hi[i - 1] = 0

        if i == 1:
            pred, pred_range = pn.ladj, (pn.ladj_lo, pn.ladj_hi)
            succ = pn.id
        elif i <= j:
            pred = pn.kid_ids[i - 2]
            pred_range = (pn.kid_lo[i - 2], pn.kid_hi[i - 2])
            succ = pn.id
        elif i == j + 1:
            pred, pred_range = pn.id, (pn.lo, pn.hi)
            succ = pn.radj
        else:
            pred = pn.kid_ids[i - 2]
            pred_range = (pn.kid_lo[i - 2], pn.kid_hi[i - 2])
            succ = None

        req = {"new": new_id, "slot": slot, "level": level, "pos": pos,
               "parent": pn.id, "parent_range": (pn.lo, pn.hi),
               "pred": pred, "pred_range": pred_range,
               "hops": msg.hops, "fresh": fresh,
               "seed": {"kids": list(pn.kid_ids),
                        "ltab": pn.table_pairs("left"),
                        "rtab": pn.table_pairs("right")}}
        if succ == pn.id:
            self._do_split(engine, parent_peer, req, "left", msg.op)
        elif succ is None:
            engine.unicast(MessageKind.MAINTENANCE, pn.id, pred,
                           Data(value=req), msg.op,
                           meta={"phase": "split_resolve"})
        elif succ != -1:
            engine.unicast(MessageKind.MAINTENANCE, pn.id, succ,
                           Data(value=req), msg.op, meta={"phase": "split"})
        else:
            self._do_split(engine, parent_peer, req, "right", msg.op)

    def _do_split(self, engine, splitter_peer, req, taker, op):
        # deep trees can halve a boundary node's span down to nothing;
        # an empty span owns no keys but keeps its in-order position
        sn = splitter_peer.node
        mid = (sn.lo + sn.hi) // 2
        if taker == "left":
            v_lo, v_hi = sn.lo, mid
            sn.lo = mid
        else:
            v_lo, v_hi = mid, sn.hi
            sn.hi = mid
        moved = {k: v for k, v in sn.store.items() if v_lo <= k < v_hi}
        for k in moved:
            del sn.store[k]

        new_id = req["new"]
        if taker == "left":
            pred, succ = req["pred"], sn.id
            pred_range, succ_range = req["pred_range"], (sn.lo, sn.hi)
            sn.ladj, sn.ladj_lo, sn.ladj_hi = new_id, v_lo, v_hi
            if pred != -1:
                engine.unicast(MessageKind.MAINTENANCE, sn.id, pred,
                               Data(value=(new_id, v_lo, v_hi)), op,
                               meta={"phase": "set_radj"})
        else:
            pred, succ = sn.id, -1
            pred_range, succ_range = (sn.lo, sn.hi), (0, 0)
            sn.radj, sn.radj_lo, sn.radj_hi = new_id, v_lo, v_hi

        parent_range = ((sn.lo, sn.hi) if sn.id == req["parent"]
                        else req["parent_range"])
        self._fanout_range(engine, splitter_peer, op)
        payload = {"slot": req["slot"], "level": req["level"],
                   "pos": req["pos"], "parent": req["parent"],
                   "parent_range": parent_range, "lo": v_lo, "hi": v_hi,
                   "pred": pred, "pred_range": pred_range,
                   "succ": succ, "succ_range": succ_range,
                   "moved": moved, "hops": req["hops"],
                   "fresh": req["fresh"], "seed": req["seed"]}
        engine.unicast(MessageKind.JOIN_RESP, sn.id, new_id,
                       Data(value=payload), op)

    def _handle_join_resp(self, engine, peer, msg):
        p = msg.data.value
        nd = BatonNode(peer.id, p["slot"], p["level"], p["pos"],
                       p["lo"], p["hi"])
        nd.parent = p["parent"]
        nd.plo, nd.phi = p["parent_range"]
        nd.ladj = p["pred"]
        nd.ladj_lo, nd.ladj_hi = p["pred_range"]
        nd.radj = p["succ"]
        nd.radj_lo, nd.radj_hi = p["succ_range"]
        nd.store.update(p["moved"])
        peer.node = nd
        engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.parent,
                       Data(value=(nd.slot, nd.lo, nd.hi)), msg.op,
                       meta={"phase": "child_range"})
        self._fill_tables(engine, peer, p["seed"], p["fresh"], msg.op)
        engine.finish_op(msg.op, kind="join", hops=p["hops"])

    def _fill_tables(self, engine, peer, seed, fresh, op):
        nd = peer.node
        m = self.m
        width = m ** nd.level
        i = nd.pos % m + 1
        seed_kids = seed["kids"]
        seed_tab = {"left": dict(seed["ltab"]), "right": dict(seed["rtab"])}
        hello = {"d": 0, "tside": "", "olo": nd.lo, "ohi": nd.hi}
        for side, sign in (("left", -1), ("right", 1)):
            if fresh and side == "right":
                continue
            for d in self._distances(width):
                target = nd.pos + sign * d
                if not 0 <= target < width:
                    continue
                meta = dict(hello)
                meta["d"] = d
                meta["tside"] = "right" if side == "left" else "left"
                if d < m and 1 <= i + sign * d <= m:
                    sib = seed_kids[i + sign * d - 1]
                    if sib != -1:
                        meta["phase"] = "tbl_hello"
                        engine.unicast(MessageKind.MAINTENANCE, nd.id, sib,
                                       Data(), op, meta=meta)
                    continue
                if d < m:
                    carrier_d, kid_idx = 1, i + sign * d - sign * m
                else:
                    carrier_d, kid_idx = d // m, i
                carrier = seed_tab[side].get(carrier_d, -1)
                if carrier == -1:
                    continue
                meta["phase"] = "tbl_probe"
                meta["kid"] = kid_idx
                engine.unicast(MessageKind.MAINTENANCE, nd.id, carrier,
                               Data(), op, meta=meta)

    # -- maintenance dispatch ---------------------------------------------------

    def _handle_maintenance(self, engine, peer, msg):
        nd = peer.node
        meta = msg.meta
        phase = meta["phase"]
        if phase == "split":
            self._do_split(engine, peer, msg.data.value, "left", msg.op)
        elif phase == "split_resolve":
            req = msg.data.value
            req["pred"] = nd.id
            req["pred_range"] = (nd.lo, nd.hi)
            if nd.radj != -1:
                engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.radj,
                               Data(value=req), msg.op, meta={"phase": "split"})
            else:
                self._do_split(engine, peer, req, "right", msg.op)
        elif phase == "set_radj":
            nd.radj, nd.radj_lo, nd.radj_hi = msg.data.value
        elif phase == "set_ladj":
            nd.ladj, nd.ladj_lo, nd.ladj_hi = msg.data.value
        elif phase == "child_range":
            slot, lo, hi = msg.data.value
            idx = slot - self.m * nd.slot - 1
            if nd.kid_ids is not None and nd.kid_ids[idx] == msg.sender:
                nd.kid_lo[idx], nd.kid_hi[idx] = lo, hi
        elif phase == "range_update":
            self._apply_range_update(nd, msg.sender, meta["lo"], meta["hi"])
        elif phase == "tbl_probe":
            kid = (nd.kid_ids or [-1] * self.m)[meta["kid"] - 1]
            if kid != -1:
                fwd = dict(meta)
                fwd["phase"] = "tbl_hello"
                fwd["origin"] = msg.sender
                engine.unicast(MessageKind.MAINTENANCE, nd.id, kid,
                               Data(), msg.op, meta=fwd)
        elif phase == "tbl_hello":
            origin = meta.get("origin", msg.sender)
            tbl = nd.rtab if meta["tside"] == "right" else nd.ltab
            _tbl_set(tbl, meta["d"], origin, meta["olo"], meta["ohi"])
            engine.unicast(MessageKind.MAINTENANCE, nd.id, origin,
                           Data(), msg.op,
                           meta={"phase": "tbl_reply", "d": meta["d"],
                                 "tside": ("left" if meta["tside"] == "right"
                                           else "right"),
                                 "olo": nd.lo, "ohi": nd.hi})
        elif phase == "tbl_reply":
            tbl = nd.rtab if meta["tside"] == "right" else nd.ltab
            _tbl_set(tbl, meta["d"], msg.sender, meta["olo"], meta["ohi"])
        elif phase == "absorb":
            if meta["side"] == "left":
                nd.hi = meta["hi"]
            else:
                nd.lo = meta["lo"]
            nd.store.update(msg.data.value)
            self._fanout_range(engine, peer, msg.op)
        elif phase == "drop_kid":
            idx = meta["slot"] - self.m * nd.slot - 1
            if nd.kid_ids is not None:
                nd.kid_ids[idx] = -1
                nd.kid_lo[idx] = nd.kid_hi[idx] = 0
        elif phase == "drop_entry":
            _tbl_drop_id(nd.ltab, msg.sender)
            _tbl_drop_id(nd.rtab, msg.sender)
        elif phase == "free_slot":
            if nd.slot != 0:
                engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.parent,
                               Data(), msg.op, meta=meta)
                return
            self._free_slot(nd, meta["slot"])
        elif phase == "takeover":
            self._handle_takeover(engine, peer, msg)
        elif phase == "rebind":
            self._apply_rebind(nd, meta["old"], meta["new"],
                               meta["lo"], meta["hi"])

    @staticmethod
    def _free_slot(root, slot):
        root.free_slots.add(slot)
        while root.next_slot - 1 in root.free_slots:
            root.free_slots.discard(root.next_slot - 1)
            root.next_slot -= 1

    def _apply_range_update(self, nd, sid, lo, hi):
        if nd.parent == sid:
            nd.plo, nd.phi = lo, hi
        if nd.kid_ids is not None:
            for k, x in enumerate(nd.kid_ids):
                if x == sid:
                    nd.kid_lo[k], nd.kid_hi[k] = lo, hi
        if nd.ladj == sid:
            nd.ladj_lo, nd.ladj_hi = lo, hi
        if nd.radj == sid:
            nd.radj_lo, nd.radj_hi = lo, hi
        _tbl_update_id(nd.ltab, sid, lo, hi)
        _tbl_update_id(nd.rtab, sid, lo, hi)

    def _apply_rebind(self, nd, old, new, lo, hi):
        if nd.parent == old:
            nd.parent, nd.plo, nd.phi = new, lo, hi
        if nd.kid_ids is not None:
            for k, x in enumerate(nd.kid_ids):
                if x == old:
                    nd.kid_ids[k] = new
                    nd.kid_lo[k], nd.kid_hi[k] = lo, hi
        if nd.ladj == old:
            nd.ladj, nd.ladj_lo, nd.ladj_hi = new, lo, hi
        if nd.radj == old:
            nd.radj, nd.radj_lo, nd.radj_hi = new, lo, hi
        _tbl_rebind(nd.ltab, old, new, lo, hi)
        _tbl_rebind(nd.rtab, old, new, lo, hi)

    def _fanout_range(self, engine, peer, op):
        nd = peer.node
        meta = {"phase": "range_update", "lo": nd.lo, "hi": nd.hi}
        for pid in self._partner_ids(nd):
            engine.unicast(MessageKind.MAINTENANCE, nd.id, pid, Data(),
                           op, meta=meta)

    def _partner_ids(self, nd):
        out, seen = [], {nd.id}
        def push(x):
            if x != -1 and x not in seen:
                seen.add(x)
                out.append(x)
        push(nd.parent)
        for k in nd.kids():
            push(k)
        push(nd.ladj)
        push(nd.radj)
        for tbl in (nd.ltab, nd.rtab):
            for k in range(0, len(tbl), 4):
                push(tbl[k + 1])
        return out

    # -- routing -------------------------------------------------------------------

    def _table_stops_short(self, nd, sign):
        # a nominal sideways distance past the table's last entry that still
        # lands inside the level means the slot over there is simply empty
        tbl = nd.rtab if sign > 0 else nd.ltab
        d_last = 0
        for k in range(0, len(tbl), 4):
            if tbl[k] > d_last:
                d_last = tbl[k]
        width = self.m ** nd.level
        for d in self._distances(width):
            if d > d_last and 0 <= nd.pos + sign * d < width:
                return True
        return False

    def _route_next(self, nd, key, avoid):
        """Pick the next hop for key; returns (node id or None, ascended).

        Normal hops strictly lower lo (leftward) or raise hi (rightward),
        so empty spans pass the query through and unknown (0, 0) child
        caches never qualify. When the key lies beyond every known link on
        a side whose sideways table stops short of the level edge, the
        query climbs to the parent instead of crawling along the growth
        frontier; callers must record ascended-from nodes in the message's
        avoid set so the walk cannot revisit them.
        """
        if key < nd.lo:
            best = None
            beyond = True
            for cid, clo, chi in nd.link_candidates():
                if cid in avoid:
                    continue
                if clo <= key:
                    beyond = False
                if chi > key and clo < nd.lo:
                    if best is None or chi < best[0] or (chi == best[0]
                                                         and cid < best[1]):
                        best = (chi, cid)
            if (beyond and nd.parent != -1 and nd.parent not in avoid
                    and self._table_stops_short(nd, -1)):
                return nd.parent, True
            return (best[1] if best else None), False
        best = None
        beyond = True
        for cid, clo, chi in nd.link_candidates():
            if cid in avoid:
                continue
            if chi > key:
                beyond = False
            if clo <= key and chi > nd.hi:
                if best is None or clo > best[0] or (clo == best[0]
                                                     and cid < best[1]):
                    best = (clo, cid)
        if (beyond and nd.parent != -1 and nd.parent not in avoid
                and self._table_stops_short(nd, 1)):
            return nd.parent, True
        return (best[1] if best else None), False

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

    def _initiate_query(self, kind, origin, key, value, op, op_kind):
        peer = self._origin_peer(origin)
        self._check_key(key)
        nd = peer.node
        if nd.lo <= key < nd.hi:
            self._complete_at_owner(self.engine, nd, op_kind, key, value,
                                    op, 0, [origin])
            return
        nxt, up = self._route_next(nd, key, ())
        msg = self.engine.new_message(kind, origin, Data(key=key, value=value),
                                      op, {"op_kind": op_kind})
        msg.receiver = nxt
        if up:
            msg.avoid = {origin}
        self.engine.send(msg)

    def initiate_lookup(self, origin, key, op):
        self._initiate_query(MessageKind.SEARCH, origin, key, None, op, "lookup")

    def initiate_insert(self, origin, key, value, op):
        self._initiate_query(MessageKind.INSERT, origin, key, value, op, "insert")

    def initiate_delete(self, origin, key, op):
        self._initiate_query(MessageKind.DELETE, origin, key, None, op, "delete")

    def _handle_query(self, engine, peer, msg):
        nd = peer.node
        key = msg.data.key
        if nd.lo <= key < nd.hi:
            self._complete_at_owner(engine, nd, msg.meta["op_kind"], key,
                                    msg.data.value, msg.op, msg.hops,
                                    list(msg.path))
            return
        nxt, up = self._route_next(nd, key, msg.avoid or ())
        if nxt is None:
            self._give_up(engine, msg, peer.id)
            return
        if up:
            if msg.avoid is None:
                msg.avoid = set()
            msg.avoid.add(peer.id)
        msg.receiver = nxt
        engine.send(msg)

    # -- range scans -------------------------------------------------------------------

    def initiate_range(self, origin, lo, hi, op):
        peer = self._origin_peer(origin)
        self._check_key(lo)
        self._check_key(hi)
        if lo > hi:
            raise InvalidParams("range lower bound exceeds upper bound")
        nd = peer.node
        if nd.lo <= lo < nd.hi:
            matches = [(k, nd.store[k]) for k in sorted(nd.store)
                       if lo <= k <= hi]
            if hi < nd.hi or nd.radj == -1:
                self.engine.finish_op(op, kind="range", matches=matches,
                                      hops=0, visited=[origin], failed=False)
                return
            self.engine.unicast(MessageKind.RANGE, origin, nd.radj,
                                Data(lo=lo, hi=hi, value=matches), op,
                                meta={"op_kind": "range", "walk": True,
                                      "visited": [origin]})
            return
        nxt, up = self._route_next(nd, lo, ())
        msg = self.engine.new_message(MessageKind.RANGE, origin,
                                      Data(lo=lo, hi=hi, value=[]), op,
                                      {"op_kind": "range", "walk": False,
                                       "visited": []})
        msg.receiver = nxt
        if up:
            msg.avoid = {origin}
        self.engine.send(msg)

    def _handle_range(self, engine, peer, msg):
        nd = peer.node
        meta = msg.meta
        lo, hi = msg.data.lo, msg.data.hi
        if not meta["walk"]:
            if not nd.lo <= lo < nd.hi:
                nxt, up = self._route_next(nd, lo, msg.avoid or ())
                if nxt is None:
                    self._give_up(engine, msg, peer.id)
                    return
                if up:
                    if msg.avoid is None:
                        msg.avoid = set()
                    msg.avoid.add(peer.id)
                msg.receiver = nxt
                engine.send(msg)
                return
            meta["walk"] = True
        meta["visited"].append(peer.id)
        for k in sorted(nd.store):
            if lo <= k <= hi:
                msg.data.value.append((k, nd.store[k]))
        if hi >= nd.hi and nd.radj != -1:
            msg.receiver = nd.radj
            engine.send(msg)
            return
        engine.finish_op(msg.op, kind="range", matches=list(msg.data.value),
                         hops=msg.hops, visited=list(meta["visited"]),
                         failed=False)

    # -- departures ------------------------------------------------------------------------

    def initiate_departure(self, nid, op):
        peer = self._origin_peer(nid)
        nd = peer.node
        if nd.slot == 0 and not nd.kids():
            peer.set_state(PeerState.VOLUNTARILY_LEFT)
            self.bootstrap_id = None
            self.engine.finish_op(op, kind="departure", ok=True,
                                  replacement_hops=0)
            return
        if not nd.kids():
            self._leaf_extract(self.engine, peer, op)
            peer.set_state(PeerState.VOLUNTARILY_LEFT)
            self.engine.finish_op(op, kind="departure", ok=True,
                                  replacement_hops=0)
            return
        if nd.slot == 0:
            self._pick_substitute(self.engine, peer, nid, op, 0)
            return
        self.engine.unicast(MessageKind.REPLACEMENT_REQ, nid, nd.parent,
                            Data(key=nid), op,
                            meta={"phase": "find_sub", "victim": nid})

    def _leaf_extract(self, engine, peer, op, free=True):
        nd = peer.node
        if nd.ladj != -1:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.ladj,
                           Data(value=dict(nd.store)), op,
                           meta={"phase": "absorb", "side": "left",
                                 "lo": nd.lo, "hi": nd.hi})
        else:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.radj,
                           Data(value=dict(nd.store)), op,
                           meta={"phase": "absorb", "side": "right",
                                 "lo": nd.lo, "hi": nd.hi})
        if nd.ladj != -1:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.ladj,
                           Data(value=(nd.radj, nd.radj_lo, nd.radj_hi)),
                           op, meta={"phase": "set_radj"})
        if nd.radj != -1:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.radj,
                           Data(value=(nd.ladj, nd.ladj_lo, nd.ladj_hi)),
                           op, meta={"phase": "set_ladj"})
        engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.parent, Data(),
                       op, meta={"phase": "drop_kid", "slot": nd.slot})
        for tbl in (nd.ltab, nd.rtab):
            for k in range(0, len(tbl), 4):
                engine.unicast(MessageKind.MAINTENANCE, nd.id, tbl[k + 1],
                               Data(), op, meta={"phase": "drop_entry"})
        if free:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.parent, Data(),
                           op, meta={"phase": "free_slot", "slot": nd.slot})

    def _handle_replacement_req(self, engine, peer, msg):
        nd = peer.node
        meta = msg.meta
        if meta["phase"] == "find_sub":
            if nd.slot != 0:
                msg.receiver = nd.parent
                engine.send(msg)
                return
            self._pick_substitute(engine, peer, meta["victim"], msg.op,
                                  msg.hops, msg)
            return
        if nd.slot == meta["target_slot"]:
            if peer.state != PeerState.WORKING:
                # a concurrent substitution already consumed this leaf
                engine.finish_op(msg.op, kind="departure", ok=False)
                return
            self._begin_substitution(engine, peer, msg)
            return
        nxt = self._hop_toward_slot(nd, meta["target_slot"])
        if nxt == -1:
            engine.finish_op(msg.op, kind="departure", ok=False)
            return
        msg.receiver = nxt
        engine.send(msg)

    def _pick_substitute(self, engine, root_peer, victim, op, hops, msg=None):
        root = root_peer.node
        target = root.next_slot - 1
        nxt = self._hop_toward_slot(root, target)
        if nxt == -1:
            engine.finish_op(op, kind="departure", ok=False)
            return
        meta = {"phase": "fetch_sub", "victim": victim, "target_slot": target}
        if msg is not None:
            msg.meta = meta
            msg.receiver = nxt
            engine.send(msg)
            return
        engine.unicast(MessageKind.REPLACEMENT_REQ, root.id, nxt,
                       Data(key=victim), op, meta=meta)

    def _begin_substitution(self, engine, peer, msg):
        # the freed slot travels with the takeover: a relay through the
        # victim would be lost once the victim departs
        freed = peer.node.slot
        peer.set_state(PeerState.CANDIDATE_SUBSTITUTE)
        self._leaf_extract(engine, peer, msg.op, free=False)
        engine.unicast(MessageKind.MAINTENANCE, peer.id, msg.meta["victim"],
                       Data(), msg.op,
                       meta={"phase": "takeover", "req_hops": msg.hops,
                             "freed_slot": freed})

    def _handle_takeover(self, engine, peer, msg):
        nd = peer.node
        sub = msg.sender
        snapshot = {"slot": nd.slot, "level": nd.level, "pos": nd.pos,
                    "lo": nd.lo, "hi": nd.hi,
                    "parent": nd.parent, "parent_range": (nd.plo, nd.phi),
                    "kids": (list(nd.kid_ids) if nd.kid_ids else None),
                    "kid_lo": (list(nd.kid_lo) if nd.kid_ids else None),
                    "kid_hi": (list(nd.kid_hi) if nd.kid_ids else None),
                    "ladj": (nd.ladj, nd.ladj_lo, nd.ladj_hi),
                    "radj": (nd.radj, nd.radj_lo, nd.radj_hi),
                    "ltab": list(nd.ltab), "rtab": list(nd.rtab),
                    "store": dict(nd.store),
                    "next_slot": nd.next_slot,
                    "free_slots": (sorted(nd.free_slots)
                                   if nd.free_slots is not None else None),
                    "req_hops": msg.meta["req_hops"],
                    "freed_slot": msg.meta["freed_slot"]}
        engine.unicast(MessageKind.REPLACEMENT_RESP, nd.id, sub,
                       Data(value=snapshot), msg.op)
        rebind = {"phase": "rebind", "old": nd.id, "new": sub,
                  "lo": nd.lo, "hi": nd.hi}
        for pid in self._partner_ids(nd):
            engine.unicast(MessageKind.MAINTENANCE, nd.id, pid, Data(),
                           msg.op, meta=rebind)
        peer.set_state(PeerState.VOLUNTARILY_LEFT)

    def _handle_replacement_resp(self, engine, peer, msg):
        p = msg.data.value
        nd = BatonNode(peer.id, p["slot"], p["level"], p["pos"],
                       p["lo"], p["hi"])
        nd.parent = p["parent"]
        nd.plo, nd.phi = p["parent_range"]
        nd.kid_ids = p["kids"]
        nd.kid_lo = p["kid_lo"]
        nd.kid_hi = p["kid_hi"]
        nd.ladj, nd.ladj_lo, nd.ladj_hi = p["ladj"]
        nd.radj, nd.radj_lo, nd.radj_hi = p["radj"]
        nd.ltab = array("q", p["ltab"])
        nd.rtab = array("q", p["rtab"])
        nd.store = dict(p["store"])
        nd.next_slot = p["next_slot"]
        nd.free_slots = (set(p["free_slots"])
                         if p["free_slots"] is not None else None)
        peer.node = nd
        peer.set_state(PeerState.WORKING)
        if nd.slot == 0:
            self.bootstrap_id = peer.id
            self._free_slot(nd, p["freed_slot"])
        else:
            engine.unicast(MessageKind.MAINTENANCE, nd.id, nd.parent, Data(),
                           msg.op, meta={"phase": "free_slot",
                                         "slot": p["freed_slot"]})
        engine.finish_op(msg.op, kind="departure", ok=True,
                         replacement_hops=p["req_hops"])

    # -- failure recovery ----------------------------------------------------------------------

    def on_undeliverable(self, engine, msg, disp):
        kind = msg.kind
        if kind == MessageKind.QUERYFAILED_RES:
            meta = msg.meta or {}
            engine.finish_op(msg.op, kind=meta.get("op_kind", "lookup"),
                             owner=None, hops=meta.get("q_hops", msg.hops),
                             path=list(msg.path), failed=True)
            return
        if kind == MessageKind.REPLACEMENT_REQ or kind == MessageKind.REPLACEMENT_RESP:
            engine.finish_op(msg.op, kind="departure", ok=False)
            return
        if kind == MessageKind.MAINTENANCE:
            phase = (msg.meta or {}).get("phase")
            if phase == "takeover":
                engine.finish_op(msg.op, kind="departure", ok=False)
            elif phase in ("split", "split_resolve"):
                engine.finish_op(msg.op, kind="join", hops=msg.hops,
                                 failed=True)
            return
        if kind == MessageKind.JOIN_REQ or kind == MessageKind.JOIN_RESP:
            engine.finish_op(msg.op, kind="join", hops=msg.hops, failed=True)
            return
        if kind not in _QUERY:
            return
        sender = engine.peer(msg.sender)
        if not sender.alive:
            engine.finish_op(msg.op, kind=(msg.meta or {}).get("op_kind", "lookup"),
                             owner=None, hops=msg.hops, failed=True)
            return
        nd = sender.node
        if msg.avoid is None:
            msg.avoid = set()
        msg.avoid.add(msg.receiver)
        key = msg.data.key if kind != MessageKind.RANGE else msg.data.lo
        for cid, clo, chi in nd.link_candidates():
            if cid == msg.receiver and clo <= key < chi:
                self._give_up(engine, msg, msg.sender)
                return
        if kind == MessageKind.RANGE and msg.meta.get("walk"):
            self._give_up(engine, msg, msg.sender)
            return
        nxt, up = self._route_next(nd, key, msg.avoid)
        if nxt is None:
            self._give_up(engine, msg, msg.sender)
            return
        if up:
            msg.avoid.add(nd.id)
        msg.receiver = nxt
        engine.send(msg)

    def _give_up(self, engine, msg, reporter):
        meta = msg.meta or {}
        engine.unicast(MessageKind.QUERYFAILED_RES, reporter, msg.path[0],
                       Data(key=msg.data.key), msg.op,
                       meta={"op_kind": meta.get("op_kind", "lookup"),
                             "q_hops": msg.hops})

    # -- dispatch --------------------------------------------------------------------------------

    def handle(self, engine, peer, msg):
        kind = msg.kind
        if peer.node is None and kind != MessageKind.JOIN_RESP:
            # a splitter's range fanout can reach the joining node ahead of
            # its join response; the response carries the fresh value anyway
            return
        if kind in (MessageKind.SEARCH, MessageKind.INSERT, MessageKind.DELETE):
            self._handle_query(engine, peer, msg)
        elif kind == MessageKind.RANGE:
            self._handle_range(engine, peer, msg)
        elif kind == MessageKind.MAINTENANCE:
            self._handle_maintenance(engine, peer, msg)
        elif kind == MessageKind.JOIN_REQ:
            self._handle_join_req(engine, peer, msg)
        elif kind == MessageKind.JOIN_RESP:
            self._handle_join_resp(engine, peer, msg)
        elif kind == MessageKind.REPLACEMENT_REQ:
            self._handle_replacement_req(engine, peer, msg)
        elif kind == MessageKind.REPLACEMENT_RESP:
            self._handle_replacement_resp(engine, peer, msg)
        elif kind == MessageKind.QUERYFAILED_RES:
            meta = msg.meta or {}
            engine.finish_op(msg.op, kind=meta.get("op_kind", "lookup"),
                             owner=None, hops=meta.get("q_hops", msg.hops),
                             path=list(msg.path), failed=True)

    # -- introspection -----------------------------------------------------------------------------

    def _node(self, nid):
        if not self.engine.has_peer(nid):
            raise UnknownNode(f"node {nid} is not part of the overlay")
        return self.engine.peer(nid).node

    def contacts(self, nid):
        nd = self._node(nid)
        out, seen = [], {nid}
        def push(x):
            if x != -1 and x not in seen:
                seen.add(x)
                out.append(x)
        push(nd.parent)
        for k in nd.kids():
            push(k)
        push(nd.ladj)
        push(nd.radj)
        for tbl in (nd.ltab, nd.rtab):
            for k in range(0, len(tbl), 4):
                if tbl[k] < self.m:
                    push(tbl[k + 1])
        return tuple(out)

    def routing_table(self, nid):
        nd = self._node(nid)
        pairs = [(0, nd.parent if nd.parent != -1 else None)]
        for k, kid in enumerate(nd.kids()):
            pairs.append((1 + k, kid))
        pairs.append((self.m + 1, nd.ladj if nd.ladj != -1 else None))
        pairs.append((self.m + 2, nd.radj if nd.radj != -1 else None))
        slot = self.m + 3
        for tbl in (nd.ltab, nd.rtab):
            for k in range(0, len(tbl), 4):
                pairs.append((slot, tbl[k + 1]))
                slot += 1
        return RoutingTable.build(nid, pairs)
