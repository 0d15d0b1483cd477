"""Discrete-time message engine.

Virtual time advances in integer ticks.  A message sent at tick t to
receiver r arrives at t + base_latency * per_node_step(r); handlers run at
arrival and may send further messages, so one overlay hop costs one latency
unit and a k-hop operation quiesces after exactly k unit-latency ticks.

Every transmission attempt is logged at send time in columnar storage with
its prospective hop ordinal, then resolved to exactly one disposition:
delivered, undeliverable (unknown receiver or inbox overflow), or dropped
because the receiver was down.  The log can stream older rows to disk so
multi-hundred-million-message runs stay inside memory budgets.

Delivery order within a tick is sorted by (receiver, op, seq, sender,
kind), where seq is a per-(op, creating node) ordinal.  Every component of
that key is reproducible on any worker layout, which keeps runs bit-stable
when the node set is sharded across processes.
"""

from __future__ import annotations

import hashlib
import struct
from array import array
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

from .churn import ALIVE_STATES, PeerState, check_transition
from .distributions import SplitMix64
from .errors import (
    DuplicateId,
    ForbiddenBroadcastKind,
    InvalidParams,
    OriginDown,
    QuiescenceTimeout,
)


class MessageKind(IntEnum):
    SEARCH = 1
    INSERT = 2
    DELETE = 3
    RANGE = 4
    JOIN_REQ = 5
    JOIN_RESP = 6
    REPLACEMENT_REQ = 7
    REPLACEMENT_RESP = 8
    QUERYFAILED_RES = 9
    BROADCAST = 10
    MAINTENANCE = 11


QUERY_KINDS = frozenset({
    MessageKind.SEARCH, MessageKind.INSERT,
    MessageKind.DELETE, MessageKind.RANGE,
})

BROADCASTABLE_KINDS = frozenset({
    MessageKind.BROADCAST, MessageKind.JOIN_REQ, MessageKind.MAINTENANCE,
})

DISP_PENDING = 0
DISP_DELIVERED = 1
DISP_UNDELIVERABLE = 2
DISP_RECEIVER_DOWN = 3

# op ids below zero are engine-internal traffic, never handler-visible
OP_BACKGROUND = -1

_SPILL_ROW = struct.Struct("<QBQQI")


class Data:
    """Message payload: optional key, value and half-open key range."""

    __slots__ = ("key", "value", "lo", "hi")

    def __init__(self, key=None, value=None, lo=None, hi=None):
        self.key = key
        self.value = value
        self.lo = lo
        self.hi = hi


class Message:
    __slots__ = ("kind", "sender", "receiver", "data", "path", "hops",
                 "op", "seq", "meta", "avoid", "send_time", "deliver_time",
                 "log_idx")

    def __init__(self, kind, origin, data, op, seq, now, meta=None):
        self.kind = kind
        self.sender = origin
        self.receiver = -1
        self.data = data
        self.path = [origin]
        self.hops = 0
        self.op = op
        self.seq = seq
        self.meta = meta
        self.avoid = None
        self.send_time = now
        self.deliver_time = -1
        self.log_idx = -1


@dataclass
class NetworkModel:
    base_latency: int = 1
    per_node_step: dict | None = None
    background_traffic_rate: int = 0
    seed: int = 0
    queue_cap: int = 2 ** 16

    def validate(self):
        if self.base_latency < 1:
            raise InvalidParams("base_latency must be >= 1")
        for nid, step in (self.per_node_step or {}).items():
            if step < 1:
                raise InvalidParams(f"per_node_step[{nid}] must be >= 1")
        if self.background_traffic_rate < 0:
            raise InvalidParams("background_traffic_rate must be >= 0")
        if self.queue_cap < 1:
            raise InvalidParams("queue_cap must be >= 1")
        return self


class Peer:
    __slots__ = ("id", "state", "inbox", "node")

    def __init__(self, nid):
        self.id = nid
        self.state = PeerState.WORKING
        self.inbox = None
        self.node = None  # protocol-specific routing state

    def set_state(self, target):
        check_transition(self.id, self.state, target)
        self.state = target

    @property
    def alive(self):
        return self.state in ALIVE_STATES


class MessageLog:
    """Columnar send log with per-row disposition tracking.

    Rows older than `spill_threshold` move to `spill_path` as fixed-width
    binary records; dispositions stay in memory because rows are resolved
    shortly after being appended, long after which they may have spilled.
    """

    def __init__(self, spill_path=None, spill_threshold=2 ** 21):
        self._ticks = array("Q")
        self._kinds = array("B")
        self._senders = array("Q")
        self._receivers = array("Q")
        self._hops = array("I")
        self._disp = bytearray()
        self._kind_counts = [0] * 16
        self._disp_counts = [0, 0, 0, 0]
        self.overflow_drops = 0
        self._spill_path = spill_path
        self._spill_threshold = spill_threshold
        self._spill_file = None
        self._spilled = 0

    def __len__(self):
        return len(self._disp)

    def append(self, tick, kind, sender, receiver, hops):
        self._ticks.append(tick)
        self._kinds.append(kind)
        self._senders.append(sender)
        self._receivers.append(receiver)
        self._hops.append(hops)
        self._disp.append(DISP_PENDING)
        self._kind_counts[kind] += 1
        self._disp_counts[DISP_PENDING] += 1
        if self._spill_path is not None and len(self._ticks) >= self._spill_threshold:
            self._flush_to_disk()
        return len(self._disp) - 1

    def set_disposition(self, idx, code):
        old = self._disp[idx]
        self._disp[idx] = code
        self._disp_counts[old] -= 1
        self._disp_counts[code] += 1

    def count(self, kind):
        return self._kind_counts[kind]

    def disposition_counts(self):
        return {code: self._disp_counts[code] for code in range(4)}

    def _flush_to_disk(self):
        if self._spill_file is None:
            self._spill_file = open(self._spill_path, "wb")
        pack = _SPILL_ROW.pack
        write = self._spill_file.write
        for row in zip(self._ticks, self._kinds, self._senders,
                       self._receivers, self._hops):
            write(pack(*row))
        self._spilled += len(self._ticks)
        self._ticks = array("Q")
        self._kinds = array("B")
        self._senders = array("Q")
        self._receivers = array("Q")
        self._hops = array("I")

    def _spilled_rows(self, start, limit):
        """Yield (tick, kind, sender, receiver, hops) from disk rows."""
        if self._spill_file is None or start >= self._spilled:
            return
        self._spill_file.flush()
        stop = min(self._spilled, limit)
        size = _SPILL_ROW.size
        with open(self._spill_path, "rb") as fh:
            fh.seek(start * size)
            remaining = stop - start
            while remaining > 0:
                chunk = fh.read(size * min(remaining, 65536))
                if not chunk:
                    break
                for row in _SPILL_ROW.iter_unpack(chunk):
                    yield row
                remaining -= len(chunk) // size

    def records(self, start=0, limit=None):
        """Yield (tick, kind, sender, receiver, hops, disposition) rows."""
        stop = len(self._disp) if limit is None else min(limit, len(self._disp))
        disp = self._disp
        idx = start
        for row in self._spilled_rows(start, stop):
            yield (*row, disp[idx])
            idx += 1
        base = self._spilled
        lo = max(start, base) - base
        for i in range(lo, stop - base):
            yield (self._ticks[i], self._kinds[i], self._senders[i],
                   self._receivers[i], self._hops[i], disp[base + i])

    def receiver_counts(self, start=0, end=None, delivered_only=True):
        counts = {}
        for row in self.records(start, end):
            if delivered_only and row[5] != DISP_DELIVERED:
                continue
            counts[row[3]] = counts.get(row[3], 0) + 1
        return counts

    def export(self, out, limit=None):
        """Write rows as "tick,kind,sender,receiver,hops" lines, all decimal."""
        for tick, kind, sender, receiver, hops, _ in self.records(0, limit):
            out.write(f"{tick},{kind},{sender},{receiver},{hops}\n")

    def digest(self, limit=None):
        h = hashlib.sha256()
        for tick, kind, sender, receiver, hops, _ in self.records(0, limit):
            h.update(f"{tick},{kind},{sender},{receiver},{hops}\n".encode())
        return h.hexdigest()

    def snapshot(self):
        return LogView(self)

    def close(self):
        if self._spill_file is not None:
            self._spill_file.close()
            self._spill_file = None


class LogView:
    """Read-only view pinned to the log length at creation time."""

    def __init__(self, log):
        self._log = log
        self._limit = len(log)
        self._kind_counts = list(log._kind_counts)
        self._disp_counts = list(log._disp_counts)

    def __len__(self):
        return self._limit

    def count(self, kind):
        return self._kind_counts[kind]

    def disposition_counts(self):
        return {code: self._disp_counts[code] for code in range(4)}

    def records(self, start=0):
        return self._log.records(start, self._limit)

    def export(self, out):
        self._log.export(out, self._limit)

    def digest(self):
        return self._log.digest(self._limit)


def _delivery_key(msg):
    return (msg.receiver, msg.op, msg.seq, msg.sender, msg.kind)


class Engine:
    def __init__(self, model=None, protocol=None, log=None):
        self.model = (model or NetworkModel()).validate()
        self.protocol = protocol
        self.log = log if log is not None else MessageLog()
        self.now = 0
        self.completions = {}
        # shard integration points: router sees sends to non-local ids,
        # pre_delivery runs at the top of every tick, auto_reset_seq defers
        # sequence-counter recycling to an external quiescence authority
        self.router = None
        self.pre_delivery = None
        self.auto_reset_seq = True
        self._peers = {}
        self._ids = []
        self._pending = {}
        self._in_flight = 0
        self._seq = {}
        self._steps = self.model.per_node_step or {}
        self._base = self.model.base_latency
        self._cap = self.model.queue_cap
        self._bg_rate = self.model.background_traffic_rate
        self._bg_rng = SplitMix64(self.model.seed)

    # -- topology ----------------------------------------------------------

    def add_peer(self, nid):
        if nid in self._peers:
            raise DuplicateId(f"peer {nid} already present")
        peer = Peer(nid)
        self._peers[nid] = peer
        self._ids.append(nid)
        return peer

    def peer(self, nid):
        return self._peers[nid]

    def peers(self):
        return self._peers.values()

    def has_peer(self, nid):
        return nid in self._peers

    def live_count(self):
        return sum(1 for p in self._peers.values() if p.state == PeerState.WORKING)

    # -- messaging ---------------------------------------------------------

    @property
    def in_flight(self):
        return self._in_flight

    def new_message(self, kind, origin, data, op, meta=None):
        if op >= 0:
            key = (op, origin)
            seq = self._seq.get(key, 0) + 1
            self._seq[key] = seq
        else:
            seq = 0
        return Message(kind, origin, data, op, seq, self.now, meta)

    def send(self, msg, notify=True):
        sender = msg.path[-1]
        origin = self._peers.get(sender)
        if origin is None or not origin.alive:
            raise OriginDown(f"sender {sender} cannot transmit")
        msg.sender = sender
        target = self._peers.get(msg.receiver)
        if target is None and self.router is not None:
            disp = self.router(msg)
            if disp is not None:
                # PENDING means the router took the message (it is logged at
                # the receiving shard); anything else resolves here like a
                # local send-time failure
                if disp != DISP_PENDING:
                    msg.log_idx = self.log.append(self.now, msg.kind, sender,
                                                  msg.receiver, msg.hops + 1)
                    self.log.set_disposition(msg.log_idx, disp)
                    self._notify_failure(msg, disp, notify)
                return disp
        msg.log_idx = self.log.append(self.now, msg.kind, sender,
                                      msg.receiver, msg.hops + 1)
        if target is None:
            disp = DISP_UNDELIVERABLE
        elif not target.alive:
            disp = DISP_RECEIVER_DOWN
        else:
            msg.path.append(msg.receiver)
            msg.hops += 1
            msg.send_time = self.now
            msg.deliver_time = self.now + self._base * self._steps.get(msg.receiver, 1)
            self._pending.setdefault(msg.deliver_time, []).append(msg)
            if msg.op >= 0:
                self._in_flight += 1
            return DISP_PENDING
        self.log.set_disposition(msg.log_idx, disp)
        self._notify_failure(msg, disp, notify)
        return disp

    def unicast(self, kind, origin, receiver, data, op, meta=None):
        msg = self.new_message(kind, origin, data, op, meta)
        msg.receiver = receiver
        self.send(msg)
        return msg

    def broadcast(self, sender, kind, data, targets, op=OP_BACKGROUND):
        if kind not in BROADCASTABLE_KINDS:
            raise ForbiddenBroadcastKind(f"{MessageKind(kind).name} cannot be broadcast")
        emitted = 0
        for target in targets:
            msg = self.new_message(kind, sender, data, op)
            msg.receiver = target
            if self.send(msg, notify=False) == DISP_PENDING:
                emitted += 1
        return emitted

    def _notify_failure(self, msg, disp, notify=True):
        if notify and msg.op >= 0 and self.protocol is not None:
            self.protocol.on_undeliverable(self, msg, disp)

    # -- op completion bookkeeping ------------------------------------------

    def finish_op(self, op, **info):
        self.completions[op] = info

    def drain_completions(self):
        done = sorted(self.completions.items())
        self.completions.clear()
        return done

    # -- shard transport ------------------------------------------------------

    def ingest(self, msg):
        """Accept a message routed in from another shard.

        The row is logged here with its original send tick, so the union of
        shard logs reproduces the single-process log.  Lockstep delivery
        means a frame must always land before its due tick.
        """
        if msg.deliver_time <= self.now:
            raise InvalidParams(
                f"stale forward: due tick {msg.deliver_time}, now {self.now}")
        msg.log_idx = self.log.append(msg.send_time, msg.kind, msg.sender,
                                      msg.receiver, msg.hops)
        self._pending.setdefault(msg.deliver_time, []).append(msg)
        if msg.op >= 0:
            self._in_flight += 1

    def reset_seq(self):
        """Drop per-op sequence counters; call only at op boundaries."""
        self._seq.clear()

    # -- time --------------------------------------------------------------

    def step(self):
        """Advance one tick; deliver everything due and run handlers."""
        self.now += 1
        if self.pre_delivery is not None:
            self.pre_delivery()
        if self._bg_rate:
            self._inject_background()
        batch = self._pending.pop(self.now, None)
        if not batch:
            if self.auto_reset_seq and not self._in_flight and self._seq:
                self._seq.clear()
            return 0
        batch.sort(key=_delivery_key)
        receiving = []
        for msg in batch:
            peer = self._peers[msg.receiver]
            if not peer.alive:
                self._resolve(msg, DISP_RECEIVER_DOWN)
                continue
            inbox = peer.inbox
            if inbox is None:
                inbox = peer.inbox = deque()
            if len(inbox) >= self._cap:
                dropped = inbox.popleft()
                self.log.overflow_drops += 1
                self._resolve(dropped, DISP_UNDELIVERABLE)
            inbox.append(msg)
            if len(inbox) == 1:
                receiving.append(peer)
        delivered = 0
        proto = self.protocol
        for peer in receiving:
            inbox = peer.inbox
            while inbox:
                msg = inbox.popleft()
                if not peer.alive:  # handler earlier this tick killed it
                    self._resolve(msg, DISP_RECEIVER_DOWN)
                    continue
                self.log.set_disposition(msg.log_idx, DISP_DELIVERED)
                if msg.op >= 0:
                    self._in_flight -= 1
                    if proto is not None:
                        proto.handle(self, peer, msg)
                delivered += 1
        if self.auto_reset_seq and not self._in_flight and self._seq:
            self._seq.clear()
        return delivered

    def _resolve(self, msg, disp):
        self.log.set_disposition(msg.log_idx, disp)
        if msg.op >= 0:
            self._in_flight -= 1
        self._notify_failure(msg, disp)

    def run_until_quiescent(self, max_ticks=1_000_000):
        """Step until no operation traffic is pending; return ticks elapsed.

        Idle gaps are skipped in O(1) per gap, so sparse schedules cost
        nothing.  Raises QuiescenceTimeout after max_ticks of virtual time.
        """
        start = self.now
        while self._in_flight:
            nxt = min(self._pending)
            if nxt > self.now + 1:
                self.now = nxt - 1
            self.step()
            if self.now - start > max_ticks:
                raise QuiescenceTimeout(
                    f"{self._in_flight} messages still pending after {max_ticks} ticks")
        return self.now - start

    def _inject_background(self):
        n = len(self._ids)
        if n < 2:
            return
        rng = self._bg_rng
        ids = self._ids
        peers = self._peers
        for _ in range(self._bg_rate):
            for _attempt in range(64):
                a = ids[rng.next_below(n)]
                b = ids[rng.next_below(n)]
                if a != b and peers[a].alive and peers[b].alive:
                    break
            else:
                continue
            msg = self.new_message(MessageKind.MAINTENANCE, a, Data(), OP_BACKGROUND)
            msg.receiver = b
            self.send(msg, notify=False)
