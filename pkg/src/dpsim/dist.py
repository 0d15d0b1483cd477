"""Sharded execution of one simulation across worker processes.

The node id space is split into contiguous ranges, one engine per worker,
and virtual time advances in lockstep: the coordinator broadcasts a TICK,
every worker runs one engine step and answers TICK_DONE, and no worker
starts tick t+1 before every tick-t cross-shard message has been relayed.
Messages between nodes on different shards travel as FORWARD frames via
the coordinator and are logged at the receiving shard with their original
send tick, so the union of the shard logs reproduces the single-process
message log row for row.

The coordinator owns everything a single-process run decides outside
message handlers: operation ids, origin and key draws, churn target
selection, and background-traffic pair draws (replicated on every worker
against a shared membership mirror).  Engines never block on sockets; each
worker session drains its connection on a reader thread and feeds frames
to the engine loop through a queue.

Wire format: one JSON object per line, UTF-8, keys sorted, with fields
type/seq/payload; seq increases strictly per connection direction.
Workers are expected to share a filesystem with the coordinator (they are
separate local processes, not remote hosts), which is where their shard
log files land for merging.
"""

from __future__ import annotations

import heapq
import hashlib
import json
import os
import queue
import socket
import threading
import time
from array import array
from bisect import bisect_left, insort
from contextlib import ExitStack
from dataclasses import dataclass, replace

from .churn import ALIVE_STATES, PeerState, _default_sampler, is_partitioned, select_from
from .distributions import Sampler, SplitMix64
from .engine import (
    DISP_PENDING,
    DISP_RECEIVER_DOWN,
    Data,
    Message,
    MessageKind,
    MessageLog,
    OP_BACKGROUND,
)
from .errors import (
    InvalidParams,
    NoWorkers,
    QuiescenceTimeout,
    SimError,
    TickTimeout,
    UnknownNode,
    WorkerUnreachable,
)
from . import errors as _errors
from .protocols import make_overlay
from .stats import MetricRegistry, MetricSummary, merge_summaries

_ALIVE_INTS = frozenset(int(s) for s in ALIVE_STATES)
_ENV_TIMEOUT = "DPSIM_TICK_TIMEOUT_MS"


# -- value and message packing ---------------------------------------------------------

# Composite values are wrapped in {"%": tag} objects so tuples, sets,
# non-string dict keys, typed arrays and bytes survive JSON transport.
# Plain scalars and lists pass through untouched.

def _pack_value(v):
    if v is None or isinstance(v, (bool, int, float, str)):
        return v
    if isinstance(v, list):
        return [_pack_value(x) for x in v]
    if isinstance(v, tuple):
        return {"%": "t", "v": [_pack_value(x) for x in v]}
    if isinstance(v, (set, frozenset)):
        return {"%": "s", "v": sorted(_pack_value(x) for x in v)}
    if isinstance(v, dict):
        return {"%": "d", "k": [_pack_value(k) for k in v],
                "v": [_pack_value(x) for x in v.values()]}
    if isinstance(v, array):
        return {"%": "a", "t": v.typecode, "v": list(v)}
    if isinstance(v, (bytes, bytearray)):
        return {"%": "b", "v": v.hex()}
    raise InvalidParams(f"{type(v).__name__} values cannot cross shards")


def _unpack_value(v):
    if isinstance(v, list):
        return [_unpack_value(x) for x in v]
    if isinstance(v, dict):
        tag = v["%"]
        if tag == "t":
            return tuple(_unpack_value(x) for x in v["v"])
        if tag == "s":
            return set(_unpack_value(x) for x in v["v"])
        if tag == "d":
            return {_unpack_value(k): _unpack_value(x)
                    for k, x in zip(v["k"], v["v"])}
        if tag == "a":
            return array(v["t"], v["v"])
        if tag == "b":
            return bytes.fromhex(v["v"])
        raise InvalidParams(f"unknown value tag {tag!r}")
    return v


def pack_message(msg):
    """Flatten a Message into a JSON-safe dict (log_idx is shard-local)."""
    return {
        "kind": int(msg.kind),
        "op": msg.op,
        "seq": msg.seq,
        "sender": msg.sender,
        "receiver": msg.receiver,
        "path": list(msg.path),
        "hops": msg.hops,
        "send_time": msg.send_time,
        "deliver_time": msg.deliver_time,
        "avoid": sorted(msg.avoid) if msg.avoid is not None else None,
        "meta": _pack_value(msg.meta),
        "data": [_pack_value(msg.data.key), _pack_value(msg.data.value),
                 msg.data.lo, msg.data.hi],
    }


def unpack_message(payload):
    key, value, lo, hi = payload["data"]
    data = Data(key=_unpack_value(key), value=_unpack_value(value), lo=lo, hi=hi)
    msg = Message(MessageKind(payload["kind"]), payload["path"][0], data,
                  payload["op"], payload["seq"], payload["send_time"],
                  _unpack_value(payload["meta"]))
    msg.sender = payload["sender"]
    msg.receiver = payload["receiver"]
    msg.path = list(payload["path"])
    msg.hops = payload["hops"]
    msg.deliver_time = payload["deliver_time"]
    msg.avoid = set(payload["avoid"]) if payload["avoid"] is not None else None
    return msg


# -- framing ---------------------------------------------------------------------------

def encode_frame(ftype, seq, payload):
    text = json.dumps({"type": ftype, "seq": seq, "payload": payload},
                      sort_keys=True, separators=(",", ":"))
    return text.encode() + b"\n"


def decode_frame(line):
    try:
        doc = json.loads(line)
        return doc["type"], doc["seq"], doc["payload"]
    except (ValueError, KeyError, TypeError) as exc:
        raise InvalidParams(f"malformed frame: {exc}") from exc


class FrameStream:
    """Framed messaging over one socket; seq validated per direction."""

    def __init__(self, sock):
        self._sock = sock
        self._file = sock.makefile("rb")
        self._out_seq = 0
        self._in_seq = -1

    def send(self, ftype, payload):
        self._sock.sendall(encode_frame(ftype, self._out_seq, payload))
        self._out_seq += 1

    def recv(self):
        """Next (type, payload) pair, or None once the peer closed."""
        line = self._file.readline()
        if not line:
            return None
        ftype, seq, payload = decode_frame(line)
        if seq <= self._in_seq:
            raise InvalidParams(
                f"frame seq went backwards: {seq} after {self._in_seq}")
        self._in_seq = seq
        return ftype, payload

    def close(self):
        try:
            self._file.close()
        finally:
            self._sock.close()


# -- shard maps -------------------------------------------------------------------------

@dataclass(frozen=True)
class ShardMap:
    """Ordered (worker address, half-open id range) pairs covering the space."""

    shards: tuple  # of (address, (lo, hi))
    key_bits: int

    def __len__(self):
        return len(self.shards)

    @property
    def addresses(self):
        return [addr for addr, _ in self.shards]

    def locate(self, nid):
        space = 1 << self.key_bits
        if not 0 <= nid < space:
            raise InvalidParams(f"id {nid} outside [0, 2^{self.key_bits})")
        width = space // len(self.shards)
        return min(nid // width, len(self.shards) - 1)


def make_shard_map(total_nodes, workers, key_bits=32):
    """Split the id space into equal contiguous ranges, one per worker.

    The last range absorbs the division remainder.  Uniformly spread node
    ids therefore land in near-equal counts per worker.
    """
    workers = list(workers)
    if not workers:
        raise NoWorkers("a shard map needs at least one worker")
    if total_nodes < 1:
        raise InvalidParams("total_nodes must be >= 1")
    space = 1 << key_bits
    if len(workers) > space:
        raise InvalidParams("more workers than node ids")
    width = space // len(workers)
    shards = []
    for i, addr in enumerate(workers):
        hi = (i + 1) * width if i < len(workers) - 1 else space
        shards.append((addr, (i * width, hi)))
    return ShardMap(tuple(shards), key_bits)


# -- summary merging ---------------------------------------------------------------------

def merge_stats(partials):
    """Fold per-shard summary collections into one name-keyed dict."""
    merged = {}
    for part in partials:
        if isinstance(part, dict):
            part = part.values()
        for summary in part:
            prior = merged.get(summary.name)
            merged[summary.name] = (summary if prior is None
                                    else merge_summaries(prior, summary))
    return merged


def _summary_from_dict(d):
    return MetricSummary(d["metric"], d["count"], d["min"], d["max"], d["mean"],
                         d["bucket_width"], tuple((b, f) for b, f in d["histogram"]))


def _summary_payload(s):
    return {"metric": s.name, "count": s.count, "min": s.min, "max": s.max,
            "mean": s.mean, "bucket_width": s.bucket_width,
            "histogram": [[b, f] for b, f in s.histogram]}


# -- worker side --------------------------------------------------------------------------

_REPORT_KEYS = ("kind", "ok", "failed", "hops", "replacement_hops", "owner")


class _ShardRuntime:
    """One worker's engine plus the membership mirror that drives routing."""

    def __init__(self, payload):
        from .experiment import parse_config  # local import, no cycle at module load

        cfg = parse_config(payload["config"])
        self.cfg = cfg
        self.index = payload["index"]
        self.map = make_shard_map(cfg.network_size, payload["workers"],
                                  cfg.protocol.key_bits)
        os.makedirs(cfg.output_path, exist_ok=True)
        self._spill = os.path.join(cfg.output_path,
                                   f"messages-shard{self.index}.spill")
        model = replace(cfg.network, background_traffic_rate=0)
        self.overlay = make_overlay(cfg.protocol, model=model,
                                    metrics=MetricRegistry(),
                                    log=MessageLog(spill_path=self._spill))
        self.engine = self.overlay.engine
        self.engine.auto_reset_seq = False
        self.engine.router = self._route
        self.bg_rate = cfg.network.background_traffic_rate
        if self.bg_rate:
            self.bg_rng = SplitMix64(cfg.network.seed)
            self.engine.pre_delivery = self._bg_pulse
        self.states = {}
        self.order = []
        self.mark = 0
        self.outbox = []
        self._known_bootstrap = self.overlay.bootstrap_id
        self._base = cfg.network.base_latency
        self._steps = cfg.network.per_node_step or {}
        inner = self.overlay.on_undeliverable
        runtime = self

        def bounce_remote(engine, msg, disp):
            # a resolution for a remotely-originated message replays at the
            # sender's shard, at the same virtual tick it resolved here
            if msg.sender < 0 or engine.has_peer(msg.sender):
                inner(engine, msg, disp)
                return
            out = pack_message(msg)
            out["resolution"] = disp
            out["to"] = runtime.map.locate(msg.sender)
            runtime.outbox.append(out)

        self.overlay.on_undeliverable = bounce_remote

    def ack(self):
        return {"tick": self.engine.now, "in_flight": self.engine.in_flight,
                "completions": []}

    # -- engine hooks -----------------------------------------------------

    def _owns(self, nid):
        return self.map.locate(nid) == self.index

    def _route(self, msg):
        target = self.map.locate(msg.receiver)
        if target == self.index:
            return None
        state = self.states.get(msg.receiver)
        if state is None:
            return None
        if state not in _ALIVE_INTS:
            return DISP_RECEIVER_DOWN
        eng = self.engine
        msg.path.append(msg.receiver)
        msg.hops += 1
        msg.send_time = eng.now
        msg.deliver_time = eng.now + self._base * self._steps.get(msg.receiver, 1)
        out = pack_message(msg)
        out["to"] = target
        self.outbox.append(out)
        return DISP_PENDING

    def _mirror_alive(self, nid):
        if self.engine.has_peer(nid):
            return self.engine.peer(nid).alive
        return self.states.get(nid) in _ALIVE_INTS

    def _bg_pulse(self):
        # every worker draws the same global pairs; only the owner sends
        n = len(self.order)
        if n < 2:
            return
        rng = self.bg_rng
        eng = self.engine
        for _ in range(self.bg_rate):
            for _attempt in range(64):
                a = self.order[rng.next_below(n)]
                b = self.order[rng.next_below(n)]
                if a != b and self._mirror_alive(a) and self._mirror_alive(b):
                    break
            else:
                continue
            if eng.has_peer(a):
                msg = eng.new_message(MessageKind.MAINTENANCE, a, Data(),
                                      OP_BACKGROUND)
                msg.receiver = b
                eng.send(msg, notify=False)

    # -- frame handling ---------------------------------------------------

    def on_tick(self, payload, forwards):
        eng = self.engine
        for nid, state in payload.get("states", ()):
            self.states[nid] = state
        if "bootstrap" in payload:
            self.overlay.bootstrap_id = payload["bootstrap"]
            self._known_bootstrap = payload["bootstrap"]
        if not payload["advance"] and not eng.in_flight:
            eng.reset_seq()
        for fw in forwards:
            msg = unpack_message(fw)
            if "resolution" in fw:
                self.overlay.on_undeliverable(eng, msg, fw["resolution"])
            else:
                eng.ingest(msg)
        for cmd in payload.get("commands", ()):
            self._run_command(cmd)
        if payload["advance"]:
            eng.step()
        done = {"tick": eng.now, "in_flight": eng.in_flight,
                "completions": self._drain_completions()}
        if self.overlay.bootstrap_id != self._known_bootstrap:
            self._known_bootstrap = done["bootstrap"] = self.overlay.bootstrap_id
        return done

    def _drain_completions(self):
        finished = self.engine.completions
        if not finished:
            return []
        packed = [[op, {k: v for k, v in info.items() if k in _REPORT_KEYS}]
                  for op, info in sorted(finished.items())]
        self.overlay.collect()
        return packed

    def _run_command(self, cmd):
        do = cmd["do"]
        ov = self.overlay
        if do == "join":
            nid = cmd["id"]
            self.order.append(nid)
            self.states[nid] = int(PeerState.WORKING)
            if self._owns(nid):
                ov.initiate_join(nid, cmd["op"])
        elif do == "lookup":
            if self._owns(cmd["origin"]):
                ov.initiate_lookup(cmd["origin"], cmd["key"], cmd["op"])
        elif do == "insert":
            if self._owns(cmd["origin"]):
                ov.initiate_insert(cmd["origin"], cmd["key"], cmd["value"],
                                   cmd["op"])
        elif do == "delete":
            if self._owns(cmd["origin"]):
                ov.initiate_delete(cmd["origin"], cmd["key"], cmd["op"])
        elif do == "range":
            if self._owns(cmd["origin"]):
                ov.initiate_range(cmd["origin"], cmd["lo"], cmd["hi"], cmd["op"])
        elif do == "depart":
            if self._owns(cmd["id"]):
                ov.initiate_departure(cmd["id"], cmd["op"])
        elif do == "fail":
            for nid in cmd["ids"]:
                self.states[nid] = int(PeerState.FAILED)
                if self._owns(nid):
                    self.engine.peer(nid).set_state(PeerState.FAILED)
        elif do == "stabilize":
            ov.initiate_stabilize(cmd["live"], cmd["op"])
        elif do == "mark":
            self.mark = len(self.engine.log)
        else:
            raise InvalidParams(f"unknown command {do!r}")

    def drain_outbox(self):
        out, self.outbox = self.outbox, []
        return out

    def on_stats(self, payload):
        eng, ov = self.engine, self.overlay
        working = sorted(p.id for p in eng.peers()
                         if p.state == PeerState.WORKING)
        if payload.get("record_load"):
            received = eng.log.receiver_counts(start=self.mark)
            for nid in working:
                ov.metrics.record("msgs_per_node", received.get(nid, 0))
        for nid in working:
            ov.metrics.record("table_length", len(ov.routing_table(nid)))
        name = f"messages-shard{self.index}.log"
        rows = len(eng.log)
        with open(os.path.join(self.cfg.output_path, name), "w") as out:
            eng.log.export(out)
        kinds = {str(int(k)): eng.log.count(k) for k in MessageKind
                 if eng.log.count(k)}
        disps = {str(code): n
                 for code, n in eng.log.disposition_counts().items() if n}
        return {"index": self.index, "now": eng.now, "log_file": name,
                "rows": rows, "kinds": kinds, "dispositions": disps,
                "overflow": eng.log.overflow_drops,
                "summaries": [_summary_payload(s) for s in ov.metrics.summaries()],
                "contacts": [[nid, list(ov.contacts(nid))] for nid in working]}

    def cleanup(self):
        self.engine.log.close()
        if os.path.exists(self._spill):
            os.remove(self._spill)


def serve_worker(host, port, on_listen=None):
    """Serve exactly one coordinator session, then return."""
    server = socket.create_server((host, port))
    if on_listen is not None:
        bound = server.getsockname()
        on_listen(bound[0], bound[1])
    conn, _ = server.accept()
    server.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    stream = FrameStream(conn)
    inbound = queue.Queue(maxsize=1024)

    def read_loop():
        while True:
            try:
                item = stream.recv()
            except (SimError, OSError):
                item = None
            inbound.put(item)
            if item is None:
                return

    threading.Thread(target=read_loop, daemon=True).start()
    runtime = None
    forwards = []
    try:
        while True:
            item = inbound.get()
            if item is None:
                return
            ftype, payload = item
            if ftype == "HELLO":
                stream.send("HELLO", {"role": "worker"})
            elif ftype == "ASSIGN":
                runtime = _ShardRuntime(payload)
                stream.send("TICK_DONE", runtime.ack())
            elif ftype == "FORWARD":
                forwards.append(payload)
            elif ftype == "TICK":
                pending, forwards = forwards, []
                try:
                    done = runtime.on_tick(payload, pending)
                except Exception as exc:  # report, keep serving
                    done = {"tick": runtime.engine.now,
                            "in_flight": runtime.engine.in_flight,
                            "completions": [], "error": str(exc),
                            "etype": type(exc).__name__}
                for fw in runtime.drain_outbox():
                    stream.send("FORWARD", fw)
                stream.send("TICK_DONE", done)
            elif ftype == "STATS":
                try:
                    reply = runtime.on_stats(payload)
                except Exception as exc:
                    reply = {"error": str(exc), "etype": type(exc).__name__}
                stream.send("STATS", reply)
            elif ftype == "SHUTDOWN":
                return
            else:
                raise InvalidParams(f"unexpected frame type {ftype!r}")
    finally:
        if runtime is not None:
            runtime.cleanup()
        stream.close()


# -- coordinator side -----------------------------------------------------------------------

def _split_address(addr):
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidParams(f"worker address {addr!r} is not host:port")
    return host, int(port)


def _mapped_error(etype, message):
    exc_type = getattr(_errors, etype, SimError)
    if not (isinstance(exc_type, type) and issubclass(exc_type, SimError)):
        exc_type = SimError
    return exc_type(message)


class Coordinator:
    """Drives assigned workers through lockstep barriers and relays frames.

    All coupling with the experiment schedule lives in the caller; this
    class only speaks the wire protocol: connect/HELLO, ASSIGN, TICK /
    TICK_DONE barriers with FORWARD relaying, STATS gathering, SHUTDOWN.
    """

    def __init__(self, shard_map, timeout_ms=None):
        if timeout_ms is None:
            timeout_ms = int(os.environ.get(_ENV_TIMEOUT, "30000"))
        self.map = shard_map
        self.addrs = shard_map.addresses
        self.timeout_ms = timeout_ms
        self.tick = 0
        self._streams = None
        self._outboxes = [[] for _ in self.addrs]
        self._buffered_ops = 0
        self._state_diffs = []
        self._bootstrap = None
        self._push_bootstrap = False

    # -- connection lifecycle ---------------------------------------------

    def connect(self):
        deadline = time.monotonic() + self.timeout_ms / 1000
        streams = []
        try:
            for addr in self.addrs:
                host, port = _split_address(addr)
                while True:
                    try:
                        sock = socket.create_connection((host, port), timeout=0.5)
                        break
                    except OSError as exc:
                        if time.monotonic() >= deadline:
                            raise WorkerUnreachable(
                                f"worker {addr}: {exc}") from exc
                        time.sleep(0.02)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(self.timeout_ms / 1000)
                streams.append(FrameStream(sock))
        except WorkerUnreachable:
            for stream in streams:
                stream.close()
            raise
        self._streams = streams
        for stream in streams:
            stream.send("HELLO", {"role": "coordinator"})
        for addr, stream in zip(self.addrs, streams):
            ftype, payload = self._recv(addr, stream)
            if ftype != "HELLO" or payload.get("role") != "worker":
                raise WorkerUnreachable(f"worker {addr}: bad handshake")

    def assign(self, config_text):
        for i, stream in enumerate(self._streams):
            stream.send("ASSIGN", {"config": config_text, "index": i,
                                   "workers": self.addrs})
        for addr, stream in zip(self.addrs, self._streams):
            ftype, _ = self._recv(addr, stream)
            if ftype != "TICK_DONE":
                raise WorkerUnreachable(f"worker {addr}: assignment rejected")

    def shutdown(self):
        if self._streams is None:
            return
        for stream in self._streams:
            try:
                stream.send("SHUTDOWN", {})
            except OSError:
                pass
            stream.close()
        self._streams = None

    def _recv(self, addr, stream):
        try:
            item = stream.recv()
        except socket.timeout:
            raise TickTimeout(
                f"worker {addr}: no reply within {self.timeout_ms} ms") from None
        except OSError as exc:
            raise WorkerUnreachable(f"worker {addr}: {exc}") from exc
        if item is None:
            raise WorkerUnreachable(f"worker {addr}: connection closed")
        return item

    # -- experiment-state relaying ------------------------------------------

    def push_states(self, diffs):
        """Queue membership-state changes for the next barrier round."""
        self._state_diffs.extend(diffs)

    def set_bootstrap(self, value):
        self._bootstrap = value
        self._push_bootstrap = True

    # -- barrier rounds ------------------------------------------------------

    def barrier_tick(self, commands=None, advance=True):
        """Run one lockstep round; advance=False executes commands only.

        Returns {"tick", "in_flight", "completions", "quiescent"}; the
        quiescent flag means no operation traffic is pending on any worker
        or in transit between them.
        """
        tick = self.tick + 1 if advance else self.tick
        payload = {"tick": tick, "advance": advance,
                   "commands": list(commands) if commands else [],
                   "states": [list(d) for d in self._state_diffs]}
        self._state_diffs = []
        if self._push_bootstrap:
            payload["bootstrap"] = self._bootstrap
            self._push_bootstrap = False
        outboxes = self._outboxes
        self._outboxes = [[] for _ in self.addrs]
        self._buffered_ops = 0
        for i, stream in enumerate(self._streams):
            for fw in outboxes[i]:
                stream.send("FORWARD", fw)
            stream.send("TICK", payload)
        in_flight = 0
        completions = {}
        failure = None
        ticks = []
        for addr, stream in zip(self.addrs, self._streams):
            while True:
                ftype, reply = self._recv(addr, stream)
                if ftype == "FORWARD":
                    self._outboxes[reply["to"]].append(reply)
                    if reply["op"] >= 0:
                        self._buffered_ops += 1
                    continue
                if ftype != "TICK_DONE":
                    raise WorkerUnreachable(
                        f"worker {addr}: unexpected {ftype} frame at barrier")
                break
            ticks.append(reply["tick"])
            in_flight += reply["in_flight"]
            for op, info in reply.get("completions", ()):
                completions[op] = info
            if "bootstrap" in reply:
                self.set_bootstrap(reply["bootstrap"])
            if failure is None and "error" in reply:
                failure = _mapped_error(reply.get("etype", ""),
                                        f"worker {addr}: {reply['error']}")
        if failure is not None:
            raise failure
        if any(t != tick for t in ticks):
            raise WorkerUnreachable(
                f"lockstep violated: worker ticks {ticks} at barrier {tick}")
        self.tick = tick
        return {"tick": tick, "in_flight": in_flight,
                "completions": completions,
                "quiescent": in_flight == 0 and self._buffered_ops == 0}

    def flush(self):
        """Deliver any buffered forwards and state changes without stepping."""
        if any(self._outboxes) or self._state_diffs or self._push_bootstrap:
            self.barrier_tick(advance=False)

    # -- result gathering -----------------------------------------------------

    def gather_stats(self, record_load, lenient=False):
        self.flush()
        payload = {"record_load": bool(record_load)}
        replies = []
        for addr, stream in zip(self.addrs, self._streams):
            try:
                stream.send("STATS", payload)
                while True:
                    ftype, reply = self._recv(addr, stream)
                    if ftype == "STATS":
                        break
                if "error" in reply:
                    raise _mapped_error(reply.get("etype", ""),
                                        f"worker {addr}: {reply['error']}")
                replies.append(reply)
            except (SimError, OSError):
                if not lenient:
                    raise
        return replies


# -- experiment backend ----------------------------------------------------------------------

class ClusterBackend:
    """Executes one experiment schedule over remote shard workers.

    Presents the same surface the in-process backend gives the workload
    runner (now / working_ids / apply_plan / op initiators / exports), so
    the schedule code stays single-sourced.  Draw-for-draw it replays the
    single-process decision sequence against a membership mirror.
    """

    def __init__(self, config, workers, outdir):
        from .experiment import serialize_config, _draw_node_ids

        if config.shards and config.shards != len(workers):
            raise InvalidParams(
                f"config declares {config.shards} shards "
                f"but {len(workers)} workers were given")
        net = config.network
        if net.background_traffic_rate and (
                net.base_latency != 1
                or any(v != 1 for v in (net.per_node_step or {}).values())):
            raise InvalidParams(
                "sharded background traffic requires unit message latency")
        self.config = config
        self.outdir = outdir
        self._draw_node_ids = _draw_node_ids
        self.map = make_shard_map(config.network_size, workers,
                                  config.protocol.key_bits)
        self.policy = make_overlay(config.protocol)
        self.coord = Coordinator(self.map)
        self._states = {}
        self._working = []
        self._next_op = 0
        self._gathered = None
        self._contacts = {}
        self.coord.connect()
        self.coord.assign(serialize_config(config, form="json"))

    # -- workload surface --------------------------------------------------

    @property
    def now(self):
        return self.coord.tick

    def working_ids(self):
        return list(self._working)

    def build(self):
        cfg = self.config
        ids = self._draw_node_ids(cfg)
        if ids is None:
            ids = self.policy.default_ids(cfg.network_size)
        total = len(ids)
        for i, nid in enumerate(ids):
            self._note_join(nid)
            self._sync([{"do": "join", "id": nid, "op": self._new_op()}])
            pulse = self.policy.build_maintenance(i + 1, total)
            if pulse is not None:
                self._sync([{"do": pulse, "live": list(self._working),
                             "op": self._new_op()}])
        self._sync([{"do": "mark"}])

    def lookup(self, origin, key):
        self._sync([{"do": "lookup", "origin": origin, "key": key,
                     "op": self._new_op()}])

    def insert(self, origin, key, value):
        self._sync([{"do": "insert", "origin": origin, "key": key,
                     "value": value, "op": self._new_op()}])

    def delete(self, origin, key):
        self._sync([{"do": "delete", "origin": origin, "key": key,
                     "op": self._new_op()}])

    def range_query(self, origin, lo, hi):
        self._sync([{"do": "range", "origin": origin, "lo": lo, "hi": hi,
                     "op": self._new_op()}])

    def apply_plan(self, plan):
        plan.validate()
        targets = self._plan_targets(plan)
        if plan.kind == "failure":
            for nid in targets:
                self._mark_dead(nid, PeerState.FAILED)
            self._sync([{"do": "fail", "ids": list(targets)}])
            return
        if plan.mode == "sequential":
            for nid in targets:
                op = self._new_op()
                done = self._sync([{"do": "depart", "id": nid, "op": op}])
                self._commit_departure(done, {op: nid})
        else:
            ops, commands = {}, []
            for nid in targets:
                op = self._new_op()
                ops[op] = nid
                commands.append({"do": "depart", "id": nid, "op": op})
            self._commit_departure(self._sync(commands), ops)

    def settle(self):
        pass

    # -- mirror bookkeeping --------------------------------------------------

    def _new_op(self):
        self._next_op += 1
        return self._next_op

    def _note_join(self, nid):
        self._states[nid] = int(PeerState.WORKING)
        insort(self._working, nid)

    def _mark_dead(self, nid, state):
        self._states[nid] = int(state)
        i = bisect_left(self._working, nid)
        if i < len(self._working) and self._working[i] == nid:
            del self._working[i]

    def _commit_departure(self, completions, ops):
        diffs = []
        for op, nid in ops.items():
            info = completions.get(op)
            if info and info.get("ok"):
                self._mark_dead(nid, PeerState.VOLUNTARILY_LEFT)
                diffs.append((nid, int(PeerState.VOLUNTARILY_LEFT)))
        if diffs:
            self.coord.push_states(diffs)

    def _plan_targets(self, plan):
        if plan.ids is not None:
            for nid in plan.ids:
                state = self._states.get(nid)
                if state is None:
                    raise UnknownNode(f"node {nid} is not part of the overlay")
                if state != int(PeerState.WORKING):
                    raise InvalidParams(f"node {nid} is not WORKING")
            return list(plan.ids)
        count = round(plan.fraction * len(self._working))
        sampler = (Sampler(plan.distribution) if plan.distribution
                   else _default_sampler(None, seed=self.config.network.seed))
        return select_from(self._working, count, sampler)

    def _sync(self, commands, budget=1_000_000):
        report = self.coord.barrier_tick(commands=commands, advance=False)
        completions = dict(report["completions"])
        ticks = 0
        while not report["quiescent"]:
            report = self.coord.barrier_tick()
            completions.update(report["completions"])
            ticks += 1
            if ticks > budget:
                raise QuiescenceTimeout(
                    f"{report['in_flight']} messages still pending "
                    f"after {budget} ticks")
        return completions

    # -- results ----------------------------------------------------------------

    def finish(self, record_load):
        self._gathered = self.coord.gather_stats(record_load)
        self._contacts = {nid: tuple(c)
                          for g in self._gathered for nid, c in g["contacts"]}

    def partitioned(self):
        return is_partitioned(self._working,
                              lambda nid: self._contacts.get(nid, ())).partitioned

    def export(self):
        from .experiment import _DISP_NAMES
        from .stats import write_summaries_csv, write_summaries_jsonl

        if self._gathered is None:
            try:
                self._gathered = self.coord.gather_stats(False, lenient=True)
            except (SimError, OSError):
                self._gathered = []
        gathered = self._gathered
        summaries = merge_stats([[_summary_from_dict(d) for d in g["summaries"]]
                                 for g in gathered])
        outdir = self.outdir
        with open(os.path.join(outdir, "stats.csv"), "w") as main, \
                open(os.path.join(outdir, "histogram.csv"), "w") as hist:
            write_summaries_csv(summaries, main, hist)
        with open(os.path.join(outdir, "stats.jsonl"), "w") as out:
            write_summaries_jsonl(summaries, out)

        shard_files = []
        for g in sorted(gathered, key=lambda g: g["index"]):
            path = os.path.join(outdir, g["log_file"])
            if os.path.exists(path):
                shard_files.append(g["log_file"])
        digest = hashlib.sha256()
        rows = 0
        with ExitStack() as stack:
            out = stack.enter_context(
                open(os.path.join(outdir, "messages.log"), "w"))
            parts = [stack.enter_context(open(os.path.join(outdir, name)))
                     for name in shard_files]
            for line in heapq.merge(*parts,
                                    key=lambda ln: int(ln[:ln.index(",")])):
                out.write(line)
                digest.update(line.encode())
                rows += 1

        kinds = {}
        disps = {}
        overflow = 0
        for g in gathered:
            overflow += g["overflow"]
            for k, n in g["kinds"].items():
                kinds[int(k)] = kinds.get(int(k), 0) + n
            for c, n in g["dispositions"].items():
                disps[int(c)] = disps.get(int(c), 0) + n
        facts = {
            "rows": rows,
            "digest": digest.hexdigest(),
            "kinds": {MessageKind(k).name: n for k, n in sorted(kinds.items())},
            "dispositions": {_DISP_NAMES[c]: n for c, n in sorted(disps.items())},
            "overflow_drops": overflow,
        }
        artifacts = ["stats.csv", "histogram.csv", "stats.jsonl",
                     "messages.log"] + shard_files
        return len(self._working), summaries, facts, artifacts

    def close(self):
        self.coord.shutdown()
