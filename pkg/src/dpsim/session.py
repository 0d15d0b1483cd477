"""Interactive experiment sessions behind the HTTP control surface.

A session owns one experiment on a background thread.  The thread runs
the same build -> workload -> finish pipeline as a batch run, but checks
in at every operation boundary: queued control commands (churn, pause,
resume) execute there, and immutable snapshots of tick, membership, and
metric summaries are published for readers.  Handlers on other threads
only ever read the latest snapshot or enqueue a command and wait for the
session thread to answer, so polling a session cannot change how the
simulation unfolds.

States move building -> running -> (paused <-> running) -> finished.
A command that is illegal in the current state is rejected when it is
submitted; nothing is queued silently.
"""

import queue
import secrets
import shutil
import tempfile
import threading
import time

from .churn import is_partitioned
from .engine import DISP_DELIVERED, PeerState
from .errors import (
    InvalidParams,
    SchemaError,
    SessionConflict,
    SimError,
    UnknownSession,
)
from .experiment import _build_plan, _LocalBackend, _run_workload, parse_config

ACTIVE_STATES = ("building", "running", "paused")

# wall-clock floor between consecutive batch events; commands, membership
# changes, and the finish always emit regardless
EMIT_INTERVAL = 0.025

COMMAND_TIMEOUT = 60.0


def plan_from_dict(body, default_seed):
    """Build a ChurnPlan from a request body shaped like a config plan."""
    if not isinstance(body, dict):
        raise SchemaError("plan", "must be a JSON object")
    if "trigger" in body:
        raise SchemaError("plan/trigger", "injected plans apply immediately")
    trigger = _build_plan({**body, "trigger": 0}, "plan", default_seed)
    return trigger.plan


def _summary_dict(s):
    return {"metric": s.name, "count": s.count, "min": s.min, "max": s.max,
            "mean": s.mean, "bucket_width": s.bucket_width,
            "histogram": [[b, f] for b, f in s.histogram]}


class _Command:
    """One queued control action, resolved by the session thread."""

    __slots__ = ("op", "plan", "done", "result", "exc")

    def __init__(self, op, plan=None):
        self.op = op
        self.plan = plan
        self.done = threading.Event()
        self.result = None
        self.exc = None

    def resolve(self, result):
        self.result = result
        self.done.set()

    def reject(self, exc):
        self.exc = exc
        self.done.set()


class _SessionBackend(_LocalBackend):
    """Local backend that hands control to the session at op boundaries.

    Injected churn can kill a node after the workload driver picked it as
    an origin; such operations are skipped instead of aborting the run.
    """

    def __init__(self, config, outdir, session):
        super().__init__(config, outdir)
        self._session = session

    def _origin_working(self, origin):
        eng = self.engine
        return eng.has_peer(origin) and eng.peer(origin).state == PeerState.WORKING

    def lookup(self, origin, key):
        self._session.boundary()
        if self._origin_working(origin):
            super().lookup(origin, key)

    def insert(self, origin, key, value):
        self._session.boundary()
        if self._origin_working(origin):
            super().insert(origin, key, value)

    def delete(self, origin, key):
        self._session.boundary()
        if self._origin_working(origin):
            super().delete(origin, key)

    def range_query(self, origin, lo, hi):
        self._session.boundary()
        if self._origin_working(origin):
            super().range_query(origin, lo, hi)

    def apply_plan(self, plan):
        # a plan scheduled by the config itself
        self._session.boundary()
        super().apply_plan(plan)
        self._session.membership_changed()

    def settle(self):
        self._session.boundary()
        super().settle()


class Session:
    """One experiment run on its own thread, steerable over a command queue."""

    def __init__(self, config):
        self.id = secrets.token_hex(8)
        self.config = config
        self.state = "building"
        self.status = None
        self.error = None
        self.digest = None
        self.rows = 0
        self._config_view = {
            "name": config.name,
            "network_size": config.network_size,
            "seed": config.seed,
            "protocol": {"name": config.protocol.name,
                         "fanout": config.protocol.fanout,
                         "key_bits": config.protocol.key_bits},
        }
        self._lock = threading.Lock()
        self._commands = queue.Queue()
        self._subscribers = []
        self._abort = False
        self._backend = None
        self._tmpdir = tempfile.mkdtemp(prefix="dpsim-session-")
        self._tick = 0
        self._delivered = 0
        self._working = ()
        self._contacts = {}
        self._summaries = {}
        self._emitted_delivered = 0
        self._emitted_tick = -1
        self._last_emit = 0.0
        # the view the creating request answers with; the run may progress
        # past "building" before that response is even serialized
        self.created_view = {"id": self.id, "state": "building", "tick": 0,
                             "live_nodes": 0, "config": self._config_view}
        self._thread = threading.Thread(target=self._main, daemon=True,
                                        name=f"session-{self.id}")
        self._thread.start()

    # -- views (any thread) ----------------------------------------------------

    def handle_view(self):
        with self._lock:
            view = {"id": self.id, "state": self.state, "tick": self._tick,
                    "live_nodes": len(self._working),
                    "config": self._config_view}
            if self.state == "finished":
                view.update(status=self.status, error=self.error,
                            digest=self.digest, rows=self.rows)
        return view

    def stats_view(self):
        with self._lock:
            return {"tick": self._tick, "summaries": self._summaries}

    def partitioned_view(self):
        with self._lock:
            tick, working, contacts = self._tick, self._working, self._contacts
        report = is_partitioned(working, lambda n: contacts.get(n, ()))
        return {"tick": tick, **report.to_json_dict()}

    def subscribe(self):
        q = queue.Queue()
        with self._lock:
            if self.state != "finished":
                self._subscribers.append(q)
                return q
        q.put(self._terminal_event())
        q.put(None)
        return q

    def unsubscribe(self, q):
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    # -- commands (any thread) ---------------------------------------------------

    def submit(self, op, plan=None):
        """Queue a command, wait for the session thread, return its answer."""
        cmd = _Command(op, plan)
        with self._lock:
            state = self.state
            if op == "churn" and state not in ("running", "paused"):
                raise SessionConflict(
                    f"churn needs a running or paused session, not {state}")
            if op == "pause" and state != "running":
                raise SessionConflict(f"cannot pause a {state} session")
            if op == "resume" and state != "paused":
                raise SessionConflict(f"cannot resume a {state} session")
            self._commands.put(cmd)
        if not cmd.done.wait(COMMAND_TIMEOUT):
            raise SimError(f"session {self.id} did not answer within "
                           f"{COMMAND_TIMEOUT:.0f} s")
        if cmd.exc is not None:
            raise cmd.exc
        return cmd.result

    def abort(self):
        """Ask the session thread to stop at its next boundary."""
        self._abort = True

    # -- session thread ----------------------------------------------------------

    def _main(self):
        try:
            backend = _SessionBackend(self.config, self._tmpdir, self)
            self._backend = backend
            backend.build()
            self._refresh(full=True)
            with self._lock:
                self.state = "running"
            self._emit_batch(force=True)
            _run_workload(self.config, backend)
            backend.finish(record_load=any(p.count for p in self.config.workload))
            self.status = "complete"
        except SimError as exc:
            self.status, self.error = "aborted", str(exc)
        except Exception as exc:  # defensive: keep the handle inspectable
            self.status, self.error = "aborted", f"{type(exc).__name__}: {exc}"
        finally:
            self._finalize()

    def boundary(self):
        """Called by the backend between operations, on the session thread."""
        if self._abort:
            raise SimError("session aborted")
        self._refresh()
        self._emit_batch()
        while True:
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                with self._lock:
                    paused = self.state == "paused"
                if not paused:
                    return
                try:
                    cmd = self._commands.get(timeout=0.1)
                except queue.Empty:
                    if self._abort:
                        raise SimError("session aborted")
                    continue
            self._dispatch(cmd)

    def membership_changed(self):
        self._refresh(full=True)
        self._emit_batch(force=True)

    def _dispatch(self, cmd):
        if cmd.op == "pause":
            if self.state != "running":
                cmd.reject(SessionConflict(f"cannot pause a {self.state} session"))
                return
            with self._lock:
                self.state = "paused"
            self._refresh(full=True)
            self._emit_batch(force=True)
            cmd.resolve({"state": "paused", "tick": self._tick})
        elif cmd.op == "resume":
            if self.state != "paused":
                cmd.reject(SessionConflict(f"cannot resume a {self.state} session"))
                return
            with self._lock:
                self.state = "running"
            cmd.resolve({"state": "running", "tick": self._tick})
        else:
            self._run_churn(cmd)

    def _run_churn(self, cmd):
        backend = self._backend
        tick = backend.engine.now
        before = len(backend.working_ids())
        try:
            _LocalBackend.apply_plan(backend, cmd.plan)
        except SimError as exc:
            cmd.reject(exc)
            return
        count = before - len(backend.working_ids())
        self._refresh(full=True)
        self._emit({"event": "churn", "tick": tick,
                    "kind": cmd.plan.kind, "count": count})
        self._emit_batch(force=True)
        cmd.resolve({"tick": tick, "kind": cmd.plan.kind, "count": count})

    def _finalize(self):
        backend = self._backend
        if backend is not None:
            try:
                self._refresh(full=True)
                self._emit_batch(force=True)
            except Exception:
                pass
            self.digest = backend.log.digest()
            self.rows = len(backend.log)
            backend.log.close()
        with self._lock:
            self.state = "finished"
            subscribers = list(self._subscribers)
            self._subscribers = []
        while True:
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                break
            cmd.reject(SessionConflict("session is finished"))
        event = self._terminal_event()
        for q in subscribers:
            q.put(event)
            q.put(None)
        shutil.rmtree(self._tmpdir, ignore_errors=True)

    def _terminal_event(self):
        return {"event": "finished", "tick": self._tick,
                "live_nodes": len(self._working), "status": self.status,
                "error": self.error, "digest": self.digest, "rows": self.rows,
                "delivered_total": self._delivered}

    # -- snapshots (session thread) ------------------------------------------------

    def _refresh(self, full=False):
        backend = self._backend
        tick = backend.engine.now
        delivered = backend.log.disposition_counts()[DISP_DELIVERED]
        if full:
            working = tuple(backend.working_ids())
            contacts = {nid: tuple(backend.overlay.contacts(nid))
                        for nid in working}
            summaries = {s.name: _summary_dict(s)
                         for s in backend.metrics.summaries()}
            with self._lock:
                self._tick, self._delivered = tick, delivered
                self._working, self._contacts = working, contacts
                self._summaries = summaries
        else:
            with self._lock:
                self._tick, self._delivered = tick, delivered

    def _emit_batch(self, force=False):
        now = time.monotonic()
        if not force and now - self._last_emit < EMIT_INTERVAL:
            return
        if self._tick == self._emitted_tick and \
                self._delivered == self._emitted_delivered:
            return
        if not force:
            summaries = {s.name: _summary_dict(s)
                         for s in self._backend.metrics.summaries()}
            with self._lock:
                self._summaries = summaries
        delta = self._delivered - self._emitted_delivered
        self._emit({"tick": self._tick, "delivered": delta,
                    "summaries": self._summaries})
        self._emitted_tick = self._tick
        self._emitted_delivered = self._delivered
        self._last_emit = now

    def _emit(self, event):
        with self._lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put(event)


class SessionRegistry:
    """Capacity-gated collection of sessions, keyed by opaque id."""

    def __init__(self, capacity=1):
        if capacity < 1:
            raise InvalidParams("capacity must be at least 1")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._sessions = {}

    def create(self, document):
        config = parse_config(document)
        if config.shards > 1:
            raise InvalidParams(
                "sessions run in one process; experiment/shards must be 0 or 1")
        with self._lock:
            active = sum(1 for s in self._sessions.values()
                         if s.state in ACTIVE_STATES)
            if active >= self.capacity:
                raise SessionConflict(
                    f"at capacity: {active} active of {self.capacity} allowed")
            session = Session(config)
            self._sessions[session.id] = session
        return session

    def get(self, session_id):
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(f"unknown session {session_id!r}")
        return session

    def close(self):
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.abort()
