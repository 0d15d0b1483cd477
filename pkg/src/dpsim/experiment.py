"""Experiment configs, the single-run pipeline, and batch scheduling.

A config arrives as an XML document (the normative form) or as a JSON
equivalent with the same field names.  Both are normalized into plain
dict/list/scalar trees and fed through one builder, so schema errors carry
the same element paths regardless of the input form.

The distribution block mirrors the shape used for workload and churn
sampling setups::

    <distribution>
      <random><seed>1</seed></random>
      <beta><alpha>2.0</alpha><beta>4.0</beta></beta>
      <powerLaw><alpha>0.5</alpha><beta>1.0</beta></powerLaw>
    </distribution>

A block may declare several kinds where it serves as a palette (directly
under <experiment>); where a single stream is drawn from it (workload
operations, churn plans, node-id assignment) it must declare exactly one.
"""

from __future__ import annotations

import json
import os
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace

from .churn import ChurnPlan, depart, fail, is_partitioned
from .distributions import DistributionSpec, Sampler, SplitMix64
from .engine import (
    DISP_DELIVERED,
    DISP_PENDING,
    DISP_RECEIVER_DOWN,
    DISP_UNDELIVERABLE,
    MessageKind,
    MessageLog,
    NetworkModel,
    PeerState,
)
from .errors import InvalidParams, NoEligibleNode, SchemaError, SimError, WorkerUnreachable
from .protocols import ProtocolSpec, make_overlay
from .stats import MetricRegistry

RUNNABLE_PROTOCOLS = ("dummy", "chord", "baton_star")
OP_KINDS = ("lookup", "insert", "delete", "range")

# XML element name -> DistributionSpec kind, in canonical emission order
_KIND_NAMES = {"uniform": "uniform", "normal": "normal", "beta": "beta",
               "weibull": "weibull", "powerLaw": "powerlaw"}
_KIND_TO_XML = {v: k for k, v in _KIND_NAMES.items()}
_DIST_PARAMS = {"uniform": ("lo", "hi"), "normal": ("mu", "sigma"),
                "beta": ("alpha", "beta"), "weibull": ("shape", "scale"),
                "powerlaw": ("alpha", "beta")}
_DIST_POSITIVE = {"normal": ("sigma",), "beta": ("alpha", "beta"),
                  "weibull": ("shape", "scale"), "powerlaw": ("alpha", "beta")}

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@dataclass
class WorkloadPhase:
    kind: str
    count: int
    keys: DistributionSpec | None = None
    span: int = 0


@dataclass
class ChurnTrigger:
    tick: int
    plan: ChurnPlan


@dataclass
class ExperimentConfig:
    protocol: ProtocolSpec
    network_size: int
    seed: int = 0
    name: str = ""
    output_path: str = ""
    workload: list = field(default_factory=list)
    churn: list = field(default_factory=list)
    network: NetworkModel = field(default_factory=NetworkModel)
    distributions: dict = field(default_factory=dict)
    node_ids: DistributionSpec | None = None
    shards: int = 0


@dataclass
class ExperimentResult:
    name: str
    status: str
    wall_time: float
    config: ExperimentConfig
    summaries: dict
    log_digest: str
    log_rows: int
    live_nodes: int
    output_dir: str | None
    error: str | None = None


# -- document normalization ----------------------------------------------------------

def _dictify(elem, path):
    """Collapse an XML element into nested dicts; repeated tags become lists."""
    if elem.attrib:
        raise SchemaError(path, "attributes are not allowed")
    kids = list(elem)
    if not kids:
        return (elem.text or "").strip()
    repeated = {}
    for k in kids:
        repeated[k.tag] = repeated.get(k.tag, 0) + 1
    out = {}
    for k in kids:
        value = _dictify(k, f"{path}/{k.tag}")
        if repeated[k.tag] > 1:
            out.setdefault(k.tag, []).append(value)
        else:
            out[k.tag] = value
    return out


def _document_tree(document):
    text = document.lstrip()
    if text.startswith("<"):
        try:
            root = ET.fromstring(document)
        except ET.ParseError as exc:
            raise SchemaError("experiment", f"malformed XML: {exc}") from exc
        if root.tag != "experiment":
            raise SchemaError(root.tag, "root element must be <experiment>")
        return _dictify(root, "experiment")
    try:
        tree = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError("experiment", f"malformed JSON: {exc}") from exc
    return tree


# -- leaf coercion -------------------------------------------------------------------

def _as_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise SchemaError(path, f"expected an integer, got {value!r}")
    try:
        out = int(value)
    except ValueError:
        raise SchemaError(path, f"not an integer: {value!r}") from None
    if minimum is not None and out < minimum:
        raise SchemaError(path, f"must be >= {minimum}")
    return out


def _as_float(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise SchemaError(path, f"expected a number, got {value!r}")
    try:
        return float(value)
    except ValueError:
        raise SchemaError(path, f"not a number: {value!r}") from None


def _as_str(value, path):
    if not isinstance(value, str) or not value:
        raise SchemaError(path, "expected non-empty text")
    return value


def _require(d, key, path):
    if key not in d:
        raise SchemaError(f"{path}/{key}", "required element missing")
    return d.pop(key)


def _reject_unknown(d, path):
    if d:
        raise SchemaError(f"{path}/{next(iter(d))}", "unknown element")


def _section(value, path):
    if not isinstance(value, dict):
        raise SchemaError(path, "expected child elements")
    return dict(value)


def _item_list(value, item_tag, path):
    """Accept <wrapper><item/>... </wrapper> dictified form or a plain list."""
    if isinstance(value, list):
        items = value
    elif isinstance(value, dict):
        d = dict(value)
        items = d.pop(item_tag, [])
        _reject_unknown(d, path)
        if not isinstance(items, list):
            items = [items]
    else:
        raise SchemaError(path, f"expected a list of <{item_tag}> elements")
    label = f"{path}/{item_tag}"
    if len(items) <= 1:
        return [(label, it) for it in items]
    return [(f"{label}[{i}]", it) for i, it in enumerate(items, start=1)]


# -- distribution blocks --------------------------------------------------------------

def _build_distributions(value, path, default_seed=0):
    d = _section(value, path)
    seed = default_seed
    rnd = d.pop("random", None)
    if rnd is not None:
        r = _section(rnd, f"{path}/random")
        seed = _as_int(_require(r, "seed", f"{path}/random"), f"{path}/random/seed")
        _reject_unknown(r, f"{path}/random")
    specs = {}
    for xml_kind, kind in _KIND_NAMES.items():
        block = d.pop(xml_kind, None)
        if block is None:
            continue
        bpath = f"{path}/{xml_kind}"
        b = _section(block, bpath)
        params = {}
        for name in _DIST_PARAMS[kind]:
            if name not in b:
                raise SchemaError(bpath, f"missing parameter {name!r}")
            params[name] = _as_float(b.pop(name), f"{bpath}/{name}")
            if name in _DIST_POSITIVE.get(kind, ()) and not params[name] > 0:
                raise SchemaError(f"{bpath}/{name}", f"{name} must be > 0")
        _reject_unknown(b, bpath)
        if kind == "uniform" and not params["lo"] <= params["hi"]:
            raise SchemaError(bpath, "requires lo <= hi")
        specs[kind] = DistributionSpec(kind, params, seed).validate()
    _reject_unknown(d, path)
    if not specs:
        raise SchemaError(path, "no distribution kind declared")
    return specs


def _single_distribution(value, path, default_seed=0):
    specs = _build_distributions(value, path, default_seed)
    if len(specs) != 1:
        raise SchemaError(path, "exactly one distribution kind expected here")
    return next(iter(specs.values()))


def parse_distributions(document, default_seed=0):
    """Parse a standalone distribution block into specs keyed by kind."""
    text = document.lstrip()
    if text.startswith("<"):
        try:
            root = ET.fromstring(document)
        except ET.ParseError as exc:
            raise SchemaError("distribution", f"malformed XML: {exc}") from exc
        if root.tag != "distribution":
            raise SchemaError(root.tag, "root element must be <distribution>")
        tree = _dictify(root, "distribution")
    else:
        tree = json.loads(document)
    return _build_distributions(tree, "distribution", default_seed)


# -- config sections ------------------------------------------------------------------

def _build_protocol(value, path):
    d = _section(value, path)
    name = _as_str(_require(d, "name", path), f"{path}/name")
    if name not in RUNNABLE_PROTOCOLS:
        raise SchemaError(f"{path}/name", f"unknown protocol {name!r}")
    fanout = _as_int(d.pop("fanout", 2), f"{path}/fanout")
    key_bits = _as_int(d.pop("keyBits", 32), f"{path}/keyBits")
    _reject_unknown(d, path)
    try:
        return ProtocolSpec(name, fanout=fanout, key_bits=key_bits).validate()
    except InvalidParams as exc:
        raise SchemaError(path, str(exc)) from exc


def _build_network(value, path, seed):
    d = _section(value, path)
    model = NetworkModel(
        base_latency=_as_int(d.pop("baseLatency", 1), f"{path}/baseLatency", minimum=1),
        background_traffic_rate=_as_int(d.pop("backgroundTraffic", 0),
                                        f"{path}/backgroundTraffic", minimum=0),
        queue_cap=_as_int(d.pop("queueCap", 2 ** 16), f"{path}/queueCap", minimum=1),
        seed=seed)
    _reject_unknown(d, path)
    return model.validate()


def _build_phase(value, path, default_seed):
    d = _section(value, path)
    kind = _as_str(_require(d, "kind", path), f"{path}/kind")
    if kind not in OP_KINDS:
        raise SchemaError(f"{path}/kind", f"unknown operation kind {kind!r}")
    count = _as_int(_require(d, "count", path), f"{path}/count", minimum=0)
    span = 0
    if "span" in d:
        span = _as_int(d.pop("span"), f"{path}/span", minimum=0)
        if kind != "range":
            raise SchemaError(f"{path}/span", "span only applies to range operations")
    keys = None
    if "distribution" in d:
        keys = _single_distribution(d.pop("distribution"), f"{path}/distribution",
                                    default_seed)
    _reject_unknown(d, path)
    return WorkloadPhase(kind, count, keys, span)


def _build_ids(value, path):
    if isinstance(value, str):
        tokens = value.split()
    elif isinstance(value, dict):
        d = dict(value)
        tokens = d.pop("id", [])
        _reject_unknown(d, path)
        if not isinstance(tokens, list):
            tokens = [tokens]
    elif isinstance(value, list):
        tokens = value
    else:
        raise SchemaError(path, "expected a list of node ids")
    if not tokens:
        raise SchemaError(path, "expected at least one node id")
    return [_as_int(t, path, minimum=0) for t in tokens]


def _build_node_ids(value, path, default_seed, network_size):
    """Node-id assignment: a distribution block, or an explicit id list."""
    dist_form = isinstance(value, dict) and "id" not in value
    if dist_form:
        return _single_distribution(value, path, default_seed)
    ids = _build_ids(value, path)
    if len(ids) != network_size:
        raise SchemaError(path, f"expected networkSize ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise SchemaError(path, "node ids must be distinct")
    return ids


def _build_plan(value, path, default_seed):
    d = _section(value, path)
    tick = _as_int(_require(d, "trigger", path), f"{path}/trigger", minimum=0)
    kind = _as_str(_require(d, "kind", path), f"{path}/kind")
    if kind not in ("failure", "departure"):
        raise SchemaError(f"{path}/kind", f"unknown churn kind {kind!r}")
    mode = _as_str(d.pop("mode", "concurrent"), f"{path}/mode")
    if mode not in ("concurrent", "sequential"):
        raise SchemaError(f"{path}/mode", f"unknown churn mode {mode!r}")
    ids = fraction = None
    if "ids" in d:
        ids = _build_ids(d.pop("ids"), f"{path}/ids")
    if "fraction" in d:
        fraction = _as_float(d.pop("fraction"), f"{path}/fraction")
        if not 0.0 < fraction <= 1.0:
            raise SchemaError(f"{path}/fraction", "must lie in (0, 1]")
    if (ids is None) == (fraction is None):
        raise SchemaError(path, "exactly one of ids or fraction must be given")
    dist = None
    if "distribution" in d:
        dist = _single_distribution(d.pop("distribution"), f"{path}/distribution",
                                    default_seed)
    _reject_unknown(d, path)
    return ChurnTrigger(tick, ChurnPlan(kind, mode=mode, ids=ids,
                                        fraction=fraction, distribution=dist))


_TOP_KEYS = ("name", "protocol", "networkSize", "seed", "output", "network",
             "distribution", "nodeIds", "workload", "churn", "shards")


def parse_config(document):
    """Parse an XML or JSON experiment document into an ExperimentConfig."""
    tree = _document_tree(document)
    path = "experiment"
    d = _section(tree, path)
    for key in d:
        if key not in _TOP_KEYS:
            raise SchemaError(f"{path}/{key}", "unknown element")

    protocol = _build_protocol(_require(d, "protocol", path), f"{path}/protocol")
    network_size = _as_int(_require(d, "networkSize", path),
                           f"{path}/networkSize", minimum=1)
    seed = _as_int(d.pop("seed", 0), f"{path}/seed")
    name = d.pop("name", "")
    if name != "":
        name = _as_str(name, f"{path}/name")
    else:
        name = f"{protocol.name}-{network_size}"
    output = d.pop("output", "")
    if output != "":
        output = _as_str(output, f"{path}/output")
    else:
        output = os.path.join("runs", name)

    network = (_build_network(d.pop("network"), f"{path}/network", seed)
               if "network" in d else NetworkModel(seed=seed))
    palette = (_build_distributions(d.pop("distribution"), f"{path}/distribution", seed)
               if "distribution" in d else {})
    node_ids = (_build_node_ids(d.pop("nodeIds"), f"{path}/nodeIds",
                                seed, network_size)
                if "nodeIds" in d else None)

    workload = [_build_phase(item, ipath, seed)
                for ipath, item in _item_list(d.pop("workload", []), "operation",
                                              f"{path}/workload")]
    churn = []
    for ipath, item in _item_list(d.pop("churn", []), "plan", f"{path}/churn"):
        trig = _build_plan(item, ipath, seed)
        if churn and trig.tick < churn[-1].tick:
            raise SchemaError(f"{ipath}/trigger", "triggers must not decrease")
        churn.append(trig)

    shards = 0
    if "shards" in d:
        s = _section(d.pop("shards"), f"{path}/shards")
        shards = _as_int(_require(s, "workers", f"{path}/shards"),
                         f"{path}/shards/workers", minimum=0)
        _reject_unknown(s, f"{path}/shards")
    _reject_unknown(d, path)

    return ExperimentConfig(protocol=protocol, network_size=network_size,
                            seed=seed, name=name, output_path=output,
                            workload=workload, churn=churn, network=network,
                            distributions=palette, node_ids=node_ids,
                            shards=shards)


# -- serialization --------------------------------------------------------------------

def _dist_block_dict(specs):
    seeds = {s.seed for s in specs.values()}
    if len(seeds) != 1:
        raise InvalidParams("distribution block entries must share one seed")
    out = {"random": {"seed": seeds.pop()}}
    for kind in _DIST_PARAMS:
        if kind in specs:
            params = specs[kind].params
            out[_KIND_TO_XML[kind]] = {p: params[p] for p in _DIST_PARAMS[kind]}
    return out


def _config_to_dict(cfg):
    doc = {
        "name": cfg.name,
        "protocol": {"name": cfg.protocol.name, "fanout": cfg.protocol.fanout,
                     "keyBits": cfg.protocol.key_bits},
        "networkSize": cfg.network_size,
        "seed": cfg.seed,
        "output": cfg.output_path,
        "network": {"baseLatency": cfg.network.base_latency,
                    "backgroundTraffic": cfg.network.background_traffic_rate,
                    "queueCap": cfg.network.queue_cap},
    }
    if cfg.distributions:
        doc["distribution"] = _dist_block_dict(cfg.distributions)
    if isinstance(cfg.node_ids, list):
        doc["nodeIds"] = list(cfg.node_ids)
    elif cfg.node_ids is not None:
        doc["nodeIds"] = _dist_block_dict({cfg.node_ids.kind: cfg.node_ids})
    if cfg.workload:
        ops = []
        for phase in cfg.workload:
            op = {"kind": phase.kind, "count": phase.count}
            if phase.span:
                op["span"] = phase.span
            if phase.keys is not None:
                op["distribution"] = _dist_block_dict({phase.keys.kind: phase.keys})
            ops.append(op)
        doc["workload"] = ops
    if cfg.churn:
        plans = []
        for trig in cfg.churn:
            plan = {"trigger": trig.tick, "kind": trig.plan.kind,
                    "mode": trig.plan.mode}
            if trig.plan.ids is not None:
                plan["ids"] = list(trig.plan.ids)
            else:
                plan["fraction"] = trig.plan.fraction
            if trig.plan.distribution is not None:
                plan["distribution"] = _dist_block_dict(
                    {trig.plan.distribution.kind: trig.plan.distribution})
            plans.append(plan)
        doc["churn"] = plans
    if cfg.shards:
        doc["shards"] = {"workers": cfg.shards}
    return doc


def _xml_append(parent, tag, value):
    elem = ET.SubElement(parent, tag)
    if isinstance(value, dict):
        for k, v in value.items():
            _xml_append(elem, k, v)
    elif isinstance(value, list):
        # only node-id lists reach here; operation/plan lists are special-cased
        elem.text = " ".join(str(v) for v in value)
    else:
        elem.text = str(value)
    return elem


def serialize_config(cfg, form="xml"):
    """Render a config as XML (normative) or the equivalent JSON form."""
    doc = _config_to_dict(cfg)
    if form == "json":
        return json.dumps(doc, indent=2) + "\n"
    if form != "xml":
        raise InvalidParams(f"unknown config form {form!r}")
    root = ET.Element("experiment")
    for key, value in doc.items():
        if key == "workload":
            wrap = ET.SubElement(root, "workload")
            for op in value:
                _xml_append(wrap, "operation", op)
        elif key == "churn":
            wrap = ET.SubElement(root, "churn")
            for plan in value:
                _xml_append(wrap, "plan", plan)
        else:
            _xml_append(root, key, value)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


# -- the run pipeline -----------------------------------------------------------------

def _derived_seed(base, salt):
    return SplitMix64((base ^ (salt * _GOLDEN)) & _MASK64).next_u64()


def _draw_node_ids(cfg):
    if cfg.node_ids is None:
        return None
    if isinstance(cfg.node_ids, list):
        return list(cfg.node_ids)
    sampler = Sampler(cfg.node_ids)
    seen, out = set(), []
    budget = cfg.network_size * 64
    while len(out) < cfg.network_size and budget:
        key = sampler.draw_key(cfg.protocol.key_bits)
        if key not in seen:
            seen.add(key)
            out.append(key)
        budget -= 1
    if len(out) < cfg.network_size:
        raise InvalidParams("node id space too small for the requested network size")
    return out


def _apply_plan(overlay, plan, metrics):
    if plan.kind == "failure":
        fail(overlay.engine, plan)
        return
    report = depart(overlay, plan)
    for hops in report.replacement_hops.values():
        metrics.record("replacement_hops", hops)


def _phase_sampler(cfg, phase, index):
    if phase.keys is not None:
        return Sampler(phase.keys)
    if len(cfg.distributions) == 1:
        return Sampler(next(iter(cfg.distributions.values())))
    spec = DistributionSpec("uniform", {"lo": 0.0, "hi": 1.0},
                            seed=_derived_seed(cfg.seed, index + 1))
    return Sampler(spec)


def _run_workload(cfg, backend):
    origin_rng = SplitMix64(_derived_seed(cfg.seed, 0))
    base_tick = backend.now
    live = backend.working_ids()
    pending = list(cfg.churn)
    next_plan = 0

    def fire_due(force=False):
        nonlocal next_plan, live
        fired = False
        while next_plan < len(pending) and (
                force or backend.now - base_tick >= pending[next_plan].tick):
            backend.apply_plan(pending[next_plan].plan)
            next_plan += 1
            fired = True
        if fired:
            live = backend.working_ids()

    bits = cfg.protocol.key_bits
    space = cfg.protocol.key_space
    for index, phase in enumerate(cfg.workload):
        sampler = _phase_sampler(cfg, phase, index)
        for _ in range(phase.count):
            fire_due()
            if not live:
                raise NoEligibleNode("no WORKING nodes remain")
            origin = live[origin_rng.next_below(len(live))]
            key = sampler.draw_key(bits)
            if phase.kind == "lookup":
                backend.lookup(origin, key)
            elif phase.kind == "insert":
                backend.insert(origin, key, key)
            elif phase.kind == "delete":
                backend.delete(origin, key)
            else:
                backend.range_query(origin, key, min(key + phase.span, space - 1))
    fire_due(force=True)
    backend.settle()


def _working_ids(engine):
    return sorted(p.id for p in engine.peers() if p.state == PeerState.WORKING)


_DISP_NAMES = {DISP_PENDING: "pending", DISP_DELIVERED: "delivered",
               DISP_UNDELIVERABLE: "undeliverable",
               DISP_RECEIVER_DOWN: "receiver_down"}


class _LocalBackend:
    """In-process execution: one engine holds every node."""

    def __init__(self, config, outdir):
        self.config = config
        self.outdir = outdir
        self._spill = os.path.join(outdir, "messages.spill")
        self.metrics = MetricRegistry()
        self.log = MessageLog(spill_path=self._spill)
        self.overlay = make_overlay(config.protocol, model=replace(config.network),
                                    metrics=self.metrics, log=self.log)
        self.engine = self.overlay.engine
        self._mark = 0

    @property
    def now(self):
        return self.engine.now

    def working_ids(self):
        return _working_ids(self.engine)

    def build(self):
        self.overlay.build(self.config.network_size,
                           ids=_draw_node_ids(self.config))
        self._mark = len(self.log)

    def lookup(self, origin, key):
        self.overlay.lookup(origin, key)

    def insert(self, origin, key, value):
        self.overlay.insert(origin, key, value)

    def delete(self, origin, key):
        self.overlay.delete(origin, key)

    def range_query(self, origin, lo, hi):
        self.overlay.range_query(origin, lo, hi)

    def apply_plan(self, plan):
        _apply_plan(self.overlay, plan, self.metrics)

    def settle(self):
        self.engine.run_until_quiescent()
        self.overlay.collect()

    def finish(self, record_load):
        live = _working_ids(self.engine)
        if record_load:
            received = self.log.receiver_counts(start=self._mark)
            for nid in live:
                self.metrics.record("msgs_per_node", received.get(nid, 0))
        for nid in live:
            self.metrics.record("table_length", len(self.overlay.routing_table(nid)))

    def partitioned(self):
        return is_partitioned(_working_ids(self.engine),
                              self.overlay.contacts).partitioned

    def export(self):
        log = self.log
        live_nodes = len(_working_ids(self.engine))
        summaries = {s.name: s for s in self.metrics.summaries()}
        facts = {
            "rows": len(log),
            "digest": log.digest(),
            "kinds": {k.name: log.count(k) for k in MessageKind if log.count(k)},
            "dispositions": {_DISP_NAMES[c]: n
                             for c, n in log.disposition_counts().items() if n},
            "overflow_drops": log.overflow_drops,
        }
        outdir = self.outdir
        with open(os.path.join(outdir, "stats.csv"), "w") as main, \
                open(os.path.join(outdir, "histogram.csv"), "w") as hist:
            self.metrics.write_csv(main, hist)
        with open(os.path.join(outdir, "stats.jsonl"), "w") as out:
            self.metrics.write_jsonl(out)
        with open(os.path.join(outdir, "messages.log"), "w") as out:
            log.export(out)
        log.close()
        if os.path.exists(self._spill):
            os.remove(self._spill)
        artifacts = ["stats.csv", "histogram.csv", "stats.jsonl", "messages.log"]
        return live_nodes, summaries, facts, artifacts

    def close(self):
        pass


def run(config, workers=None):
    """Build the overlay, execute workload and churn, export artifacts.

    With worker addresses the run is sharded across those processes and the
    artifacts are merged back; the schedule, every seeded draw, and the
    output formats stay the same either way.  Simulation-level errors land
    in the result status (aborted/degraded) rather than raising, so batches
    keep going; malformed setups and unreachable workers raise.
    """
    started = time.monotonic()
    outdir = config.output_path
    os.makedirs(outdir, exist_ok=True)
    if workers:
        from .dist import ClusterBackend
        backend = ClusterBackend(config, list(workers), outdir)
    else:
        if config.shards > 1:
            raise InvalidParams(
                f"config declares {config.shards} shards; "
                "pass matching worker addresses")
        backend = _LocalBackend(config, outdir)

    status, error, partitioned = "complete", None, None
    try:
        backend.build()
        _run_workload(config, backend)
        backend.finish(record_load=any(p.count for p in config.workload))
        if config.churn:
            partitioned = backend.partitioned()
    except WorkerUnreachable as exc:
        status, error = "degraded", str(exc)
    except SimError as exc:
        status, error = "aborted", str(exc)

    live_nodes, summaries, logfacts, artifacts = backend.export()
    backend.close()

    wall = time.monotonic() - started
    manifest = {
        "name": config.name,
        "status": status,
        "error": error,
        "wall_time": round(wall, 6),
        "seed": config.seed,
        "protocol": {"name": config.protocol.name,
                     "fanout": config.protocol.fanout,
                     "key_bits": config.protocol.key_bits},
        "network_size": config.network_size,
        "live_nodes": live_nodes,
        "partitioned": partitioned,
        "log": logfacts,
        "artifacts": artifacts,
        "config": _config_to_dict(config),
    }
    if workers:
        manifest["workers"] = list(workers)
    with open(os.path.join(outdir, "manifest.json"), "w") as out:
        json.dump(manifest, out, indent=2, sort_keys=True)
        out.write("\n")

    return ExperimentResult(name=config.name, status=status, wall_time=wall,
                            config=config, summaries=summaries,
                            log_digest=logfacts["digest"], log_rows=logfacts["rows"],
                            live_nodes=live_nodes, output_dir=outdir, error=error)


def schedule(configs):
    """Run configs sequentially; one failing item never stops the batch."""
    if not configs:
        raise InvalidParams("schedule() requires at least one config")
    results = []
    for cfg in configs:
        try:
            results.append(run(cfg))
        except Exception as exc:  # defensive: run() embeds SimErrors itself
            results.append(ExperimentResult(
                name=getattr(cfg, "name", "?"), status="aborted", wall_time=0.0,
                config=cfg, summaries={}, log_digest="", log_rows=0,
                live_nodes=0, output_dir=None, error=str(exc)))
    return results
