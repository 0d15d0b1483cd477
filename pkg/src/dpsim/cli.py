"""Command-line front end.

Exit codes: 0 run(s) complete, 2 degraded (a worker was lost), 3 aborted
(simulation error), 4 config error (unreadable or schema-invalid input).
Batch mode runs every config it finds and reports the worst outcome.
"""

import argparse
import sys
from pathlib import Path

from . import experiment
from .errors import InvalidParams, SchemaError, SimError

_EXIT = {"complete": 0, "degraded": 2, "aborted": 3}


def _report(result):
    print(f"{result.name}: {result.status} wall={result.wall_time:.2f}s "
          f"live={result.live_nodes} out={result.output_dir}")
    if result.error:
        print(f"{result.name}: {result.error}", file=sys.stderr)


def _cmd_run(args):
    try:
        cfg = experiment.parse_config(Path(args.config).read_text())
    except (OSError, SchemaError, InvalidParams) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    if args.output:
        cfg.output_path = args.output
    workers = args.workers.split(",") if args.workers else None
    try:
        result = experiment.run(cfg, workers=workers)
    except InvalidParams as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    _report(result)
    return _EXIT[result.status]


def _cmd_worker(args):
    from .dist import serve_worker

    host, _, port = args.listen.rpartition(":")
    if not host or not port.isdigit():
        print(f"config error: --listen {args.listen!r} is not host:port",
              file=sys.stderr)
        return 4

    def announce(bound_host, bound_port):
        print(f"listening {bound_host}:{bound_port}", flush=True)

    serve_worker(host, int(port), on_listen=announce)
    return 0


def _cmd_serve(args):
    import uvicorn

    from .api import create_app

    uvicorn.run(create_app(capacity=args.capacity), host=args.host,
                port=args.port, log_level="warning")
    return 0


def _cmd_batch(args):
    root = Path(args.directory)
    if not root.is_dir():
        print(f"config error: {root} is not a directory", file=sys.stderr)
        return 4
    files = sorted(p for p in root.iterdir() if p.suffix in (".xml", ".json"))
    if not files:
        print(f"config error: no .xml or .json configs under {root}",
              file=sys.stderr)
        return 4
    worst = 0
    for path in files:
        try:
            cfg = experiment.parse_config(path.read_text())
        except (OSError, SchemaError, InvalidParams) as exc:
            print(f"{path.name}: aborted ({exc})", file=sys.stderr)
            worst = max(worst, _EXIT["aborted"])
            continue
        result = experiment.run(cfg)
        _report(result)
        worst = max(worst, _EXIT[result.status])
    return worst


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dpsim",
        description="Discrete-event simulator for structured P2P overlays.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment config (XML or JSON)")
    run_p.add_argument("config", help="path to the config document")
    run_p.add_argument("--output", help="override the config's output directory")
    run_p.add_argument("--workers",
                       help="comma-separated worker addresses to shard the run across")
    run_p.set_defaults(func=_cmd_run)

    batch_p = sub.add_parser("batch", help="run every config in a directory")
    batch_p.add_argument("directory", help="directory of .xml/.json configs")
    batch_p.set_defaults(func=_cmd_batch)

    worker_p = sub.add_parser("worker",
                              help="serve one sharded run as a worker process")
    worker_p.add_argument("--listen", default="127.0.0.1:0",
                          help="host:port to bind (port 0 picks a free port)")
    worker_p.set_defaults(func=_cmd_worker)

    serve_p = sub.add_parser("serve",
                             help="serve the HTTP control API for live sessions")
    serve_p.add_argument("--host", default="127.0.0.1", help="bind address")
    serve_p.add_argument("--port", type=int, default=8000, help="bind port")
    serve_p.add_argument("--capacity", type=int, default=1,
                         help="concurrently active sessions allowed")
    serve_p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
