"""HTTP control surface over interactive sessions.

One FastAPI app per server process.  POST /experiments starts a session
from a config document (XML or JSON, same schema as the CLI); the other
routes steer or observe it.  Mutating commands funnel through the
session's command queue and apply at tick boundaries; GETs serve the
latest immutable snapshot, so reads never change how a run unfolds.

Error mapping: malformed configs 400, unknown sessions 404, capacity or
wrong-state commands 409, invalid churn plans 422.  Every error body is
{"error": "<message>"}.  All response keys are lower_snake_case; see
docs/api.md for the full reference.
"""

import json
import queue
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse
from starlette.concurrency import run_in_threadpool

from .errors import (
    InvalidParams,
    SchemaError,
    SessionConflict,
    SimError,
    UnknownSession,
)
from .session import SessionRegistry, plan_from_dict

# SSE comment line cadence while a session is idle (paused, long build)
KEEPALIVE_SECONDS = 15.0


def _error(status, exc):
    return JSONResponse({"error": str(exc)}, status_code=status)


def create_app(capacity=1):
    """Build the ASGI app; `capacity` caps concurrently active sessions."""
    registry = SessionRegistry(capacity)

    @asynccontextmanager
    async def lifespan(app):
        yield
        registry.close()

    app = FastAPI(title="dpsim control surface", lifespan=lifespan,
                  docs_url=None, redoc_url=None, openapi_url=None)

    @app.post("/experiments", status_code=201)
    async def create_experiment(request: Request):
        document = (await request.body()).decode("utf-8", errors="replace")
        try:
            session = registry.create(document)
        except (SchemaError, InvalidParams) as exc:
            return _error(400, exc)
        except SessionConflict as exc:
            return _error(409, exc)
        return session.created_view

    @app.get("/experiments/{session_id}")
    def get_handle(session_id: str):
        try:
            return registry.get(session_id).handle_view()
        except UnknownSession as exc:
            return _error(404, exc)

    @app.get("/experiments/{session_id}/stats")
    def get_stats(session_id: str):
        try:
            return registry.get(session_id).stats_view()
        except UnknownSession as exc:
            return _error(404, exc)

    @app.get("/experiments/{session_id}/partitioned")
    def get_partitioned(session_id: str):
        try:
            return registry.get(session_id).partitioned_view()
        except UnknownSession as exc:
            return _error(404, exc)

    @app.post("/experiments/{session_id}/churn", status_code=202)
    async def inject_churn(session_id: str, request: Request):
        try:
            session = registry.get(session_id)
        except UnknownSession as exc:
            return _error(404, exc)
        raw = await request.body()
        try:
            body = json.loads(raw.decode("utf-8", errors="replace") or "null")
        except json.JSONDecodeError as exc:
            return _error(422, SchemaError("plan", f"not valid JSON: {exc}"))
        try:
            plan = plan_from_dict(body, session.config.seed)
        except (SchemaError, InvalidParams) as exc:
            return _error(422, exc)
        try:
            return await run_in_threadpool(session.submit, "churn", plan)
        except SessionConflict as exc:
            return _error(409, exc)
        except SimError as exc:
            return _error(422, exc)

    @app.post("/experiments/{session_id}/pause")
    def pause(session_id: str):
        return _lifecycle(session_id, "pause")

    @app.post("/experiments/{session_id}/resume")
    def resume(session_id: str):
        return _lifecycle(session_id, "resume")

    def _lifecycle(session_id, op):
        try:
            session = registry.get(session_id)
        except UnknownSession as exc:
            return _error(404, exc)
        try:
            return session.submit(op)
        except SessionConflict as exc:
            return _error(409, exc)
        except SimError as exc:
            return _error(500, exc)

    @app.get("/experiments/{session_id}/events")
    def events(session_id: str):
        try:
            session = registry.get(session_id)
        except UnknownSession as exc:
            return _error(404, exc)
        stream = session.subscribe()

        def gen():
            try:
                while True:
                    try:
                        item = stream.get(timeout=KEEPALIVE_SECONDS)
                    except queue.Empty:
                        yield ": keep-alive\n\n"
                        continue
                    if item is None:
                        return
                    yield f"data: {json.dumps(item, sort_keys=True)}\n\n"
            finally:
                session.unsubscribe(stream)

        return StreamingResponse(gen(), media_type="text/event-stream")

    return app
