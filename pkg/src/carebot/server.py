"""HTTP chat service over the engine.

Endpoints:
  POST /api/sessions                   create a session, returns the greeting
  POST /api/sessions/{id}/messages     one conversation turn
  GET  /api/health                     liveness + corpus counters
  POST /api/kb/reindex                 rebuild the snapshot from disk
  GET  /api/kb/stale                   staleness report
  /static/*                            fixture documents (pdf attachments)
"""

from __future__ import annotations

import json
import typing

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .engine import Engine, UnknownSessionError
from .text import Lang


class UTF8JSONResponse(JSONResponse):
    """JSON with raw UTF-8 so Arabic text round-trips byte-exactly."""

    def render(self, content: typing.Any) -> bytes:
        return json.dumps(content, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def create_app(engine: Engine | None) -> FastAPI:
    """Build the service; pass engine=None to test the not-ready path."""
    app = FastAPI(title="carebot", default_response_class=UTF8JSONResponse)
    app.state.engine = engine

    if engine is not None and engine.config.cors_origin:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=[engine.config.cors_origin],
            allow_methods=["*"],
            allow_headers=["*"],
        )
    if engine is not None and engine.config.static_dir is not None:
        app.mount("/static", StaticFiles(directory=str(engine.config.static_dir)), name="static")

    @app.exception_handler(RequestValidationError)
    async def malformed_body(_request: Request, exc: RequestValidationError):
        return UTF8JSONResponse({"error": "malformed request body", "detail": str(exc)}, status_code=400)

    def ready() -> Engine:
        if app.state.engine is None:
            raise ServiceNotReady()
        return app.state.engine

    class ServiceNotReady(Exception):
        pass

    @app.exception_handler(ServiceNotReady)
    async def not_ready(_request: Request, _exc: ServiceNotReady):
        return UTF8JSONResponse({"error": "service is still loading"}, status_code=503)

    @app.post("/api/sessions", status_code=201)
    async def create_session(request: Request):
        eng = ready()
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return UTF8JSONResponse({"error": "body must be JSON"}, status_code=400)
        if not isinstance(body, dict):
            return UTF8JSONResponse({"error": "body must be an object"}, status_code=400)
        language = body.get("language")
        lang: Lang | None = None
        if language is not None:
            try:
                lang = Lang.parse(language)
            except ValueError:
                return UTF8JSONResponse({"error": f"unsupported language {language!r}"}, status_code=400)
        session_id, greeting = eng.start_session(lang)
        return UTF8JSONResponse(
            {"session_id": session_id, "greeting": greeting[0].to_dict()}, status_code=201
        )

    @app.post("/api/sessions/{session_id}/messages")
    async def post_message(session_id: str, request: Request):
        eng = ready()
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return UTF8JSONResponse({"error": "body must be JSON"}, status_code=400)
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str) or not text.strip():
            return UTF8JSONResponse({"error": "text must be a non-empty string"}, status_code=400)
        try:
            payloads = eng.handle_message(session_id, text)
        except UnknownSessionError:
            return UTF8JSONResponse({"error": f"unknown session {session_id!r}"}, status_code=404)
        return {"responses": [p.to_dict() for p in payloads]}

    @app.get("/api/health")
    async def health():
        eng = ready()
        return {
            "status": "ok",
            "kb_entries": len(eng.kb.entries),
            "flows": len(eng.flows),
            "sessions": eng.session_count(),
        }

    @app.post("/api/kb/reindex", status_code=202)
    async def reindex():
        eng = ready()
        count = eng.reindex()
        return UTF8JSONResponse({"status": "accepted", "kb_entries": count}, status_code=202)

    @app.get("/api/kb/stale")
    async def stale(window_days: int | None = None):
        eng = ready()
        report = eng.stale_entries(window_days=window_days)
        return {"stale": [{"id": eid, "age_days": age} for eid, age in report]}

    return app


def serve(engine: Engine, host: str = "127.0.0.1", port: int = 8080) -> None:
    import uvicorn

    uvicorn.run(create_app(engine), host=host, port=port, log_level="info")
