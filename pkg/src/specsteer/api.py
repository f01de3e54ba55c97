"""HTTP + websocket transport over the session protocol.

Endpoints cover the session lifecycle (create, snapshot, provenance download)
and a websocket channel carrying the JSON message protocol; every websocket
connection is auto-subscribed so ranked sandbox_ready pushes with delta
payloads arrive interleaved with command responses.
"""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles

from .corpus import CorpusError
from .engine import SpeculationConfig
from .service import ProtocolError, SessionManager, decode_message, encode_message

logger = logging.getLogger(__name__)


def create_app(
    manager: SessionManager | None = None, frontend_dir: str | Path | None = None
) -> FastAPI:
    app = FastAPI(title="specsteer")
    app.state.manager = manager or SessionManager()

    @app.post("/sessions")
    def create_session(body: dict):
        corpus_path = body.get("corpus_path")
        if not corpus_path:
            raise HTTPException(status_code=400, detail="corpus_path required")
        config = None
        if body.get("config"):
            try:
                config = SpeculationConfig.from_dict(body["config"])
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
        try:
            session = app.state.manager.create_session(
                corpus_path, config, log_path=body.get("log_path")
            )
        except (CorpusError, RuntimeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {
            "session_id": session.session_id,
            "k": session.stats.k,
            "digest": session.main_state.digest(),
        }

    @app.get("/sessions")
    def list_sessions():
        return {
            "sessions": [
                {"session_id": sid, "digest": s.main_state.digest()}
                for sid, s in app.state.manager.sessions.items()
            ]
        }

    @app.get("/sessions/{session_id}/snapshot")
    def snapshot(session_id: str):
        return _session(app, session_id).snapshot()

    @app.get("/sessions/{session_id}/provenance")
    def provenance(session_id: str):
        session = _session(app, session_id)
        return {"entries": [e.to_dict() for e in session.provenance.entries]}

    @app.get("/sessions/{session_id}/sandboxes")
    def sandboxes(session_id: str):
        session = _session(app, session_id)
        return {
            "sandboxes": [s.summary() for s in session.engine.sandboxes.values()]
        }

    @app.post("/sessions/{session_id}/messages")
    def message(session_id: str, body: dict):
        return _session(app, session_id).handle_message(body)

    @app.websocket("/sessions/{session_id}/ws")
    async def websocket_channel(websocket: WebSocket, session_id: str):
        await websocket.accept()
        try:
            session = app.state.manager.get(session_id)
        except KeyError:
            await websocket.send_text(
                encode_message(
                    {
                        "type": "error",
                        "seq": -1,
                        "payload": {"code": "unknown_session", "message": session_id},
                    }
                )
            )
            await websocket.close()
            return
        subscriber_id = session.subscribe()
        try:
            while True:
                raw = await websocket.receive_text()
                try:
                    request = decode_message(raw)
                except ProtocolError as exc:
                    await websocket.send_text(
                        encode_message(
                            {
                                "type": "error",
                                "seq": -1,
                                "payload": {"code": exc.code, "message": exc.message},
                            }
                        )
                    )
                    continue
                response = session.handle_message(request)
                await websocket.send_text(encode_message(response))
                for push in session.drain_pushes(subscriber_id):
                    await websocket.send_text(encode_message(push))
        except WebSocketDisconnect:
            session.subscribers.pop(subscriber_id, None)

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app


def _session(app: FastAPI, session_id: str):
    try:
        return app.state.manager.get(session_id)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"unknown session: {session_id}")
