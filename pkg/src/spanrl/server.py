"""HTTP surface for the feedback loop (JSON over UTF-8).

Endpoints:
  GET  /api/session                      create or describe the active session
  GET  /api/session/{id}/next            next candidate set or {"done": true}
  POST /api/session/{id}/selection       {"item_id": ..., "choice": 0..4 | "NO_GOOD"}
  POST /api/session/{id}/update          apply pending feedback, re-evaluate
  GET  /api/metrics                      interaction-indexed F1 history

Inference shares the current policy snapshot; a process-wide lock
serializes session mutation and updates.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .feedback import NO_GOOD, FeedbackError, FeedbackLoop


class SelectionBody(BaseModel):
    item_id: str
    choice: int | str


def create_app(loop: FeedbackLoop, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="spanrl feedback service")
    lock = threading.Lock()

    @app.get("/api/session")
    def get_session():
        with lock:
            try:
                session = loop.start_session()
            except FeedbackError as e:
                raise HTTPException(status_code=409, detail=str(e)) from e
            return {
                "session_id": session.session_id,
                "set_index": session.set_index,
                "n_items": session.n_items,
                "round": session.round_index,
                "interactions_total": session.interactions_total,
                "test_f1": session.start_f1,
            }

    @app.get("/api/session/{session_id}/next")
    def next_item(session_id: str):
        with lock:
            try:
                session = loop.get_session(session_id)
                item = loop.next_item(session_id)
            except FeedbackError as e:
                raise HTTPException(status_code=404, detail=str(e)) from e
            if item is None:
                return {
                    "done": True,
                    "session_complete": session.complete,
                    "pending_updates": loop.pending_count(session),
                    "round": session.round_index,
                }
            doc = loop.docs_by_id[item.candidate_set.doc_id]
            payload = item.candidate_set.to_wire(doc)
            payload.update(
                {
                    "done": False,
                    "round": session.round_index,
                    "progress": {"answered": session.cursor, "total": session.n_items},
                }
            )
            return payload

    @app.post("/api/session/{session_id}/selection")
    def post_selection(session_id: str, body: SelectionBody):
        choice = body.choice
        if isinstance(choice, str) and choice != NO_GOOD:
            raise HTTPException(status_code=422, detail=f"choice must be 0..4 or {NO_GOOD!r}")
        with lock:
            try:
                pending = loop.submit_selection(session_id, body.item_id, choice)
            except FeedbackError as e:
                raise HTTPException(status_code=409, detail=str(e)) from e
            return {"accepted": True, "pending_updates": pending}

    @app.post("/api/session/{session_id}/update")
    def post_update(session_id: str):
        with lock:
            try:
                record = loop.apply_update(session_id)
            except FeedbackError as e:
                raise HTTPException(status_code=404, detail=str(e)) from e
            session = loop.get_session(session_id)
            return {
                "test_f1_before": record["test_f1_before"],
                "test_f1_after": record["test_f1_after"],
                "mean_reward": record["mean_reward"],
                "interaction": record["interaction"],
                "session_complete": session.complete,
            }

    @app.get("/api/metrics")
    def get_metrics():
        with lock:
            return loop.metrics()

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app
