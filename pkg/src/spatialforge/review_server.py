"""HTTP API backing the human-review workflow (and serving the browser UI).

The server is the single source of truth for statistics; the UI only
renders what these endpoints return. Label writes are serialized per
session through the append-only store.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .corpus import CaptionRecord
from .generation import QAPair
from .review import (
    DEFAULT_CONFIDENCE_Z,
    DEFAULT_MARGIN,
    DEFAULT_PROPORTION,
    DuplicateLabelError,
    ReviewLabel,
    SamplePlan,
    SessionStore,
    UnknownSessionError,
    draw_sample,
    tally_stats,
)

TOKEN_HEADER = "x-review-token"


class PlanBody(BaseModel):
    population_size: Optional[int] = None
    confidence_z: float = DEFAULT_CONFIDENCE_Z
    proportion: float = DEFAULT_PROPORTION
    margin: float = DEFAULT_MARGIN
    final_n: Optional[int] = None


class CreateSessionBody(BaseModel):
    plan: PlanBody = PlanBody()
    seed: int = 0


class LabelBody(BaseModel):
    pair_id: str
    verdict: str
    reviewer: str = "anonymous"


def create_app(
    pairs: list[QAPair],
    records: list[CaptionRecord],
    store: SessionStore,
    ui_dir: Optional[Path] = None,
    token: Optional[str] = None,
) -> FastAPI:
    pairs_by_id = {p.pair_id: p for p in pairs}
    records_by_id = {r.id: r for r in records}
    dangling = sorted({p.record_id for p in pairs} - set(records_by_id))
    if dangling:
        raise ValueError(f"pairs reference unknown records: {dangling[:5]}")

    app = FastAPI(title="review", docs_url=None, redoc_url=None)

    if token:
        @app.middleware("http")
        async def _check_token(request: Request, call_next):
            if request.url.path.startswith("/sessions") and request.headers.get(
                TOKEN_HEADER
            ) != token:
                return JSONResponse({"detail": "missing or bad review token"}, status_code=401)
            return await call_next(request)

    def _load_session(session_id: str):
        try:
            return store.load(session_id)
        except UnknownSessionError:
            raise HTTPException(status_code=404, detail=f"no such session: {session_id}")

    def _stats_payload(session) -> dict:
        stats = tally_stats(session.labels, confidence_z=session.plan.confidence_z)
        return {
            "session_id": session.session_id,
            "sample_size": session.plan.final_n,
            "complete": session.complete,
            **stats.to_dict(),
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody) -> dict:
        population = body.plan.population_size or len(pairs_by_id)
        try:
            plan = SamplePlan.build(
                population_size=population,
                confidence_z=body.plan.confidence_z,
                proportion=body.plan.proportion,
                margin=body.plan.margin,
                final_n=body.plan.final_n,
            )
            by_stratum: dict[str, list[str]] = {}
            for pair in pairs_by_id.values():
                source = records_by_id[pair.record_id].source.value
                by_stratum.setdefault(source, []).append(pair.pair_id)
            draw = draw_sample(by_stratum, plan, body.seed)
            session_id = store.create(plan, draw.pair_ids, body.seed, draw.warnings)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {
            "session_id": session_id,
            "sample_size": plan.final_n,
            "warnings": draw.warnings,
        }

    @app.get("/sessions/{session_id}/next")
    def next_card(session_id: str, reviewer: str = "anonymous") -> Response:
        session = _load_session(session_id)
        pair_id = session.next_unlabeled()
        if pair_id is None:
            return Response(status_code=204)
        pair = pairs_by_id.get(pair_id)
        if pair is None:
            raise HTTPException(status_code=500, detail=f"sampled pair {pair_id} not loaded")
        record = records_by_id[pair.record_id]
        position = len(session.labeled_pair_ids & set(session.sampled_pair_ids)) + 1
        return JSONResponse(
            {
                "pair_id": pair.pair_id,
                "image_uri": record.image_uri,
                "description": record.description,
                "question": pair.question,
                "answer": pair.answer,
                "position": f"{position} of {session.plan.final_n}",
            }
        )

    @app.post("/sessions/{session_id}/labels", status_code=201)
    def submit_label(session_id: str, body: LabelBody) -> dict:
        _load_session(session_id)
        try:
            label = ReviewLabel.make(body.pair_id, body.verdict, body.reviewer)
            session = store.append_label(session_id, label)
        except DuplicateLabelError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"ok": True, "labeled_count": len(session.labeled_pair_ids)}

    @app.get("/sessions/{session_id}/stats")
    def session_stats(session_id: str) -> dict:
        return _stats_payload(_load_session(session_id))

    @app.get("/sessions/{session_id}/export")
    def export_labels(session_id: str) -> PlainTextResponse:
        session = _load_session(session_id)
        import json as _json

        body = "".join(
            _json.dumps(label.to_dict(), ensure_ascii=False) + "\n" for label in session.labels
        )
        return PlainTextResponse(body, media_type="application/x-ndjson")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    else:
        @app.get("/")
        def index() -> dict:
            return {
                "service": "review",
                "pairs_loaded": len(pairs_by_id),
                "sessions": store.list_ids(),
            }

    return app
