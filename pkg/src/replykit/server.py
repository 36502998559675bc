"""HTTP surface for the suggestion service (FastAPI)."""

from __future__ import annotations

import time

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .curation import DuplicateResponse
from .serving import (
    MalformedRequest,
    ModelUnavailable,
    ObjectiveNotExtensible,
    RequestUtterance,
    SuggestionRequest,
    SuggestionService,
    UnknownRequestId,
    UsageLogEntry,
)


class UtteranceIn(BaseModel):
    speaker: str
    text: str


class SuggestIn(BaseModel):
    conversation_id: str
    utterances: list[UtteranceIn]


class SuggestionOut(BaseModel):
    canned_id: int
    text: str
    confidence: float


class SuggestOut(BaseModel):
    suggested: bool
    suggestions: list[SuggestionOut]
    request_id: str


class UsageIn(BaseModel):
    request_id: str
    conversation_id: str
    used_canned_id: int | None = None
    timestamp: float | None = None


class CannedIn(BaseModel):
    text: str = Field(min_length=1)


def create_app(service: SuggestionService) -> FastAPI:
    app = FastAPI(title="replykit suggestion service")

    @app.post("/suggest", response_model=SuggestOut)
    def suggest(payload: SuggestIn):
        request = SuggestionRequest(
            conversation_id=payload.conversation_id,
            utterances=[RequestUtterance(u.speaker, u.text) for u in payload.utterances],
        )
        try:
            return service.suggest(request).to_dict()
        except MalformedRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except ModelUnavailable as exc:
            raise HTTPException(status_code=503, detail=str(exc))

    @app.post("/usage")
    def usage(payload: UsageIn):
        shown = service.usage_store.shown_for(payload.request_id)
        if shown is None:
            raise HTTPException(status_code=404, detail=f"unknown request_id {payload.request_id}")
        entry = UsageLogEntry(
            request_id=payload.request_id,
            conversation_id=payload.conversation_id,
            timestamp=payload.timestamp or time.time(),
            shown=[(int(c), float(s)) for c, s in shown["shown"]],
            used_canned_id=payload.used_canned_id,
            checkpoint_id=shown.get("checkpoint_id"),
        )
        try:
            service.log_usage(entry)
        except UnknownRequestId as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"status": "ok"}

    @app.get("/canned")
    def canned():
        return [{"id": r.id, "text": r.text, "frequency": r.frequency}
                for r in service.canned]

    @app.post("/canned", status_code=201)
    def extend(payload: CannedIn):
        try:
            added = service.extend_canned_list(payload.text)
        except DuplicateResponse as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ObjectiveNotExtensible as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except MalformedRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"id": added.canned_id, "text": added.text}

    @app.get("/health")
    def health():
        return {
            "status": "ok" if service.available else "unavailable",
            "checkpoint_id": service.bundle.checkpoint_id,
            "objective": service.bundle.objective,
            "canned_size": len(service.canned),
        }

    @app.get("/metrics")
    def metrics():
        return service.metrics()

    return app
