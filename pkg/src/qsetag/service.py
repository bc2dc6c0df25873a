"""HTTP API: classification with tag suggestions, conflict adjudication, stats.

The app is built by create_app() from already-constructed parts (model
handle, annotation store, chat annotator); the CLI's ``serve`` subcommand
wires those from the config file.  Mutating endpoints require a bearer token
when one is configured; read endpoints are open.
"""

from __future__ import annotations

import math
from typing import Optional

from fastapi import Depends, FastAPI, HTTPException, Query, Request
from pydantic import BaseModel

from .annotation import AnnotationStore
from .errors import AnnotationError, ContractViolation, LlmError, QsetagError
from .explain import Attributor
from .ingest import clean_text
from .llm import ChatAnnotator
from .taxonomy import ChallengeCategory, category_from_name, load_taxonomy


class ClassifyRequest(BaseModel):
    title: str = ""
    body: str


class ClassifyResponse(BaseModel):
    label: str
    label_index: int
    confidence: float
    suggested_tag: str
    top_tokens: Optional[list[tuple[str, float]]] = None


class DecisionRequest(BaseModel):
    action: str
    label: Optional[str] = None
    rationale: Optional[str] = None


def suggested_tag(category: ChallengeCategory) -> str:
    return f"qse-challenge:{category.slug}"


def create_app(
    model=None,
    store: AnnotationStore | None = None,
    annotator: ChatAnnotator | None = None,
    stats_pair: tuple[str, str] = ("human:A1", "llm"),
    stats_round: int = 1,
    api_token: str | None = None,
    cors_origin: str | None = None,
    explain_budget: int = 256,
) -> FastAPI:
    app = FastAPI(title="qsetag", version="0.1.0")

    if cors_origin:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=[cors_origin],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    definitions = {info.category: info.definition for info in load_taxonomy()}
    attributor = Attributor.from_handle(model, max_evals=explain_budget) if model else None

    def require_token(request: Request) -> None:
        if not api_token:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {api_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    def require_store() -> AnnotationStore:
        if store is None:
            raise HTTPException(status_code=500, detail="annotation store unavailable")
        return store

    def case_view(case) -> dict:
        view = case.to_dict()
        post = store.posts.get(case.post_id)
        if post is not None:
            view["post"] = {
                "title": post.title,
                "body_text": post.body_text,
                "answers": list(post.answers),
            }
        view["definitions"] = {
            case.human_label.display_name: definitions[case.human_label],
            case.llm_label.display_name: definitions[case.llm_label],
        }
        return view

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "model_loaded": model is not None}

    @app.post("/classify", response_model=ClassifyResponse, response_model_exclude_none=True)
    def classify(payload: ClassifyRequest, explain: int = Query(default=0)) -> ClassifyResponse:
        if not payload.body.strip():
            raise HTTPException(status_code=400, detail="body must be nonempty")
        if model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        from .training import predict_texts

        text = f"{clean_text(payload.title)} {clean_text(payload.body)}".strip()
        probs = predict_texts(model, [text])[0]
        index = int(probs.argmax())
        category = ChallengeCategory(index)
        top_tokens = None
        if explain:
            explanation = attributor.explain(text, post_id="request")
            ranked = sorted(
                explanation.token_attributions, key=lambda tv: abs(tv[1]), reverse=True
            )
            top_tokens = [(t, round(v, 6)) for t, v in ranked[:8]]
        return ClassifyResponse(
            label=category.display_name,
            label_index=index,
            confidence=float(probs[index]),
            suggested_tag=suggested_tag(category),
            top_tokens=top_tokens,
        )

    @app.get("/conflicts")
    def list_conflicts(
        status: str = Query(default="open"),
        page: int = Query(default=1, ge=1),
        page_size: int = Query(default=50, ge=1, le=500),
        needs_senior_review: bool = Query(default=False),
    ) -> dict:
        s = require_store()
        if status == "open":
            cases = s.open_cases()
        elif status == "resolved":
            cases = s.resolved_cases()
        elif status == "all":
            cases = sorted(s.cases.values(), key=lambda c: c.post_id)
        else:
            raise HTTPException(status_code=422, detail=f"unknown status {status!r}")
        if needs_senior_review:
            cases = [c for c in cases if c.needs_senior_review]
        total = len(cases)
        pages = max(1, math.ceil(total / page_size))
        start = (page - 1) * page_size
        return {
            "items": [case_view(c) for c in cases[start : start + page_size]],
            "page": page,
            "page_size": page_size,
            "total": total,
            "pages": pages,
            "open_count": len(s.open_cases()),
            "resolved_count": len(s.resolved_cases()),
        }

    @app.get("/conflicts/{post_id}")
    def get_conflict(post_id: str) -> dict:
        s = require_store()
        try:
            return case_view(s.case(post_id))
        except AnnotationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/conflicts/{post_id}/decision", dependencies=[Depends(require_token)])
    def decide(post_id: str, payload: DecisionRequest) -> dict:
        s = require_store()
        try:
            case = s.case(post_id)
        except AnnotationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        label = None
        if payload.label:
            try:
                label = category_from_name(payload.label)
            except QsetagError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
        try:
            case = s.apply_human_decision(
                post_id, payload.action, label=label, rationale=payload.rationale
            )
        except ContractViolation as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except AnnotationError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return case_view(case)

    @app.post("/conflicts/{post_id}/elaborate", dependencies=[Depends(require_token)])
    def elaborate(post_id: str) -> dict:
        s = require_store()
        if annotator is None:
            raise HTTPException(status_code=502, detail="chat service not configured")
        try:
            case = s.case(post_id)
        except AnnotationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if not case.is_open:
            raise HTTPException(status_code=409, detail=f"case {post_id} is already resolved")
        try:
            turn = annotator.elaborate(case, s.post(case.post_id))
        except LlmError as exc:
            raise HTTPException(status_code=502, detail=f"chat service failed: {exc}")
        s.apply_llm_turn(post_id, turn)
        return {"case": case_view(case), "turn": turn.to_dict()}

    @app.get("/stats/agreement")
    def stats_agreement() -> dict:
        s = require_store()
        if len(s) == 0:
            raise HTTPException(status_code=404, detail="annotation store is empty")
        a, b = stats_pair
        try:
            stats = s.agreement(a, b, stats_round)
        except AnnotationError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return {"a": a, "b": b, "round": stats_round, **stats.to_dict()}

    @app.get("/stats/frequencies")
    def stats_frequencies() -> dict:
        s = require_store()
        if len(s) == 0:
            raise HTTPException(status_code=404, detail="annotation store is empty")
        a, b = stats_pair
        try:
            labels = dict(s.labels_for(a, stats_round))
        except AnnotationError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        if not labels:
            raise HTTPException(status_code=404, detail=f"no labels recorded for {a!r}")
        for case in s.resolved_cases():
            if case.post_id in labels:
                labels[case.post_id] = case.resolution.final_label
        from .taxonomy import frequency_report

        hist = frequency_report(labels.values())
        return {
            **hist.to_dict(),
            "percentages": {c.display_name: p for c, p in hist.percentages().items()},
            "note": "open conflicts counted with the human label until resolved",
        }

    return app
