#!/usr/bin/env python3
"""Dev server for the adjudication UI: seeds a fresh demo store and serves the API.

Usage: python3 devserver.py [--port 8123]
State lives in a temp directory, so every start is a clean slate.
"""

from __future__ import annotations

import argparse
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import uvicorn

from qsetag.annotation import AnnotationRecord, AnnotationStore
from qsetag.ingest import Forum, Post
from qsetag.llm import ChatAnnotator, RecordedTransport
from qsetag.service import create_app
from qsetag.taxonomy import CATEGORIES

BODIES = {
    0: "The workbench plugin installer hangs during setup.",
    1: "Trying to build intuition for superposition with an analogy.",
    2: "Full traceback ends in a segfault then a crash.",
    3: "Is there a theorem bounding the asymptotic complexity here?",
    4: "Which endpoint does the sdk expect for this payload?",
    5: "Looking for a tutorial, textbook or course to start with.",
}


def seed_store(path: Path) -> AnnotationStore:
    store = AnnotationStore(path)
    posts = []
    for i in range(24):
        label = i % 6
        posts.append(
            Post(
                post_id=f"demo-{i:02d}",
                forum=Forum.SO,
                title=f"Demo discussion {i:02d}",
                body_html="",
                body_text=BODIES[label],
                tags=frozenset({"qiskit"}),
                has_accepted_answer=bool(i % 2),
                created_at=datetime(2024, 1, 1 + i, tzinfo=timezone.utc),
                answers=("A helpful reply for context.",) if i % 3 == 0 else (),
            )
        )
    store.attach_corpus(posts)
    for i, post in enumerate(posts):
        human = CATEGORIES[i % 6]
        # first eight posts get a disagreeing llm label -> 8 open conflicts
        llm = CATEGORIES[(i + 1) % 6] if i < 8 else human
        store.record(AnnotationRecord(post.post_id, "human:A1", human))
        store.record(
            AnnotationRecord(post.post_id, "llm", llm, rationale="demo model rationale")
        )
    store.detect_conflicts("human:A1", "llm")
    return store


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--port", type=int, default=8123)
    args = parser.parse_args()

    state_dir = Path(tempfile.mkdtemp(prefix="qsetag-dev-"))
    store = seed_store(state_dir / "store.jsonl")
    # the model always concedes to the human during elaboration in this demo
    replies = [
        {
            "match": ["disagreement", store.post(case.post_id).title],
            "reply": "Reading it again, the human annotator is right.\nCategory: "
            + case.human_label.display_name,
        }
        for case in store.open_cases()
    ]
    annotator = ChatAnnotator(RecordedTransport(replies))
    app = create_app(
        model=None,
        store=store,
        annotator=annotator,
        cors_origin="*",
    )
    print(f"dev store: {state_dir}")
    uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")


if __name__ == "__main__":
    main()
