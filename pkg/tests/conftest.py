from __future__ import annotations

import json
from pathlib import Path

import pytest

try:  # keep model-shard progress bars out of test output
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    hf_logging.set_verbosity_error()
except ImportError:
    pass

from qsetag.annotation import AnnotationRecord, AnnotationStore
from qsetag.ingest import Forum, STUDY_TAG_FILTERS, apply_tag_filter, parse_export
from qsetag.taxonomy import category_from_name

FIXTURES = Path(__file__).parent / "fixtures"

# planted conflicts in the fixture corpus: post_id -> (human label, llm label)
CONFLICTS = {
    "103": ("Errors", "Tooling"),
    "106": ("Tooling", "Learning"),
    "105": ("Conceptual", "Errors"),
}

# planted keywords per class in the fixture corpus
PLANTED_KEYWORDS = {
    0: ["workbench", "plugin", "installer"],
    1: ["superposition", "intuition", "analogy"],
    2: ["traceback", "segfault", "crash"],
    3: ["theorem", "complexity", "asymptotic"],
    4: ["endpoint", "sdk", "payload"],
    5: ["tutorial", "textbook", "course"],
}

EXPORTS = {
    Forum.SO: ("so.csv", "so_answers.csv"),
    Forum.QCSE: ("qcse.csv", None),
    Forum.CSSE: ("csse.csv", None),
    Forum.AISE: ("aise.csv", None),
}


def load_fixture_corpus():
    posts = []
    for forum, (name, answers) in EXPORTS.items():
        stream = parse_export(
            FIXTURES / "exports" / name,
            forum,
            answers_path=FIXTURES / "exports" / answers if answers else None,
        )
        posts.extend(apply_tag_filter(stream, STUDY_TAG_FILTERS[forum]))
    return posts


@pytest.fixture(scope="session")
def fixture_corpus():
    return load_fixture_corpus()


def load_fixture_labels(side: str) -> dict[str, str]:
    """True class per post, with the planted conflict overrides applied."""
    import csv

    true_labels = {}
    with (FIXTURES / "human_annotations.csv").open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            true_labels[row["post_id"]] = row["category"]
    if side == "human":
        return true_labels
    llm_labels = dict(true_labels)
    for post_id, (human, llm) in CONFLICTS.items():
        llm_labels[post_id] = llm
    # human_annotations.csv already carries the human side of the conflicts;
    # reconstruct the llm side from the true class (= resolution outcome)
    replies = {}
    for line in (FIXTURES / "chat_replies.jsonl").read_text().splitlines():
        entry = json.loads(line)
        markers = entry["match"] if isinstance(entry["match"], list) else [entry["match"]]
        qx = next((m for m in markers if m.startswith("QX")), None)
        if qx and any("categorize" in m for m in markers) and qx[2:] not in replies:
            replies[qx[2:]] = entry["reply"]
    from qsetag.llm import parse_category

    return {pid: parse_category(reply).display_name for pid, reply in replies.items()}


TRUE_LABELS_OVERRIDES = {"103": "Errors", "106": "Learning", "105": "API Usage"}


@pytest.fixture(scope="session")
def fixture_gold(fixture_corpus):
    """Gold records with the planted true classes (what negotiation restores)."""
    from qsetag.dataset import LabeledPost

    human = load_fixture_labels("human")
    gold = []
    for post in fixture_corpus:
        name = TRUE_LABELS_OVERRIDES.get(post.post_id, human[post.post_id])
        gold.append(
            LabeledPost(
                post_id=post.post_id,
                title=post.title,
                body_text=post.body_text,
                label_index=category_from_name(name).index,
            )
        )
    return gold


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, fixture_corpus) -> str:
    """Small random-init checkpoint with a tokenizer trained on the fixtures."""
    from qsetag.checkpoints import create_scratch_checkpoint

    out = tmp_path_factory.mktemp("checkpoints") / "tiny-bert"
    create_scratch_checkpoint(
        out,
        [p.text for p in fixture_corpus],
        family="bert",
        vocab_size=2000,
        hidden_size=128,
        num_layers=2,
        num_heads=2,
        max_positions=128,
        seed=0,
    )
    return str(out)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_checkpoint):
    from qsetag.checkpoints import load_tokenizer

    return load_tokenizer(tiny_checkpoint)


@pytest.fixture(scope="session")
def keyword_model(tiny_checkpoint, fixture_gold):
    """Model memorizing the keyword corpus; shared by explainer/service tests."""
    from qsetag.checkpoints import load_tokenizer
    from qsetag.dataset import balance_upsample, tokenize
    from qsetag.training import TrainConfig, fine_tune

    cfg = TrainConfig(
        checkpoint_id=tiny_checkpoint,
        epochs=16,
        batch_size=8,
        learning_rate=1e-3,
        max_len=48,
        seed=1,
    )
    tokenizer = load_tokenizer(tiny_checkpoint)
    examples = tokenize(fixture_gold, tokenizer, max_len=cfg.max_len)
    handle, logs = fine_tune(balance_upsample(examples, seed=1), [], cfg)
    assert logs[-1].train_acc >= 0.95, "keyword model failed to memorize the fixtures"
    return handle


def make_store(posts, tmp_path=None, with_labels=True) -> AnnotationStore:
    store = AnnotationStore(tmp_path / "store.jsonl" if tmp_path else None)
    store.attach_corpus(posts)
    if with_labels:
        human = load_fixture_labels("human")
        llm = load_fixture_labels("llm")
        for post in posts:
            store.record(
                AnnotationRecord(
                    post_id=post.post_id,
                    annotator_id="human:A1",
                    category=category_from_name(human[post.post_id]),
                )
            )
            store.record(
                AnnotationRecord(
                    post_id=post.post_id,
                    annotator_id="llm",
                    category=category_from_name(llm[post.post_id]),
                    rationale="recorded rationale",
                )
            )
    return store
