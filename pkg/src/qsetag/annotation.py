"""Annotation store, agreement statistics, conflict negotiation and gold export.

The store is an append-only event log (optionally JSONL-backed): annotations,
conflict cases, negotiation turns and resolutions are separate immutable
events, so the full audit trail survives.  Agreement is computed the same way
for human-vs-human and human-vs-LLM pairs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import AnnotationError, ContractViolation, ExportBlocked
from .ingest import Post
from .llm import ChatAnnotator, NegotiationTurn
from .taxonomy import (
    CATEGORIES,
    CategoryHistogram,
    ChallengeCategory,
    NUM_CATEGORIES,
    category_from_name,
    frequency_report,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnotationRecord:
    """One label assigned to one post by one annotator in one round."""

    post_id: str
    annotator_id: str  # e.g. "human:A1" or "llm:<model>"
    category: ChallengeCategory
    rationale: Optional[str] = None
    round: int = 1
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ContractViolation("annotation round must be >= 1")


@dataclass(frozen=True)
class Resolution:
    final_label: ChallengeCategory
    conceded_by: str  # "human" | "llm" | "both"


@dataclass
class ConflictCase:
    """A disagreement between two annotators plus its negotiation state."""

    post_id: str
    human_label: ChallengeCategory
    llm_label: ChallengeCategory
    llm_rationale: str = ""
    turns: list[NegotiationTurn] = field(default_factory=list)
    status: str = "open"  # "open" | "resolved"
    resolution: Optional[Resolution] = None
    needs_senior_review: bool = False

    @property
    def is_open(self) -> bool:
        return self.status == "open"

    def current_llm_position(self) -> ChallengeCategory:
        """Latest category the LLM proposed, falling back to its round-1 label."""
        for turn in reversed(self.turns):
            if turn.speaker == "llm" and turn.proposed_category is not None:
                return turn.proposed_category
        return self.llm_label

    def llm_rounds(self) -> int:
        return sum(1 for t in self.turns if t.speaker == "llm")

    def to_dict(self) -> dict:
        return {
            "post_id": self.post_id,
            "human_label": self.human_label.display_name,
            "llm_label": self.llm_label.display_name,
            "llm_rationale": self.llm_rationale,
            "turns": [t.to_dict() for t in self.turns],
            "status": self.status,
            "resolution": (
                {
                    "final_label": self.resolution.final_label.display_name,
                    "conceded_by": self.resolution.conceded_by,
                }
                if self.resolution
                else None
            ),
            "needs_senior_review": self.needs_senior_review,
        }


@dataclass(frozen=True)
class AgreementStats:
    n_items: int
    n_agree: int
    percent_agreement: float
    kappa: float
    kappa_ci95: tuple[float, float]
    per_category_confusion: np.ndarray  # 6x6, rows = annotator a, cols = annotator b
    degenerate: bool = False  # Pe == 1: kappa defined by convention

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "n_agree": self.n_agree,
            "percent_agreement": self.percent_agreement,
            "kappa": self.kappa,
            "kappa_ci95": list(self.kappa_ci95),
            "per_category_confusion": self.per_category_confusion.tolist(),
            "degenerate": self.degenerate,
        }


def cohen_kappa(confusion: np.ndarray) -> tuple[float, float, float, bool]:
    """Return (Po, Pe, kappa, degenerate) for a square contingency table.

    kappa = (Po - Pe) / (1 - Pe) with Pe from the marginal products.  When
    Pe == 1 (both annotators constant and identical) kappa is defined as 1 if
    Po == 1 and 0 otherwise, flagged as degenerate.
    """
    confusion = np.asarray(confusion, dtype=float)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ContractViolation("confusion table must be square")
    if (confusion < 0).any():
        raise ContractViolation("confusion table has negative counts")
    n = confusion.sum()
    if n == 0:
        raise ContractViolation("confusion table is empty")
    po = float(np.trace(confusion) / n)
    rows = confusion.sum(axis=1) / n
    cols = confusion.sum(axis=0) / n
    pe = float(np.dot(rows, cols))
    if math.isclose(pe, 1.0, abs_tol=1e-12):
        return po, pe, (1.0 if math.isclose(po, 1.0, abs_tol=1e-12) else 0.0), True
    kappa = (po - pe) / (1.0 - pe)
    return po, pe, kappa, False


def agreement_stats(confusion: np.ndarray) -> AgreementStats:
    """Full agreement statistics with a 95% CI from the asymptotic SE.

    The CI uses se = sqrt(Po (1 - Po) / (n (1 - Pe)^2)), clipped to [-1, 1].
    """
    confusion = np.asarray(confusion, dtype=int)
    po, pe, kappa, degenerate = cohen_kappa(confusion)
    n = int(confusion.sum())
    n_agree = int(np.trace(confusion))
    if degenerate:
        ci = (kappa, kappa)
    else:
        se = math.sqrt(max(po * (1.0 - po), 0.0) / (n * (1.0 - pe) ** 2))
        ci = (max(-1.0, kappa - 1.96 * se), min(1.0, kappa + 1.96 * se))
    return AgreementStats(
        n_items=n,
        n_agree=n_agree,
        percent_agreement=n_agree / n,
        kappa=kappa,
        kappa_ci95=ci,
        per_category_confusion=confusion,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class HumanDecision:
    action: str  # "concede" | "hold" | "accept_final"
    label: Optional[ChallengeCategory] = None
    rationale: Optional[str] = None


HumanPolicy = Callable[[ConflictCase, NegotiationTurn], HumanDecision]


class AnnotationStore:
    """Single-writer store for annotations, conflict cases and resolutions."""

    def __init__(self, path: str | Path | None = None, max_rounds: int = 3):
        self.path = Path(path) if path else None
        self.max_rounds = max_rounds
        self.posts: dict[str, Post] = {}
        self._records: dict[tuple[str, str, int], AnnotationRecord] = {}
        self.cases: dict[str, ConflictCase] = {}
        self._write_lock = threading.Lock()
        self._case_locks: dict[str, threading.Lock] = {}
        if self.path and self.path.exists():
            self._replay()

    # -- corpus attachment ------------------------------------------------

    def attach_corpus(self, posts: Iterable[Post]) -> None:
        for post in posts:
            self.posts[post.post_id] = post

    def post(self, post_id: str) -> Post:
        try:
            return self.posts[post_id]
        except KeyError:
            raise AnnotationError(f"unknown post_id {post_id!r}: not in attached corpus") from None

    # -- persistence -------------------------------------------------------

    def _append_event(self, event: dict) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(event, ensure_ascii=False) + "\n")

    def _replay(self) -> None:
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            self._apply_event(event, persist=False)

    def _apply_event(self, event: dict, persist: bool = True) -> None:
        kind = event["type"]
        if kind == "annotation":
            record = AnnotationRecord(
                post_id=event["post_id"],
                annotator_id=event["annotator_id"],
                category=category_from_name(event["category"]),
                rationale=event.get("rationale"),
                round=event.get("round", 1),
                timestamp=event.get("ts", ""),
            )
            key = (record.post_id, record.annotator_id, record.round)
            self._records[key] = record
        elif kind == "conflict":
            case = ConflictCase(
                post_id=event["post_id"],
                human_label=category_from_name(event["human_label"]),
                llm_label=category_from_name(event["llm_label"]),
                llm_rationale=event.get("llm_rationale", ""),
            )
            self.cases[case.post_id] = case
        elif kind == "turn":
            self.cases[event["post_id"]].turns.append(NegotiationTurn.from_dict(event["turn"]))
        elif kind == "resolution":
            case = self.cases[event["post_id"]]
            case.resolution = Resolution(
                final_label=category_from_name(event["final_label"]),
                conceded_by=event["conceded_by"],
            )
            case.status = "resolved"
            case.needs_senior_review = False
        elif kind == "senior_flag":
            self.cases[event["post_id"]].needs_senior_review = True
        else:
            raise AnnotationError(f"unknown store event type {kind!r}")
        if persist:
            self._append_event(event)

    def compact(self) -> None:
        """Rewrite the log file from current state, dropping replaced records."""
        if self.path is None:
            return
        with self._write_lock:
            events: list[dict] = []
            for record in self._records.values():
                events.append(
                    {
                        "type": "annotation",
                        "post_id": record.post_id,
                        "annotator_id": record.annotator_id,
                        "category": record.category.display_name,
                        "rationale": record.rationale,
                        "round": record.round,
                        "ts": record.timestamp,
                    }
                )
            for case in self.cases.values():
                events.append(
                    {
                        "type": "conflict",
                        "post_id": case.post_id,
                        "human_label": case.human_label.display_name,
                        "llm_label": case.llm_label.display_name,
                        "llm_rationale": case.llm_rationale,
                    }
                )
                for turn in case.turns:
                    events.append({"type": "turn", "post_id": case.post_id, "turn": turn.to_dict()})
                if case.resolution:
                    events.append(
                        {
                            "type": "resolution",
                            "post_id": case.post_id,
                            "final_label": case.resolution.final_label.display_name,
                            "conceded_by": case.resolution.conceded_by,
                        }
                    )
                if case.needs_senior_review:
                    events.append({"type": "senior_flag", "post_id": case.post_id})
            tmp = self.path.with_suffix(".tmp")
            with tmp.open("w", encoding="utf-8") as handle:
                for event in events:
                    handle.write(json.dumps(event, ensure_ascii=False) + "\n")
            tmp.replace(self.path)

    # -- annotations --------------------------------------------------------

    def record(self, annotation: AnnotationRecord) -> tuple[str, str, int]:
        """Append an annotation; an existing (post, annotator, round) is replaced."""
        if annotation.post_id not in self.posts:
            raise AnnotationError(
                f"unknown post_id {annotation.post_id!r}: record the corpus first"
            )
        key = (annotation.post_id, annotation.annotator_id, annotation.round)
        with self._write_lock:
            if key in self._records:
                logger.warning("replacing existing annotation for %s", key)
            self._apply_event(
                {
                    "type": "annotation",
                    "post_id": annotation.post_id,
                    "annotator_id": annotation.annotator_id,
                    "category": annotation.category.display_name,
                    "rationale": annotation.rationale,
                    "round": annotation.round,
                    "ts": annotation.timestamp,
                }
            )
        return key

    def get(self, post_id: str, annotator_id: str, round: int = 1) -> AnnotationRecord | None:
        return self._records.get((post_id, annotator_id, round))

    def labels_for(self, annotator_id: str, round: int = 1) -> dict[str, ChallengeCategory]:
        return {
            record.post_id: record.category
            for record in self._records.values()
            if record.annotator_id == annotator_id and record.round == round
        }

    def annotator_ids(self) -> list[str]:
        return sorted({r.annotator_id for r in self._records.values()})

    def __len__(self) -> int:
        return len(self._records)

    # -- agreement and conflicts ---------------------------------------------

    def _paired_labels(
        self, a: str, b: str, round: int
    ) -> list[tuple[str, ChallengeCategory, ChallengeCategory]]:
        labels_a = self.labels_for(a, round)
        labels_b = self.labels_for(b, round)
        if not labels_a or not labels_b:
            raise AnnotationError(f"no round-{round} records for {a!r} and/or {b!r}")
        if set(labels_a) != set(labels_b):
            only_a = sorted(set(labels_a) - set(labels_b))[:5]
            only_b = sorted(set(labels_b) - set(labels_a))[:5]
            raise AnnotationError(
                f"annotators {a!r} and {b!r} cover different post sets "
                f"(e.g. only {a}: {only_a}, only {b}: {only_b})"
            )
        return [(pid, labels_a[pid], labels_b[pid]) for pid in sorted(labels_a)]

    def agreement(self, a: str, b: str, round: int = 1) -> AgreementStats:
        pairs = self._paired_labels(a, b, round)
        confusion = np.zeros((NUM_CATEGORIES, NUM_CATEGORIES), dtype=int)
        for _, label_a, label_b in pairs:
            confusion[label_a.index, label_b.index] += 1
        return agreement_stats(confusion)

    def detect_conflicts(self, a: str, b: str, round: int = 1) -> list[ConflictCase]:
        """Open one ConflictCase per disagreeing post, ordered by post_id.

        By convention annotator ``a`` is the human side and ``b`` the LLM side.
        Existing cases (e.g. partially negotiated) are kept as-is.
        """
        pairs = self._paired_labels(a, b, round)
        result = []
        with self._write_lock:
            for post_id, label_a, label_b in pairs:
                if label_a == label_b:
                    continue
                if post_id not in self.cases:
                    record_b = self._records.get((post_id, b, round))
                    self._apply_event(
                        {
                            "type": "conflict",
                            "post_id": post_id,
                            "human_label": label_a.display_name,
                            "llm_label": label_b.display_name,
                            "llm_rationale": (record_b.rationale or "") if record_b else "",
                        }
                    )
                result.append(self.cases[post_id])
        return result

    def open_cases(self) -> list[ConflictCase]:
        return [c for c in sorted(self.cases.values(), key=lambda c: c.post_id) if c.is_open]

    def resolved_cases(self) -> list[ConflictCase]:
        return [
            c for c in sorted(self.cases.values(), key=lambda c: c.post_id) if not c.is_open
        ]

    def case(self, post_id: str) -> ConflictCase:
        try:
            return self.cases[post_id]
        except KeyError:
            raise AnnotationError(f"no conflict case for post {post_id!r}") from None

    def _case_lock(self, post_id: str) -> threading.Lock:
        with self._write_lock:
            return self._case_locks.setdefault(post_id, threading.Lock())

    # -- negotiation ----------------------------------------------------------

    def apply_llm_turn(self, post_id: str, turn: NegotiationTurn) -> ConflictCase:
        case = self.case(post_id)
        with self._case_lock(post_id):
            if not case.is_open:
                raise AnnotationError(f"case {post_id} is already resolved")
            with self._write_lock:
                self._apply_event({"type": "turn", "post_id": post_id, "turn": turn.to_dict()})
        return case

    def _resolve(self, case: ConflictCase, final: ChallengeCategory, conceded_by: str) -> None:
        with self._write_lock:
            self._apply_event(
                {
                    "type": "resolution",
                    "post_id": case.post_id,
                    "final_label": final.display_name,
                    "conceded_by": conceded_by,
                }
            )

    def apply_human_decision(
        self,
        post_id: str,
        action: str,
        label: Optional[ChallengeCategory] = None,
        rationale: Optional[str] = None,
    ) -> ConflictCase:
        """Apply a human's negotiation decision under the consensus rule.

        concede: adopt the LLM's current position.  hold: keep own label, a
        rationale is mandatory.  accept_final: accept the LLM's latest
        proposal as the final label (used after the LLM conceded).
        """
        case = self.case(post_id)
        with self._case_lock(post_id):
            if not case.is_open:
                raise AnnotationError(f"case {post_id} is already resolved")
            if action == "hold":
                if not (rationale or "").strip():
                    raise ContractViolation("holding requires a rationale")
                turn = NegotiationTurn(
                    speaker="human", message=rationale, proposed_category=case.human_label
                )
                with self._write_lock:
                    self._apply_event(
                        {"type": "turn", "post_id": post_id, "turn": turn.to_dict()}
                    )
                if case.llm_rounds() >= self.max_rounds and not case.needs_senior_review:
                    with self._write_lock:
                        self._apply_event({"type": "senior_flag", "post_id": post_id})
                return case
            if action not in ("concede", "accept_final"):
                raise ContractViolation(f"unknown decision action {action!r}")
            final = label or case.current_llm_position()
            allowed = {case.human_label, case.llm_label, case.current_llm_position()}
            if final not in allowed:
                raise ContractViolation(
                    f"final label {final.display_name!r} matches neither side of the conflict"
                )
            if final == case.human_label and final != case.llm_label:
                conceded_by = "llm"
            elif final == case.llm_label and final != case.human_label:
                conceded_by = "human"
            else:
                conceded_by = "both"
            turn = NegotiationTurn(
                speaker="human", message=rationale or action, proposed_category=final
            )
            with self._write_lock:
                self._apply_event({"type": "turn", "post_id": post_id, "turn": turn.to_dict()})
            self._resolve(case, final, conceded_by)
        return case

    def resolve_llm_concession(self, post_id: str) -> ConflictCase:
        """Resolve after the LLM explicitly proposed the human's label."""
        case = self.case(post_id)
        with self._case_lock(post_id):
            if not case.is_open:
                raise AnnotationError(f"case {post_id} is already resolved")
            if case.current_llm_position() != case.human_label:
                raise ContractViolation(
                    f"LLM has not conceded on case {post_id}; its position is "
                    f"{case.current_llm_position().display_name}"
                )
            self._resolve(case, case.human_label, conceded_by="llm")
        return case

    def flag_senior_review(self, post_id: str) -> ConflictCase:
        case = self.case(post_id)
        if case.is_open and not case.needs_senior_review:
            with self._write_lock:
                self._apply_event({"type": "senior_flag", "post_id": post_id})
        return case

    # -- gold export ------------------------------------------------------------

    def final_labels(self, a: str, b: str, round: int = 1) -> dict[str, ChallengeCategory]:
        """Consensus label per post: the agreed label or a resolution's final label."""
        pairs = self._paired_labels(a, b, round)
        unresolved = []
        labels: dict[str, ChallengeCategory] = {}
        for post_id, label_a, label_b in pairs:
            if label_a == label_b:
                labels[post_id] = label_a
                continue
            case = self.cases.get(post_id)
            if case is None or case.is_open or case.resolution is None:
                unresolved.append(post_id)
                continue
            labels[post_id] = case.resolution.final_label
        if unresolved:
            raise ExportBlocked(
                f"{len(unresolved)} conflict(s) still open: {unresolved[:10]}",
                open_post_ids=unresolved,
            )
        return labels

    def export_gold(self, path: str | Path, a: str, b: str, round: int = 1) -> CategoryHistogram:
        """Write the conflict-free labeled dataset and return its histogram."""
        if not self._records:
            raise ExportBlocked("annotation store is empty")
        labels = self.final_labels(a, b, round)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ordered = [pid for pid in self.posts if pid in labels]
        ordered += [pid for pid in sorted(labels) if pid not in self.posts]
        with path.open("w", encoding="utf-8") as handle:
            for post_id in ordered:
                post = self.post(post_id)
                record = {
                    "post_id": post_id,
                    "title": post.title,
                    "body_text": post.body_text,
                    "label_index": labels[post_id].index,
                }
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")
        return frequency_report(labels.values())


def negotiate(
    store: AnnotationStore,
    case: ConflictCase,
    annotator: ChatAnnotator,
    human_policy: HumanPolicy,
    max_rounds: int = 3,
) -> ConflictCase:
    """Run the negotiation loop for one open case until consensus or max_rounds.

    Each round: the LLM elaborates; if it proposes the human's label the case
    resolves as an LLM concession, otherwise the human policy decides.  After
    max_rounds without consensus the case stays open flagged for senior
    review.  An LLM failure mid-way leaves the partial transcript in place.
    """
    if not case.is_open:
        raise ContractViolation(f"case {case.post_id} is already resolved")
    post = store.post(case.post_id)
    for _ in range(max_rounds):
        turn = annotator.elaborate(case, post)
        store.apply_llm_turn(case.post_id, turn)
        if turn.proposed_category == case.human_label:
            store.resolve_llm_concession(case.post_id)
            return case
        decision = human_policy(case, turn)
        store.apply_human_decision(
            case.post_id, decision.action, label=decision.label, rationale=decision.rationale
        )
        if not case.is_open:
            return case
    store.flag_senior_review(case.post_id)
    return case


class ScriptedHumanPolicy:
    """Replays pre-recorded human decisions, keyed by post id."""

    def __init__(self, script: dict[str, Sequence[HumanDecision]]):
        self.script = {pid: list(decisions) for pid, decisions in script.items()}

    def __call__(self, case: ConflictCase, turn: NegotiationTurn) -> HumanDecision:
        queue = self.script.get(case.post_id)
        if not queue:
            raise AnnotationError(f"no scripted decision left for case {case.post_id}")
        return queue.pop(0)


def always_hold_policy(rationale: str = "keeping my label pending review") -> HumanPolicy:
    """Batch-mode default: humans never concede from the CLI, the UI decides."""

    def policy(case: ConflictCase, turn: NegotiationTurn) -> HumanDecision:
        return HumanDecision(action="hold", rationale=rationale)

    return policy


def write_agreement_report(stats: AgreementStats, outdir: str | Path) -> list[Path]:
    """Write the metric CSV and the 6x6 confusion CSV."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_path = outdir / "agreement.csv"
    with metrics_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        writer.writerow(["n_items", stats.n_items])
        writer.writerow(["n_agree", stats.n_agree])
        writer.writerow(["percent_agreement", f"{stats.percent_agreement:.6f}"])
        writer.writerow(["kappa", f"{stats.kappa:.6f}"])
        writer.writerow(["kappa_ci95_lo", f"{stats.kappa_ci95[0]:.6f}"])
        writer.writerow(["kappa_ci95_hi", f"{stats.kappa_ci95[1]:.6f}"])
        writer.writerow(["degenerate", str(stats.degenerate).lower()])
    confusion_path = outdir / "agreement_confusion.csv"
    with confusion_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([""] + [c.display_name for c in CATEGORIES])
        for cat in CATEGORIES:
            row = stats.per_category_confusion[cat.index]
            writer.writerow([cat.display_name] + [int(v) for v in row])
    return [metrics_path, confusion_path]
