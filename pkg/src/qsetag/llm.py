"""Chat-completion client that labels posts and elaborates during negotiation.

The transport is pluggable: HttpChatTransport talks to an OpenAI-style
chat-completions endpoint configured through QSE_LLM_URL / QSE_LLM_MODEL /
QSE_LLM_KEY; RecordedTransport replays canned replies so annotation runs are
deterministic in tests and offline pipelines.  Every request/reply pair is
appended to a JSONL audit log before the reply is parsed.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

from concurrent.futures import ThreadPoolExecutor

from .errors import (
    AmbiguousReply,
    ConfigError,
    ContractViolation,
    LlmError,
    ServiceUnavailable,
    UnparsableReply,
)
from .ingest import Post
from .taxonomy import ChallengeCategory, definitions_block

DEFAULT_SYSTEM_PROMPT = (
    "You are an expert annotator of quantum software engineering discussions. "
    "Follow the category definitions exactly and always finish with a "
    "'Category: <name>' line."
)

# Word-boundary patterns for canonical category names; "API Usage" matches
# with or without the space or hyphen.
_NAME_PATTERNS: list[tuple[ChallengeCategory, re.Pattern]] = [
    (ChallengeCategory.TOOLING, re.compile(r"\btooling\b", re.I)),
    (ChallengeCategory.CONCEPTUAL, re.compile(r"\bconceptual\b", re.I)),
    (ChallengeCategory.ERRORS, re.compile(r"\berrors\b", re.I)),
    (ChallengeCategory.THEORETICAL, re.compile(r"\btheoretical\b", re.I)),
    (ChallengeCategory.API_USAGE, re.compile(r"\bapi[\s\-]?usage\b", re.I)),
    (ChallengeCategory.LEARNING, re.compile(r"\blearning\b", re.I)),
]

_CATEGORY_LINE_RE = re.compile(r"^\s*category\s*:\s*(.+?)\s*$", re.I | re.M)


def _names_in(text: str) -> list[ChallengeCategory]:
    found = []
    for cat, pattern in _NAME_PATTERNS:
        if pattern.search(text):
            found.append(cat)
    return found


def parse_category(reply: str) -> ChallengeCategory:
    """Extract exactly one category name from a model reply.

    Priority: (1) a "Category: <name>" line; (2) the unique category name
    mentioned anywhere, case-insensitively; (3) failure.
    """
    for match in _CATEGORY_LINE_RE.finditer(reply):
        names = _names_in(match.group(1))
        if names:
            return names[0]
    names = _names_in(reply)
    if len(names) == 1:
        return names[0]
    if len(names) >= 2:
        raise AmbiguousReply(
            f"reply names {len(names)} categories and has no 'Category:' line",
            raw_reply=reply,
        )
    raise UnparsableReply("no category name found in reply", raw_reply=reply)


@dataclass(frozen=True)
class LlmLabelResponse:
    category: ChallengeCategory
    rationale: str
    raw_reply: str
    model_id: str
    latency_ms: int


@dataclass(frozen=True)
class NegotiationTurn:
    """One utterance in a conflict negotiation."""

    speaker: str  # "human" | "llm"
    message: str
    proposed_category: Optional[ChallengeCategory] = None
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __post_init__(self) -> None:
        if not self.message and self.proposed_category is None:
            raise ContractViolation("a negotiation turn needs a message or a proposal")

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker,
            "message": self.message,
            "proposed_category": (
                self.proposed_category.display_name if self.proposed_category else None
            ),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NegotiationTurn":
        from .taxonomy import category_from_name

        proposed = raw.get("proposed_category")
        return cls(
            speaker=raw["speaker"],
            message=raw.get("message", ""),
            proposed_category=category_from_name(proposed) if proposed else None,
            timestamp=raw.get("timestamp", ""),
        )


class ChatTransport(Protocol):
    def send(self, messages: Sequence[dict], temperature: float) -> str:
        """Return the assistant reply text for a chat request."""


class HttpChatTransport:
    """OpenAI-style chat completion endpoint over HTTP."""

    def __init__(self, base_url: str, model_id: str, api_key: str = "", timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls, env=None) -> "HttpChatTransport":
        import os

        env = env if env is not None else os.environ
        url = env.get("QSE_LLM_URL")
        model = env.get("QSE_LLM_MODEL")
        if not url or not model:
            raise ConfigError(
                "chat service not configured: set QSE_LLM_URL and QSE_LLM_MODEL "
                "(and QSE_LLM_KEY if the endpoint needs it)"
            )
        return cls(url, model, env.get("QSE_LLM_KEY", ""))

    def send(self, messages: Sequence[dict], temperature: float) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model_id, "messages": list(messages), "temperature": temperature}
        try:
            response = httpx.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise ServiceUnavailable(f"chat transport failed: {exc}") from exc
        if response.status_code >= 500:
            raise ServiceUnavailable(f"chat service returned {response.status_code}")
        if response.status_code >= 400:
            raise ConfigError(f"chat service rejected request: {response.status_code} {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ServiceUnavailable(f"malformed chat response: {exc}") from exc


class RecordedTransport:
    """Replays a scripted list of replies; used for tests and offline runs.

    Each script entry is {"reply": str} with an optional "match": one
    substring or a list of substrings that must all occur in the outgoing
    message.  Matched entries win over unmatched ones; every entry is
    consumed at most once.
    """

    def __init__(self, script: Iterable[dict | str]):
        self.script = [{"reply": e} if isinstance(e, str) else dict(e) for e in script]
        self.calls: list[Sequence[dict]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "RecordedTransport":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                entries.append(json.loads(line))
        return cls(entries)

    @staticmethod
    def _matches(entry: dict, text: str) -> bool:
        match = entry.get("match")
        needles = [match] if isinstance(match, str) else list(match)
        return all(needle in text for needle in needles)

    def send(self, messages: Sequence[dict], temperature: float) -> str:
        user_text = "\n".join(m.get("content", "") for m in messages)
        with self._lock:
            self.calls.append(messages)
            for entry in self.script:
                if not entry.get("_used") and entry.get("match") and self._matches(entry, user_text):
                    entry["_used"] = True
                    return entry["reply"]
            for entry in self.script:
                if not entry.get("_used") and not entry.get("match"):
                    entry["_used"] = True
                    return entry["reply"]
        raise ServiceUnavailable("recorded transport has no reply left for this request")


class AuditLog:
    """Append-only JSONL log of every request/reply pair."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, post_id: str, prompt: str, raw_reply: str, parsed: str | None) -> None:
        if self.path is None:
            return
        record = {
            "post_id": post_id,
            "prompt": prompt,
            "raw_reply": raw_reply,
            "parsed": parsed,
            "ts": datetime.now(timezone.utc).isoformat(),
        }
        with self._lock, self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def _load_prompt(name: str) -> str:
    return resources.files("qsetag").joinpath(f"prompts/{name}").read_text("utf-8")


def _fill(template: str, values: dict[str, str]) -> str:
    # Plain replacement instead of str.format: post bodies often contain braces.
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


class ChatAnnotator:
    """Labels posts with a challenge category and argues during negotiation."""

    def __init__(
        self,
        transport: ChatTransport,
        model_id: str = "",
        audit_log: AuditLog | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.model_id = model_id or getattr(transport, "model_id", "recorded")
        self.audit_log = audit_log or AuditLog(None)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._definitions = definitions_block()
        self._categorize_template = _load_prompt("categorize.txt")
        self._negotiate_template = _load_prompt("negotiate.txt")

    def _send_with_retry(self, messages: Sequence[dict]) -> str:
        attempt = 0
        while True:
            try:
                return self.transport.send(messages, temperature=0.0)
            except ServiceUnavailable:
                attempt += 1
                if attempt > self.max_retries:
                    raise
                self._sleep(self.backoff_base * (2 ** (attempt - 1)))

    def _round_trip(self, post_id: str, prompt: str) -> tuple[str, int]:
        messages = [
            {"role": "system", "content": DEFAULT_SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]
        start = time.monotonic()
        reply = self._send_with_retry(messages)
        latency_ms = int((time.monotonic() - start) * 1000)
        return reply, latency_ms

    def annotate(self, post: Post) -> LlmLabelResponse:
        """Label one post; the reply is audited before parsing."""
        if not post.body_text.strip():
            raise ContractViolation(f"post {post.post_id} has an empty body")
        prompt = _fill(
            self._categorize_template,
            {"definitions": self._definitions, "title": post.title, "body": post.body_text},
        )
        reply, latency_ms = self._round_trip(post.post_id, prompt)
        parsed: str | None = None
        try:
            category = parse_category(reply)
            parsed = category.display_name
        finally:
            self.audit_log.append(post.post_id, prompt, reply, parsed)
        return LlmLabelResponse(
            category=category,
            rationale=_strip_category_line(reply),
            raw_reply=reply,
            model_id=self.model_id,
            latency_ms=latency_ms,
        )

    def annotate_many(
        self, posts: Sequence[Post]
    ) -> list[tuple[str, LlmLabelResponse | LlmError]]:
        """Annotate a batch with bounded concurrency; results keep input order."""

        def one(post: Post):
            try:
                return post.post_id, self.annotate(post)
            except LlmError as exc:
                return post.post_id, exc

        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            return list(pool.map(one, posts))

    def elaborate(self, case, post: Post) -> NegotiationTurn:
        """Ask the model to weigh both candidate labels and restate its choice."""
        if not case.is_open:
            raise ContractViolation(f"case {case.post_id} is already resolved")
        last_llm = next(
            (t for t in reversed(case.turns) if t.speaker == "llm" and t.message), None
        )
        last_human = next(
            (t for t in reversed(case.turns) if t.speaker == "human" and t.message), None
        )
        rationale_clause = (
            f' with the rationale: {last_human.message}' if last_human else ""
        )
        prompt = _fill(
            self._negotiate_template,
            {
                "definitions": self._definitions,
                "title": post.title,
                "body": post.body_text,
                "llm_label": case.llm_label.display_name,
                "llm_rationale": last_llm.message if last_llm else case.llm_rationale,
                "human_label": case.human_label.display_name,
                "human_rationale_clause": rationale_clause,
            },
        )
        reply, _ = self._round_trip(case.post_id, prompt)
        parsed: str | None = None
        try:
            category = parse_category(reply)
            parsed = category.display_name
        finally:
            self.audit_log.append(case.post_id, prompt, reply, parsed)
        return NegotiationTurn(speaker="llm", message=reply, proposed_category=category)


def _strip_category_line(reply: str) -> str:
    rationale = _CATEGORY_LINE_RE.sub("", reply).strip()
    return rationale or reply.strip()


def reply_for(category: ChallengeCategory, rationale: str = "") -> str:
    """Convenience for building scripted replies in fixtures."""
    body = rationale or "This discussion fits the definition."
    return f"{body}\nCategory: {category.display_name}"
