"""Parse Q&A export files into a normalized, deduplicated post corpus.

Exports are CSV downloads (one file per forum) with the columns
Id,Title,Body,Tags,AcceptedAnswerId,CreationDate; answers may live in a
sibling CSV keyed by ParentId.  The output contract is a JSONL corpus file
with a fixed key order consumed by every downstream stage.

Non-English posts are kept as-is: no language heuristic is applied.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from html import unescape
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ContractViolation, IngestError


class Forum(str, Enum):
    SO = "SO"
    QCSE = "QCSE"
    CSSE = "CSSE"
    AISE = "AISE"


TAG_RE = re.compile(r"[a-z0-9#+.\-]+\Z")
URL_RE = re.compile(r"(?:https?://|www\.)[^\s<>\"')\]]+", re.IGNORECASE)
# Control chars other than \n are forbidden in cleaned text.
CONTROL_RE = re.compile(r"[\x00-\x09\x0b-\x1f\x7f]")
# Known HTML tag names only, so code snippets like vector<int> pass validation.
HTML_TAG_RE = re.compile(
    r"</?(?:p|div|a|br|pre|code|em|strong|b|i|u|ul|ol|li|blockquote|span|img"
    r"|h[1-6]|table|tr|td|th|hr|sub|sup|kbd)\b[^>]*>",
    re.IGNORECASE,
)

EXPORT_COLUMNS = ["Id", "Title", "Body", "Tags", "AcceptedAnswerId", "CreationDate"]


@dataclass(frozen=True)
class Post:
    """One developer discussion as mined from an export file."""

    post_id: str
    forum: Forum
    title: str
    body_html: str
    body_text: str
    tags: frozenset[str]
    has_accepted_answer: bool
    created_at: datetime
    answers: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.tags:
            raise IngestError(f"post {self.post_id}: tags must be nonempty")
        for tag in self.tags:
            if not TAG_RE.match(tag):
                raise IngestError(f"post {self.post_id}: invalid tag {tag!r}")
        if HTML_TAG_RE.search(self.body_text):
            raise IngestError(f"post {self.post_id}: body_text still contains HTML")
        if URL_RE.search(self.body_text):
            raise IngestError(f"post {self.post_id}: body_text still contains a URL")
        if CONTROL_RE.search(self.body_text):
            raise IngestError(f"post {self.post_id}: body_text contains control characters")

    @property
    def text(self) -> str:
        """Classifier input: title and question body, never answers."""
        return f"{self.title} {self.body_text}".strip()


@dataclass(frozen=True)
class TagFilter:
    """Match-any tag filter scoped to one forum."""

    forum: Forum
    tags: frozenset[str]

    def __post_init__(self) -> None:
        if not self.tags:
            raise ContractViolation("TagFilter.tags must be nonempty")
        normalized = frozenset(normalize_tag(t) for t in self.tags)
        object.__setattr__(self, "tags", normalized)


def normalize_tag(tag: str) -> str:
    return tag.strip().lower()


# Table of per-forum tag sets used for the study-style four-forum run.
STUDY_TAG_FILTERS: dict[Forum, TagFilter] = {
    Forum.SO: TagFilter(
        Forum.SO,
        frozenset(
            {
                "post-quantum-cryptography",
                "q#",
                "quantum-computing",
                "qiskit",
                "qcl",
                "qutip",
                "qubit",
                "tensorflow-quantum",
            }
        ),
    ),
    Forum.QCSE: TagFilter(
        Forum.QCSE,
        frozenset(
            {
                "programming",
                "classical-computing",
                "q#",
                "qiskit",
                "cirq",
                "ibm-q-experience",
                "machine-learning",
                "qutip",
            }
        ),
    ),
    Forum.CSSE: TagFilter(Forum.CSSE, frozenset({"quantum-computing"})),
    Forum.AISE: TagFilter(Forum.AISE, frozenset({"quantum-computing"})),
}


class _TextExtractor(HTMLParser):
    """Flatten HTML to text: block tags become newlines, script/style dropped.

    Only known HTML tags count as markup; anything else in angle brackets
    (generics in code, decoded &lt;placeholders&gt;) is kept as literal text,
    which also keeps re-cleaning already-clean text a no-op.
    """

    BLOCK_TAGS = {
        "p", "div", "br", "li", "ul", "ol", "pre", "blockquote", "table",
        "tr", "td", "th", "h1", "h2", "h3", "h4", "h5", "h6", "hr",
        "section", "article",
    }
    INLINE_TAGS = {
        "a", "b", "i", "u", "em", "strong", "code", "span", "img", "sub",
        "sup", "kbd", "s", "strike", "small", "big", "font",
    }
    SKIP_TAGS = {"script", "style"}
    KNOWN_TAGS = BLOCK_TAGS | INLINE_TAGS | SKIP_TAGS

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.chunks: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag: str, attrs) -> None:
        if tag in self.SKIP_TAGS:
            self._skip_depth += 1
            return
        if tag in self.BLOCK_TAGS:
            self.chunks.append("\n")
        elif tag not in self.KNOWN_TAGS:
            self.handle_data(self.get_starttag_text() or "")

    def handle_startendtag(self, tag: str, attrs) -> None:
        if tag in self.BLOCK_TAGS:
            self.chunks.append("\n")
        elif tag not in self.KNOWN_TAGS:
            self.handle_data(self.get_starttag_text() or "")

    def handle_endtag(self, tag: str) -> None:
        if tag in self.SKIP_TAGS:
            self._skip_depth = max(0, self._skip_depth - 1)
            return
        if tag in self.BLOCK_TAGS:
            self.chunks.append("\n")
        elif tag not in self.KNOWN_TAGS:
            self.handle_data(f"</{tag}>")

    def handle_data(self, data: str) -> None:
        if self._skip_depth == 0:
            self.chunks.append(data)


def clean_text(html: str) -> str:
    """Strip markup, entities, URLs and stray whitespace from an HTML fragment.

    Rules: tags removed (block boundaries become newlines), entities decoded,
    URLs deleted, control characters dropped, tabs become spaces, interior
    runs of spaces collapse to one while line indentation survives (so code
    blocks keep their line structure), blank lines dropped.  Total and
    idempotent on its own output.
    """
    extractor = _TextExtractor()
    extractor.feed(html)
    extractor.close()
    text = "".join(extractor.chunks)

    text = text.replace("\r\n", "\n").replace("\r", "\n").replace("\t", " ")
    text = CONTROL_RE.sub("", text)
    text = URL_RE.sub("", text)

    lines = []
    for raw_line in text.split("\n"):
        line = raw_line.rstrip()
        stripped = line.lstrip(" ")
        indent = line[: len(line) - len(stripped)]
        lines.append(indent + re.sub(r" {2,}", " ", stripped))
    cleaned = "\n".join(lines)
    cleaned = re.sub(r"\n{2,}", "\n", cleaned)
    return cleaned.strip()


@dataclass
class IngestStats:
    """Row-level accounting for one export file."""

    rows_seen: int = 0
    posts_yielded: int = 0
    reject_count: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)

    def reject(self, line_number: int, reason: str) -> None:
        self.reject_count += 1
        self.rejects.append((line_number, reason))


def parse_tags(raw: str) -> frozenset[str]:
    """Parse the export's angle-bracket or pipe-delimited tag convention."""
    raw = raw.strip()
    if not raw:
        return frozenset()
    if "<" in raw:
        parts = re.findall(r"<([^<>]+)>", raw)
    elif "|" in raw:
        parts = raw.split("|")
    else:
        parts = [raw]
    return frozenset(normalize_tag(p) for p in parts if p.strip())


def _parse_created_at(raw: str) -> datetime:
    value = raw.strip().replace("Z", "+00:00")
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def load_answers(path: str | Path) -> dict[str, list[str]]:
    """Read a sibling answers CSV (Id,ParentId,Body) into parent -> cleaned texts."""
    path = Path(path)
    answers: dict[str, list[str]] = {}
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read answers file {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        for row in reader:
            parent = (row.get("ParentId") or "").strip()
            body = row.get("Body") or ""
            if not parent or not body.strip():
                continue
            answers.setdefault(parent, []).append(clean_text(body))
    return answers


def parse_export(
    path: str | Path,
    forum: Forum,
    answers_path: str | Path | None = None,
    stats: IngestStats | None = None,
) -> Iterator[Post]:
    """Yield one Post per well-formed row of an export CSV.

    Malformed rows (missing Id or Body, unparsable tags or dates) are counted
    in ``stats`` with their line number and skipped; an unreadable file is
    fatal.
    """
    path = Path(path)
    forum = Forum(forum)
    stats = stats if stats is not None else IngestStats()
    answers = load_answers(answers_path) if answers_path else {}

    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read export file {path}: {exc}") from exc

    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not set(EXPORT_COLUMNS[:4]).issubset(reader.fieldnames):
            raise IngestError(
                f"{path}: expected export columns {EXPORT_COLUMNS}, got {reader.fieldnames}"
            )
        for row in reader:
            line_number = reader.line_num
            stats.rows_seen += 1
            post_id = (row.get("Id") or "").strip()
            body_html = row.get("Body") or ""
            if not post_id:
                stats.reject(line_number, "missing Id")
                continue
            if not body_html.strip():
                stats.reject(line_number, "missing Body")
                continue
            tags = parse_tags(row.get("Tags") or "")
            if not tags:
                stats.reject(line_number, "no tags")
                continue
            bad = [t for t in tags if not TAG_RE.match(t)]
            if bad:
                stats.reject(line_number, f"invalid tags: {sorted(bad)}")
                continue
            try:
                created_at = _parse_created_at(row.get("CreationDate") or "")
            except ValueError:
                stats.reject(line_number, "bad CreationDate")
                continue
            body_text = clean_text(body_html)
            if not body_text:
                stats.reject(line_number, "body empty after cleaning")
                continue
            post = Post(
                post_id=post_id,
                forum=forum,
                title=clean_text(unescape(row.get("Title") or "")),
                body_html=body_html,
                body_text=body_text,
                tags=tags,
                has_accepted_answer=bool((row.get("AcceptedAnswerId") or "").strip()),
                created_at=created_at,
                answers=tuple(answers.get(post_id, ())),
            )
            post.validate()
            stats.posts_yielded += 1
            yield post


def apply_tag_filter(posts: Iterable[Post], tag_filter: TagFilter) -> Iterator[Post]:
    """Keep posts whose tags intersect the filter's tag set; order preserved."""
    for post in posts:
        if post.forum != tag_filter.forum:
            raise ContractViolation(
                f"tag filter for {tag_filter.forum.value} applied to a "
                f"{post.forum.value} post ({post.post_id})"
            )
        if post.tags & tag_filter.tags:
            yield post


# JSONL corpus schema: key order is part of the contract.
CORPUS_KEYS = [
    "post_id", "forum", "title", "body_text", "tags",
    "has_accepted_answer", "created_at", "answers",
]


def post_to_record(post: Post) -> dict:
    return {
        "post_id": post.post_id,
        "forum": post.forum.value,
        "title": post.title,
        "body_text": post.body_text,
        "tags": sorted(post.tags),
        "has_accepted_answer": post.has_accepted_answer,
        "created_at": post.created_at.isoformat(),
        "answers": list(post.answers),
    }


def post_from_record(record: dict) -> Post:
    return Post(
        post_id=record["post_id"],
        forum=Forum(record["forum"]),
        title=record["title"],
        body_html="",
        body_text=record["body_text"],
        tags=frozenset(record["tags"]),
        has_accepted_answer=record["has_accepted_answer"],
        created_at=_parse_created_at(record["created_at"]),
        answers=tuple(record["answers"]),
    )


def write_corpus(posts: Iterable[Post], path: str | Path) -> int:
    """Write the corpus JSONL; returns the number of records written.

    Duplicate (forum, post_id) pairs are fatal.  Output is byte-stable for
    identical input.
    """
    path = Path(path)
    seen: set[tuple[str, str]] = set()
    count = 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for post in posts:
            key = (post.forum.value, post.post_id)
            if key in seen:
                raise IngestError(
                    f"duplicate post id {post.post_id!r} in forum {post.forum.value}"
                )
            seen.add(key)
            post.validate()
            handle.write(json.dumps(post_to_record(post), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_corpus(path: str | Path) -> list[Post]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestError(f"cannot read corpus {path}: {exc}") from exc
    posts = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            posts.append(post_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise IngestError(f"{path}:{i}: bad corpus record: {exc}") from exc
    return posts


def answers_for_display(post: Post) -> list[str]:
    """Answers are surfaced in the adjudication UI only, never fed to models."""
    return list(post.answers)
