import json
from datetime import timezone

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from qsetag.errors import ContractViolation, IngestError
from qsetag.ingest import (
    CONTROL_RE,
    Forum,
    HTML_TAG_RE,
    IngestStats,
    STUDY_TAG_FILTERS,
    TagFilter,
    URL_RE,
    apply_tag_filter,
    clean_text,
    parse_export,
    parse_tags,
    read_corpus,
    write_corpus,
)

from conftest import FIXTURES, load_fixture_corpus


# -- tag parsing ---------------------------------------------------------------


def test_parse_tags_angle_brackets():
    assert parse_tags("<qiskit><qubit>") == frozenset({"qiskit", "qubit"})


def test_parse_tags_pipe_delimited():
    assert parse_tags("qiskit|qubit") == frozenset({"qiskit", "qubit"})


def test_parse_tags_single_and_case():
    assert parse_tags("TensorFlow-Quantum") == frozenset({"tensorflow-quantum"})


def test_tag_filter_requires_tags():
    with pytest.raises(ContractViolation):
        TagFilter(Forum.SO, frozenset())


# -- clean_text ----------------------------------------------------------------


def golden_cases():
    clean_dir = FIXTURES / "clean"
    return sorted(clean_dir.glob("*.html"))


@pytest.mark.parametrize("html_path", golden_cases(), ids=lambda p: p.stem)
def test_clean_text_goldens(html_path):
    golden = html_path.with_suffix("").with_suffix(".golden.txt")
    expected = golden.read_text(encoding="utf-8").rstrip("\n")
    assert clean_text(html_path.read_text(encoding="utf-8")) == expected


def test_clean_text_tag_strip():
    assert clean_text("<p>What is a qubit?</p>") == "What is a qubit?"


def test_clean_text_url_removal():
    assert clean_text("see https://x.y/z for docs") == "see for docs"


@pytest.mark.parametrize("html_path", golden_cases(), ids=lambda p: p.stem)
def test_clean_text_idempotent_on_goldens(html_path):
    once = clean_text(html_path.read_text(encoding="utf-8"))
    assert clean_text(once) == once


WORDS = st.sampled_from(
    ["qubit", "circuit", "error", "gate", "run", "why", "how", "q#", "x1", "3.14"]
)
FRAGMENTS = st.one_of(
    WORDS,
    st.sampled_from(["&amp;", "&lt;x&gt;", "&quot;q&quot;"]),
    st.sampled_from(["https://example.org/a?b=1", "www.site.io/page"]),
    WORDS.map(lambda w: f"<p>{w}</p>"),
    WORDS.map(lambda w: f"<b>{w}</b>"),
    WORDS.map(lambda w: f"<pre><code>{w}\n  {w}</code></pre>"),
    st.sampled_from(["  ", "\t", "\n", "\r\n"]),
)


# generation can be slow on a loaded machine; the strategy itself is small
@settings(suppress_health_check=[HealthCheck.too_slow], deadline=None)
@given(st.lists(FRAGMENTS, min_size=0, max_size=30).map(" ".join))
def test_clean_text_properties(html):
    cleaned = clean_text(html)
    assert clean_text(cleaned) == cleaned
    assert not URL_RE.search(cleaned)
    assert not CONTROL_RE.search(cleaned)
    assert not HTML_TAG_RE.search(cleaned)


# -- parse_export -----------------------------------------------------------------


def test_parse_export_yields_and_rejects():
    stats = IngestStats()
    posts = list(parse_export(FIXTURES / "exports" / "so.csv", Forum.SO, stats=stats))
    # 20 in-filter posts + 2 java posts parse fine; 2 rows are malformed
    assert len(posts) == 22
    assert stats.posts_yielded == 22
    assert stats.reject_count == 2
    reasons = {reason for _, reason in stats.rejects}
    assert reasons == {"missing Body", "missing Id"}
    assert all(line > 1 for line, _ in stats.rejects)


def test_parse_export_unreadable_file():
    with pytest.raises(IngestError):
        list(parse_export(FIXTURES / "exports" / "nope.csv", Forum.SO))


def test_parse_export_attaches_answers():
    posts = {
        p.post_id: p
        for p in parse_export(
            FIXTURES / "exports" / "so.csv",
            Forum.SO,
            answers_path=FIXTURES / "exports" / "so_answers.csv",
        )
    }
    assert len(posts["101"].answers) == 2
    assert len(posts["104"].answers) == 1
    assert posts["102"].answers == ()
    for answer in posts["101"].answers:
        assert not URL_RE.search(answer)
        assert not HTML_TAG_RE.search(answer)


def test_parse_export_field_semantics():
    posts = {p.post_id: p for p in parse_export(FIXTURES / "exports" / "so.csv", Forum.SO)}
    post = posts["101"]
    assert post.forum is Forum.SO
    assert post.has_accepted_answer
    assert not posts["102"].has_accepted_answer
    assert post.created_at.tzinfo == timezone.utc
    assert post.tags == {"qiskit", "qubit"}
    assert "workbench" in post.body_text


# -- tag filtering ------------------------------------------------------------------


def test_tag_filter_keeps_matching():
    posts = list(parse_export(FIXTURES / "exports" / "so.csv", Forum.SO))
    kept = list(apply_tag_filter(posts, STUDY_TAG_FILTERS[Forum.SO]))
    assert len(kept) == 20
    assert [p.post_id for p in kept] == [p.post_id for p in posts if p.tags & STUDY_TAG_FILTERS[Forum.SO].tags]


def test_tag_filter_drops_nonmatching():
    posts = list(parse_export(FIXTURES / "exports" / "so.csv", Forum.SO))
    java_only = TagFilter(Forum.SO, frozenset({"java"}))
    assert len(list(apply_tag_filter(posts, java_only))) == 2


def test_tag_filter_forum_mismatch():
    posts = list(parse_export(FIXTURES / "exports" / "so.csv", Forum.SO))
    with pytest.raises(ContractViolation):
        list(apply_tag_filter(posts, STUDY_TAG_FILTERS[Forum.QCSE]))


def test_tag_filter_monotone():
    posts = list(parse_export(FIXTURES / "exports" / "so.csv", Forum.SO))
    small = TagFilter(Forum.SO, frozenset({"qiskit"}))
    large = TagFilter(Forum.SO, frozenset({"qiskit", "java"}))
    kept_small = {p.post_id for p in apply_tag_filter(posts, small)}
    kept_large = {p.post_id for p in apply_tag_filter(posts, large)}
    assert kept_small <= kept_large


def test_four_forum_fixture_total():
    assert len(load_fixture_corpus()) == 60


# -- corpus JSONL -----------------------------------------------------------------


def test_corpus_roundtrip_bytes(tmp_path, fixture_corpus):
    first = tmp_path / "corpus1.jsonl"
    second = tmp_path / "corpus2.jsonl"
    count = write_corpus(fixture_corpus, first)
    assert count == 60
    assert write_corpus(read_corpus(first), second) == 60
    assert first.read_bytes() == second.read_bytes()


def test_corpus_key_order(tmp_path, fixture_corpus):
    path = tmp_path / "corpus.jsonl"
    write_corpus(fixture_corpus[:1], path)
    record = json.loads(path.read_text().splitlines()[0])
    assert list(record) == [
        "post_id", "forum", "title", "body_text", "tags",
        "has_accepted_answer", "created_at", "answers",
    ]


def test_duplicate_post_id_fatal(tmp_path, fixture_corpus):
    post = fixture_corpus[0]
    with pytest.raises(IngestError, match=post.post_id):
        write_corpus([post, post], tmp_path / "dup.jsonl")


def test_cross_forum_duplicate_allowed(tmp_path, fixture_corpus):
    from dataclasses import replace

    post = fixture_corpus[0]
    other = replace(post, forum=Forum.AISE, tags=frozenset({"quantum-computing"}))
    assert write_corpus([post, other], tmp_path / "cross.jsonl") == 2


def test_post_validation_rejects_bad_tags(fixture_corpus):
    from dataclasses import replace

    bad = replace(fixture_corpus[0], tags=frozenset({"No Spaces Allowed"}))
    with pytest.raises(IngestError):
        bad.validate()
    empty = replace(fixture_corpus[0], tags=frozenset())
    with pytest.raises(IngestError):
        empty.validate()


def test_post_validation_rejects_html_body(fixture_corpus):
    from dataclasses import replace

    bad = replace(fixture_corpus[0], body_html="", body_text="hello <p>there</p>")
    with pytest.raises(IngestError):
        bad.validate()


def test_classifier_text_excludes_answers(fixture_corpus):
    posts = {p.post_id: p for p in fixture_corpus}
    post = posts["101"]
    assert post.answers
    for answer in post.answers:
        assert answer not in post.text
