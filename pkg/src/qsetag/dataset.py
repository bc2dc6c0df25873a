"""Model-ready data: tokenization, length analysis, stratified folds, balancing.

The classifier input is always title + " " + body text; answers never enter
the model (they frequently contain the solution, i.e. label leakage).
Upsampling happens after the cross-validation split and only on the training
side, so no duplicated post can straddle a fold boundary.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.utils import resample

from .errors import DatasetError
from .taxonomy import decode

DEFAULT_MAX_LEN = 128


@dataclass(frozen=True)
class LabeledPost:
    """One gold-dataset record: {post_id, title, body_text, label_index}."""

    post_id: str
    title: str
    body_text: str
    label_index: int

    @property
    def text(self) -> str:
        return f"{self.title} {self.body_text}".strip()


def load_gold(path: str | Path) -> list[LabeledPost]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"gold dataset not found: {path}")
    posts = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            posts.append(
                LabeledPost(raw["post_id"], raw["title"], raw["body_text"], int(raw["label_index"]))
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DatasetError(f"{path}:{i}: bad gold record: {exc}") from exc
    return posts


@dataclass(frozen=True)
class TokenizedExample:
    post_id: str
    input_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    label_index: int

    def __post_init__(self) -> None:
        if len(self.input_ids) != len(self.attention_mask):
            raise DatasetError("input_ids and attention_mask must have equal length")


def tokenize(
    gold: Sequence[LabeledPost], tokenizer, max_len: int = DEFAULT_MAX_LEN
) -> list[TokenizedExample]:
    """Encode titles+bodies to fixed-length id/mask pairs with special tokens."""
    if max_len < 8:
        raise DatasetError(f"max_len must be >= 8, got {max_len}")
    texts = [post.text for post in gold]
    encoded = tokenizer(
        texts,
        padding="max_length",
        truncation=True,
        max_length=max_len,
        add_special_tokens=True,
    )
    examples = []
    for post, ids, mask in zip(gold, encoded["input_ids"], encoded["attention_mask"]):
        examples.append(
            TokenizedExample(
                post_id=post.post_id,
                input_ids=tuple(ids),
                attention_mask=tuple(mask),
                label_index=post.label_index,
            )
        )
    return examples


PERCENTILES = (50, 90, 95, 99)


@dataclass(frozen=True)
class LengthReport:
    token_counts: Mapping[str, int]  # post_id -> token count (with special tokens)
    percentiles: Mapping[int, float]
    recommended_max_len: int

    def histogram(self, bin_width: int = 16) -> list[tuple[int, int, int]]:
        """(bin_start, bin_end, count) rows covering all observed lengths."""
        counts = list(self.token_counts.values())
        top = max(counts)
        rows = []
        start = 0
        while start <= top:
            end = start + bin_width
            rows.append((start, end, sum(1 for c in counts if start <= c < end)))
            start = end
        return rows


def analyze_lengths(
    gold: Sequence[LabeledPost], tokenizer, default_max_len: int = DEFAULT_MAX_LEN
) -> LengthReport:
    """Token-count distribution over the gold dataset.

    The recommendation is the configured default (128 unless overridden); the
    percentile table is there to sanity-check it against the corpus.
    """
    if not gold:
        raise DatasetError("cannot analyze an empty dataset")
    counts = {}
    for post in gold:
        counts[post.post_id] = len(
            tokenizer(post.text, add_special_tokens=True, truncation=False)["input_ids"]
        )
    values = np.array(list(counts.values()))
    percentiles = {p: float(np.percentile(values, p)) for p in PERCENTILES}
    return LengthReport(
        token_counts=counts, percentiles=percentiles, recommended_max_len=default_max_len
    )


def write_length_artifacts(report: LengthReport, outdir: str | Path) -> list[Path]:
    """histogram CSV + PNG plot + percentile CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    hist_path = outdir / "token_lengths.csv"
    rows = report.histogram()
    with hist_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["bin_start", "bin_end", "count"])
        writer.writerows(rows)
    pct_path = outdir / "token_length_percentiles.csv"
    with pct_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["percentile", "tokens"])
        for p, v in report.percentiles.items():
            writer.writerow([p, f"{v:.1f}"])
        writer.writerow(["recommended_max_len", report.recommended_max_len])

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(
        [r[0] for r in rows],
        [r[2] for r in rows],
        width=[r[1] - r[0] for r in rows],
        align="edge",
        edgecolor="white",
    )
    ax.axvline(report.recommended_max_len, color="crimson", linestyle="--", label="max length")
    ax.set_xlabel("tokens per discussion")
    ax.set_ylabel("discussions")
    ax.legend()
    fig.tight_layout()
    plot_path = outdir / "token_lengths.png"
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return [hist_path, pct_path, plot_path]


@dataclass(frozen=True)
class FoldPlan:
    """Stratified assignment of every post to exactly one of k folds."""

    k: int
    assignment: Mapping[str, int]
    seed: int

    def fold_of(self, post_id: str) -> int:
        return self.assignment[post_id]

    def post_ids(self, fold: int) -> list[str]:
        return [pid for pid, f in self.assignment.items() if f == fold]

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["post_id", "fold"])
            for post_id in sorted(self.assignment):
                writer.writerow([post_id, self.assignment[post_id]])

    @classmethod
    def load_csv(cls, path: str | Path, k: int, seed: int = -1) -> "FoldPlan":
        assignment = {}
        with Path(path).open(newline="", encoding="utf-8") as handle:
            for row in csv.DictReader(handle):
                assignment[row["post_id"]] = int(row["fold"])
        return cls(k=k, assignment=assignment, seed=seed)


def stratified_folds(gold: Sequence[LabeledPost], k: int = 5, seed: int = 0) -> FoldPlan:
    """Per-class round-robin fold assignment after a seeded shuffle.

    Guarantees per-class fold counts differ by at most one.  Fails naming the
    class if any class has fewer than k examples.
    """
    if k < 2:
        raise DatasetError(f"k must be >= 2, got {k}")
    by_class: dict[int, list[str]] = defaultdict(list)
    for post in gold:
        by_class[post.label_index].append(post.post_id)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < k:
            raise DatasetError(
                f"class {decode(label).display_name} has only {len(ids)} examples, "
                f"need at least k={k} for stratified folds"
            )
        rng.shuffle(ids)
        for i, post_id in enumerate(ids):
            if post_id in assignment:
                raise DatasetError(f"duplicate post_id {post_id!r} in gold dataset")
            assignment[post_id] = i % k
    return FoldPlan(k=k, assignment=assignment, seed=seed)


def split_fold(
    examples: Sequence[TokenizedExample], plan: FoldPlan, fold: int
) -> tuple[list[TokenizedExample], list[TokenizedExample]]:
    """(train, validation) split for one fold; validation = the held-out fold."""
    if not 0 <= fold < plan.k:
        raise DatasetError(f"fold {fold} out of range 0..{plan.k - 1}")
    train, val = [], []
    for example in examples:
        if plan.fold_of(example.post_id) == fold:
            val.append(example)
        else:
            train.append(example)
    return train, val


@dataclass(frozen=True)
class BalancedTrainSet:
    """Training multiset after minority upsampling; all class counts equal."""

    fold: int
    examples: tuple[TokenizedExample, ...]
    class_counts: Mapping[int, int]

    def __post_init__(self) -> None:
        if len(set(self.class_counts.values())) > 1:
            raise DatasetError("balanced set has unequal class counts")


def balance_upsample(
    examples: Sequence[TokenizedExample],
    seed: int = 0,
    fold: int = -1,
    num_classes: int | None = None,
) -> BalancedTrainSet:
    """Duplicate minority-class examples (with replacement) up to the majority.

    Every original example is kept, so the distinct post_id support is
    unchanged.  With num_classes given, an absent class is an error; without
    it, balancing runs over the classes present (handy for small toy sets).
    """
    if not examples:
        raise DatasetError("cannot balance an empty training set")
    by_class: dict[int, list[TokenizedExample]] = defaultdict(list)
    for example in examples:
        by_class[example.label_index].append(example)
    if num_classes is not None:
        missing = [c for c in range(num_classes) if not by_class.get(c)]
        if missing:
            names = ", ".join(decode(c).display_name for c in missing)
            raise DatasetError(f"cannot upsample: class(es) absent from training set: {names}")
    majority = max(len(v) for v in by_class.values())
    balanced = list(examples)
    for label in sorted(by_class):
        members = by_class[label]
        deficit = majority - len(members)
        if deficit > 0:
            extras = resample(
                members, replace=True, n_samples=deficit, random_state=seed + label
            )
            balanced.extend(extras)
    counts = Counter(e.label_index for e in balanced)
    return BalancedTrainSet(fold=fold, examples=tuple(balanced), class_counts=dict(counts))


def assert_no_leakage(train: Iterable[TokenizedExample], val: Iterable[TokenizedExample]) -> None:
    overlap = {e.post_id for e in train} & {e.post_id for e in val}
    if overlap:
        raise DatasetError(f"train/validation leakage: {sorted(overlap)[:10]}")
