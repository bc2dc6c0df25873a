"""Six-way challenge-category taxonomy with a stable label<->integer codec.

The integer codec is a normative contract shared by the gold dataset, the
trained classifiers, and the HTTP API: Tooling=0, Conceptual=1, Errors=2,
Theoretical=3, ApiUsage=4, Learning=5.  Do not reorder.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping

from .errors import TaxonomyError


class ChallengeCategory(Enum):
    """The six challenge categories assigned to developer discussions."""

    TOOLING = 0
    CONCEPTUAL = 1
    ERRORS = 2
    THEORETICAL = 3
    API_USAGE = 4
    LEARNING = 5

    @property
    def index(self) -> int:
        return self.value

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    @property
    def slug(self) -> str:
        """Lowercase hyphenated name, e.g. ``api-usage``."""
        return self.display_name.lower().replace(" ", "-")


_DISPLAY_NAMES = {
    ChallengeCategory.TOOLING: "Tooling",
    ChallengeCategory.CONCEPTUAL: "Conceptual",
    ChallengeCategory.ERRORS: "Errors",
    ChallengeCategory.THEORETICAL: "Theoretical",
    ChallengeCategory.API_USAGE: "API Usage",
    ChallengeCategory.LEARNING: "Learning",
}

NUM_CATEGORIES = 6

CATEGORIES: tuple[ChallengeCategory, ...] = tuple(
    sorted(ChallengeCategory, key=lambda c: c.value)
)


def encode(category: ChallengeCategory) -> int:
    """Return the stable integer index of a category."""
    return category.value


def decode(index: int) -> ChallengeCategory:
    """Return the category for an integer index in 0..5."""
    try:
        return ChallengeCategory(index)
    except ValueError:
        raise TaxonomyError(f"label index out of range 0..5: {index!r}") from None


def category_from_name(name: str) -> ChallengeCategory:
    """Resolve a category from any reasonable spelling of its name.

    Accepts the display name ("API Usage"), the compact form ("ApiUsage",
    "apiusage"), hyphenated slugs, and is case-insensitive.
    """
    key = "".join(ch for ch in name.lower() if ch.isalnum())
    for cat in CATEGORIES:
        if key == "".join(ch for ch in cat.display_name.lower() if ch.isalnum()):
            return cat
    raise TaxonomyError(f"unknown challenge category: {name!r}")


@dataclass(frozen=True)
class CategoryInfo:
    """Definition and advisory indicator cues for one category.

    Cues are metadata for the adjudication UI and prompt construction only;
    the classifier never sees them.
    """

    category: ChallengeCategory
    definition: str
    cues: tuple[str, ...]


def load_taxonomy() -> list[CategoryInfo]:
    """Load the shipped taxonomy.json artifact, validated against the codec."""
    raw = json.loads(
        resources.files("qsetag").joinpath("data/taxonomy.json").read_text("utf-8")
    )
    if len(raw) != NUM_CATEGORIES:
        raise TaxonomyError(f"taxonomy.json must define exactly 6 categories, got {len(raw)}")
    infos = []
    for entry in raw:
        cat = category_from_name(entry["name"])
        if cat.index != entry["index"]:
            raise TaxonomyError(
                f"taxonomy.json index {entry['index']} disagrees with codec for {entry['name']}"
            )
        infos.append(CategoryInfo(cat, entry["definition"], tuple(entry["cues"])))
    infos.sort(key=lambda i: i.category.index)
    return infos


def definitions_block(infos: Iterable[CategoryInfo] | None = None) -> str:
    """Render category definitions as the bullet list embedded in LLM prompts."""
    infos = list(infos) if infos is not None else load_taxonomy()
    return "\n".join(f"- {i.category.display_name}: {i.definition}" for i in infos)


@dataclass(frozen=True)
class CategoryHistogram:
    """Counts per category plus the grand total."""

    counts: Mapping[ChallengeCategory, int]
    total: int

    def __post_init__(self) -> None:
        if self.total != sum(self.counts.values()):
            raise TaxonomyError("histogram total does not equal the sum of counts")

    def count(self, category: ChallengeCategory) -> int:
        return self.counts.get(category, 0)

    def percentages(self) -> dict[ChallengeCategory, float]:
        """Share of total per category, in percent, 2 decimals, round-half-up."""
        out = {}
        for cat in CATEGORIES:
            share = Decimal(self.count(cat)) * 100 / Decimal(self.total)
            out[cat] = float(share.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
        return out

    def to_dict(self) -> dict:
        return {
            "counts": {c.display_name: self.count(c) for c in CATEGORIES},
            "total": self.total,
        }


def frequency_report(labels: Iterable[ChallengeCategory]) -> CategoryHistogram:
    """Count category frequencies over a nonempty label collection."""
    counter = Counter(labels)
    if not counter:
        raise TaxonomyError("frequency_report requires a nonempty label collection")
    counts = {cat: counter.get(cat, 0) for cat in CATEGORIES}
    return CategoryHistogram(counts=counts, total=sum(counts.values()))


def format_frequency_table(hist: CategoryHistogram) -> str:
    """Plain-text percentage table, one row per category."""
    pct = hist.percentages()
    rows = [
        f"{cat.display_name:<12} {hist.count(cat):>6}  {pct[cat]:>6.2f}%"
        for cat in CATEGORIES
    ]
    rows.append(f"{'Total':<12} {hist.total:>6}")
    return "\n".join(rows)
