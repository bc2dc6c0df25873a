"""Toolkit for mining, co-annotating, classifying and explaining QSE Q&A posts."""

from .classifier import ChallengeClassifier
from .taxonomy import CATEGORIES, ChallengeCategory, decode, encode

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "ChallengeCategory",
    "ChallengeClassifier",
    "decode",
    "encode",
    "__version__",
]
