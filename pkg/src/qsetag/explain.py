"""Additive token attributions for the classifier, local and global.

The attribution game: players are the content token positions of one encoded
post; a coalition keeps its members and replaces every other player with the
tokenizer's mask token; the payoff is the model's class probability.  Short
inputs get exact Shapley values (subset enumeration); longer ones use
antithetic permutation sampling.  Either way the values sum exactly to
(model output - base value), where the base value is the all-masked input,
so the additivity property holds by construction.  Padding and special
tokens are never players and always receive attribution 0.
"""

from __future__ import annotations

import hashlib
import html
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ExplainError
from .taxonomy import CATEGORIES, ChallengeCategory, NUM_CATEGORIES, decode

ProbFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LocalExplanation:
    """Attribution of one prediction across the input tokens."""

    post_id: str
    predicted: ChallengeCategory
    confidence: float
    base_value: float
    token_attributions: tuple[tuple[str, float], ...]  # merged words, predicted class
    approximate: bool
    pieces: tuple[str, ...]  # raw tokenizer pieces, full padded length
    piece_values: np.ndarray  # (L,) predicted-class value per position
    class_values: np.ndarray  # (L, C) per-class values per position
    base_values: np.ndarray  # (C,) all-masked output per class

    @property
    def model_output(self) -> float:
        """What base_value + sum(attributions) should reproduce."""
        return self.base_value + float(self.piece_values.sum())

    def to_dict(self) -> dict:
        return {
            "post_id": self.post_id,
            "predicted": self.predicted.display_name,
            "confidence": self.confidence,
            "base_value": self.base_value,
            "approximate": self.approximate,
            "tokens": [{"t": t, "v": v} for t, v in self.token_attributions],
        }


@dataclass(frozen=True)
class GlobalFeature:
    token: str
    mean_abs_value: float
    per_class: Mapping[str, float]  # mean |attribution| per class, nonnegative
    per_class_signed: Mapping[str, float]  # mean signed attribution per class


@dataclass(frozen=True)
class GlobalSummary:
    """Features ranked by mean absolute attribution, with per-class split."""

    features: tuple[GlobalFeature, ...]
    sample_size: int

    def top_tokens_for(self, category: ChallengeCategory, n: int = 3) -> list[str]:
        """Strongest positive drivers of one class (signed mean attribution)."""
        ranked = sorted(
            self.features,
            key=lambda f: f.per_class_signed.get(category.display_name, 0.0),
            reverse=True,
        )
        return [f.token for f in ranked[:n]]


def merge_pieces(pieces: Sequence[str]) -> list[tuple[str, list[int]]]:
    """Group sub-word pieces back into display words.

    Handles wordpiece ("##" continuations) and byte/sentencepiece BPE
    ("Ġ"/"▁" word starts).  Returns (word, piece_positions) in order.
    """
    bpe_style = any(p.startswith(("Ġ", "▁")) for p in pieces)
    words: list[tuple[str, list[int]]] = []
    for i, piece in enumerate(pieces):
        if piece.startswith("##") and words:
            word, positions = words[-1]
            words[-1] = (word + piece[2:], positions + [i])
        elif bpe_style and not piece.startswith(("Ġ", "▁")) and words:
            word, positions = words[-1]
            words[-1] = (word + piece, positions + [i])
        else:
            words.append((piece.lstrip("Ġ▁"), [i]))
    return words


class Attributor:
    """Computes additive token attributions against a masked-token baseline."""

    def __init__(
        self,
        tokenizer,
        prob_fn: ProbFn,
        max_len: int = 128,
        max_evals: int = 512,
        exact_limit: int = 10,
        seed: int = 0,
    ):
        self.tokenizer = tokenizer
        self.prob_fn = prob_fn
        self.max_len = max_len
        self.max_evals = max_evals
        self.exact_limit = exact_limit
        self.seed = seed
        self.mask_id = tokenizer.mask_token_id
        if self.mask_id is None:
            self.mask_id = tokenizer.unk_token_id or tokenizer.pad_token_id or 0
        excluded = set()
        for token_id in (
            tokenizer.pad_token_id,
            tokenizer.cls_token_id,
            tokenizer.sep_token_id,
            getattr(tokenizer, "bos_token_id", None),
            getattr(tokenizer, "eos_token_id", None),
        ):
            if token_id is not None:
                excluded.add(int(token_id))
        self._excluded_ids = excluded

    @classmethod
    def from_handle(cls, handle, **kwargs) -> "Attributor":
        """Wrap a trained ModelHandle's forward pass."""
        import torch

        def prob_fn(ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
            device = next(handle.model.parameters()).device
            probs = []
            with torch.no_grad():
                for start in range(0, len(ids), 64):
                    sl = slice(start, start + 64)
                    logits = handle.model(
                        input_ids=torch.as_tensor(ids[sl], dtype=torch.long, device=device),
                        attention_mask=torch.as_tensor(mask[sl], dtype=torch.long, device=device),
                    ).logits
                    probs.append(torch.softmax(logits, dim=-1).cpu().numpy())
            return np.concatenate(probs, axis=0)

        kwargs.setdefault("max_len", handle.max_len)
        return cls(handle.tokenizer, prob_fn, **kwargs)

    # -- core game ---------------------------------------------------------

    def _encode(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        encoded = self.tokenizer(
            text, padding="max_length", truncation=True, max_length=self.max_len
        )
        return np.array(encoded["input_ids"]), np.array(encoded["attention_mask"])

    def _payoffs(self, ids: np.ndarray, mask: np.ndarray, players: list[int],
                 subsets: list[tuple[int, ...]]) -> np.ndarray:
        batch = np.tile(ids, (len(subsets), 1))
        for row, subset in enumerate(subsets):
            drop = [p for p in players if p not in subset]
            batch[row, drop] = self.mask_id
        masks = np.tile(mask, (len(subsets), 1))
        return self.prob_fn(batch, masks)

    def _exact_values(self, ids, mask, players) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(players)
        index_subsets: list[tuple[int, ...]] = [()]
        for size in range(1, n + 1):
            index_subsets.extend(combinations(range(n), size))
        position_subsets = [tuple(players[i] for i in s) for s in index_subsets]
        payoff = dict(zip(index_subsets, self._payoffs(ids, mask, players, position_subsets)))
        values = np.zeros((n, NUM_CATEGORIES))
        fact = [math.factorial(i) for i in range(n + 1)]
        for subset in index_subsets:
            members = set(subset)
            for i in range(n):
                if i in members:
                    continue
                weight = fact[len(subset)] * fact[n - len(subset) - 1] / fact[n]
                with_i = tuple(sorted(subset + (i,)))
                values[i] += weight * (payoff[with_i] - payoff[subset])
        return values, payoff[()], payoff[tuple(range(n))]

    def _sampled_values(self, ids, mask, players, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(players)
        walks = max(2, self.max_evals // (n + 1))
        walks += walks % 2  # antithetic pairs
        base = self._payoffs(ids, mask, players, [()])[0]
        full = self._payoffs(ids, mask, players, [tuple(players)])[0]
        values = np.zeros((n, NUM_CATEGORIES))
        for _ in range(walks // 2):
            order = rng.permutation(n)
            for perm in (order, order[::-1]):
                prefixes = [tuple(players[j] for j in perm[:k]) for k in range(1, n)]
                payoffs = np.vstack([base, self._payoffs(ids, mask, players, prefixes), full])
                marginals = np.diff(payoffs, axis=0)
                for pos, player_idx in enumerate(perm):
                    values[player_idx] += marginals[pos]
        values /= walks
        return values, base, full

    def explain(self, text: str, post_id: str = "") -> LocalExplanation:
        """Local explanation for one post's predicted class."""
        if not text.strip():
            raise ExplainError("cannot explain an empty text")
        ids, mask = self._encode(text)
        players = [
            int(i)
            for i in range(len(ids))
            if mask[i] == 1 and int(ids[i]) not in self._excluded_ids
        ]
        full_probs = self.prob_fn(ids[None, :], mask[None, :])[0]
        predicted = decode(int(np.argmax(full_probs)))
        if not players:
            raise ExplainError("no content tokens to attribute")

        class_values = np.zeros((len(ids), NUM_CATEGORIES))
        if len(players) <= self.exact_limit:
            values, base, _ = self._exact_values(ids, mask, players)
            approximate = False
        else:
            rng = np.random.default_rng(self._post_seed(text))
            values, base, _ = self._sampled_values(ids, mask, players, rng)
            approximate = True
        for row, position in enumerate(players):
            class_values[position] = values[row]

        pieces = tuple(self.tokenizer.convert_ids_to_tokens(ids.tolist()))
        piece_values = class_values[:, predicted.index]
        words = merge_pieces([pieces[p] for p in players])
        player_value = {p: piece_values[p] for p in players}
        token_attributions = tuple(
            (word, float(sum(player_value[players[i]] for i in positions)))
            for word, positions in words
        )
        return LocalExplanation(
            post_id=post_id,
            predicted=predicted,
            confidence=float(full_probs[predicted.index]),
            base_value=float(base[predicted.index]),
            token_attributions=token_attributions,
            approximate=approximate,
            pieces=pieces,
            piece_values=piece_values,
            class_values=class_values,
            base_values=base,
        )

    def _post_seed(self, text: str) -> list[int]:
        digest = hashlib.sha256(text.encode()).digest()
        return [self.seed, int.from_bytes(digest[:8], "big")]

    def explain_global(
        self, texts: Sequence[str], top_n: int = 20, post_ids: Sequence[str] | None = None
    ) -> tuple[GlobalSummary, list[LocalExplanation]]:
        """Aggregate |attribution| per merged word over a sample of posts."""
        if not texts:
            raise ExplainError("global summary needs a nonempty sample")
        abs_sums: dict[str, np.ndarray] = {}
        signed_sums: dict[str, np.ndarray] = {}
        counts: dict[str, int] = {}
        locals_: list[LocalExplanation] = []
        for i, text in enumerate(texts):
            post_id = post_ids[i] if post_ids else f"sample-{i}"
            explanation = self.explain(text, post_id=post_id)
            locals_.append(explanation)
            content = [
                p for p in range(len(explanation.pieces))
                if explanation.pieces[p] not in self.tokenizer.all_special_tokens
            ]
            words = merge_pieces([explanation.pieces[p] for p in content])
            for word, positions in words:
                word_values = explanation.class_values[
                    [content[j] for j in positions]
                ].sum(axis=0)
                if word not in abs_sums:
                    abs_sums[word] = np.zeros(NUM_CATEGORIES)
                    signed_sums[word] = np.zeros(NUM_CATEGORIES)
                    counts[word] = 0
                abs_sums[word] += np.abs(word_values)
                signed_sums[word] += word_values
                counts[word] += 1
        features = []
        for word, total in abs_sums.items():
            mean_abs = total / counts[word]
            mean_signed = signed_sums[word] / counts[word]
            features.append(
                GlobalFeature(
                    token=word,
                    mean_abs_value=float(mean_abs.sum()),
                    per_class={
                        cat.display_name: float(mean_abs[cat.index]) for cat in CATEGORIES
                    },
                    per_class_signed={
                        cat.display_name: float(mean_signed[cat.index]) for cat in CATEGORIES
                    },
                )
            )
        features.sort(key=lambda f: (-f.mean_abs_value, f.token))
        return GlobalSummary(features=tuple(features[:top_n]), sample_size=len(texts)), locals_


def occlusion_delta(attributor: Attributor, explanation: LocalExplanation, text: str) -> float:
    """predicted-class probability change when the top positive token is masked.

    Negative or zero means masking the top token did not help the class, the
    directional consistency the attribution claims.
    """
    if not explanation.token_attributions:
        raise ExplainError("no attributions to occlude")
    ids, mask = attributor._encode(text)
    top_word, _ = max(explanation.token_attributions, key=lambda tv: tv[1])
    occluded = ids.copy()
    hit = False
    content_positions = [
        p for p in range(len(explanation.pieces))
        if explanation.pieces[p] not in attributor.tokenizer.all_special_tokens
    ]
    merged = merge_pieces([explanation.pieces[p] for p in content_positions])
    for word, positions in merged:
        if word == top_word and not hit:
            for j in positions:
                occluded[content_positions[j]] = attributor.mask_id
            hit = True
    if not hit:
        raise ExplainError(f"top token {top_word!r} not found for occlusion")
    before = attributor.prob_fn(ids[None, :], mask[None, :])[0][explanation.predicted.index]
    after = attributor.prob_fn(occluded[None, :], mask[None, :])[0][explanation.predicted.index]
    return float(after - before)


def render_explanations(
    locals_: Sequence[LocalExplanation],
    global_summary: GlobalSummary | None,
    outdir: str | Path,
) -> list[Path]:
    """JSON sidecars, force-style HTML per post, global CSV + bar plot."""
    if not locals_ and global_summary is None:
        raise ExplainError("nothing to render")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    (outdir / "explanations").mkdir(parents=True, exist_ok=True)
    written = []
    for explanation in locals_:
        sidecar = outdir / "explanations" / f"{explanation.post_id}.json"
        sidecar.write_text(
            json.dumps(explanation.to_dict(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
        written.append(sidecar)
        written.append(_write_force_html(explanation, outdir / "explanations"))
    if global_summary is not None:
        csv_path = outdir / "global_summary.csv"
        with csv_path.open("w", encoding="utf-8") as handle:
            header = ["token", "mean_abs_value"] + [c.display_name for c in CATEGORIES]
            handle.write(",".join(header) + "\n")
            for feature in global_summary.features:
                row = [json.dumps(feature.token), f"{feature.mean_abs_value:.6f}"]
                row += [f"{feature.per_class[c.display_name]:.6f}" for c in CATEGORIES]
                handle.write(",".join(row) + "\n")
        written.append(csv_path)
        written.append(_write_global_plot(global_summary, outdir))
    return written


def _write_force_html(explanation: LocalExplanation, outdir: Path) -> Path:
    spans = []
    max_abs = max((abs(v) for _, v in explanation.token_attributions), default=1.0) or 1.0
    for token, value in explanation.token_attributions:
        alpha = min(1.0, abs(value) / max_abs)
        color = f"rgba(214,39,40,{alpha:.2f})" if value > 0 else f"rgba(31,119,180,{alpha:.2f})"
        spans.append(
            f'<span title="{value:+.4f}" style="background:{color};'
            f'padding:1px 2px;border-radius:2px">{html.escape(token)}</span>'
        )
    body = (
        f"<h3>{html.escape(explanation.post_id)} &rarr; "
        f"{html.escape(explanation.predicted.display_name)} "
        f"({explanation.confidence:.4f})</h3>"
        f"<p>base value {explanation.base_value:.4f}"
        f"{' (approximate)' if explanation.approximate else ''}</p>"
        f"<p style='line-height:1.9'>{' '.join(spans)}</p>"
    )
    path = outdir / f"{explanation.post_id}.html"
    path.write_text(f"<!doctype html><meta charset='utf-8'>{body}", encoding="utf-8")
    return path


def _write_global_plot(summary: GlobalSummary, outdir: Path) -> Path:
    import matplotlib.pyplot as plt

    features = list(summary.features)[:20][::-1]
    fig, ax = plt.subplots(figsize=(8, max(3, 0.35 * len(features))))
    left = np.zeros(len(features))
    for cat in CATEGORIES:
        widths = np.array([f.per_class[cat.display_name] for f in features])
        ax.barh([f.token for f in features], widths, left=left, label=cat.display_name)
        left += widths
    ax.set_xlabel("mean |attribution|")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = outdir / "global_summary.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
