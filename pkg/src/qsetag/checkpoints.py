"""Checkpoint family resolution for the supported encoder classifiers.

Three pretrained families are supported: bert, distilbert and roberta.  A
checkpoint id is either a hub id (resolved through transformers, requires the
weights to be downloadable or cached) or a local directory.  For offline and
test use, create_scratch_checkpoint() materializes a small randomly
initialized checkpoint whose tokenizer is trained on the given corpus; it
loads through the exact same code path as any other checkpoint directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .errors import ConfigError

FAMILIES = ("distilbert", "roberta", "bert")  # order matters for substring match


def family_of(checkpoint_id: str) -> str:
    """Infer the encoder family from a checkpoint id or directory."""
    path = Path(checkpoint_id)
    config_file = path / "config.json"
    if config_file.exists():
        model_type = json.loads(config_file.read_text("utf-8")).get("model_type", "")
        if model_type in FAMILIES:
            return model_type
        raise ConfigError(
            f"checkpoint {checkpoint_id}: unsupported model_type {model_type!r} "
            f"(supported: {', '.join(sorted(FAMILIES))})"
        )
    lowered = checkpoint_id.lower()
    for family in FAMILIES:
        if family in lowered:
            return family
    raise ConfigError(
        f"cannot infer encoder family from checkpoint id {checkpoint_id!r}; "
        f"supported families: {', '.join(sorted(FAMILIES))}"
    )


def load_tokenizer(checkpoint_id: str):
    from transformers import AutoTokenizer

    family_of(checkpoint_id)  # raise early for unknown families
    try:
        return AutoTokenizer.from_pretrained(checkpoint_id)
    except Exception as exc:
        raise ConfigError(f"cannot load tokenizer for {checkpoint_id!r}: {exc}") from exc


def load_model(checkpoint_id: str, num_labels: int = 6):
    from transformers import AutoModelForSequenceClassification

    family_of(checkpoint_id)
    try:
        return AutoModelForSequenceClassification.from_pretrained(
            checkpoint_id, num_labels=num_labels
        )
    except Exception as exc:
        raise ConfigError(f"cannot load model for {checkpoint_id!r}: {exc}") from exc


def _train_wordpiece(texts: Iterable[str], vocab_size: int):
    from tokenizers import Tokenizer
    from tokenizers.models import WordPiece
    from tokenizers.normalizers import BertNormalizer
    from tokenizers.pre_tokenizers import BertPreTokenizer
    from tokenizers.processors import TemplateProcessing
    from tokenizers.trainers import WordPieceTrainer

    tok = Tokenizer(WordPiece(unk_token="[UNK]"))
    tok.normalizer = BertNormalizer(lowercase=True)
    tok.pre_tokenizer = BertPreTokenizer()
    trainer = WordPieceTrainer(
        vocab_size=vocab_size,
        special_tokens=["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"],
        min_frequency=1,
    )
    tok.train_from_iterator(texts, trainer)
    tok.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", tok.token_to_id("[CLS]")), ("[SEP]", tok.token_to_id("[SEP]"))],
    )
    return tok


def _train_byte_bpe(texts: Iterable[str], vocab_size: int):
    from tokenizers import Tokenizer
    from tokenizers.models import BPE
    from tokenizers.pre_tokenizers import ByteLevel
    from tokenizers.processors import TemplateProcessing
    from tokenizers.decoders import ByteLevel as ByteLevelDecoder
    from tokenizers.trainers import BpeTrainer

    tok = Tokenizer(BPE(unk_token="<unk>"))
    tok.pre_tokenizer = ByteLevel(add_prefix_space=True)
    tok.decoder = ByteLevelDecoder()
    trainer = BpeTrainer(
        vocab_size=vocab_size,
        special_tokens=["<s>", "<pad>", "</s>", "<unk>", "<mask>"],
        initial_alphabet=ByteLevel.alphabet(),
        min_frequency=1,
    )
    tok.train_from_iterator(texts, trainer)
    tok.post_processor = TemplateProcessing(
        single="<s> $A </s>",
        pair="<s> $A </s> </s> $B </s>",
        special_tokens=[("<s>", tok.token_to_id("<s>")), ("</s>", tok.token_to_id("</s>"))],
    )
    return tok


def create_scratch_checkpoint(
    out_dir: str | Path,
    texts: Iterable[str],
    family: str = "bert",
    vocab_size: int = 2000,
    hidden_size: int = 128,
    num_layers: int = 2,
    num_heads: int = 2,
    max_positions: int = 512,
    num_labels: int = 6,
    seed: int = 0,
) -> Path:
    """Write a small random-init checkpoint + corpus-trained tokenizer.

    initializer_range is widened to 0.05 so a from-scratch model of this size
    can actually move at fine-tuning learning rates.
    """
    import torch
    from transformers import PreTrainedTokenizerFast

    if family not in FAMILIES:
        raise ConfigError(f"unsupported scratch checkpoint family {family!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    texts = list(texts)
    if not texts:
        raise ConfigError("cannot train a scratch tokenizer on an empty corpus")

    torch.manual_seed(seed)
    if family == "roberta":
        backend = _train_byte_bpe(texts, vocab_size)
        tokenizer = PreTrainedTokenizerFast(
            tokenizer_object=backend,
            model_max_length=max_positions,
            bos_token="<s>",
            eos_token="</s>",
            unk_token="<unk>",
            pad_token="<pad>",
            cls_token="<s>",
            sep_token="</s>",
            mask_token="<mask>",
        )
    else:
        backend = _train_wordpiece(texts, vocab_size)
        tokenizer = PreTrainedTokenizerFast(
            tokenizer_object=backend,
            model_max_length=max_positions,
            unk_token="[UNK]",
            pad_token="[PAD]",
            cls_token="[CLS]",
            sep_token="[SEP]",
            mask_token="[MASK]",
        )
    vocab_actual = backend.get_vocab_size()

    if family == "bert":
        from transformers import BertConfig, BertForSequenceClassification

        config = BertConfig(
            vocab_size=vocab_actual,
            hidden_size=hidden_size,
            num_hidden_layers=num_layers,
            num_attention_heads=num_heads,
            intermediate_size=hidden_size * 2,
            max_position_embeddings=max_positions,
            num_labels=num_labels,
            initializer_range=0.05,
            pad_token_id=tokenizer.pad_token_id,
        )
        model = BertForSequenceClassification(config)
    elif family == "distilbert":
        from transformers import DistilBertConfig, DistilBertForSequenceClassification

        config = DistilBertConfig(
            vocab_size=vocab_actual,
            dim=hidden_size,
            n_layers=num_layers,
            n_heads=num_heads,
            hidden_dim=hidden_size * 2,
            max_position_embeddings=max_positions,
            num_labels=num_labels,
            initializer_range=0.05,
            pad_token_id=tokenizer.pad_token_id,
        )
        model = DistilBertForSequenceClassification(config)
    else:
        from transformers import RobertaConfig, RobertaForSequenceClassification

        config = RobertaConfig(
            vocab_size=vocab_actual,
            hidden_size=hidden_size,
            num_hidden_layers=num_layers,
            num_attention_heads=num_heads,
            intermediate_size=hidden_size * 2,
            max_position_embeddings=max_positions + 2,
            num_labels=num_labels,
            initializer_range=0.05,
            pad_token_id=tokenizer.pad_token_id,
            bos_token_id=tokenizer.bos_token_id,
            eos_token_id=tokenizer.eos_token_id,
        )
        model = RobertaForSequenceClassification(config)

    tokenizer.save_pretrained(out_dir)
    model.save_pretrained(out_dir)
    return out_dir
