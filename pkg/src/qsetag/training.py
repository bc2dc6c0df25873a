"""Fine-tuning loop, per-fold cross-validation and prediction.

The recipe: decoupled-weight-decay Adam at the configured learning rate, a
linear schedule with warmup, cross-entropy over six logits, gradient norm
clipping at 1.0, a fixed number of epochs with best-epoch checkpointing by
validation accuracy.  Everything is seeded; two runs with the same seed,
data and config produce the same logs on a deterministic backend.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoints
from .dataset import (
    BalancedTrainSet,
    FoldPlan,
    LabeledPost,
    TokenizedExample,
    assert_no_leakage,
    balance_upsample,
    split_fold,
    tokenize,
)
from .errors import TrainingError
from .metrics import EvalReport, evaluate

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class TrainConfig:
    checkpoint_id: str
    num_classes: int = 6
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    max_len: int = 128
    seed: int = 0
    device: Optional[str] = None
    max_grad_norm: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise TrainingError("warmup_fraction must lie in [0, 1)")

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: Optional[float]
    val_acc: Optional[float]
    lr_at_end: float


@dataclass
class ModelHandle:
    """Reference to trained weights plus the run's headline facts."""

    model: object
    tokenizer: object
    checkpoint_id: str
    max_len: int
    fold: int = -1
    best_epoch: int = 0
    best_val_acc: float = 0.0
    lr_trace: list[float] = field(default_factory=list)

    def save(self, out_dir: str | Path, extra: dict | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.model.save_pretrained(out_dir)
        self.tokenizer.save_pretrained(out_dir)
        manifest = {
            "checkpoint_id": self.checkpoint_id,
            "max_len": self.max_len,
            "fold": self.fold,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
        }
        manifest.update(extra or {})
        (out_dir / MANIFEST_NAME).write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )
        return out_dir

    @classmethod
    def load(cls, model_dir: str | Path) -> "ModelHandle":
        model_dir = Path(model_dir)
        manifest_path = model_dir / MANIFEST_NAME
        if not manifest_path.exists():
            raise TrainingError(f"no {MANIFEST_NAME} in {model_dir}; train a model first")
        manifest = json.loads(manifest_path.read_text("utf-8"))
        model = checkpoints.load_model(str(model_dir), num_labels=6)
        tokenizer = checkpoints.load_tokenizer(str(model_dir))
        model.eval()
        return cls(
            model=model,
            tokenizer=tokenizer,
            checkpoint_id=manifest.get("checkpoint_id", str(model_dir)),
            max_len=int(manifest.get("max_len", 128)),
            fold=int(manifest.get("fold", -1)),
            best_epoch=int(manifest.get("best_epoch", 0)),
            best_val_acc=float(manifest.get("best_val_acc", 0.0)),
        )


def _to_tensors(examples: Sequence[TokenizedExample], device):
    import torch

    ids = torch.tensor([e.input_ids for e in examples], dtype=torch.long, device=device)
    mask = torch.tensor([e.attention_mask for e in examples], dtype=torch.long, device=device)
    labels = torch.tensor([e.label_index for e in examples], dtype=torch.long, device=device)
    return ids, mask, labels


def _check_labels(examples: Sequence[TokenizedExample], num_classes: int) -> None:
    bad = [e.post_id for e in examples if not 0 <= e.label_index < num_classes]
    if bad:
        raise TrainingError(f"label indices out of range 0..{num_classes - 1}: {bad[:5]}")


def fine_tune(
    train: BalancedTrainSet | Sequence[TokenizedExample],
    val: Sequence[TokenizedExample],
    cfg: TrainConfig,
) -> tuple[ModelHandle, list[EpochLog]]:
    """Train for cfg.epochs epochs and keep the epoch with the best val accuracy.

    ``train`` is usually a BalancedTrainSet but a plain example sequence works
    too.  ``val`` may be empty, in which case the final epoch's weights are
    kept.  Train and validation must not share post ids.
    """
    import torch

    fold = getattr(train, "fold", -1)
    train_examples = list(train.examples if isinstance(train, BalancedTrainSet) else train)
    if not train_examples:
        raise TrainingError("empty training set")
    _check_labels(train_examples, cfg.num_classes)
    _check_labels(val, cfg.num_classes)
    assert_no_leakage(train_examples, val)

    device = torch.device(cfg.device or "cpu")
    torch.manual_seed(cfg.seed)
    model = checkpoints.load_model(cfg.checkpoint_id, num_labels=cfg.num_classes)
    model.to(device)
    tokenizer = checkpoints.load_tokenizer(cfg.checkpoint_id)

    ids, mask, labels = _to_tensors(train_examples, device)
    val_tensors = _to_tensors(val, device) if len(val) else None

    n = len(train_examples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    from transformers import get_linear_schedule_with_warmup

    scheduler = get_linear_schedule_with_warmup(
        optimizer,
        num_warmup_steps=int(round(cfg.warmup_fraction * total_steps)),
        num_training_steps=total_steps,
    )

    generator = torch.Generator().manual_seed(cfg.seed)
    logs: list[EpochLog] = []
    lr_trace: list[float] = []
    best_state = None
    best_val_acc = -1.0
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=generator)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            optimizer.zero_grad()
            try:
                out = model(input_ids=ids[idx], attention_mask=mask[idx], labels=labels[idx])
                out.loss.backward()
            except RuntimeError as exc:
                if "out of memory" in str(exc).lower():
                    raise TrainingError(
                        f"device ran out of memory at batch_size={cfg.batch_size}; "
                        "retry with a smaller batch_size"
                    ) from exc
                raise
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            scheduler.step()
            lr_trace.append(float(scheduler.get_last_lr()[0]))
            epoch_loss += float(out.loss.detach()) * len(idx)
            epoch_correct += int((out.logits.detach().argmax(-1) == labels[idx]).sum())
        train_loss = epoch_loss / n
        train_acc = epoch_correct / n

        val_loss = val_acc = None
        if val_tensors is not None:
            val_loss, val_acc = _evaluate_split(model, val_tensors, cfg.batch_size)
            if val_acc > best_val_acc:
                best_val_acc = val_acc
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=train_loss,
                train_acc=train_acc,
                val_loss=val_loss,
                val_acc=val_acc,
                lr_at_end=lr_trace[-1],
            )
        )

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = cfg.epochs
        best_val_acc = 0.0
    model.eval()
    handle = ModelHandle(
        model=model,
        tokenizer=tokenizer,
        checkpoint_id=cfg.checkpoint_id,
        max_len=cfg.max_len,
        fold=fold,
        best_epoch=best_epoch,
        best_val_acc=max(best_val_acc, 0.0),
        lr_trace=lr_trace,
    )
    return handle, logs


def _evaluate_split(model, tensors, batch_size: int) -> tuple[float, float]:
    import torch

    ids, mask, labels = tensors
    n = len(labels)
    loss_sum = 0.0
    correct = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            out = model(input_ids=ids[sl], attention_mask=mask[sl], labels=labels[sl])
            loss_sum += float(out.loss) * (min(start + batch_size, n) - start)
            correct += int((out.logits.argmax(-1) == labels[sl]).sum())
    return loss_sum / n, correct / n


def predict(handle: ModelHandle, examples: Sequence[TokenizedExample], batch_size: int = 32) -> np.ndarray:
    """Softmax probability rows over the six classes, in input order."""
    import torch

    if not examples:
        return np.zeros((0, 6))
    lengths = {len(e.input_ids) for e in examples}
    if lengths != {handle.max_len}:
        raise TrainingError(
            f"examples tokenized at lengths {sorted(lengths)} but the model expects {handle.max_len}"
        )
    vocab_size = int(handle.model.config.vocab_size)
    if max(max(e.input_ids) for e in examples) >= vocab_size:
        raise TrainingError("token ids exceed the model vocabulary: tokenizer/model mismatch")
    device = next(handle.model.parameters()).device
    ids, mask, _ = _to_tensors(examples, device)
    probs = []
    handle.model.eval()
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            sl = slice(start, start + batch_size)
            logits = handle.model(input_ids=ids[sl], attention_mask=mask[sl]).logits
            probs.append(torch.softmax(logits, dim=-1).cpu().numpy())
    return np.concatenate(probs, axis=0)


def predict_texts(handle: ModelHandle, texts: Sequence[str], batch_size: int = 32) -> np.ndarray:
    """Tokenize raw texts with the handle's own tokenizer, then predict."""
    posts = [LabeledPost(post_id=str(i), title="", body_text=t, label_index=0)
             for i, t in enumerate(texts)]
    examples = tokenize(posts, handle.tokenizer, max_len=handle.max_len)
    return predict(handle, examples, batch_size=batch_size)


def write_training_artifacts(logs: Sequence[EpochLog], outdir: str | Path) -> list[Path]:
    """Epoch log CSV plus the accuracy/loss curve plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "epoch_logs.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr_at_end"])
        for log in logs:
            writer.writerow(
                [
                    log.epoch,
                    f"{log.train_loss:.6f}",
                    f"{log.train_acc:.6f}",
                    "" if log.val_loss is None else f"{log.val_loss:.6f}",
                    "" if log.val_acc is None else f"{log.val_acc:.6f}",
                    f"{log.lr_at_end:.3e}",
                ]
            )

    epochs = [log.epoch for log in logs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [log.train_acc for log in logs], label="train")
    if logs and logs[0].val_acc is not None:
        ax1.plot(epochs, [log.val_acc for log in logs], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("accuracy")
    ax1.legend()
    ax2.plot(epochs, [log.train_loss for log in logs], label="train")
    if logs and logs[0].val_loss is not None:
        ax2.plot(epochs, [log.val_loss for log in logs], label="validation")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("loss")
    ax2.legend()
    fig.tight_layout()
    plot_path = outdir / "curves.png"
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return [csv_path, plot_path]


@dataclass(frozen=True)
class FoldResult:
    fold: int
    handle: ModelHandle
    report: EvalReport
    logs: tuple[EpochLog, ...]


def _data_hash(gold: Sequence[LabeledPost]) -> str:
    payload = json.dumps([(p.post_id, p.label_index) for p in gold], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def cross_validate(
    gold: Sequence[LabeledPost],
    plan: FoldPlan,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
) -> tuple[list[FoldResult], dict]:
    """Train and evaluate once per fold; aggregate mean/std across folds.

    Per-fold artifacts (model, manifest, epoch logs, metrics) land under
    run_dir/fold<i>/ when a run directory is given.  If a fold fails, the
    completed folds' artifacts stay on disk and the error propagates.
    """
    tokenizer = checkpoints.load_tokenizer(cfg.checkpoint_id)
    examples = tokenize(gold, tokenizer, max_len=cfg.max_len)
    run_dir = Path(run_dir) if run_dir is not None else None
    data_hash = _data_hash(gold)

    results: list[FoldResult] = []
    for fold in range(plan.k):
        train_examples, val_examples = split_fold(examples, plan, fold)
        balanced = balance_upsample(
            train_examples, seed=cfg.seed + fold, fold=fold, num_classes=cfg.num_classes
        )
        assert_no_leakage(balanced.examples, val_examples)
        handle, logs = fine_tune(balanced, val_examples, cfg)
        probs = predict(handle, val_examples)
        actual = [e.label_index for e in val_examples]
        predicted = probs.argmax(axis=1).tolist()
        report = evaluate(actual, predicted, probs, num_classes=cfg.num_classes)
        if run_dir is not None:
            fold_dir = run_dir / f"fold{fold}"
            handle.save(
                fold_dir,
                extra={
                    "config": dataclasses.asdict(cfg),
                    "config_hash": cfg.hash(),
                    "data_hash": data_hash,
                    "metrics": {
                        "accuracy": report.overall_accuracy,
                        "macro_f1": report.macro_f1,
                        "macro_auc": report.macro_auc,
                    },
                },
            )
            write_training_artifacts(logs, fold_dir)
        results.append(FoldResult(fold=fold, handle=handle, report=report, logs=tuple(logs)))

    accs = [r.report.overall_accuracy for r in results]
    f1s = [r.report.macro_f1 for r in results]
    summary = {
        "k": plan.k,
        "accuracy_mean": float(np.mean(accs)),
        "accuracy_std": float(np.std(accs)),
        "macro_f1_mean": float(np.mean(f1s)),
        "macro_f1_std": float(np.std(f1s)),
        "per_fold_accuracy": accs,
        "config_hash": cfg.hash(),
        "data_hash": data_hash,
    }
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "cv_summary.json").write_text(
            json.dumps(summary, indent=2) + "\n", encoding="utf-8"
        )
    return results, summary
