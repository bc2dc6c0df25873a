"""Command-line pipeline: ingest -> annotate -> negotiate -> train -> serve.

Every subcommand is re-runnable and writes under the config-hash-keyed run
directory.  Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import annotation as ann
from . import dataset as ds
from .config import PipelineConfig
from .errors import ConfigError, QsetagError
from .ingest import (
    Forum,
    IngestStats,
    STUDY_TAG_FILTERS,
    TagFilter,
    apply_tag_filter,
    parse_export,
    read_corpus,
    write_corpus,
)
from .llm import AuditLog, ChatAnnotator, HttpChatTransport, RecordedTransport
from .taxonomy import category_from_name, format_frequency_table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsetag", description=__doc__)
    parser.add_argument("--config", "-c", default=None, help="YAML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse exports, filter by tags, write the corpus")
    p.add_argument("--forum", choices=[f.value for f in Forum])
    p.add_argument("--tags", help="comma-separated tag filter (single-forum mode)")
    p.add_argument("--in", dest="in_path", help="export CSV (single-forum mode)")
    p.add_argument("--answers", help="answers CSV keyed by ParentId")
    p.add_argument("--out", help="corpus JSONL output path")

    p = sub.add_parser("import-annotations", help="record human labels from a CSV")
    p.add_argument("--annotator", help="annotator id, e.g. human:A1")
    p.add_argument("--csv", dest="csv_path", help="CSV with post_id,category[,rationale]")
    p.add_argument("--round", type=int, default=None)

    sub.add_parser("annotate-llm", help="label every corpus post with the chat service")

    p = sub.add_parser("agreement", help="agreement stats between two annotators")
    p.add_argument("--a", dest="annotator_a")
    p.add_argument("--b", dest="annotator_b")
    p.add_argument("--round", type=int, default=None)

    p = sub.add_parser("negotiate", help="run the negotiation loop over open conflicts")
    p.add_argument("--decisions", help="CSV of scripted human decisions")

    sub.add_parser("export-gold", help="write the conflict-free labeled dataset")
    sub.add_parser("report-frequencies", help="category frequency table over the gold labels")

    p = sub.add_parser("analyze-lengths", help="token length distribution for the gold set")
    p.add_argument("--max-len", type=int, default=None)

    p = sub.add_parser("build-folds", help="stratified k-fold plan over the gold set")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="cross-validated fine-tuning")
    p.add_argument("--checkpoint-id", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=None, help="override dataset.k")

    sub.add_parser("evaluate", help="render evaluation reports for the trained folds")

    p = sub.add_parser("explain", help="global + per-class local attributions")
    p.add_argument("--sample-size", type=int, default=None)
    p.add_argument("--top-n", type=int, default=None)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--model-dir", default=None, help="trained model directory (fold dir)")

    sub.add_parser("pipeline", help="run the full chain on the configured inputs")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    over: dict = {}

    def put(section: str, key: str, value) -> None:
        if value is not None:
            over.setdefault(section, {})[key] = value

    put("annotation", "round", getattr(args, "round", None))
    put("annotation", "decisions", getattr(args, "decisions", None))
    put("dataset", "max_len", getattr(args, "max_len", None))
    put("dataset", "k", getattr(args, "k", None))
    put("dataset", "k", getattr(args, "folds", None))
    if args.command == "build-folds":
        put("dataset", "seed", getattr(args, "seed", None))
    put("train", "checkpoint_id", getattr(args, "checkpoint_id", None))
    put("train", "epochs", getattr(args, "epochs", None))
    put("train", "batch_size", getattr(args, "batch_size", None))
    put("train", "learning_rate", getattr(args, "learning_rate", None))
    if args.command == "train":
        put("train", "seed", getattr(args, "seed", None))
    put("explain", "sample_size", getattr(args, "sample_size", None))
    put("explain", "top_n", getattr(args, "top_n", None))
    put("serve", "port", getattr(args, "port", None))
    return over


# -- stage implementations -----------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, args) -> None:
    out = Path(args.out) if getattr(args, "out", None) else cfg.artifact(cfg.section("corpus")["out"])
    posts = []
    totals = []
    if getattr(args, "in_path", None):
        if not args.forum:
            raise ConfigError("single-file ingest needs --forum")
        jobs = [
            {
                "forum": args.forum,
                "path": args.in_path,
                "answers": getattr(args, "answers", None),
                "tags": args.tags.split(",") if args.tags else None,
            }
        ]
    else:
        jobs = []
        for export in cfg.section("corpus")["exports"]:
            job = dict(export)
            job.setdefault("answers", None)
            job["tags"] = cfg.section("corpus")["tags"].get(job["forum"])
            jobs.append(job)
        if not jobs:
            raise ConfigError("no exports configured; set corpus.exports or pass --in/--forum")
    for job in jobs:
        forum = Forum(job["forum"])
        if job.get("tags"):
            tag_filter = TagFilter(forum, frozenset(job["tags"]))
        else:
            tag_filter = STUDY_TAG_FILTERS[forum]
        stats = IngestStats()
        stream = parse_export(
            cfg.resolve_input(job["path"]),
            forum,
            answers_path=cfg.resolve_input(job.get("answers")),
            stats=stats,
        )
        kept = list(apply_tag_filter(stream, tag_filter))
        posts.extend(kept)
        totals.append((forum.value, len(kept), stats.reject_count))
    count = write_corpus(posts, out)
    for forum, kept, rejected in totals:
        print(f"{forum}: kept {kept} post(s), rejected {rejected} row(s)")
    print(f"wrote {count} posts -> {out}")


def _load_store(cfg: PipelineConfig, need_corpus: bool = True) -> ann.AnnotationStore:
    store = ann.AnnotationStore(
        cfg.artifact("store.jsonl"), max_rounds=cfg.section("annotation")["max_rounds"]
    )
    if need_corpus:
        corpus_path = cfg.require_artifact(cfg.section("corpus")["out"], "ingest")
        store.attach_corpus(read_corpus(corpus_path))
    return store


def cmd_import_annotations(cfg: PipelineConfig, args) -> None:
    annotator = getattr(args, "annotator", None) or cfg.section("annotation")["human"]
    csv_path = cfg.resolve_input(
        getattr(args, "csv_path", None) or cfg.section("annotation")["annotations"]
    )
    if csv_path is None:
        raise ConfigError("no annotations CSV: pass --csv or set annotation.annotations")
    round_ = getattr(args, "round", None) or cfg.section("annotation")["round"]
    store = _load_store(cfg)
    n = 0
    with Path(csv_path).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            store.record(
                ann.AnnotationRecord(
                    post_id=row["post_id"],
                    annotator_id=annotator,
                    category=category_from_name(row["category"]),
                    rationale=row.get("rationale") or None,
                    round=round_,
                )
            )
            n += 1
    print(f"recorded {n} annotation(s) for {annotator}")


def _build_annotator(cfg: PipelineConfig) -> ChatAnnotator:
    llm_cfg = cfg.section("llm")
    audit = AuditLog(cfg.artifact(llm_cfg["audit_log"]))
    if llm_cfg["mode"] == "recorded":
        replies = cfg.resolve_input(llm_cfg["replies"])
        if replies is None:
            raise ConfigError("llm.mode=recorded needs llm.replies")
        transport = RecordedTransport.from_file(replies)
        model_id = "recorded"
    else:
        transport = HttpChatTransport.from_env()
        model_id = transport.model_id
    return ChatAnnotator(
        transport,
        model_id=model_id,
        audit_log=audit,
        max_retries=llm_cfg["max_retries"],
        max_in_flight=llm_cfg["max_in_flight"],
    )


def cmd_annotate_llm(cfg: PipelineConfig, args) -> None:
    store = _load_store(cfg)
    annotator = _build_annotator(cfg)
    llm_id = cfg.section("annotation")["llm"]
    round_ = cfg.section("annotation")["round"]
    posts = list(store.posts.values())
    failures = 0
    for post_id, result in annotator.annotate_many(posts):
        if isinstance(result, Exception):
            failures += 1
            print(f"[WARN] {post_id}: {result}", file=sys.stderr)
            continue
        store.record(
            ann.AnnotationRecord(
                post_id=post_id,
                annotator_id=llm_id,
                category=result.category,
                rationale=result.rationale,
                round=round_,
            )
        )
    print(f"annotated {len(posts) - failures}/{len(posts)} posts as {llm_id!r}")
    if failures:
        raise QsetagError(f"{failures} post(s) failed to annotate; see audit log")


def _pair(cfg: PipelineConfig, args) -> tuple[str, str, int]:
    a = getattr(args, "annotator_a", None) or cfg.section("annotation")["human"]
    b = getattr(args, "annotator_b", None) or cfg.section("annotation")["llm"]
    round_ = getattr(args, "round", None) or cfg.section("annotation")["round"]
    return a, b, round_


def cmd_agreement(cfg: PipelineConfig, args) -> None:
    store = _load_store(cfg)
    a, b, round_ = _pair(cfg, args)
    stats = store.agreement(a, b, round_)
    paths = ann.write_agreement_report(stats, cfg.artifact("agreement"))
    print(
        f"{a} vs {b}: Po={stats.percent_agreement:.4f} "
        f"({stats.n_agree}/{stats.n_items}), kappa={stats.kappa:.4f} "
        f"CI95=[{stats.kappa_ci95[0]:.4f}, {stats.kappa_ci95[1]:.4f}]"
    )
    print(f"wrote {', '.join(str(p) for p in paths)}")


def cmd_negotiate(cfg: PipelineConfig, args) -> None:
    store = _load_store(cfg)
    a, b, round_ = _pair(cfg, args)
    cases = store.detect_conflicts(a, b, round_)
    open_cases = [c for c in cases if c.is_open]
    print(f"{len(cases)} conflict(s), {len(open_cases)} open")
    if not open_cases:
        return
    annotator = _build_annotator(cfg)
    decisions_path = cfg.resolve_input(
        getattr(args, "decisions", None) or cfg.section("annotation")["decisions"]
    )
    if decisions_path:
        script: dict[str, list[ann.HumanDecision]] = {}
        with Path(decisions_path).open(newline="", encoding="utf-8") as handle:
            for row in csv.DictReader(handle):
                script.setdefault(row["post_id"], []).append(
                    ann.HumanDecision(
                        action=row["action"],
                        label=category_from_name(row["label"]) if row.get("label") else None,
                        rationale=row.get("rationale") or None,
                    )
                )
        policy: ann.HumanPolicy = ann.ScriptedHumanPolicy(script)
    else:
        policy = ann.always_hold_policy()
    max_rounds = cfg.section("annotation")["max_rounds"]
    outcomes = {"llm": 0, "human": 0, "both": 0, "open": 0}
    for case in open_cases:
        ann.negotiate(store, case, annotator, policy, max_rounds=max_rounds)
        if case.resolution:
            outcomes[case.resolution.conceded_by] += 1
        else:
            outcomes["open"] += 1
    print(
        f"resolved: llm conceded {outcomes['llm']}, human conceded {outcomes['human']}, "
        f"converged {outcomes['both']}; still open {outcomes['open']}"
    )


def cmd_export_gold(cfg: PipelineConfig, args) -> None:
    store = _load_store(cfg)
    a, b, round_ = _pair(cfg, args)
    gold_path = cfg.artifact("gold.jsonl")
    hist = store.export_gold(gold_path, a, b, round_)
    print(format_frequency_table(hist))
    print(f"wrote {hist.total} records -> {gold_path}")


def _load_gold(cfg: PipelineConfig) -> list[ds.LabeledPost]:
    return ds.load_gold(cfg.require_artifact("gold.jsonl", "export-gold"))


def cmd_report_frequencies(cfg: PipelineConfig, args) -> None:
    from .taxonomy import decode, frequency_report

    gold = _load_gold(cfg)
    hist = frequency_report([decode(p.label_index) for p in gold])
    print(format_frequency_table(hist))
    out = cfg.artifact("frequencies.csv")
    pct = hist.percentages()
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["category", "count", "percent"])
        for cat, share in pct.items():
            writer.writerow([cat.display_name, hist.count(cat), f"{share:.2f}"])
        writer.writerow(["Total", hist.total, ""])
    print(f"wrote {out}")


def cmd_analyze_lengths(cfg: PipelineConfig, args) -> None:
    from . import checkpoints

    gold = _load_gold(cfg)
    tokenizer = checkpoints.load_tokenizer(cfg.section("train")["checkpoint_id"])
    report = ds.analyze_lengths(gold, tokenizer, default_max_len=cfg.section("dataset")["max_len"])
    paths = ds.write_length_artifacts(report, cfg.artifact("lengths"))
    pcts = ", ".join(f"p{p}={v:.0f}" for p, v in report.percentiles.items())
    print(f"token lengths: {pcts}; recommended max_len={report.recommended_max_len}")
    print(f"wrote {', '.join(str(p) for p in paths)}")


def cmd_build_folds(cfg: PipelineConfig, args) -> None:
    gold = _load_gold(cfg)
    dataset_cfg = cfg.section("dataset")
    plan = ds.stratified_folds(gold, k=dataset_cfg["k"], seed=dataset_cfg["seed"])
    out = cfg.artifact("folds.csv")
    plan.save_csv(out)
    print(f"assigned {len(plan.assignment)} posts to {plan.k} folds -> {out}")


def _train_config(cfg: PipelineConfig):
    from .training import TrainConfig

    t = cfg.section("train")
    # A checkpoint id naming an existing directory (relative to the config
    # file) is a local checkpoint; anything else is treated as a hub id.
    candidate = cfg.resolve_input(t["checkpoint_id"])
    checkpoint_id = str(candidate) if candidate is not None and candidate.exists() else t["checkpoint_id"]
    return TrainConfig(
        checkpoint_id=checkpoint_id,
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        warmup_fraction=t["warmup_fraction"],
        weight_decay=t["weight_decay"],
        max_len=cfg.section("dataset")["max_len"],
        seed=t["seed"],
        device=t["device"],
    )


def cmd_train(cfg: PipelineConfig, args) -> None:
    from .dataset import FoldPlan
    from .training import cross_validate

    gold = _load_gold(cfg)
    folds_path = cfg.require_artifact("folds.csv", "build-folds")
    plan = FoldPlan.load_csv(folds_path, k=cfg.section("dataset")["k"], seed=cfg.section("dataset")["seed"])
    train_cfg = _train_config(cfg)
    results, summary = cross_validate(gold, plan, train_cfg, run_dir=cfg.run_dir)
    for result in results:
        print(
            f"fold {result.fold}: val_acc={result.report.overall_accuracy:.4f} "
            f"macro_f1={result.report.macro_f1:.4f} best_epoch={result.handle.best_epoch}"
        )
    print(
        f"cv mean accuracy {summary['accuracy_mean']:.4f} ± {summary['accuracy_std']:.4f} "
        f"-> {cfg.run_dir / 'cv_summary.json'}"
    )


def cmd_evaluate(cfg: PipelineConfig, args) -> None:
    from . import checkpoints
    from .dataset import FoldPlan, split_fold, tokenize
    from .metrics import evaluate, render_report
    from .training import ModelHandle, predict

    gold = _load_gold(cfg)
    k = cfg.section("dataset")["k"]
    folds_path = cfg.require_artifact("folds.csv", "build-folds")
    plan = FoldPlan.load_csv(folds_path, k=k)
    if not cfg.artifact("fold0").exists():
        raise ConfigError(f"no trained models under {cfg.run_dir}; run `qsetag train` first")
    outdir = cfg.artifact(cfg.section("eval")["outdir"])
    accs = []
    for fold in range(k):
        handle = ModelHandle.load(cfg.artifact(f"fold{fold}"))
        examples = tokenize(gold, handle.tokenizer, max_len=handle.max_len)
        _, val_examples = split_fold(examples, plan, fold)
        probs = predict(handle, val_examples)
        report = evaluate(
            [e.label_index for e in val_examples], probs.argmax(axis=1).tolist(), probs
        )
        render_report(report, outdir / f"fold{fold}", classifier_name=handle.checkpoint_id)
        accs.append(report.overall_accuracy)
        print(f"fold {fold}: accuracy {report.overall_accuracy:.4f}")
    summary_path = outdir / "summary.csv"
    with summary_path.open("w", newline="", encoding="utf-8") as handle_:
        writer = csv.writer(handle_)
        writer.writerow(["fold", "accuracy"])
        for fold, acc in enumerate(accs):
            writer.writerow([fold, f"{acc:.6f}"])
        writer.writerow(["mean", f"{sum(accs) / len(accs):.6f}"])
    print(f"wrote {outdir}")


def _best_fold_dir(cfg: PipelineConfig) -> Path:
    from .training import MANIFEST_NAME

    best, best_acc = None, -1.0
    for fold_dir in sorted(cfg.run_dir.glob("fold*")):
        manifest = fold_dir / MANIFEST_NAME
        if manifest.exists():
            acc = json.loads(manifest.read_text("utf-8")).get("best_val_acc", 0.0)
            if acc > best_acc:
                best, best_acc = fold_dir, acc
    if best is None:
        raise ConfigError(f"no trained models under {cfg.run_dir}; run `qsetag train` first")
    return best


def cmd_explain(cfg: PipelineConfig, args) -> None:
    import numpy as np

    from .explain import Attributor, render_explanations
    from .taxonomy import decode
    from .training import ModelHandle

    gold = _load_gold(cfg)
    handle = ModelHandle.load(_best_fold_dir(cfg))
    explain_cfg = cfg.section("explain")
    rng = np.random.default_rng(explain_cfg["seed"])
    by_class: dict[int, list[ds.LabeledPost]] = {}
    for post in gold:
        by_class.setdefault(post.label_index, []).append(post)
    per_class = max(1, explain_cfg["sample_size"] // max(1, len(by_class)))
    sample: list[ds.LabeledPost] = []
    for label in sorted(by_class):
        members = by_class[label]
        take = min(per_class, len(members))
        sample.extend(members[i] for i in rng.choice(len(members), size=take, replace=False))
    attributor = Attributor.from_handle(
        handle, max_evals=explain_cfg["budget"], seed=explain_cfg["seed"]
    )
    summary, locals_ = attributor.explain_global(
        [p.text for p in sample], top_n=explain_cfg["top_n"], post_ids=[p.post_id for p in sample]
    )
    # one local fixture per class for the force-plot gallery
    gallery = []
    for label in sorted(by_class):
        post = by_class[label][0]
        gallery.append(attributor.explain(post.text, post_id=f"class-{decode(label).slug}"))
    paths = render_explanations(list(locals_) + gallery, summary, cfg.artifact("explain"))
    top = ", ".join(f.token for f in summary.features[:5])
    print(f"explained {len(sample)} posts; top features: {top}")
    print(f"wrote {len(paths)} files under {cfg.artifact('explain')}")


def cmd_serve(cfg: PipelineConfig, args) -> None:
    import os

    import uvicorn

    from .service import create_app
    from .training import ModelHandle

    model_dir = getattr(args, "model_dir", None) or cfg.section("serve")["model_dir"]
    handle = ModelHandle.load(cfg.resolve_input(model_dir) if model_dir else _best_fold_dir(cfg))
    store_path = cfg.section("serve")["store_path"]
    if store_path:
        store = ann.AnnotationStore(
            cfg.resolve_input(store_path), max_rounds=cfg.section("annotation")["max_rounds"]
        )
        corpus_path = cfg.require_artifact(cfg.section("corpus")["out"], "ingest")
        store.attach_corpus(read_corpus(corpus_path))
    else:
        store = _load_store(cfg)
    try:
        annotator = _build_annotator(cfg)
    except ConfigError:
        annotator = None
    app = create_app(
        model=handle,
        store=store,
        annotator=annotator,
        stats_pair=(cfg.section("annotation")["human"], cfg.section("annotation")["llm"]),
        stats_round=cfg.section("annotation")["round"],
        api_token=os.environ.get("QSE_API_TOKEN"),
        cors_origin=cfg.section("serve")["cors_origin"],
        explain_budget=cfg.section("explain")["budget"],
    )
    uvicorn.run(app, host="127.0.0.1", port=cfg.section("serve")["port"])


PIPELINE_STAGES = [
    "ingest",
    "import-annotations",
    "annotate-llm",
    "agreement",
    "negotiate",
    "export-gold",
    "report-frequencies",
    "analyze-lengths",
    "build-folds",
    "train",
    "evaluate",
    "explain",
]


def cmd_pipeline(cfg: PipelineConfig, args) -> None:
    for stage in PIPELINE_STAGES:
        print(f"== {stage}")
        COMMANDS[stage](cfg, argparse.Namespace())


COMMANDS = {
    "ingest": cmd_ingest,
    "import-annotations": cmd_import_annotations,
    "annotate-llm": cmd_annotate_llm,
    "agreement": cmd_agreement,
    "negotiate": cmd_negotiate,
    "export-gold": cmd_export_gold,
    "report-frequencies": cmd_report_frequencies,
    "analyze-lengths": cmd_analyze_lengths,
    "build-folds": cmd_build_folds,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "serve": cmd_serve,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config, overrides=_overrides_from_args(args))
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except QsetagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
