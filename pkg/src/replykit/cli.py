"""Command-line entry points for the whole pipeline.

    replykit synth          generate a synthetic dialogue corpus
    replykit prep           normalize/regularize, build vocab, emit pairs
    replykit skipthought    train the utterance embedder used by curation
    replykit extract-canned cluster frequent agent utterances into a canned list
    replykit weak-label     derive positive/negative weak labels
    replykit train          train contrastive/binary/multiclass matching models
    replykit eval           ranking metrics and threshold calibration
    replykit serve          run the suggestion HTTP service
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import curation, evaluation, objectives, synthetic
from .autodiff import Rng
from .model import HierarchicalModel, ModelConfig, load_checkpoint
from .optim import OptimizerConfig
from .skipgram import apply_pretrained_word_embeddings, train_skipgram
from .skipthought import (
    SkipThoughtConfig,
    fit_center,
    load_skipthought,
    save_skipthought,
    text_embedder,
    train_skipthought,
)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="replykit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_prep(sub)
    _add_skipthought(sub)
    _add_extract(sub)
    _add_weak_label(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_serve(sub)
    args = parser.parse_args(argv)
    return args.func(args)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _add_synth(sub) -> None:
    p = sub.add_parser("synth", help="generate a synthetic support-chat corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--intents", type=int, default=20)
    p.add_argument("--dialogues", type=int, default=500)
    p.add_argument("--templates-per-intent", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--paraphrase", type=float, default=0.0)
    p.add_argument("--extra-round-rate", type=float, default=0.5)
    p.add_argument("--close-rate", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.add_argument("--templates-out", help="also dump the intent templates as JSON")
    p.set_defaults(func=_run_synth)


def _run_synth(args) -> int:
    spec = synthetic.SyntheticSpec(
        n_intents=args.intents, n_dialogues=args.dialogues,
        templates_per_intent=args.templates_per_intent, noise_rate=args.noise,
        paraphrase_rate=args.paraphrase, extra_round_rate=args.extra_round_rate,
        close_rate=args.close_rate, rng_seed=args.seed)
    dialogues = synthetic.generate_synthetic_corpus(spec)
    corpus_mod.save_corpus(dialogues, args.out)
    if args.templates_out:
        Path(args.templates_out).write_text(json.dumps(synthetic.synthetic_templates(spec)))
    print(corpus_mod.format_stats(corpus_mod.corpus_stats(dialogues)))
    return 0


# ---------------------------------------------------------------------------
# prep
# ---------------------------------------------------------------------------

def _add_prep(sub) -> None:
    p = sub.add_parser("prep", help="regularize corpus, build vocab, emit training pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-cap", type=int, default=corpus_mod.DEFAULT_VOCAB_CAP)
    p.add_argument("--utterance-len", type=int, default=corpus_mod.DEFAULT_UTTERANCE_LEN)
    p.add_argument("--max-context", type=int, default=corpus_mod.DEFAULT_MAX_CONTEXT)
    p.add_argument("--out", required=True, help="pairs file (jsonl)")
    p.add_argument("--vocab-out", required=True)
    p.set_defaults(func=_run_prep)


def _run_prep(args) -> int:
    raw = corpus_mod.load_corpus(args.corpus)
    regular = []
    skipped = 0
    for dialogue in raw:
        try:
            regular.append(corpus_mod.regularize_turns(dialogue))
        except corpus_mod.EmptyDialogue:
            skipped += 1
    vocab = corpus_mod.build_vocab(regular, cap=args.vocab_cap)
    vocab.save(args.vocab_out)
    pairs = [p for d in regular
             for p in corpus_mod.make_pairs(d, vocab, args.max_context, args.utterance_len)]
    corpus_mod.save_pairs(pairs, args.out)
    print(f"dialogues={len(regular)} skipped={skipped} vocab={vocab.size} pairs={len(pairs)}")
    return 0


# ---------------------------------------------------------------------------
# skipthought
# ---------------------------------------------------------------------------

def _add_skipthought(sub) -> None:
    p = sub.add_parser("skipthought", help="train the skip-thought utterance embedder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--word-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--utterance-len", type=int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_skipthought)


def _run_skipthought(args) -> int:
    dialogues = _load_regularized(args.corpus)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    config = SkipThoughtConfig(vocab_size=vocab.size, word_dim=args.word_dim,
                               hidden=args.hidden, utterance_len=args.utterance_len)
    model, history = train_skipthought(
        dialogues, vocab, config, epochs=args.epochs, seed=args.seed,
        optimizer=OptimizerConfig(kind="adam", lr=args.lr), log=print)
    center = fit_center(model, vocab, dialogues)
    save_skipthought(args.out, model, vocab, center=center)
    print(f"saved embedder to {args.out} (final loss/window {history[-1]:.3f})")
    return 0


# ---------------------------------------------------------------------------
# extract-canned
# ---------------------------------------------------------------------------

def _add_extract(sub) -> None:
    p = sub.add_parser("extract-canned", help="cluster frequent agent utterances")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embedder", required=True, help="skip-thought checkpoint dir")
    p.add_argument("--top-n", type=int, default=10_000)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dedup-threshold", type=float, default=None,
                   help="default: calibrate from a generated similarity dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_extract)


def _run_extract(args) -> int:
    dialogues = _load_regularized(args.corpus)
    model, vocab, center = load_skipthought(args.embedder)
    embedder = text_embedder(model, vocab, center=center)
    threshold = args.dedup_threshold
    if threshold is None:
        pairs = curation.generate_similarity_dataset(dialogues, embedder,
                                                     n_similar=300, n_unique=1000, seed=args.seed)
        scored = [(p.score, 1 if p.label == curation.SIMILAR else 0) for p in pairs]
        try:
            threshold = curation.choose_threshold(scored)
            print(f"calibrated dedup threshold: {threshold:.4f}")
        except curation.SingleClass:
            threshold = 1.0  # no labelled similar pairs: only exact embedding twins collapse
            print("similarity dataset had one class; dedup threshold fixed at 1.0")
    canned = curation.extract_canned_list(dialogues, embedder, top_n=args.top_n,
                                          k=args.k, seed=args.seed,
                                          dedup_threshold=threshold)
    canned.save(args.out)
    print(f"extracted {len(canned)} canned responses -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# weak-label
# ---------------------------------------------------------------------------

def _add_weak_label(sub) -> None:
    p = sub.add_parser("weak-label", help="derive weak positive/negative labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--canned", required=True)
    p.add_argument("--embedder", required=True, help="skip-thought checkpoint dir")
    p.add_argument("--strategies", default="exact,fuzzy,neg-wrong,neg-nomatch",
                   help="comma list: exact,fuzzy,neg-wrong,neg-nomatch,neg-rejected")
    p.add_argument("--threshold", type=float, default=None,
                   help="fuzzy/negative similarity threshold; default: ROC-calibrated")
    p.add_argument("--usage-log", help="usage store for neg-rejected / usage positives")
    p.add_argument("--utterance-len", type=int, default=corpus_mod.DEFAULT_UTTERANCE_LEN)
    p.add_argument("--max-context", type=int, default=corpus_mod.DEFAULT_MAX_CONTEXT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_weak_label)


def _run_weak_label(args) -> int:
    dialogues = _load_regularized(args.corpus)
    canned = curation.CannedList.load(args.canned)
    model, vocab, center = load_skipthought(args.embedder)
    embedder = text_embedder(model, vocab, center=center)
    strategies = {s.strip() for s in args.strategies.split(",") if s.strip()}
    threshold = args.threshold
    if threshold is None and strategies & {"fuzzy", "neg-wrong", "neg-nomatch"}:
        sim_pairs = curation.generate_similarity_dataset(dialogues, embedder,
                                                         n_similar=300, n_unique=1000,
                                                         seed=args.seed)
        scored = [(p.score, 1 if p.label == curation.SIMILAR else 0) for p in sim_pairs]
        try:
            threshold = curation.choose_threshold(scored)
            print(f"calibrated similarity threshold: {threshold:.4f}")
        except curation.SingleClass:
            threshold = curation.DEFAULT_SIM_THRESHOLD

    labels: list[curation.WeakLabel] = []
    positives: list[curation.WeakLabel] = []
    if "exact" in strategies:
        positives.extend(curation.exact_match_positives(
            dialogues, canned, vocab, args.utterance_len, args.max_context))
    if "fuzzy" in strategies:
        positives.extend(curation.fuzzy_match_positives(
            dialogues, canned, embedder, threshold=threshold, vocab=vocab,
            utterance_len=args.utterance_len, max_context=args.max_context))
    usage_negatives = None
    if args.usage_log:
        from .serving import UsageStore

        store = UsageStore(args.usage_log)
        exported = store.export_weak_labels(vocab, args.utterance_len, args.max_context)
        positives.extend(l for l in exported if l.polarity == curation.POSITIVE)
        usage_negatives = [l for l in exported if l.polarity == curation.NEGATIVE]
    labels.extend(positives)
    negative_strategies = strategies & {"neg-wrong", "neg-nomatch", "neg-rejected"}
    if negative_strategies:
        negatives = curation.build_negative_dataset(
            positives, dialogues, canned, embedder,
            usage_negatives=usage_negatives if "neg-rejected" in strategies else None,
            seed=args.seed, threshold=threshold or curation.DEFAULT_SIM_THRESHOLD,
            vocab=vocab, utterance_len=args.utterance_len, max_context=args.max_context)
        wanted = {"neg-wrong": curation.STRATEGY_WRONG_TARGET,
                  "neg-nomatch": curation.STRATEGY_NO_MATCH_CONTEXT,
                  "neg-rejected": curation.STRATEGY_REJECTED}
        keep = {wanted[s] for s in negative_strategies}
        labels.extend(n for n in negatives if n.negative_strategy in keep)
    curation.save_weak_labels(labels, args.out)
    by_kind: dict[str, int] = {}
    for label in labels:
        key = label.source or label.negative_strategy
        by_kind[key] = by_kind.get(key, 0) + 1
    print(f"wrote {len(labels)} weak labels -> {args.out} {by_kind}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train a matching model")
    p.add_argument("--objective", choices=objectives.OBJECTIVES, default="contrastive")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--weak-labels", help="positive weak labels (class ids for classifiers)")
    p.add_argument("--canned", help="canned list (classifier objectives)")
    p.add_argument("--eval-pairs", help="held-out pairs for per-epoch recall logging")
    p.add_argument("--eval-labels", help="weak labels giving true canned ids for eval pairs")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--margin", type=float, default=0.5,
                   help="desk-scale default; production-scale used 1e-4")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--word-dim", type=int, default=32)
    p.add_argument("--utterance-hidden", type=int, default=64)
    p.add_argument("--context-hidden", type=int, default=64)
    p.add_argument("--projection-dim", type=int, default=64)
    p.add_argument("--utterance-len", type=int, default=16)
    p.add_argument("--max-context", type=int, default=corpus_mod.DEFAULT_MAX_CONTEXT)
    p.add_argument("--dropout-keep", type=float, default=1.0,
                   help="desk-scale default; production-scale used 0.5")
    p.add_argument("--pretrain-words", action="store_true",
                   help="skip-gram pretraining pass for the word table")
    p.add_argument("--corpus", help="corpus for --pretrain-words")
    p.add_argument("--patience", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_run_train)


def _run_train(args) -> int:
    pairs = corpus_mod.load_pairs(args.pairs)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    config = ModelConfig(
        vocab_size=vocab.size, word_dim=args.word_dim,
        utterance_hidden=args.utterance_hidden, context_hidden=args.context_hidden,
        projection_dim=args.projection_dim, utterance_len=args.utterance_len,
        max_context_utterances=args.max_context, dropout_keep=args.dropout_keep)
    model = HierarchicalModel(config, rng=Rng(args.seed))
    if args.pretrain_words:
        if not args.corpus:
            print("--pretrain-words needs --corpus", file=sys.stderr)
            return 2
        vectors = train_skipgram(_load_regularized(args.corpus), vocab,
                                 dim=args.word_dim, seed=args.seed)
        apply_pretrained_word_embeddings(model, vectors)

    class_ids = None
    canned_targets = None
    canned = curation.CannedList.load(args.canned) if args.canned else None
    n_classes = len(canned) if canned else None
    if args.weak_labels:
        lookup = _label_lookup(args.weak_labels)
        class_ids = []
        kept_pairs = []
        for pair in pairs:
            cid = lookup.get((pair.dialogue_id, pair.turn_index))
            if cid is not None:
                kept_pairs.append(pair)
                class_ids.append(cid)
        pairs = kept_pairs
        if canned:
            canned_targets = [corpus_mod.encode_utterance_ids(t, vocab, args.utterance_len)
                              for t in canned.texts()]

    eval_fn = None
    if args.eval_pairs and args.eval_labels and canned:
        eval_pairs = corpus_mod.load_pairs(args.eval_pairs)
        eval_lookup = _label_lookup(args.eval_labels)
        matched = [(p, eval_lookup[(p.dialogue_id, p.turn_index)]) for p in eval_pairs
                   if (p.dialogue_id, p.turn_index) in eval_lookup]
        def eval_fn(m, head):
            embs = evaluation.embed_canned(m, canned, vocab)
            cases = evaluation.cases_against_canned(
                m, [p for p, _ in matched], [cid for _, cid in matched], embs,
                objective=args.objective, head=head)
            return {"r_at_1": evaluation.recall_at_k(cases, 1),
                    "r_at_3": evaluation.recall_at_k(cases, 3),
                    "r_at_10": evaluation.recall_at_k(cases, min(10, len(canned)))}

    training = objectives.TrainingConfig(
        objective=args.objective, margin=args.margin, batch_size=args.batch_size,
        epochs=args.epochs, rng_seed=args.seed, n_classes=n_classes,
        early_stop_patience=args.patience,
        optimizer=OptimizerConfig(kind=args.optimizer, lr=args.lr, lr_decay=args.lr_decay))
    result = objectives.train(model, pairs, training, class_ids=class_ids,
                              canned_targets=canned_targets, vocab=vocab,
                              out_dir=args.out, eval_fn=eval_fn, log=print)
    print(f"done; best epoch {result.best_epoch}; checkpoints under {args.out}")
    return 0


def _label_lookup(path: str) -> dict[tuple[str, int], int]:
    labels = curation.load_weak_labels(path)
    return {(l.pair.dialogue_id, l.pair.turn_index): l.canned_id
            for l in labels if l.polarity == curation.POSITIVE}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="ranking metrics and threshold calibration")
    p.add_argument("--model", required=True, help="checkpoint dir")
    p.add_argument("--canned", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--labels", required=True, help="weak labels giving true canned ids")
    p.add_argument("--protocol", choices=["canned", "batch128"], default="canned")
    p.add_argument("--k", default="1,3,10")
    p.add_argument("--calibrate-rate", type=float, default=None,
                   help="also calibrate the suggestion threshold at this rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_run_eval)


def _run_eval(args) -> int:
    bundle = load_checkpoint(args.model)
    canned = curation.CannedList.load(args.canned)
    pairs = corpus_mod.load_pairs(args.pairs)
    lookup = _label_lookup(args.labels)
    matched = [(p, lookup[(p.dialogue_id, p.turn_index)]) for p in pairs
               if (p.dialogue_id, p.turn_index) in lookup]
    if not matched:
        print("no pairs with labels; nothing to evaluate", file=sys.stderr)
        return 2
    eval_pairs = [p for p, _ in matched]
    true_ids = [cid for _, cid in matched]
    ks = [int(k) for k in args.k.split(",")]
    report: dict = {"protocol": args.protocol, "n_cases": len(eval_pairs),
                    "checkpoint_id": bundle.checkpoint_id, "objective": bundle.objective}
    if args.protocol == "canned":
        embs = evaluation.embed_canned(bundle.model, canned, bundle.vocab,
                                       checkpoint_id=bundle.checkpoint_id)
        cases = evaluation.cases_against_canned(bundle.model, eval_pairs, true_ids, embs,
                                                objective=bundle.objective, head=bundle.head)
    else:
        pool = [p.target for p in pairs]
        cases = evaluation.cases_against_sampled(bundle.model, eval_pairs, pool,
                                                 n_candidates=128, seed=args.seed)
    for k in ks:
        report[f"r_at_{k}"] = evaluation.recall_at_k(cases, k)
    report["avg_pos"] = evaluation.avg_pos(cases)
    if args.calibrate_rate:
        confidences = [float(np.max(c.scores)) for c in cases]
        correct = [evaluation.rank_of_true(c) == 1 for c in cases]
        threshold_report = evaluation.calibrate_threshold(
            confidences, args.calibrate_rate, correct=correct,
            min_cases=min(100, len(confidences)))
        report["threshold_report"] = threshold_report.to_dict()
    Path(args.report).write_text(json.dumps(report, indent=2))
    metrics = {k: round(v, 4) for k, v in report.items() if isinstance(v, float)}
    print(json.dumps(metrics, indent=2))
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def _add_serve(sub) -> None:
    p = sub.add_parser("serve", help="run the suggestion HTTP service")
    p.add_argument("--model", required=True, help="checkpoint dir")
    p.add_argument("--canned", required=True)
    p.add_argument("--canned-emb", help="embedding dump (npz); default: embed at startup")
    p.add_argument("--threshold-report", help="calibration report JSON")
    p.add_argument("--threshold", type=float, default=None,
                   help="overrides --threshold-report")
    p.add_argument("--port", type=int, default=8750)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--tier1-cap", type=int, default=100_000)
    p.add_argument("--tier2-cap", type=int, default=4096)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--usage-log", default="usage.jsonl")
    p.add_argument("--dedup-threshold", type=float, default=0.9)
    p.set_defaults(func=_run_serve)


def _run_serve(args) -> int:
    import uvicorn

    from .server import create_app
    from .serving import EmbeddingCache, LruCache, SuggestionService, UsageStore

    bundle = load_checkpoint(args.model)
    canned = curation.CannedList.load(args.canned)
    canned_embs = curation.CannedEmbeddings.load(args.canned_emb) if args.canned_emb else None
    threshold = args.threshold
    if threshold is None:
        if not args.threshold_report:
            print("need --threshold or --threshold-report", file=sys.stderr)
            return 2
        threshold = json.loads(Path(args.threshold_report).read_text())["threshold"]
    service = SuggestionService(
        bundle, canned, threshold,
        canned_embs=canned_embs,
        usage_store=UsageStore(args.usage_log),
        cache=EmbeddingCache(tier1=LruCache(args.tier1_cap), tier2=LruCache(args.tier2_cap)),
        caching_enabled=not args.no_cache,
        dedup_threshold=args.dedup_threshold,
    )
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _load_regularized(path: str) -> list:
    dialogues = []
    for dialogue in corpus_mod.load_corpus(path):
        try:
            dialogues.append(corpus_mod.regularize_turns(dialogue))
        except corpus_mod.EmptyDialogue:
            continue
    return dialogues


if __name__ == "__main__":
    sys.exit(main())
