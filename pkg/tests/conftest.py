"""Shared fixtures: desk-scale corpora and session-scoped trained models."""

from __future__ import annotations

import numpy as np
import pytest

from replykit import corpus as corpus_mod
from replykit import curation, evaluation, objectives, synthetic
from replykit.autodiff import Rng
from replykit.model import HierarchicalModel, ModelConfig
from replykit.optim import OptimizerConfig
from replykit.skipgram import apply_pretrained_word_embeddings, train_skipgram

UTTERANCE_LEN = 16
MAX_CONTEXT = 6

ACCEPT_SPEC = synthetic.SyntheticSpec(
    n_intents=20, n_dialogues=500, noise_rate=0.1, rng_seed=13)
HELD_OUT_DIALOGUES = 100
HOLDOUT_INTENT = 12


def desk_model_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, word_dim=32, utterance_hidden=64, context_hidden=64,
        projection_dim=64, utterance_len=UTTERANCE_LEN, max_context_utterances=MAX_CONTEXT,
        dropout_keep=1.0)


def pairs_of(dialogues, vocab):
    return [p for d in dialogues
            for p in corpus_mod.make_pairs(d, vocab, MAX_CONTEXT, UTTERANCE_LEN)]


class CorpusBundle:
    """The acceptance corpus with its vocab, splits, templates, and canned list."""

    def __init__(self):
        self.spec = ACCEPT_SPEC
        self.dialogues = synthetic.generate_synthetic_corpus(self.spec)
        self.vocab = corpus_mod.build_vocab(self.dialogues, cap=5000)
        split = len(self.dialogues) - HELD_OUT_DIALOGUES
        self.train_dialogues = self.dialogues[:split]
        self.held_dialogues = self.dialogues[split:]
        self.train_pairs = pairs_of(self.train_dialogues, self.vocab)
        self.held_pairs = pairs_of(self.held_dialogues, self.vocab)
        self.templates = synthetic.synthetic_templates(self.spec)
        # canned id i == intent id i by construction
        self.canned = curation.CannedList.from_texts([t[0] for t in self.templates])
        self.word_vectors = train_skipgram(self.train_dialogues, self.vocab, dim=32, seed=3)

    def new_model(self, seed: int = 5) -> HierarchicalModel:
        model = HierarchicalModel(desk_model_config(self.vocab.size), rng=Rng(seed))
        apply_pretrained_word_embeddings(model, self.word_vectors)
        return model

    def eval_fn(self, objective: str):
        true_ids = [p.intent_id for p in self.held_pairs]

        def run(model, head):
            embs = evaluation.embed_canned(model, self.canned, self.vocab)
            cases = evaluation.cases_against_canned(
                model, self.held_pairs, true_ids, embs, objective=objective, head=head)
            return {"r_at_1": evaluation.recall_at_k(cases, 1),
                    "r_at_3": evaluation.recall_at_k(cases, 3),
                    "r_at_10": evaluation.recall_at_k(cases, 10)}
        return run


@pytest.fixture(scope="session")
def corpus_bundle() -> CorpusBundle:
    return CorpusBundle()


@pytest.fixture(scope="session")
def trained_contrastive(corpus_bundle):
    """Contrastive model trained on the acceptance corpus, with wall time."""
    import time

    started = time.monotonic()
    config = objectives.TrainingConfig(
        objective="contrastive", margin=0.5, batch_size=32, epochs=20,
        optimizer=OptimizerConfig(kind="adam", lr=0.003), rng_seed=11,
        early_stop_patience=0)
    result = objectives.train(corpus_bundle.new_model(), corpus_bundle.train_pairs, config,
                              eval_fn=corpus_bundle.eval_fn("contrastive"))
    return {"result": result, "seconds": time.monotonic() - started}


@pytest.fixture(scope="session")
def exact_positive_labels(corpus_bundle):
    """Exact-match weak labels on the training split (class ids for classifiers)."""
    return curation.exact_match_positives(
        corpus_bundle.train_dialogues, corpus_bundle.canned, corpus_bundle.vocab,
        utterance_len=UTTERANCE_LEN, max_context=MAX_CONTEXT)


@pytest.fixture(scope="session")
def trained_binary(corpus_bundle, exact_positive_labels):
    lookup = {(l.pair.dialogue_id, l.pair.turn_index): l.canned_id
              for l in exact_positive_labels}
    pairs, class_ids = [], []
    for pair in corpus_bundle.train_pairs:
        cid = lookup.get((pair.dialogue_id, pair.turn_index))
        if cid is not None:
            pairs.append(pair)
            class_ids.append(cid)
    canned_targets = [corpus_mod.encode_utterance_ids(t, corpus_bundle.vocab, UTTERANCE_LEN)
                      for t in corpus_bundle.canned.texts()]
    config = objectives.TrainingConfig(
        objective="binary", batch_size=16, epochs=60,
        optimizer=OptimizerConfig(kind="adam", lr=0.003), rng_seed=11,
        early_stop_patience=0, negatives_per_positive=2)
    result = objectives.train(corpus_bundle.new_model(), pairs, config,
                              class_ids=class_ids, canned_targets=canned_targets)
    return result


@pytest.fixture(scope="session")
def trained_multiclass(corpus_bundle, exact_positive_labels):
    lookup = {(l.pair.dialogue_id, l.pair.turn_index): l.canned_id
              for l in exact_positive_labels}
    pairs, class_ids = [], []
    for pair in corpus_bundle.train_pairs:
        cid = lookup.get((pair.dialogue_id, pair.turn_index))
        if cid is not None:
            pairs.append(pair)
            class_ids.append(cid)
    config = objectives.TrainingConfig(
        objective="multiclass", batch_size=32, epochs=25, n_classes=len(corpus_bundle.canned),
        optimizer=OptimizerConfig(kind="adam", lr=0.003), rng_seed=11,
        early_stop_patience=0)
    result = objectives.train(corpus_bundle.new_model(), pairs, config, class_ids=class_ids)
    return result


@pytest.fixture(scope="session")
def holdout_run(corpus_bundle):
    """Contrastive model trained with one intent's dialogues fully held out."""
    held_intent = HOLDOUT_INTENT

    def contains_intent(dialogue):
        return any(u.intent_id == held_intent for u in dialogue.utterances)

    train_d = [d for d in corpus_bundle.train_dialogues if not contains_intent(d)]
    train_pairs = pairs_of(train_d, corpus_bundle.vocab)
    kept_texts = [t[0] for i, t in enumerate(corpus_bundle.templates) if i != held_intent]
    kept_intents = [i for i in range(len(corpus_bundle.templates)) if i != held_intent]
    canned = curation.CannedList.from_texts(kept_texts)
    config = objectives.TrainingConfig(
        objective="contrastive", margin=0.5, batch_size=32, epochs=20,
        optimizer=OptimizerConfig(kind="adam", lr=0.003), rng_seed=11,
        early_stop_patience=0)
    result = objectives.train(corpus_bundle.new_model(seed=7), train_pairs, config)
    # contexts of the held-out intent the model never saw during training
    unseen = ([d for d in corpus_bundle.train_dialogues if contains_intent(d)]
              + [d for d in corpus_bundle.held_dialogues if contains_intent(d)])
    eval_pairs = [p for p in pairs_of(unseen, corpus_bundle.vocab)
                  if p.intent_id == held_intent]
    return {
        "result": result,
        "canned": canned,
        "canned_intents": kept_intents,
        "held_intent": held_intent,
        "held_template": corpus_bundle.templates[held_intent][0],
        "eval_pairs": eval_pairs,
    }


@pytest.fixture(scope="session")
def small_zero_noise():
    """Small zero-noise corpus with two templates per intent plus its embedder."""
    from replykit.skipthought import SkipThoughtConfig, fit_center, text_embedder, train_skipthought

    spec = synthetic.SyntheticSpec(n_intents=10, n_dialogues=120, templates_per_intent=2,
                                   noise_rate=0.0, rng_seed=4)
    dialogues = synthetic.generate_synthetic_corpus(spec)
    vocab = corpus_mod.build_vocab(dialogues, cap=2000)
    st_config = SkipThoughtConfig(vocab_size=vocab.size, word_dim=24, hidden=48,
                                  utterance_len=14)
    model, _ = train_skipthought(dialogues, vocab, st_config, epochs=25, seed=2,
                                 optimizer=OptimizerConfig(kind="adam", lr=0.005))
    center = fit_center(model, vocab, dialogues)
    return {
        "spec": spec,
        "dialogues": dialogues,
        "vocab": vocab,
        "templates": synthetic.synthetic_templates(spec),
        "model": model,
        "embedder": text_embedder(model, vocab, center=center),
    }
