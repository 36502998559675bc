import itertools

import numpy as np
import pytest

from replykit import corpus as corpus_mod
from replykit import synthetic
from replykit.corpus import AGENT, CUSTOMER, Dialogue, Utterance, build_vocab
from replykit.curation import (
    NEGATIVE,
    POSITIVE,
    SIMILAR,
    SOURCE_EXACT,
    STRATEGY_NO_MATCH_CONTEXT,
    STRATEGY_REJECTED,
    STRATEGY_WRONG_TARGET,
    UNIQUE,
    CannedEmbeddings,
    CannedList,
    SingleClass,
    TooFewPoints,
    TooFewUniqueUtterances,
    WeakLabel,
    build_negative_dataset,
    choose_threshold,
    classify_similar,
    cosine_similarity,
    extract_canned_list,
    exact_match_positives,
    fuzzy_match_positives,
    generate_similarity_dataset,
    kmeans,
    load_weak_labels,
    roc_auc,
    save_weak_labels,
)


def brute_force_auc(scored):
    """Independent O(P*N) oracle: pairwise comparisons with ties counted half."""
    positives = [s for s, l in scored if l == 1]
    negatives = [s for s, l in scored if l == 0]
    wins = sum(1.0 if p > n else (0.5 if p == n else 0.0)
               for p in positives for n in negatives)
    return wins / (len(positives) * len(negatives))


class TestKMeans:
    def test_k_equals_n_gives_zero_inertia(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(12, 4))
        result = kmeans(points, k=12, seed=1)
        assert result.inertia == pytest.approx(0.0, abs=1e-12)
        assert sorted(result.assignments.tolist()) == list(range(12))

    def test_separated_blobs_high_purity(self):
        rng = np.random.default_rng(1)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        points, labels = [], []
        for idx, center in enumerate(centers):
            points.append(center + 0.3 * rng.normal(size=(50, 2)))
            labels += [idx] * 50
        points = np.vstack(points)
        labels = np.asarray(labels)
        result = kmeans(points, k=3, seed=2)
        purity = 0.0
        for cluster in range(3):
            members = labels[result.assignments == cluster]
            if len(members):
                purity += np.bincount(members).max()
        assert purity / len(labels) >= 0.95

    def test_inertia_non_increasing(self):
        rng = np.random.default_rng(3)
        for seed in range(5):
            points = rng.normal(size=(60, 5))
            result = kmeans(points, k=6, seed=seed)
            history = result.inertia_history
            assert all(history[i + 1] <= history[i] + 1e-9 for i in range(len(history) - 1))

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            kmeans(np.zeros((3, 2)), k=4)

    def test_every_point_assigned_to_nearest_centroid(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(40, 3))
        result = kmeans(points, k=5, seed=0)
        d2 = ((points[:, None, :] - result.centroids[None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(result.assignments, d2.argmin(axis=1))


class TestExtractCannedList:
    def test_zero_noise_recovers_templates(self, small_zero_noise):
        templates = {t for rows in small_zero_noise["templates"] for t in rows}
        canned = extract_canned_list(
            small_zero_noise["dialogues"], small_zero_noise["embedder"],
            top_n=1000, k=len(templates), seed=0, dedup_threshold=1.1)
        assert set(canned.normalized_texts()) == templates
        assert [r.id for r in canned] == list(range(len(templates)))

    def test_k_one_returns_single_representative(self, small_zero_noise):
        canned = extract_canned_list(
            small_zero_noise["dialogues"], small_zero_noise["embedder"],
            top_n=1000, k=1, seed=0, dedup_threshold=1.1)
        assert len(canned) == 1

    def test_too_few_unique(self, small_zero_noise):
        with pytest.raises(TooFewUniqueUtterances):
            extract_canned_list(small_zero_noise["dialogues"], small_zero_noise["embedder"],
                                top_n=1000, k=10_000)

    def test_deterministic(self, small_zero_noise):
        kwargs = dict(top_n=1000, k=8, seed=5, dedup_threshold=1.1)
        a = extract_canned_list(small_zero_noise["dialogues"],
                                small_zero_noise["embedder"], **kwargs)
        b = extract_canned_list(small_zero_noise["dialogues"],
                                small_zero_noise["embedder"], **kwargs)
        assert a.texts() == b.texts()

    def test_frequency_metadata_emitted(self, small_zero_noise):
        canned = extract_canned_list(small_zero_noise["dialogues"],
                                     small_zero_noise["embedder"],
                                     top_n=1000, k=5, seed=0, dedup_threshold=1.1)
        assert all(r.frequency > 0 for r in canned)
        assert all(r.cluster_id is not None for r in canned)


class TestClassifySimilar:
    def test_identical_texts_score_one(self, small_zero_noise):
        text = small_zero_noise["templates"][2][0]
        score, label = classify_similar(text, text, small_zero_noise["embedder"], 0.9)
        assert score == pytest.approx(1.0, abs=1e-6)
        assert label == SIMILAR

    def test_unreachable_threshold_everything_unique(self, small_zero_noise):
        a = small_zero_noise["templates"][2][0]
        b = small_zero_noise["templates"][3][0]
        _, label = classify_similar(a, b, small_zero_noise["embedder"], threshold=1.1)
        assert label == UNIQUE


class TestSimilarityDataset:
    def test_unique_pairs_from_different_thirds(self, small_zero_noise):
        pairs = generate_similarity_dataset(
            small_zero_noise["dialogues"], small_zero_noise["embedder"],
            n_similar=0, n_unique=30, seed=1)
        uniques = [p for p in pairs if p.label == UNIQUE]
        assert len(uniques) == 30
        assert all(p.a != p.b or True for p in uniques)  # members from distinct sections

    def test_counts_match_when_corpus_suffices(self, small_zero_noise):
        pairs = generate_similarity_dataset(
            small_zero_noise["dialogues"], small_zero_noise["embedder"],
            n_similar=20, n_unique=50, seed=2)
        assert sum(1 for p in pairs if p.label == SIMILAR) == 20
        assert sum(1 for p in pairs if p.label == UNIQUE) == 50

    def test_similar_pairs_share_intent_on_zero_noise(self, small_zero_noise):
        pairs = generate_similarity_dataset(
            small_zero_noise["dialogues"], small_zero_noise["embedder"],
            n_similar=15, n_unique=20, seed=3)
        intent_of = {}
        for d in small_zero_noise["dialogues"]:
            for u in d.utterances:
                if u.intent_id is not None:
                    intent_of[corpus_mod.normalize_text(u.text)] = u.intent_id
        for p in pairs:
            if p.label == SIMILAR:
                assert intent_of[p.a] == intent_of[p.b]

    def test_deterministic_in_seed(self, small_zero_noise):
        a = generate_similarity_dataset(small_zero_noise["dialogues"],
                                        small_zero_noise["embedder"],
                                        n_similar=10, n_unique=10, seed=7)
        b = generate_similarity_dataset(small_zero_noise["dialogues"],
                                        small_zero_noise["embedder"],
                                        n_similar=10, n_unique=10, seed=7)
        assert [(p.a, p.b, p.label) for p in a] == [(p.a, p.b, p.label) for p in b]

    def test_classifier_auc_on_zero_noise(self, small_zero_noise):
        pairs = generate_similarity_dataset(
            small_zero_noise["dialogues"], small_zero_noise["embedder"],
            n_similar=40, n_unique=120, seed=4)
        scored = [(p.score, 1 if p.label == SIMILAR else 0) for p in pairs]
        _, auc = roc_auc(scored)
        assert auc >= 0.9


class TestRocAuc:
    def test_perfect_separation(self):
        scored = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
        curve, auc = roc_auc(scored)
        assert auc == 1.0
        assert curve[0] == (0.0, 0.0) and curve[-1] == (1.0, 1.0)

    def test_shuffled_labels_near_half(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=1000)
        labels = rng.integers(0, 2, size=1000)
        while labels.sum() in (0, len(labels)):
            labels = rng.integers(0, 2, size=1000)
        _, auc = roc_auc(list(zip(scores, labels)))
        assert abs(auc - 0.5) < 0.05

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            n = int(rng.integers(4, 40))
            scores = rng.integers(0, 5, size=n).astype(float)  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                continue
            scored = list(zip(scores, labels))
            _, auc = roc_auc(scored)
            assert auc == pytest.approx(brute_force_auc(scored), abs=1e-9)

    def test_single_class_rejected(self):
        with pytest.raises(SingleClass):
            roc_auc([(0.5, 1), (0.2, 1)])

    def test_choose_threshold_separates(self):
        scored = [(0.9, 1), (0.85, 1), (0.4, 0), (0.3, 0)]
        threshold = choose_threshold(scored)
        assert 0.4 < threshold <= 0.85


@pytest.fixture(scope="module")
def weak_label_setup(small_zero_noise):
    dialogues = small_zero_noise["dialogues"]
    vocab = small_zero_noise["vocab"]
    templates = small_zero_noise["templates"]
    canned = CannedList.from_texts([rows[0] for rows in templates])
    return {"dialogues": dialogues, "vocab": vocab, "canned": canned,
            "templates": templates, "embedder": small_zero_noise["embedder"]}


class TestWeakLabels:
    def test_digit_masking_composes_with_exact_match(self):
        vocab = build_vocab([Dialogue("v", [Utterance(AGENT, "your pin is 00000 ok")])], cap=50)
        dialogue = Dialogue("d", [
            Utterance(AGENT, "hello"),
            Utterance(CUSTOMER, "i forgot my pin"),
            Utterance(AGENT, "Your PIN is 94567"),
        ])
        canned = CannedList.from_texts(["your pin is 00000"])
        labels = exact_match_positives([dialogue], canned, vocab, 8, 4)
        assert len(labels) == 1
        assert labels[0].canned_id == 0
        assert labels[0].source == SOURCE_EXACT

    def test_one_word_difference_no_match(self):
        vocab = build_vocab([Dialogue("v", [Utterance(AGENT, "a b c d")])], cap=50)
        dialogue = Dialogue("d", [
            Utterance(AGENT, "a"), Utterance(CUSTOMER, "b"), Utterance(AGENT, "a b d"),
        ])
        canned = CannedList.from_texts(["a b c"])
        assert exact_match_positives([dialogue], canned, vocab, 8, 4) == []

    def test_zero_noise_every_contextful_agent_turn_matches(self, weak_label_setup):
        s = weak_label_setup
        labels = exact_match_positives(s["dialogues"], s["canned"], s["vocab"], 14, 6)
        expected = sum(1 for d in s["dialogues"]
                       for i, u in enumerate(d.utterances)
                       if u.speaker == AGENT and i > 0
                       and corpus_mod.normalize_text(u.text) in set(s["canned"].normalized_texts()))
        assert len(labels) == expected
        intent_by_turn = {(d.id, i): u.intent_id for d in s["dialogues"]
                          for i, u in enumerate(d.utterances)}
        for label in labels:
            assert intent_by_turn[(label.pair.dialogue_id, label.pair.turn_index)] == label.canned_id

    def test_fuzzy_extends_exact_on_paraphrase_corpus(self, weak_label_setup):
        spec = synthetic.SyntheticSpec(n_intents=10, n_dialogues=60, noise_rate=0.0,
                                       paraphrase_rate=0.5, rng_seed=11)
        dialogues = synthetic.generate_synthetic_corpus(spec)
        s = weak_label_setup
        canned = CannedList.from_texts([rows[0] for rows in s["templates"]])
        exact = exact_match_positives(dialogues, canned, s["vocab"], 14, 6)
        fuzzy = fuzzy_match_positives(dialogues, canned, s["embedder"], threshold=0.0,
                                      vocab=s["vocab"], utterance_len=14, max_context=6)
        intent_by_turn = {(d.id, i): u.intent_id for d in dialogues
                          for i, u in enumerate(d.utterances)}
        def recall(labels):
            return sum(1 for l in labels
                       if intent_by_turn[(l.pair.dialogue_id, l.pair.turn_index)] == l.canned_id)
        assert recall(exact) + recall(fuzzy) >= recall(exact)
        assert len(fuzzy) > 0  # paraphrased turns missed by exact matching
        keys = {(l.pair.dialogue_id, l.pair.turn_index) for l in exact}
        assert all((l.pair.dialogue_id, l.pair.turn_index) not in keys for l in fuzzy)

    def test_fuzzy_threshold_above_one_empty(self, weak_label_setup):
        s = weak_label_setup
        labels = fuzzy_match_positives(s["dialogues"], s["canned"], s["embedder"],
                                       threshold=1.01, vocab=s["vocab"],
                                       utterance_len=14, max_context=6)
        assert labels == []

    def test_negative_dataset_invariants(self, weak_label_setup):
        s = weak_label_setup
        positives = exact_match_positives(s["dialogues"], s["canned"], s["vocab"], 14, 6)
        usage_negs = [WeakLabel(pair=positives[0].pair, canned_id=(positives[0].canned_id + 1) % len(s["canned"]),
                                polarity=NEGATIVE, negative_strategy=STRATEGY_REJECTED)]
        negatives = build_negative_dataset(
            positives, s["dialogues"], s["canned"], s["embedder"],
            usage_negatives=usage_negs, seed=3, threshold=0.99,
            vocab=s["vocab"], utterance_len=14, max_context=6, usage_sample_rate=1.0)
        positive_keys = {(l.pair.dialogue_id, l.pair.turn_index, l.canned_id)
                         for l in positives}
        by_pair_pos = {(l.pair.dialogue_id, l.pair.turn_index): l.canned_id for l in positives}
        for neg in negatives:
            assert neg.polarity == NEGATIVE
            key = (neg.pair.dialogue_id, neg.pair.turn_index, neg.canned_id)
            assert key not in positive_keys
            if neg.negative_strategy == STRATEGY_WRONG_TARGET:
                assert neg.canned_id != by_pair_pos[(neg.pair.dialogue_id, neg.pair.turn_index)]

    def test_negative_quota_respected(self, weak_label_setup):
        s = weak_label_setup
        positives = exact_match_positives(s["dialogues"], s["canned"], s["vocab"], 14, 6)
        negatives = build_negative_dataset(
            positives, s["dialogues"], s["canned"], s["embedder"],
            seed=3, threshold=0.99, quota_per_strategy=5,
            vocab=s["vocab"], utterance_len=14, max_context=6)
        counts = {}
        for n in negatives:
            counts[n.negative_strategy] = counts.get(n.negative_strategy, 0) + 1
        assert all(v <= 5 for v in counts.values())

    def test_weak_label_file_round_trip(self, weak_label_setup, tmp_path):
        s = weak_label_setup
        labels = exact_match_positives(s["dialogues"][:5], s["canned"], s["vocab"], 14, 6)
        path = tmp_path / "weak.jsonl"
        save_weak_labels(labels, path)
        loaded = load_weak_labels(path)
        assert [l.to_record() for l in labels] == [l.to_record() for l in loaded]

    def test_polarity_requires_provenance(self, weak_label_setup):
        pair = exact_match_positives(weak_label_setup["dialogues"][:2],
                                     weak_label_setup["canned"],
                                     weak_label_setup["vocab"], 14, 6)[0].pair
        with pytest.raises(ValueError):
            WeakLabel(pair=pair, canned_id=0, polarity=POSITIVE)
        with pytest.raises(ValueError):
            WeakLabel(pair=pair, canned_id=0, polarity=NEGATIVE)


class TestCannedListType:
    def test_ids_must_be_dense(self):
        from replykit.curation import CannedResponse

        with pytest.raises(ValueError):
            CannedList([CannedResponse(id=1, text="x")])

    def test_appended_keeps_ids_dense(self):
        canned = CannedList.from_texts(["a", "b"])
        longer, added = canned.appended("c")
        assert added.id == 2
        assert [r.id for r in longer] == [0, 1, 2]
        assert len(canned) == 2  # original untouched

    def test_save_load(self, tmp_path):
        canned = CannedList.from_texts(["Hello there", "All 42 done"])
        canned.save(tmp_path / "canned.jsonl")
        loaded = CannedList.load(tmp_path / "canned.jsonl")
        assert loaded.texts() == canned.texts()
        assert loaded.normalized_texts() == ["hello there", "all 00 done"]

    def test_embeddings_round_trip(self, tmp_path):
        embs = CannedEmbeddings(matrix=np.arange(12, dtype=np.float32).reshape(3, 4),
                                canned_ids=[0, 1, 2], checkpoint_id="abc123")
        embs.save(tmp_path / "embs.npz")
        loaded = CannedEmbeddings.load(tmp_path / "embs.npz")
        assert np.array_equal(loaded.matrix, embs.matrix)
        assert loaded.canned_ids == [0, 1, 2]
        assert loaded.checkpoint_id == "abc123"
