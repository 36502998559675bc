import math

import numpy as np
import pytest

from replykit import autodiff as ad
from replykit import corpus as corpus_mod
from replykit import objectives, synthetic
from replykit.autodiff import Rng, grad_check
from replykit.model import HierarchicalModel, ModelConfig, encode_batch
from replykit.objectives import (
    Batch,
    BatchTooSmall,
    BinaryHead,
    ClassCountMismatch,
    EmptyDataset,
    MulticlassHead,
    TrainingConfig,
    binary_loss,
    in_batch_recall_at_1,
    make_binary_batch,
    max_margin_loss,
    multiclass_forward,
    train,
)
from replykit.optim import OptimizerConfig


def naive_max_margin(contexts: np.ndarray, targets: np.ndarray, margin: float) -> float:
    """Independent oracle: literal triple loop over every (i, n) with cosine distance."""
    def cos_dist(u, v):
        return 1.0 - (u @ v) / max(np.linalg.norm(u) * np.linalg.norm(v), 1e-8)

    n = len(contexts)
    total = 0.0
    for i in range(n):
        pos = cos_dist(contexts[i], targets[i])
        for j in range(n):
            if j == i:
                continue
            total += max(0.0, margin + pos - cos_dist(contexts[i], targets[j]))
    return total / n


class TestMaxMarginLoss:
    def test_negatives_exactly_at_margin_contribute_zero(self):
        # distances engineered so m + D(c,p) - D(c,n) = 0 for every triplet
        c = np.array([[1.0, 0.0], [0.0, 1.0]])
        margin = 1.0  # D(c1,p1)=0, D(c1,p2)=1 -> max(0, 1 + 0 - 1) = 0
        loss = max_margin_loss(ad.tensor(c, dtype=np.float64),
                               ad.tensor(c, dtype=np.float64), margin)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_hand_computed_value(self):
        # embeddings realizing D(c1,p1)=.5, D(c1,p2)=.1, D(c2,p2)=.2, D(c2,p1)=.9
        # L = 1/2 * [(1e-4 + .5 - .1) + 0] = 0.20005
        def unit(theta):
            return np.array([math.cos(theta), math.sin(theta)])

        def at_distance(base_theta, d):
            return unit(base_theta + math.acos(1.0 - d))

        c1, c2 = unit(0.0), unit(2.0)
        p1 = at_distance(0.0, 0.5)
        p2 = at_distance(2.0, 0.2)
        # check the crossed distances land where the example requires
        assert 1 - c1 @ p1 == pytest.approx(0.5, abs=1e-9)
        assert 1 - c2 @ p2 == pytest.approx(0.2, abs=1e-9)
        d12 = 1 - c1 @ p2
        d21 = 1 - c2 @ p1
        margin = 1e-4
        expected = 0.5 * (max(0.0, margin + 0.5 - d12) + max(0.0, margin + 0.2 - d21))
        loss = max_margin_loss(ad.tensor(np.stack([c1, c2]), dtype=np.float64),
                               ad.tensor(np.stack([p1, p2]), dtype=np.float64), margin)
        assert loss.item() == pytest.approx(expected, abs=1e-9)
        # exact spec arithmetic holds when the crossed terms stay inactive
        if d12 >= margin + 0.5 and d21 >= margin + 0.2:
            assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            c = rng.normal(size=(n, 8))
            t = rng.normal(size=(n, 8))
            margin = float(rng.uniform(1e-4, 0.7))
            vectorized = max_margin_loss(ad.tensor(c, dtype=np.float64),
                                         ad.tensor(t, dtype=np.float64), margin).item()
            assert vectorized == pytest.approx(naive_max_margin(c, t, margin), abs=1e-6)

    def test_non_negative_and_zero_iff_satisfied(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            c = rng.normal(size=(4, 5))
            t = rng.normal(size=(4, 5))
            loss = max_margin_loss(ad.tensor(c, dtype=np.float64),
                                   ad.tensor(t, dtype=np.float64), 0.2).item()
            assert loss >= 0.0
            assert (loss == 0.0) == (naive_max_margin(c, t, 0.2) == 0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        c = rng.normal(size=(6, 7))
        t = rng.normal(size=(6, 7))
        base = max_margin_loss(ad.tensor(c, dtype=np.float64),
                               ad.tensor(t, dtype=np.float64), 0.3).item()
        scaled = max_margin_loss(ad.tensor(3.7 * c, dtype=np.float64),
                                 ad.tensor(0.2 * t, dtype=np.float64), 0.3).item()
        assert scaled == pytest.approx(base, rel=1e-9)

    def test_batch_too_small(self):
        one = ad.tensor(np.ones((1, 4)), dtype=np.float64)
        with pytest.raises(BatchTooSmall):
            max_margin_loss(one, one, 0.1)

    def test_gradients_match_finite_differences(self):
        rng = Rng(3)
        c = ad.Parameter(rng.uniform(-1, 1, (4, 6)), "c")
        t = ad.Parameter(rng.uniform(-1, 1, (4, 6)), "t")
        report = grad_check(lambda: max_margin_loss(c, t, 0.4), [c, t])
        assert report.passed, report


def _batch(n, rng):
    contexts = [[[int(rng.integers(3, 9)), 1, 0, 0]] for _ in range(n)]
    targets = [[int(rng.integers(3, 9)), i % 7 + 3, 1, 0] for i in range(n)]
    return Batch(contexts=contexts, targets=targets)


class TestMakeBinaryBatch:
    def test_half_and_half_at_128(self):
        rng = Rng(0)
        batch = _batch(128, rng)
        out = make_binary_batch(batch, rng)
        assert int(out.labels.sum()) == 64
        assert len(out.labels) == 128

    def test_no_corrupted_pair_keeps_its_target(self):
        rng = Rng(1)
        batch = _batch(64, rng)
        out = make_binary_batch(batch, rng)
        for i, label in enumerate(out.labels):
            if label == 0:
                assert out.targets[i] != batch.targets[i]
            else:
                assert out.targets[i] == batch.targets[i]

    def test_n_two_minimal_case(self):
        rng = Rng(2)
        batch = _batch(2, rng)
        out = make_binary_batch(batch, rng)
        assert sorted(out.labels.tolist()) == [0, 1]
        corrupted = int(np.flatnonzero(out.labels == 0)[0])
        assert out.targets[corrupted] != batch.targets[corrupted]

    def test_deterministic_for_seed(self):
        batch = _batch(32, Rng(3))
        a = make_binary_batch(batch, Rng(7))
        b = make_binary_batch(batch, Rng(7))
        assert np.array_equal(a.labels, b.labels)
        assert a.targets == b.targets

    def test_multiset_preserved(self):
        rng = Rng(4)
        for _ in range(50):
            batch = _batch(16, rng)
            out = make_binary_batch(batch, rng)
            assert sorted(map(tuple, out.targets)) == sorted(map(tuple, batch.targets))

    def test_too_small(self):
        with pytest.raises(BatchTooSmall):
            make_binary_batch(_batch(1, Rng(5)), Rng(5))


class TestBinaryLoss:
    def test_score_half_gives_ln2(self):
        head = BinaryHead(4)  # zero-init w and b; identity interaction
        c = ad.tensor(np.zeros((1, 4)), dtype=np.float64)
        t = ad.tensor(np.zeros((1, 4)), dtype=np.float64)
        # zero embeddings normalize to zero, so the logit is exactly b = 0
        for label in (0, 1):
            loss = binary_loss(head, c, t, np.array([label]))
            assert loss.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_confident_correct_score_low_loss(self):
        head = BinaryHead(3)
        head.b.data = np.array([12.0])
        c = ad.tensor(np.ones((1, 3)), dtype=np.float64)
        t = ad.tensor(np.ones((1, 3)), dtype=np.float64)
        assert binary_loss(head, c, t, np.array([1])).item() < 1e-4

    def test_gradients_match_finite_differences(self):
        rng = Rng(6)
        head = BinaryHead(5)
        c = ad.Parameter(rng.uniform(-1, 1, (3, 5)), "c")
        t = ad.Parameter(rng.uniform(-1, 1, (3, 5)), "t")
        labels = np.array([1, 0, 1])
        params = [c, t] + head.parameters()
        report = grad_check(lambda: binary_loss(head, c, t, labels), params)
        assert report.passed, report


class TestMulticlassHead:
    def test_softmax_simplex(self):
        head = MulticlassHead(6, n_classes=9, rng=Rng(0))
        x = ad.tensor(np.random.default_rng(0).normal(size=(5, 6)), dtype=np.float64)
        probs = multiclass_forward(head, x).data
        assert np.all(probs > 0.0) and np.all(probs < 1.0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_init_final_layer_uniform(self):
        head = MulticlassHead(6, n_classes=8, rng=Rng(1))
        x = ad.tensor(np.random.default_rng(1).normal(size=(3, 6)), dtype=np.float64)
        probs = multiclass_forward(head, x).data
        assert np.allclose(probs, 1.0 / 8, atol=1e-9)

    def test_logit_shift_invariance(self):
        logits = np.random.default_rng(2).normal(size=(4, 7))
        a = ad.softmax(ad.tensor(logits, dtype=np.float64)).data
        b = ad.softmax(ad.tensor(logits + 11.3, dtype=np.float64)).data
        assert np.allclose(a, b, atol=1e-6)

    def test_class_count_mismatch(self):
        head = MulticlassHead(6, n_classes=8, rng=Rng(3))
        x = ad.tensor(np.zeros((1, 6)), dtype=np.float64)
        with pytest.raises(ClassCountMismatch):
            multiclass_forward(head, x, n_expected_classes=9)


@pytest.fixture(scope="module")
def toy_training_setup():
    spec = synthetic.SyntheticSpec(n_intents=6, n_dialogues=60, noise_rate=0.1, rng_seed=5)
    dialogues = synthetic.generate_synthetic_corpus(spec)
    vocab = corpus_mod.build_vocab(dialogues, cap=500)
    pairs = [p for d in dialogues for p in corpus_mod.make_pairs(d, vocab, 6, 12)]
    config = ModelConfig(vocab_size=vocab.size, word_dim=12, utterance_hidden=16,
                         context_hidden=16, projection_dim=16, utterance_len=12,
                         max_context_utterances=6, dropout_keep=1.0)
    return {"pairs": pairs, "vocab": vocab, "config": config,
            "n_intents": spec.n_intents}


class TestTrainLoop:
    def _train(self, setup, objective, seed=9, epochs=5, **kwargs):
        model = HierarchicalModel(setup["config"], rng=Rng(seed))
        extra = {}
        if objective == "multiclass":
            extra["class_ids"] = [p.intent_id for p in setup["pairs"]]
            kwargs.setdefault("n_classes", setup["n_intents"])
        config = TrainingConfig(objective=objective, margin=0.5, batch_size=16,
                                epochs=epochs, rng_seed=seed, early_stop_patience=0,
                                optimizer=OptimizerConfig(kind="adam", lr=0.003), **kwargs)
        return train(model, setup["pairs"], config, **extra)

    @pytest.mark.parametrize("objective", ["contrastive", "binary", "multiclass"])
    def test_loss_decreases_by_epoch_five(self, toy_training_setup, objective):
        result = self._train(toy_training_setup, objective, epochs=5)
        assert result.metrics[4].loss < result.metrics[0].loss

    def test_seed_reproducibility_to_six_decimals(self, toy_training_setup):
        first = self._train(toy_training_setup, "contrastive", epochs=1)
        second = self._train(toy_training_setup, "contrastive", epochs=1)
        assert round(first.metrics[0].loss, 6) == round(second.metrics[0].loss, 6)

    def test_empty_dataset_rejected(self, toy_training_setup):
        model = HierarchicalModel(toy_training_setup["config"], rng=Rng(0))
        with pytest.raises(EmptyDataset):
            train(model, [], TrainingConfig(objective="contrastive"))

    def test_multiclass_requires_class_ids(self, toy_training_setup):
        model = HierarchicalModel(toy_training_setup["config"], rng=Rng(0))
        config = TrainingConfig(objective="multiclass", n_classes=6)
        with pytest.raises(ClassCountMismatch):
            train(model, toy_training_setup["pairs"], config)

    def test_multiclass_rejects_out_of_range_ids(self, toy_training_setup):
        model = HierarchicalModel(toy_training_setup["config"], rng=Rng(0))
        config = TrainingConfig(objective="multiclass", n_classes=2)
        bad_ids = [5] * len(toy_training_setup["pairs"])
        with pytest.raises(ClassCountMismatch):
            train(model, toy_training_setup["pairs"], config, class_ids=bad_ids)

    def test_checkpoints_and_metrics_written(self, toy_training_setup, tmp_path):
        model = HierarchicalModel(toy_training_setup["config"], rng=Rng(1))
        config = TrainingConfig(objective="contrastive", margin=0.5, batch_size=16,
                                epochs=2, rng_seed=1, early_stop_patience=0,
                                optimizer=OptimizerConfig(kind="adam", lr=0.003))
        train(model, toy_training_setup["pairs"], config,
              vocab=toy_training_setup["vocab"], out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "metrics.jsonl").exists()
        assert (tmp_path / "run" / "epoch_001" / "params.npz").exists()
        assert (tmp_path / "run" / "epoch_002" / "manifest.json").exists()


def test_zero_noise_in_batch_recall():
    """Contrastive training drives in-batch top-1 recall high on clean data."""
    spec = synthetic.SyntheticSpec(n_intents=20, n_dialogues=400, noise_rate=0.0, rng_seed=8)
    dialogues = synthetic.generate_synthetic_corpus(spec)
    vocab = corpus_mod.build_vocab(dialogues, cap=1000)
    pairs = [p for d in dialogues for p in corpus_mod.make_pairs(d, vocab, 6, 16)]
    config = ModelConfig(vocab_size=vocab.size, word_dim=32, utterance_hidden=64,
                         context_hidden=64, projection_dim=64, utterance_len=16,
                         max_context_utterances=6, dropout_keep=1.0)
    model = HierarchicalModel(config, rng=Rng(3))
    training = TrainingConfig(objective="contrastive", margin=0.2, batch_size=128,
                              epochs=14, rng_seed=4, early_stop_patience=0,
                              optimizer=OptimizerConfig(kind="adam", lr=0.003, lr_decay=0.93))
    train(model, pairs, training)
    eval_pairs = [pairs[i] for i in
                  np.random.default_rng(0).choice(len(pairs), size=128, replace=False)]
    ctx, tgt = encode_batch(model, [p.context for p in eval_pairs],
                            [p.target for p in eval_pairs])
    recall = in_batch_recall_at_1(ctx.data, tgt.data)
    assert recall >= 0.9, f"in-batch recall@1 {recall:.3f}"
