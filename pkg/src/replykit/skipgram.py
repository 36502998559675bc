"""Skip-gram word-embedding pretraining with negative sampling.

Optional warm start for the hierarchical model's word table: plain SGNS over
the corpus utterances, trained with hand-rolled numpy updates (there is no
need for the autodiff graph here). Returned vectors are rescaled to match the
magnitude of the model's uniform initialization.
"""

from __future__ import annotations

import numpy as np

from .corpus import Dialogue, Vocabulary

NEGATIVE_TABLE_POWER = 0.75


def train_skipgram(
    corpus: list[Dialogue],
    vocab: Vocabulary,
    dim: int,
    window: int = 2,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    min_lr: float = 1e-4,
    seed: int = 0,
    batch: int = 2048,
) -> np.ndarray:
    """Input-side skip-gram vectors (vocab.size, dim), float32.

    The learning rate decays linearly to min_lr over all updates, which keeps
    the vectors from blowing up on small, highly repetitive corpora.
    """
    rng = np.random.default_rng(seed)
    streams = [vocab.encode(utt.text) for d in corpus for utt in d.utterances]
    centers, contexts = _skipgram_pairs(streams, window)
    if len(centers) == 0:
        return _scaled(rng.uniform(-0.5, 0.5, (vocab.size, dim)))
    table = _negative_table(streams, vocab.size)

    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, (vocab.size, dim))
    w_out = np.zeros((vocab.size, dim))
    n = len(centers)
    total_steps = max(1, epochs * ((n + batch - 1) // batch))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            c = centers[idx]
            pos = contexts[idx]
            neg = table[rng.integers(0, len(table), size=(len(idx), negatives))]
            step_lr = max(min_lr, lr * (1.0 - step / total_steps))
            _sgns_step(w_in, w_out, c, pos, neg, step_lr)
            step += 1
    return _scaled(w_in)


def _sgns_step(w_in, w_out, centers, positives, negatives, lr) -> None:
    v = w_in[centers]  # (B, D)
    u_pos = w_out[positives]  # (B, D)
    u_neg = w_out[negatives]  # (B, K, D)

    pos_score = _sigmoid(np.einsum("bd,bd->b", v, u_pos))
    neg_score = _sigmoid(np.einsum("bd,bkd->bk", v, u_neg))

    g_pos = (pos_score - 1.0)[:, None]  # d loss / d (v . u_pos)
    g_neg = neg_score[:, :, None]

    grad_v = g_pos * u_pos + np.einsum("bk,bkd->bd", neg_score, u_neg)
    np.add.at(w_out, positives, -lr * g_pos * v)
    np.add.at(w_out.reshape(-1, w_out.shape[1]), negatives.reshape(-1),
              (-lr * g_neg * v[:, None, :]).reshape(-1, w_out.shape[1]))
    np.add.at(w_in, centers, -lr * grad_v)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def _skipgram_pairs(streams: list[list[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers: list[int] = []
    contexts: list[int] = []
    for stream in streams:
        for i, center in enumerate(stream):
            lo = max(0, i - window)
            hi = min(len(stream), i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    centers.append(center)
                    contexts.append(stream[j])
    return np.asarray(centers, dtype=np.int64), np.asarray(contexts, dtype=np.int64)


def _negative_table(streams: list[list[int]], vocab_size: int, size: int = 100_000) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.float64)
    for stream in streams:
        for token in stream:
            counts[token] += 1
    weights = counts ** NEGATIVE_TABLE_POWER
    total = weights.sum()
    if total <= 0:
        return np.arange(vocab_size)
    draws = np.maximum((weights / total * size).round().astype(np.int64), 0)
    return np.repeat(np.arange(vocab_size), draws)


def _scaled(vectors: np.ndarray, target_rms: float = 0.08 / np.sqrt(3.0)) -> np.ndarray:
    """Match the second moment of a uniform(-0.08, 0.08) initialization."""
    rms = float(np.sqrt(np.mean(vectors ** 2)))
    if rms > 0:
        vectors = vectors * (target_rms / rms)
    return vectors.astype(np.float32)


def apply_pretrained_word_embeddings(model, vectors: np.ndarray) -> None:
    if vectors.shape != model.word_table.data.shape:
        raise ValueError(f"pretrained shape {vectors.shape} != table {model.word_table.data.shape}")
    model.word_table.data = vectors.astype(model.word_table.data.dtype)
