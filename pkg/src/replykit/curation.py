"""Canned-list curation and weak supervision.

Extracts a canned-response list by clustering frequent agent utterances,
classifies utterance pairs as similar/unique by embedding cosine, scores that
classifier with ROC/AUC, and derives weakly labelled positive/negative
(context, canned response) pairs from a corpus and usage logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .corpus import (
    AGENT,
    ContextTargetPair,
    Dialogue,
    Vocabulary,
    make_pairs,
    normalize_text,
)

Embedder = Callable[[str], np.ndarray]

SIMILAR = "similar"
UNIQUE = "unique"

SOURCE_EXACT = "exact_match"
SOURCE_FUZZY = "fuzzy_match"
SOURCE_USAGE = "usage_log"

POSITIVE = "positive"
NEGATIVE = "negative"

STRATEGY_WRONG_TARGET = "wrong_target"
STRATEGY_NO_MATCH_CONTEXT = "no_match_context"
STRATEGY_REJECTED = "rejected_suggestion"

DEFAULT_SIM_THRESHOLD = 0.9
DEFAULT_USAGE_SAMPLE_RATE = 0.25


class TooFewPoints(ValueError):
    pass


class TooFewUniqueUtterances(ValueError):
    pass


class SingleClass(ValueError):
    pass


class DuplicateResponse(ValueError):
    pass


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from a k-means++ seeding until the assignment fixpoint.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid, which keeps the inertia sequence non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise TooFewPoints(f"need 1 <= k={k} <= n={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    assignments = np.full(n, -1)
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_distances(points, centroids)
        new_assignments = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), new_assignments].sum())
        history.append(inertia)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for cluster in range(k):
            members = points[assignments == cluster]
            if len(members):
                centroids[cluster] = members.mean(axis=0)
            else:
                worst = int(d2[np.arange(n), assignments].argmax())
                centroids[cluster] = points[worst]
                assignments[worst] = cluster
    return KMeansResult(k=k, centroids=centroids, assignments=assignments,
                        inertia=history[-1], inertia_history=history)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[int(rng.integers(len(points)))]]
    while len(centroids) < k:
        d2 = _sq_distances(points, np.asarray(centroids)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; pick arbitrarily
            centroids.append(points[int(rng.integers(len(points)))])
            continue
        probs = d2 / total
        centroids.append(points[int(rng.choice(len(points), p=probs))])
    return np.asarray(centroids, dtype=np.float64)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


# ---------------------------------------------------------------------------
# Canned responses
# ---------------------------------------------------------------------------

@dataclass
class CannedResponse:
    id: int
    text: str
    normalized: str = ""
    frequency: int = 0
    cluster_id: int | None = None

    def __post_init__(self) -> None:
        if not self.normalized:
            self.normalized = normalize_text(self.text)


@dataclass
class CannedList:
    responses: list[CannedResponse] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [r.id for r in self.responses]
        if ids != list(range(len(ids))):
            raise ValueError("canned ids must be dense starting at 0")

    def __len__(self) -> int:
        return len(self.responses)

    def __iter__(self):
        return iter(self.responses)

    def by_id(self, canned_id: int) -> CannedResponse:
        return self.responses[canned_id]

    def texts(self) -> list[str]:
        return [r.text for r in self.responses]

    def normalized_texts(self) -> list[str]:
        return [r.normalized for r in self.responses]

    def appended(self, text: str, frequency: int = 0) -> tuple["CannedList", CannedResponse]:
        """New list with `text` appended under the next dense id."""
        response = CannedResponse(id=len(self.responses), text=text, frequency=frequency)
        return CannedList(self.responses + [response]), response

    def save(self, path: str | Path) -> None:
        with open(path, "w") as handle:
            for r in self.responses:
                handle.write(json.dumps({"id": r.id, "text": r.text,
                                         "frequency": r.frequency,
                                         "cluster_id": r.cluster_id}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CannedList":
        responses = []
        with open(path) as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                responses.append(CannedResponse(id=rec["id"], text=rec["text"],
                                                frequency=rec.get("frequency", 0),
                                                cluster_id=rec.get("cluster_id")))
        return cls(responses)

    @classmethod
    def from_texts(cls, texts: list[str]) -> "CannedList":
        return cls([CannedResponse(id=i, text=t) for i, t in enumerate(texts)])


@dataclass
class CannedEmbeddings:
    """Embeddings of a canned list, stamped with the checkpoint that built them."""

    matrix: np.ndarray
    canned_ids: list[int]
    checkpoint_id: str | None = None

    def save(self, path: str | Path) -> None:
        np.savez(path, matrix=self.matrix, canned_ids=np.asarray(self.canned_ids),
                 checkpoint_id=np.asarray(self.checkpoint_id or ""))

    @classmethod
    def load(cls, path: str | Path) -> "CannedEmbeddings":
        with np.load(path) as data:
            checkpoint = str(data["checkpoint_id"])
            return cls(matrix=data["matrix"], canned_ids=[int(i) for i in data["canned_ids"]],
                       checkpoint_id=checkpoint or None)


def cosine_similarity(u: np.ndarray, v: np.ndarray, eps: float = 1e-8) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(u @ v / max(np.linalg.norm(u) * np.linalg.norm(v), eps))


def classify_similar(a: str, b: str, embedder: Embedder,
                     threshold: float = DEFAULT_SIM_THRESHOLD) -> tuple[float, str]:
    """Cosine similarity of the two embedded texts; similar iff >= threshold."""
    score = cosine_similarity(embedder(a), embedder(b))
    return score, (SIMILAR if score >= threshold else UNIQUE)


def agent_utterance_frequencies(corpus: Iterable[Dialogue]) -> dict[str, tuple[int, str]]:
    """normalized text -> (frequency, a raw surface form)."""
    freq: dict[str, tuple[int, str]] = {}
    for dialogue in corpus:
        for utt in dialogue.utterances:
            if utt.speaker != AGENT:
                continue
            key = normalize_text(utt.text)
            if not key:
                continue
            count, surface = freq.get(key, (0, utt.text))
            freq[key] = (count + 1, surface)
    return freq


def extract_canned_list(
    corpus: list[Dialogue],
    embedder: Embedder,
    top_n: int = 10_000,
    k: int = 200,
    seed: int = 0,
    dedup_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> CannedList:
    """Cluster the top_n most frequent agent utterances into k groups and keep
    one representative per cluster (the member nearest its centroid), then
    drop representatives the similarity classifier calls duplicates.
    """
    freq = agent_utterance_frequencies(corpus)
    if len(freq) < k:
        raise TooFewUniqueUtterances(f"only {len(freq)} distinct agent utterances for k={k}")
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1][0], kv[0]))[:top_n]
    texts = [key for key, _ in ranked]
    counts = {key: count for key, (count, _) in ranked}
    vectors = np.asarray([embedder(t) for t in texts], dtype=np.float64)
    result = kmeans(vectors, k=k, seed=seed)
    representatives: list[tuple[str, int, int]] = []
    for cluster in range(k):
        member_idx = np.flatnonzero(result.assignments == cluster)
        if len(member_idx) == 0:
            continue
        diffs = vectors[member_idx] - result.centroids[cluster]
        best = member_idx[int(np.einsum("nd,nd->n", diffs, diffs).argmin())]
        representatives.append((texts[best], counts[texts[best]], cluster))
    representatives.sort(key=lambda item: (-item[1], item[0]))
    kept: list[CannedResponse] = []
    kept_vectors: list[np.ndarray] = []
    for text, count, cluster in representatives:
        vector = embedder(text)
        duplicate = any(
            cosine_similarity(vector, existing) >= dedup_threshold for existing in kept_vectors
        )
        if duplicate:
            continue
        kept.append(CannedResponse(id=len(kept), text=text, frequency=count,
                                   cluster_id=cluster))
        kept_vectors.append(vector)
    return CannedList(kept)


# ---------------------------------------------------------------------------
# Similarity-pair dataset and ROC/AUC
# ---------------------------------------------------------------------------

@dataclass
class SimilarityPair:
    a: str
    b: str
    label: str
    score: float


def generate_similarity_dataset(
    corpus: list[Dialogue],
    embedder: Embedder,
    n_similar: int = 3000,
    n_unique: int = 10_000,
    seed: int = 0,
    candidate_percentile: float = 90.0,
    max_candidate_pairs: int = 50_000,
) -> list[SimilarityPair]:
    """Unique pairs come from different thirds of the same dialogue; similar
    candidates are cross-corpus agent-utterance pairs in the top cosine
    percentile. Candidates are labelled with the hidden intent ids when the
    corpus carries them (stand-in for manual labelling), otherwise trusted.
    Dialogues too short to split into thirds are skipped silently.
    """
    rng = np.random.default_rng(seed)
    agent_utts: list[tuple[str, int | None]] = []
    for dialogue in corpus:
        for utt in dialogue.utterances:
            if utt.speaker == AGENT:
                agent_utts.append((normalize_text(utt.text), utt.intent_id))

    embeddings: dict[str, np.ndarray] = {}

    def embed(text: str) -> np.ndarray:
        if text not in embeddings:
            embeddings[text] = np.asarray(embedder(text), dtype=np.float64)
        return embeddings[text]

    unique_pairs: list[SimilarityPair] = []
    order = rng.permutation(len(corpus))
    for idx in order:
        if len(unique_pairs) >= n_unique:
            break
        dialogue = corpus[idx]
        thirds = _agent_turns_by_third(dialogue)
        if any(len(section) == 0 for section in thirds):
            continue
        picks = [section[int(rng.integers(len(section)))] for section in thirds]
        for first, second in ((0, 1), (1, 2), (0, 2)):
            if len(unique_pairs) >= n_unique:
                break
            a, b = normalize_text(picks[first].text), normalize_text(picks[second].text)
            score = cosine_similarity(embed(a), embed(b))
            unique_pairs.append(SimilarityPair(a=a, b=b, label=UNIQUE, score=score))

    similar_pairs: list[SimilarityPair] = []
    if len(agent_utts) >= 2 and n_similar > 0:
        n_samples = min(max_candidate_pairs, max(4 * n_similar, 1000))
        left = rng.integers(0, len(agent_utts), size=n_samples)
        right = rng.integers(0, len(agent_utts), size=n_samples)
        scored = []
        for i, j in zip(left, right):
            if i == j:
                continue
            (text_a, intent_a), (text_b, intent_b) = agent_utts[i], agent_utts[j]
            if text_a == text_b:
                continue
            scored.append((cosine_similarity(embed(text_a), embed(text_b)),
                           text_a, text_b, intent_a, intent_b))
        if scored:
            cutoff = float(np.percentile([s[0] for s in scored], candidate_percentile))
            for score, text_a, text_b, intent_a, intent_b in sorted(scored, reverse=True):
                if len(similar_pairs) >= n_similar:
                    break
                if score < cutoff:
                    break
                has_oracle = intent_a is not None and intent_b is not None
                if has_oracle and intent_a != intent_b:
                    if len(unique_pairs) < n_unique:
                        unique_pairs.append(SimilarityPair(text_a, text_b, UNIQUE, score))
                    continue
                similar_pairs.append(SimilarityPair(text_a, text_b, SIMILAR, score))
    return similar_pairs + unique_pairs


def _agent_turns_by_third(dialogue: Dialogue) -> list[list]:
    n = len(dialogue.utterances)
    bounds = (n / 3.0, 2.0 * n / 3.0)
    sections: list[list] = [[], [], []]
    for index, utt in enumerate(dialogue.utterances):
        if utt.speaker != AGENT:
            continue
        section = 0 if index < bounds[0] else (1 if index < bounds[1] else 2)
        sections[section].append(utt)
    return sections


def choose_threshold(scored: list[tuple[float, int]]) -> float:
    """Operating threshold maximizing TPR - FPR (Youden's J) on labelled scores.

    The curation thresholds (dedup, fuzzy match) default to 0.9 but embedding
    spaces differ in scale, so pipelines calibrate them here from a generated
    similarity dataset.
    """
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([l for _, l in scored], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("threshold choice needs both classes present")
    order = np.argsort(-scores, kind="stable")
    best_j, best_threshold = -1.0, float(scores[order[0]])
    tp = fp = 0
    i = 0
    while i < len(order):
        threshold = float(scores[order[i]])
        while i < len(order) and scores[order[i]] == threshold:
            if labels[order[i]] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        j = tp / n_pos - fp / n_neg
        if j > best_j:
            best_j, best_threshold = j, threshold
    return best_threshold


def roc_auc(scored: list[tuple[float, int]]) -> tuple[list[tuple[float, float]], float]:
    """ROC curve points (fpr, tpr) over the unique score thresholds, plus AUC.

    AUC is the rank statistic: the probability a random positive outscores a
    random negative, counting ties as half.
    """
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([l for _, l in scored], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("roc_auc needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    curve: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(sorted_labels)):
        if sorted_labels[i] == 1:
            tp += 1
        else:
            fp += 1
        last = i == len(sorted_labels) - 1
        if last or sorted_scores[i + 1] != sorted_scores[i]:
            curve.append((fp / n_neg, tp / n_pos))
    # average ranks over ties (ranks ascending in score)
    ascending = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[ascending[j + 1]] == scores[ascending[i]]:
            j += 1
        ranks[ascending[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return curve, float(auc)


# ---------------------------------------------------------------------------
# Weak labels
# ---------------------------------------------------------------------------

@dataclass
class WeakLabel:
    pair: ContextTargetPair
    canned_id: int
    polarity: str
    source: str | None = None
    negative_strategy: str | None = None

    def __post_init__(self) -> None:
        if self.polarity == POSITIVE and not self.source:
            raise ValueError("positive labels need a source")
        if self.polarity == NEGATIVE and not self.negative_strategy:
            raise ValueError("negative labels need a strategy")

    def to_record(self) -> dict:
        record = self.pair.to_record()
        record.update({"canned_id": self.canned_id, "polarity": self.polarity,
                       "source": self.source, "negative_strategy": self.negative_strategy})
        return record

    @classmethod
    def from_record(cls, record: dict) -> "WeakLabel":
        pair = ContextTargetPair.from_record(record)
        return cls(pair=pair, canned_id=int(record["canned_id"]), polarity=record["polarity"],
                   source=record.get("source"), negative_strategy=record.get("negative_strategy"))


def save_weak_labels(labels: Iterable[WeakLabel], path: str | Path) -> None:
    with open(path, "w") as handle:
        for label in labels:
            handle.write(json.dumps(label.to_record()) + "\n")


def load_weak_labels(path: str | Path) -> list[WeakLabel]:
    labels = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                labels.append(WeakLabel.from_record(json.loads(line)))
    return labels


def _pairs_with_targets(corpus, vocab, utterance_len, max_context):
    for dialogue in corpus:
        pairs = make_pairs(dialogue, vocab, max_context, utterance_len)
        for pair in pairs:
            target_text = normalize_text(dialogue.utterances[pair.turn_index].text)
            yield pair, target_text


def exact_match_positives(
    corpus: list[Dialogue],
    canned: CannedList,
    vocab: Vocabulary,
    utterance_len: int = 40,
    max_context: int = 20,
) -> list[WeakLabel]:
    """Positive labels where the normalized agent target equals a canned text."""
    lookup = {r.normalized: r.id for r in canned}
    labels = []
    for pair, target_text in _pairs_with_targets(corpus, vocab, utterance_len, max_context):
        canned_id = lookup.get(target_text)
        if canned_id is not None:
            labels.append(WeakLabel(pair=pair, canned_id=canned_id,
                                    polarity=POSITIVE, source=SOURCE_EXACT))
    return labels


def fuzzy_match_positives(
    corpus: list[Dialogue],
    canned: CannedList,
    embedder: Embedder,
    threshold: float = DEFAULT_SIM_THRESHOLD,
    vocab: Vocabulary | None = None,
    utterance_len: int = 40,
    max_context: int = 20,
) -> list[WeakLabel]:
    """Positives for agent targets that miss every exact match but embed within
    `threshold` of a canned response; ties go to the lowest canned id."""
    exact = {r.normalized for r in canned}
    canned_matrix = np.asarray([embedder(r.text) for r in canned], dtype=np.float64)
    canned_norms = np.linalg.norm(canned_matrix, axis=1)
    cache: dict[str, tuple[int, float]] = {}
    labels = []
    for pair, target_text in _pairs_with_targets(corpus, vocab, utterance_len, max_context):
        if target_text in exact:
            continue
        if target_text not in cache:
            vector = np.asarray(embedder(target_text), dtype=np.float64)
            sims = canned_matrix @ vector / np.maximum(
                canned_norms * np.linalg.norm(vector), 1e-8)
            best = int(sims.argmax())  # argmax takes the first (lowest id) on ties
            cache[target_text] = (best, float(sims[best]))
        best_id, best_sim = cache[target_text]
        if best_sim >= threshold:
            labels.append(WeakLabel(pair=pair, canned_id=best_id,
                                    polarity=POSITIVE, source=SOURCE_FUZZY))
    return labels


def build_negative_dataset(
    positives: list[WeakLabel],
    corpus: list[Dialogue],
    canned: CannedList,
    embedder: Embedder,
    usage_negatives: list[WeakLabel] | None = None,
    seed: int = 0,
    threshold: float = DEFAULT_SIM_THRESHOLD,
    quota_per_strategy: int | None = None,
    usage_sample_rate: float = DEFAULT_USAGE_SAMPLE_RATE,
    vocab: Vocabulary | None = None,
    utterance_len: int = 40,
    max_context: int = 20,
) -> list[WeakLabel]:
    """Three negative strategies: wrong canned target on a positive context,
    random canned target on a context with no matching canned response, and
    (down-sampled) rejected suggestions from the usage log.
    """
    rng = np.random.default_rng(seed)
    canned_matrix = np.asarray([embedder(r.text) for r in canned], dtype=np.float64)
    canned_norms = np.linalg.norm(canned_matrix, axis=1)

    def similarities(text: str) -> np.ndarray:
        vector = np.asarray(embedder(text), dtype=np.float64)
        return canned_matrix @ vector / np.maximum(canned_norms * np.linalg.norm(vector), 1e-8)

    positive_keys = {(lbl.pair.dialogue_id, lbl.pair.turn_index, lbl.canned_id)
                     for lbl in positives}
    texts = {}
    for dialogue in corpus:
        for index, utt in enumerate(dialogue.utterances):
            texts[(dialogue.id, index)] = normalize_text(utt.text)

    negatives: list[WeakLabel] = []

    # Strategy 1: positive contexts with a dissimilar (wrong) canned target.
    wrong_count = 0
    for label in positives:
        if quota_per_strategy is not None and wrong_count >= quota_per_strategy:
            break
        target_text = texts.get((label.pair.dialogue_id, label.pair.turn_index))
        if target_text is None:
            continue
        sims = similarities(target_text)
        eligible = np.flatnonzero(sims < threshold)
        eligible = eligible[eligible != label.canned_id]
        if len(eligible) == 0:
            continue
        choice = int(eligible[int(rng.integers(len(eligible)))])
        key = (label.pair.dialogue_id, label.pair.turn_index, choice)
        if key in positive_keys:
            continue
        negatives.append(WeakLabel(pair=label.pair, canned_id=choice, polarity=NEGATIVE,
                                   negative_strategy=STRATEGY_WRONG_TARGET))
        wrong_count += 1

    # Strategy 2: contexts whose true response matches nothing in the list.
    nomatch_count = 0
    for pair, target_text in _pairs_with_targets(corpus, vocab, utterance_len, max_context):
        if quota_per_strategy is not None and nomatch_count >= quota_per_strategy:
            break
        sims = similarities(target_text)
        if sims.max() >= threshold:
            continue
        choice = int(rng.integers(len(canned)))
        key = (pair.dialogue_id, pair.turn_index, choice)
        if key in positive_keys:
            continue
        negatives.append(WeakLabel(pair=pair, canned_id=choice, polarity=NEGATIVE,
                                   negative_strategy=STRATEGY_NO_MATCH_CONTEXT))
        nomatch_count += 1

    # Strategy 3: rejected suggestions from the usage log, down-weighted
    # because unused suggestions are only weak evidence of a wrong response.
    rejected_count = 0
    for label in usage_negatives or []:
        if quota_per_strategy is not None and rejected_count >= quota_per_strategy:
            break
        if rng.random() > usage_sample_rate:
            continue
        key = (label.pair.dialogue_id, label.pair.turn_index, label.canned_id)
        if key in positive_keys:
            continue
        negatives.append(WeakLabel(pair=label.pair, canned_id=label.canned_id,
                                   polarity=NEGATIVE, negative_strategy=STRATEGY_REJECTED))
        rejected_count += 1
    return negatives
