"""Ranking metrics, canned-list ranking, and confidence-threshold calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .curation import CannedEmbeddings, CannedList
from .model import HierarchicalModel, encode_batch

HISTOGRAM_BIN_WIDTH = 0.05


class KTooLarge(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class TooFewCases(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


@dataclass
class RankingCase:
    """Candidate scores (higher is better) and the index of the true response."""

    scores: np.ndarray
    true_index: int

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not 0 <= self.true_index < len(self.scores):
            raise ValueError("true_index outside the candidate range")


def rank_of_true(case: RankingCase) -> int:
    """1-based rank of the true candidate; score ties break to the lower index."""
    true_score = case.scores[case.true_index]
    better = int((case.scores > true_score).sum())
    tied_before = int((case.scores[: case.true_index] == true_score).sum())
    return 1 + better + tied_before


def recall_at_k(cases: list[RankingCase], k: int) -> float:
    """Fraction of cases whose true candidate ranks in the top k."""
    if not cases:
        raise EmptyInput("no ranking cases")
    if any(k > len(case.scores) for case in cases):
        raise KTooLarge(f"k={k} exceeds a case's candidate count")
    return float(np.mean([rank_of_true(case) <= k for case in cases]))


def avg_pos(cases: list[RankingCase]) -> float:
    """Mean 1-based rank of the true candidate."""
    if not cases:
        raise EmptyInput("no ranking cases")
    return float(np.mean([rank_of_true(case) for case in cases]))


# ---------------------------------------------------------------------------
# Canned-list ranking per objective
# ---------------------------------------------------------------------------

def embed_canned(model: HierarchicalModel, canned: CannedList, vocab,
                 checkpoint_id: str | None = None) -> CannedEmbeddings:
    """Target-side embeddings of every canned response under the current model."""
    from .corpus import encode_utterance_ids

    rows = [encode_utterance_ids(r.text, vocab, model.config.utterance_len) for r in canned]
    matrix = model.embed_target_batch(np.asarray(rows)).data.copy()
    return CannedEmbeddings(matrix=matrix, canned_ids=[r.id for r in canned],
                            checkpoint_id=checkpoint_id)


def rank_canned(
    model: HierarchicalModel,
    context_embedding: np.ndarray,
    canned_embs: CannedEmbeddings,
    objective: str = "contrastive",
    head=None,
    model_checkpoint_id: str | None = None,
) -> list[tuple[int, float]]:
    """Full candidate ordering as (canned_id, confidence), best first.

    Contrastive confidence is cosine similarity; binary is the pair sigmoid;
    multiclass is the softmax row. Ties keep ascending-id order.
    """
    if (canned_embs.checkpoint_id and model_checkpoint_id
            and canned_embs.checkpoint_id != model_checkpoint_id):
        raise ChecksumMismatch(
            f"canned embeddings built by {canned_embs.checkpoint_id}, "
            f"model is {model_checkpoint_id}")
    context = np.asarray(context_embedding, dtype=canned_embs.matrix.dtype)
    if objective == "contrastive":
        norms = np.linalg.norm(canned_embs.matrix, axis=1) * np.linalg.norm(context)
        confidences = canned_embs.matrix @ context / np.maximum(norms, 1e-8)
    elif objective == "binary":
        n = len(canned_embs.canned_ids)
        ctx = ad.constant(np.repeat(context[None, :], n, axis=0))
        scores = head.scores(ctx, ad.constant(canned_embs.matrix))
        confidences = scores.data.reshape(-1)
    elif objective == "multiclass":
        from .objectives import multiclass_forward

        probs = multiclass_forward(head, ad.constant(context[None, :]),
                                   n_expected_classes=len(canned_embs.canned_ids))
        confidences = probs.data[0]
    else:
        raise ValueError(f"unknown objective {objective!r}")
    order = np.argsort(-confidences, kind="stable")
    return [(int(canned_embs.canned_ids[i]), float(confidences[i])) for i in order]


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------

@dataclass
class ThresholdReport:
    threshold: float
    target_rate: float
    suggestion_rate: float
    accuracy_when_suggesting: float | None
    histogram_edges: list[float] = field(default_factory=list)
    histogram_counts: list[int] = field(default_factory=list)
    n_cases: int = 0

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "target_rate": self.target_rate,
            "suggestion_rate": self.suggestion_rate,
            "accuracy_when_suggesting": self.accuracy_when_suggesting,
            "histogram_edges": self.histogram_edges,
            "histogram_counts": self.histogram_counts,
            "n_cases": self.n_cases,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ThresholdReport":
        return cls(**data)


def calibrate_threshold(
    top_confidences: list[float],
    target_rate: float,
    correct: list[bool] | None = None,
    min_cases: int = 100,
) -> ThresholdReport:
    """Pick the (1 - target_rate) quantile of top-1 confidences as the gate.

    The suggestion rate measured back on the same confidences lands within one
    sample of the target; `correct` flags, when given, yield the accuracy of
    the gated suggestions. Histogram bins are 0.05 wide and cover all cases.
    """
    if not 0.0 < target_rate <= 1.0:
        raise ValueError("target_rate must be in (0, 1]")
    confidences = np.asarray(top_confidences, dtype=np.float64)
    if len(confidences) < min_cases:
        raise TooFewCases(f"need at least {min_cases} confidences, got {len(confidences)}")
    ordered = np.sort(confidences)
    cut = int(np.floor((1.0 - target_rate) * len(ordered)))
    cut = min(cut, len(ordered) - 1)
    threshold = float(ordered[cut])
    suggesting = confidences >= threshold
    rate = float(suggesting.mean())
    accuracy = None
    if correct is not None:
        flags = np.asarray(correct, dtype=bool)
        if len(flags) != len(confidences):
            raise ValueError("correct flags must align with confidences")
        if suggesting.any():
            accuracy = float(flags[suggesting].mean())
    low = min(0.0, float(np.floor(confidences.min() / HISTOGRAM_BIN_WIDTH)) * HISTOGRAM_BIN_WIDTH)
    high = max(1.0, float(confidences.max()))
    n_bins = int(np.ceil((high - low) / HISTOGRAM_BIN_WIDTH)) + 1
    edges = [low + i * HISTOGRAM_BIN_WIDTH for i in range(n_bins + 1)]
    counts, _ = np.histogram(confidences, bins=edges)
    return ThresholdReport(
        threshold=threshold,
        target_rate=target_rate,
        suggestion_rate=rate,
        accuracy_when_suggesting=accuracy,
        histogram_edges=[float(e) for e in edges],
        histogram_counts=[int(c) for c in counts],
        n_cases=len(confidences),
    )


# ---------------------------------------------------------------------------
# Evaluation protocols over (context, target) pairs
# ---------------------------------------------------------------------------

def batch_context_embeddings(model: HierarchicalModel, pairs) -> np.ndarray:
    """Context embeddings for many pairs in one encoder pass (eval mode)."""
    context_embs, _ = encode_batch(model, [p.context for p in pairs])
    return context_embs.data


def confidence_matrix(
    context_embs: np.ndarray,
    canned_embs: CannedEmbeddings,
    objective: str = "contrastive",
    head=None,
) -> np.ndarray:
    """(n_contexts, n_canned) confidences under the given objective."""
    if objective == "contrastive":
        ctx_norms = np.linalg.norm(context_embs, axis=1, keepdims=True)
        can_norms = np.linalg.norm(canned_embs.matrix, axis=1, keepdims=True)
        return (context_embs @ canned_embs.matrix.T) / np.maximum(ctx_norms * can_norms.T, 1e-8)
    if objective == "binary":
        n_ctx, n_can = len(context_embs), len(canned_embs.canned_ids)
        ctx = ad.constant(np.repeat(context_embs, n_can, axis=0))
        can = ad.constant(np.tile(canned_embs.matrix, (n_ctx, 1)))
        return head.scores(ctx, can).data.reshape(n_ctx, n_can)
    if objective == "multiclass":
        from .objectives import multiclass_forward

        probs = multiclass_forward(head, ad.constant(context_embs),
                                   n_expected_classes=len(canned_embs.canned_ids))
        return probs.data
    raise ValueError(f"unknown objective {objective!r}")


def cases_against_canned(
    model: HierarchicalModel,
    pairs,
    true_ids: list[int],
    canned_embs: CannedEmbeddings,
    objective: str = "contrastive",
    head=None,
) -> list[RankingCase]:
    """Protocol (a): rank the full canned list (true response included)."""
    id_to_pos = {cid: i for i, cid in enumerate(canned_embs.canned_ids)}
    context_embs = batch_context_embeddings(model, pairs)
    confidences = confidence_matrix(context_embs, canned_embs, objective=objective, head=head)
    return [RankingCase(scores=row, true_index=id_to_pos[true_id])
            for row, true_id in zip(confidences, true_ids)]


def cases_against_sampled(
    model: HierarchicalModel,
    pairs,
    pool_targets: list[list[int]],
    n_candidates: int = 128,
    seed: int = 0,
) -> list[RankingCase]:
    """Protocol (b): the true target against n-1 random in-corpus responses.

    Mirrors training, where the true response competes with the rest of its
    batch. Contrastive scoring only (cosine to the target embeddings).
    """
    rng = np.random.default_rng(seed)
    pool_matrix = model.embed_target_batch(np.asarray(pool_targets)).data
    cases = []
    for pair in pairs:
        context_emb = _context_embedding(model, pair)
        true_emb = model.embed_target(pair.target)
        chosen = rng.choice(len(pool_targets), size=min(n_candidates - 1, len(pool_targets)),
                            replace=False)
        candidates = np.vstack([true_emb[None, :], pool_matrix[chosen]])
        sims = candidates @ context_emb / np.maximum(
            np.linalg.norm(candidates, axis=1) * np.linalg.norm(context_emb), 1e-8)
        cases.append(RankingCase(scores=sims, true_index=0))
    return cases


def _context_embedding(model: HierarchicalModel, pair) -> np.ndarray:
    embs = [model.encode_utterance(row) for row in pair.context]
    return model.encode_context(embs)
