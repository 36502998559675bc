"""Training objectives over the shared hierarchical encoder.

Three interchangeable objectives: max-margin contrastive ranking with
in-batch negatives, binary classification over (context, target) pairs with
50% in-batch target shuffling, and multi-class classification straight onto
canned-response ids.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor
from .corpus import ContextTargetPair
from .model import HierarchicalModel, Linear, ModelConfig, encode_batch, save_checkpoint
from .optim import Optimizer, OptimizerConfig

OBJECTIVES = ("contrastive", "binary", "multiclass")


class BatchTooSmall(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class ClassCountMismatch(ValueError):
    pass


@dataclass
class Batch:
    """Aligned context/target token rows, with labels for the classifier objectives."""

    contexts: list[list[list[int]]]
    targets: list[list[int]]
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.contexts) != len(self.targets):
            raise ValueError("contexts and targets must align")
        if self.labels is not None and len(self.labels) != len(self.targets):
            raise ValueError("labels must align with the batch")

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class TrainingConfig:
    objective: str = "contrastive"
    margin: float = 1e-4
    batch_size: int = 128
    epochs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rng_seed: int = 0
    n_classes: int | None = None
    grad_clip: float | None = 5.0
    early_stop_patience: int = 3  # epochs without held-out r@3 improvement; 0 disables
    negatives_per_positive: int = 2  # binary-vs-canned mode: wrong canned per true pair

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.objective == "multiclass" and not self.n_classes:
            raise ValueError("multiclass training needs n_classes")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def max_margin_loss(context_embs: Tensor, target_embs: Tensor, margin: float) -> Tensor:
    """Triplet ranking loss over every in-batch triplet.

    Each context's positive is its own target; its negatives are the other
    N-1 targets. Cosine distance throughout; the hinge plus the margin drops
    triplets whose negative already sits far enough away. Averaged over N.
    """
    n = context_embs.shape[0]
    if n < 2:
        raise BatchTooSmall("contrastive loss needs at least 2 pairs in the batch")
    distances = ad.sub(1.0, ad.cosine_similarity_matrix(context_embs, target_embs))
    positives = ad.reshape(ad.gather_labels(distances, np.arange(n)), (n, 1))
    hinge = ad.relu(ad.add(margin, ad.sub(positives, distances)))
    off_diagonal = ad.constant(
        (1.0 - np.eye(n)).astype(str(context_embs.dtype))
    )
    return ad.mul(ad.tsum(ad.mul(hinge, off_diagonal)), 1.0 / n)


def make_binary_batch(batch: Batch, rng: Rng) -> Batch:
    """Keep half the batch as true pairs; shuffle targets within the other half.

    The corrupted half receives its targets through a derangement-style cycle,
    so no pair keeps its own target and (for halves of two or more) the batch
    target multiset is preserved. When duplicate target texts exist, swaps
    repair assignments that would hand a pair a copy of its own text, since
    such a pair would not actually be negative.
    """
    n = len(batch)
    if n < 2:
        raise BatchTooSmall("binary batch needs at least 2 pairs")
    order = rng.permutation(n)
    corrupted = np.sort(order[: n // 2])
    labels = np.ones(n, dtype=np.int64)
    labels[corrupted] = 0
    targets = list(batch.targets)
    if len(corrupted) >= 2:
        cycle = _sattolo_cycle(list(corrupted), rng)
        originals = {i: batch.targets[i] for i in corrupted}
        assigned = {destination: source for source, destination in cycle.items()}
        _repair_same_text(assigned, originals, rng)
        for destination, source in assigned.items():
            targets[destination] = originals[source]
    else:
        # Half of size one cannot be deranged in place; borrow another pair's
        # target (the multiset-preservation property starts at N >= 4).
        victim = int(corrupted[0])
        donor = int(order[n // 2])
        targets[victim] = batch.targets[donor]
    return Batch(contexts=batch.contexts, targets=targets, labels=labels)


def _sattolo_cycle(indices: list[int], rng: Rng) -> dict[int, int]:
    """Random cyclic permutation of indices: maps source -> destination, no fixed points."""
    cycle = list(indices)
    for i in range(len(cycle) - 1, 0, -1):
        j = int(rng.integers(0, i))
        cycle[i], cycle[j] = cycle[j], cycle[i]
    return {cycle[i]: cycle[(i + 1) % len(cycle)] for i in range(len(cycle))}


def _repair_same_text(assigned: dict[int, int], originals: dict[int, list[int]],
                      rng: Rng, max_sweeps: int = 3) -> None:
    """Swap assignments so no destination receives a copy of its own target text.

    Best effort: repairs happen only through swaps inside the corrupted half,
    so the multiset stays intact; an unrepairable tail (all remaining texts
    identical) is left alone.
    """
    destinations = list(assigned)
    for _ in range(max_sweeps):
        conflicts = [d for d in destinations
                     if originals[assigned[d]] == originals[d]]
        if not conflicts:
            return
        repaired = False
        for d in conflicts:
            others = [o for o in destinations
                      if o != d
                      and originals[assigned[o]] != originals[d]
                      and originals[assigned[d]] != originals[o]]
            if others:
                o = others[int(rng.integers(len(others)))]
                assigned[d], assigned[o] = assigned[o], assigned[d]
                repaired = True
        if not repaired:
            return


class BinaryHead:
    """Pair scorer: sigmoid(w . [c; t; c*t] + c M t + b) on unit-normalized embeddings.

    The bilinear and elementwise-product terms carry the context-target
    interaction; a plain linear layer over the concatenation alone cannot
    rank candidates per context.
    """

    INTERACTION_INIT_SCALE = 2.0

    def __init__(self, projection_dim: int, rng: Rng | None = None, dtype=ad.DEFAULT_DTYPE):
        self.projection_dim = projection_dim
        self.w = Parameter(np.zeros((3 * projection_dim, 1), dtype=dtype), "binary.w")
        # Identity start makes the initial logit a scaled cosine, so the loss
        # shapes the shared embedding space from the first step.
        self.interaction = Parameter(
            (self.INTERACTION_INIT_SCALE * np.eye(projection_dim)).astype(dtype),
            "binary.interaction",
        )
        self.b = Parameter(np.zeros(1, dtype=dtype), "binary.b")

    def logits(self, context_embs: Tensor, target_embs: Tensor) -> Tensor:
        c = _unit_rows(context_embs)
        t = _unit_rows(target_embs)
        pointwise = ad.mul(c, t)
        linear = ad.matmul(ad.concat([c, t, pointwise], axis=1), self.w)
        crossed = ad.tsum(ad.mul(ad.matmul(c, self.interaction), t), axis=1, keepdims=True)
        return ad.add(ad.add(linear, crossed), self.b)

    def scores(self, context_embs: Tensor, target_embs: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(context_embs, target_embs))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.interaction, self.b]

    def meta(self) -> dict:
        return {"kind": "binary", "projection_dim": self.projection_dim}


def _unit_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    norms = ad.clip_min(ad.sqrt(ad.tsum(ad.mul(x, x), axis=1, keepdims=True)), eps)
    return ad.div(x, norms)


def binary_loss(head: BinaryHead, context_embs: Tensor, target_embs: Tensor,
                labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of the pair scores against 0/1 labels."""
    z = head.logits(context_embs, target_embs)
    y = ad.constant(np.asarray(labels, dtype=str(z.dtype)).reshape(-1, 1))
    nll = ad.add(ad.mul(y, ad.softplus(ad.mul(z, -1.0))),
                 ad.mul(ad.sub(1.0, y), ad.softplus(z)))
    return ad.tmean(nll)


class MulticlassHead:
    """Context classifier: two tanh layers then a zero-initialized logit layer."""

    def __init__(self, projection_dim: int, n_classes: int, hidden: int = 256,
                 rng: Rng | None = None, dtype=ad.DEFAULT_DTYPE):
        rng = rng or Rng(0)
        self.projection_dim = projection_dim
        self.n_classes = n_classes
        self.hidden = hidden
        self.fc1 = Linear(projection_dim, hidden, rng.fork("mc1"), "multiclass.fc1", dtype=dtype)
        self.fc2 = Linear(hidden, hidden, rng.fork("mc2"), "multiclass.fc2", dtype=dtype)
        self.fc3 = Linear(hidden, n_classes, rng.fork("mc3"), "multiclass.fc3",
                          zero_init=True, dtype=dtype)

    def logits(self, context_embs: Tensor) -> Tensor:
        h = ad.tanh(self.fc1(context_embs))
        h = ad.tanh(self.fc2(h))
        return self.fc3(h)

    def probabilities(self, context_embs: Tensor) -> Tensor:
        return ad.softmax(self.logits(context_embs))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters() + self.fc3.parameters()

    def meta(self) -> dict:
        return {"kind": "multiclass", "projection_dim": self.projection_dim,
                "n_classes": self.n_classes, "hidden": self.hidden}


def multiclass_forward(head: MulticlassHead, context_embs: Tensor,
                       n_expected_classes: int | None = None) -> Tensor:
    """Class probabilities per context; validates the head against the canned list size."""
    if n_expected_classes is not None and head.n_classes != n_expected_classes:
        raise ClassCountMismatch(
            f"head has {head.n_classes} classes, canned list has {n_expected_classes}")
    return head.probabilities(context_embs)


def build_head(meta: dict, config: ModelConfig):
    if meta["kind"] == "binary":
        return BinaryHead(meta["projection_dim"])
    if meta["kind"] == "multiclass":
        return MulticlassHead(meta["projection_dim"], meta["n_classes"], meta["hidden"])
    raise ValueError(f"unknown head kind {meta['kind']!r}")


# ---------------------------------------------------------------------------
# Batched encoding shared by the objectives
# ---------------------------------------------------------------------------

def encode_pair_batch(
    model: HierarchicalModel,
    batch: Batch,
    train: bool = False,
    rng: Rng | None = None,
    with_targets: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Embed a batch's contexts (and targets) through the hierarchical encoders."""
    return encode_batch(model, batch.contexts,
                        batch.targets if with_targets else None, train=train, rng=rng)


def in_batch_recall_at_1(context_embs: np.ndarray, target_embs: np.ndarray) -> float:
    """Fraction of contexts whose own target ties for the nearest in-batch target.

    Duplicate target texts give exactly equal similarities; picking a copy of
    the right response still counts as correct.
    """
    sims = _cosine_matrix(context_embs, target_embs)
    own = sims[np.arange(len(sims)), np.arange(len(sims))]
    return float(np.mean(own >= sims.max(axis=1) - 1e-9))


def _cosine_matrix(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a @ b.T) / np.maximum(na * nb.T, eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    r_at_1: float | None = None
    r_at_3: float | None = None
    r_at_10: float | None = None

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "r_at_1": self.r_at_1,
                "r_at_3": self.r_at_3, "r_at_10": self.r_at_10}


@dataclass
class TrainResult:
    model: HierarchicalModel
    head: BinaryHead | MulticlassHead | None
    metrics: list[EpochMetrics]
    best_epoch: int
    checkpoint_dir: Path | None = None


EvalFn = Callable[[HierarchicalModel, object], dict]


def train(
    model: HierarchicalModel,
    pairs: list[ContextTargetPair],
    config: TrainingConfig,
    *,
    class_ids: list[int] | None = None,
    canned_targets: list[list[int]] | None = None,
    vocab=None,
    out_dir: str | Path | None = None,
    eval_fn: EvalFn | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Epoch loop with shuffled batches; deterministic for a fixed seed.

    class_ids align with pairs and hold canned-response ids (from the
    weak-label pipeline); they are required for multiclass and switch binary
    training from in-batch target shuffling to canned-list supervision when
    canned_targets (token rows per canned id) is also given. In that mode each
    true pair is joined by freshly sampled wrong-canned negatives. eval_fn,
    when given, returns {"r_at_1": .., "r_at_3": .., "r_at_10": ..} on
    held-out data; early stopping watches r_at_3.
    """
    config.validate()
    if not pairs:
        raise EmptyDataset("no training pairs")
    needs_classes = config.objective == "multiclass" or (
        config.objective == "binary" and canned_targets is not None)
    if needs_classes:
        if class_ids is None or len(class_ids) != len(pairs):
            raise ClassCountMismatch(f"{config.objective} training needs one class id per pair")
        bound = config.n_classes if config.objective == "multiclass" else len(canned_targets)
        if max(class_ids) >= bound or min(class_ids) < 0:
            raise ClassCountMismatch(f"class ids must fall in [0, {bound})")
        if config.objective == "binary" and len(canned_targets) < 2:
            raise ClassCountMismatch("binary-vs-canned training needs at least 2 canned targets")

    rng = Rng(config.rng_seed)
    shuffle_rng = rng.fork("shuffle")
    dropout_rng = rng.fork("dropout")
    corrupt_rng = rng.fork("binary-shuffle")
    head: BinaryHead | MulticlassHead | None = None
    if config.objective == "binary":
        head = BinaryHead(model.config.projection_dim, rng.fork("head"))
    elif config.objective == "multiclass":
        head = MulticlassHead(model.config.projection_dim, config.n_classes,
                              rng=rng.fork("head"))
    params = model.parameters() + (head.parameters() if head else [])
    optimizer = Optimizer(params, config.optimizer)

    out_dir = Path(out_dir) if out_dir else None
    metrics_log = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_log = open(out_dir / "metrics.jsonl", "w")

    history: list[EpochMetrics] = []
    best_r3 = -1.0
    best_epoch = 0
    stale = 0
    indices = np.arange(len(pairs))
    try:
        for epoch in range(1, config.epochs + 1):
            optimizer.set_epoch(epoch - 1)
            order = shuffle_rng.permutation(len(pairs))
            losses: list[float] = []
            for start in range(0, len(order), config.batch_size):
                chosen = indices[order[start : start + config.batch_size]]
                if len(chosen) < 2:
                    continue
                batch = Batch(
                    contexts=[pairs[i].context for i in chosen],
                    targets=[pairs[i].target for i in chosen],
                    labels=(np.array([class_ids[i] for i in chosen])
                            if needs_classes else None),
                )
                loss = _objective_loss(model, head, batch, config, dropout_rng,
                                       corrupt_rng, canned_targets)
                optimizer.zero_grad()
                ad.backward(loss)
                if config.grad_clip:
                    _clip_grads(params, config.grad_clip)
                optimizer.step()
                losses.append(loss.item())
            entry = EpochMetrics(epoch=epoch, loss=float(np.mean(losses)))
            if eval_fn is not None:
                scores = eval_fn(model, head)
                entry.r_at_1 = scores.get("r_at_1")
                entry.r_at_3 = scores.get("r_at_3")
                entry.r_at_10 = scores.get("r_at_10")
            history.append(entry)
            if metrics_log:
                metrics_log.write(json.dumps(entry.to_record()) + "\n")
                metrics_log.flush()
            if log:
                log(f"epoch {epoch}: loss={entry.loss:.4f}"
                    + (f" r@1={entry.r_at_1:.3f} r@3={entry.r_at_3:.3f}" if entry.r_at_1 is not None else ""))
            if out_dir and vocab is not None:
                save_checkpoint(out_dir / f"epoch_{epoch:03d}", model, vocab,
                                objective=config.objective, head=head)
            if entry.r_at_3 is not None:
                if entry.r_at_3 > best_r3:
                    best_r3 = entry.r_at_3
                    best_epoch = epoch
                    stale = 0
                    if out_dir and vocab is not None:
                        save_checkpoint(out_dir / "best", model, vocab,
                                        objective=config.objective, head=head)
                else:
                    stale += 1
                    if config.early_stop_patience and stale >= config.early_stop_patience:
                        break
            else:
                best_epoch = epoch
    finally:
        if metrics_log:
            metrics_log.close()
    return TrainResult(model=model, head=head, metrics=history,
                       best_epoch=best_epoch, checkpoint_dir=out_dir)


def _objective_loss(model, head, batch: Batch, config: TrainingConfig,
                    dropout_rng: Rng, corrupt_rng: Rng,
                    canned_targets: list[list[int]] | None = None) -> Tensor:
    if config.objective == "contrastive":
        ctx, tgt = encode_pair_batch(model, batch, train=True, rng=dropout_rng)
        return max_margin_loss(ctx, tgt, config.margin)
    if config.objective == "binary":
        if canned_targets is not None:
            expanded = _canned_binary_batch(batch, canned_targets,
                                            config.negatives_per_positive, corrupt_rng)
            ctx, tgt = encode_pair_batch(model, expanded, train=True, rng=dropout_rng)
            return binary_loss(head, ctx, tgt, expanded.labels)
        shuffled = make_binary_batch(batch, corrupt_rng)
        ctx, tgt = encode_pair_batch(model, shuffled, train=True, rng=dropout_rng)
        return binary_loss(head, ctx, tgt, shuffled.labels)
    ctx, _ = encode_pair_batch(model, batch, train=True, rng=dropout_rng, with_targets=False)
    return ad.cross_entropy(head.logits(ctx), batch.labels)


def _canned_binary_batch(batch: Batch, canned_targets: list[list[int]],
                         negatives_per_positive: int, rng: Rng) -> Batch:
    """True canned target (label 1) plus freshly sampled wrong ones (label 0)."""
    contexts, targets, labels = [], [], []
    for context, canned_id in zip(batch.contexts, batch.labels):
        contexts.append(context)
        targets.append(canned_targets[int(canned_id)])
        labels.append(1)
        for _ in range(negatives_per_positive):
            wrong = int(rng.integers(0, len(canned_targets)))
            while wrong == int(canned_id):
                wrong = int(rng.integers(0, len(canned_targets)))
            contexts.append(context)
            targets.append(canned_targets[wrong])
            labels.append(0)
    return Batch(contexts=contexts, targets=targets, labels=np.array(labels))


def _clip_grads(params: list[Parameter], max_norm: float) -> None:
    total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
