"""Hierarchical matching model: word -> utterance -> context embeddings.

The utterance encoder (stacked residual LSTM + layer norm) is shared between
the context side and the target side by default; the context encoder is a
stacked LSTM over utterance vectors. Separate linear heads project the context
and the target into one retrieval space so cosine distance is defined for
every (context, canned response) pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, Parameter, Rng, Tensor
from .corpus import Vocabulary

CHECKPOINT_FORMAT_VERSION = 1
INIT_SCALE = 0.08


class TokenOutOfRange(ValueError):
    pass


class EmptyContext(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; `full_scale()` gives the production-sized preset."""

    vocab_size: int
    word_dim: int = 64
    utterance_hidden: int = 128
    context_hidden: int = 128
    projection_dim: int = 128
    lstm_layers: int = 2
    dropout_keep: float = 0.5
    share_utterance_weights: bool = True
    utterance_len: int = 40
    max_context_utterances: int = 20
    pad_token_id: int = 0  # id of <empty>; the recurrence skips trailing padding

    def __post_init__(self) -> None:
        for name in ("vocab_size", "word_dim", "utterance_hidden", "context_hidden",
                     "projection_dim", "lstm_layers", "utterance_len", "max_context_utterances"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")

    @classmethod
    def full_scale(cls, vocab_size: int = 5000) -> "ModelConfig":
        return cls(vocab_size=vocab_size, word_dim=200, utterance_hidden=300,
                   context_hidden=300, projection_dim=300)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, name: str,
                 zero_init: bool = False, dtype=ad.DEFAULT_DTYPE):
        if zero_init:
            weight = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            weight = rng.uniform(-INIT_SCALE, INIT_SCALE, (in_dim, out_dim)).astype(dtype)
        self.weight = Parameter(weight, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class LstmStack:
    """Stacked LSTM with per-layer residual connections.

    Residuals add each layer's input sequence to its output sequence; when the
    dims differ (first layer) a learned linear shim maps the input across.
    Variable-length batching uses a mask that freezes a sample's states after
    its own final step, so batched results match one-at-a-time encoding.
    """

    def __init__(self, input_dim: int, hidden: int, n_layers: int, rng: Rng, name: str,
                 dtype=ad.DEFAULT_DTYPE):
        self.hidden = hidden
        self.layers: list[LstmParams] = []
        self.shims: list[Parameter | None] = []
        for layer in range(n_layers):
            in_dim = input_dim if layer == 0 else hidden
            self.layers.append(
                ad.init_lstm_params(in_dim, hidden, rng.fork(f"{name}.l{layer}"),
                                    f"{name}.l{layer}", dtype=dtype)
            )
            if in_dim != hidden:
                shim = rng.fork(f"{name}.shim{layer}").uniform(
                    -INIT_SCALE, INIT_SCALE, (in_dim, hidden)).astype(dtype)
                self.shims.append(Parameter(shim, f"{name}.l{layer}.shim"))
            else:
                self.shims.append(None)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for layer, shim in zip(self.layers, self.shims):
            params.extend(layer.parameters())
            if shim is not None:
                params.append(shim)
        return params

    def run(self, steps: list[Tensor], masks: list[np.ndarray] | None = None) -> Tensor:
        """Encode a sequence of (B, D) inputs; returns the final (B, H) output.

        masks, when given, hold one (B, 1) float array per step; a 0 entry
        freezes that sample's hidden/cell/output state at the previous step.
        """
        if not steps:
            raise EmptyContext("cannot encode an empty sequence")
        batch = steps[0].shape[0]
        dtype = steps[0].dtype
        inputs = steps
        output: Tensor | None = None
        for layer, shim in zip(self.layers, self.shims):
            zeros = ad.constant(np.zeros((batch, self.hidden), dtype=dtype))
            h, c, carried = zeros, zeros, zeros
            outputs: list[Tensor] = []
            for t, x in enumerate(inputs):
                h_new, c_new = ad.lstm_cell(x, h, c, layer)
                residual = x if shim is None else ad.matmul(x, shim)
                y = ad.add(h_new, residual)
                if masks is not None:
                    mask = masks[t]
                    h = ad.where(mask, h_new, h)
                    c = ad.where(mask, c_new, c)
                    carried = ad.where(mask, y, carried)
                else:
                    h, c, carried = h_new, c_new, y
                outputs.append(carried)
            inputs = outputs
            output = carried
        return output


class UtteranceEncoder:
    """Word embeddings -> residual LSTM stack -> layer norm, one vector per row."""

    def __init__(self, config: ModelConfig, word_table: Parameter, rng: Rng, name: str,
                 dtype=ad.DEFAULT_DTYPE):
        self.config = config
        self.word_table = word_table
        self.stack = LstmStack(config.word_dim, config.utterance_hidden,
                               config.lstm_layers, rng.fork(name), name, dtype=dtype)
        self.ln_gamma = Parameter(np.ones(config.utterance_hidden, dtype=dtype), f"{name}.ln.gamma")
        self.ln_beta = Parameter(np.zeros(config.utterance_hidden, dtype=dtype), f"{name}.ln.beta")

    def parameters(self) -> list[Parameter]:
        return [self.word_table] + self.stack.parameters() + [self.ln_gamma, self.ln_beta]

    def encode(self, token_rows: np.ndarray, empty_id: int | None = None) -> Tensor:
        """One vector per row; the recurrence carries state through trailing padding.

        empty_id marks padding; when None, every position is processed. The
        first position is always processed so an all-padding row stays defined.
        """
        rows = np.asarray(token_rows)
        if rows.ndim != 2:
            raise ValueError("expected a (batch, utterance_len) id matrix")
        if rows.min(initial=0) < 0 or rows.max(initial=0) >= self.config.vocab_size:
            raise TokenOutOfRange(f"token ids outside [0, {self.config.vocab_size})")
        steps = [ad.embedding(self.word_table, rows[:, t]) for t in range(rows.shape[1])]
        masks = None
        if empty_id is not None:
            dtype = str(self.word_table.dtype)
            masks = [
                ((rows[:, t] != empty_id) | (t == 0)).astype(dtype)[:, None]
                for t in range(rows.shape[1])
            ]
        final = self.stack.run(steps, masks)
        return ad.layer_norm(final, self.ln_gamma, self.ln_beta)


class HierarchicalModel:
    def __init__(self, config: ModelConfig, rng: Rng | None = None, dtype=ad.DEFAULT_DTYPE):
        self.config = config
        rng = rng or Rng(0)
        word = rng.fork("word").uniform(
            -INIT_SCALE, INIT_SCALE, (config.vocab_size, config.word_dim)).astype(dtype)
        self.word_table = Parameter(word, "word_table")
        self.utterance_encoder = UtteranceEncoder(config, self.word_table, rng, "utt", dtype=dtype)
        if config.share_utterance_weights:
            self.target_encoder = self.utterance_encoder
        else:
            self.target_encoder = UtteranceEncoder(config, self.word_table, rng, "tgt", dtype=dtype)
        self.context_stack = LstmStack(config.utterance_hidden, config.context_hidden,
                                       config.lstm_layers, rng.fork("ctx"), "ctx", dtype=dtype)
        self.context_proj = Linear(config.context_hidden, config.projection_dim,
                                   rng.fork("ctx_proj"), "ctx_proj", dtype=dtype)
        self.target_proj = Linear(config.utterance_hidden, config.projection_dim,
                                  rng.fork("tgt_proj"), "tgt_proj", dtype=dtype)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        seen: set[int] = set()
        groups = (self.utterance_encoder.parameters() + self.target_encoder.parameters()
                  + self.context_stack.parameters() + self.context_proj.parameters()
                  + self.target_proj.parameters())
        for p in groups:
            if id(p) not in seen:
                seen.add(id(p))
                params.append(p)
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # -- batched training-side forwards --------------------------------------
    def encode_utterance_batch(self, token_rows: np.ndarray) -> Tensor:
        return self.utterance_encoder.encode(token_rows, empty_id=self.config.pad_token_id)

    def encode_context_batch(
        self,
        utterance_embs: Tensor,
        row_indices: list[list[int]],
        train: bool = False,
        rng: Rng | None = None,
    ) -> Tensor:
        """Run the context LSTM over per-sample rows of `utterance_embs`.

        row_indices[i] lists, in order, the rows that form sample i's context.
        """
        if not row_indices or any(len(rows) == 0 for rows in row_indices):
            raise EmptyContext("every sample needs at least one context utterance")
        longest = max(len(rows) for rows in row_indices)
        dtype = utterance_embs.dtype
        steps: list[Tensor] = []
        masks: list[np.ndarray] = []
        for t in range(longest):
            idx = np.array([rows[t] if t < len(rows) else 0 for rows in row_indices])
            mask = np.array([[1.0 if t < len(rows) else 0.0] for rows in row_indices], dtype=dtype)
            steps.append(ad.take_rows(utterance_embs, idx))
            masks.append(mask)
        final = self.context_stack.run(steps, masks)
        if train and self.config.dropout_keep < 1.0:
            final = ad.dropout(final, self.config.dropout_keep, rng or Rng(0))
        return self.context_proj(final)

    def embed_target_batch(self, token_rows: np.ndarray, train: bool = False,
                           rng: Rng | None = None) -> Tensor:
        encoded = self.target_encoder.encode(token_rows, empty_id=self.config.pad_token_id)
        if train and self.config.dropout_keep < 1.0:
            encoded = ad.dropout(encoded, self.config.dropout_keep, rng or Rng(0))
        return self.target_proj(encoded)

    # -- single-input inference (serving path, always eval mode) -------------
    def encode_utterance(self, tokens: list[int]) -> np.ndarray:
        """Utterance embedding used for caching; deterministic in eval mode."""
        return self.encode_utterance_batch(np.asarray([tokens])).data[0]

    def encode_context(self, utterance_embs: list[np.ndarray]) -> np.ndarray:
        """Context embedding from precomputed utterance embeddings."""
        if len(utterance_embs) == 0:
            raise EmptyContext("context must contain at least one utterance")
        if len(utterance_embs) > self.config.max_context_utterances:
            utterance_embs = utterance_embs[-self.config.max_context_utterances :]
        stackedtensor = ad.constant(np.asarray(utterance_embs))
        rows = [list(range(len(utterance_embs)))]
        return self.encode_context_batch(stackedtensor, rows).data[0]

    def embed_target(self, tokens: list[int]) -> np.ndarray:
        return self.embed_target_batch(np.asarray([tokens])).data[0]

    def embed_context_tokens(self, context_rows: list[list[int]]) -> np.ndarray:
        """Fused convenience: encodes every utterance, then the context."""
        embs = [self.encode_utterance(row) for row in context_rows]
        return self.encode_context(embs)


def encode_batch(
    model: HierarchicalModel,
    contexts: list[list[list[int]]],
    targets: list[list[int]] | None = None,
    train: bool = False,
    rng: Rng | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Embed many contexts (and optionally targets) in one encoder pass.

    Identical token rows are encoded once and shared, mirroring the serving
    cache; gradients still accumulate across every use of a row.
    """
    unique: dict[tuple[int, ...], int] = {}
    rows: list[list[int]] = []

    def row_id(tokens: list[int]) -> int:
        key = tuple(tokens)
        if key not in unique:
            unique[key] = len(rows)
            rows.append(list(tokens))
        return unique[key]

    context_rows = [[row_id(u) for u in ctx] for ctx in contexts]
    shared = model.config.share_utterance_weights
    target_idx = None
    if targets is not None and shared:
        target_idx = np.array([row_id(t) for t in targets])
    utterance_embs = model.encode_utterance_batch(np.asarray(rows))
    context_embs = model.encode_context_batch(utterance_embs, context_rows, train=train, rng=rng)
    if targets is None:
        return context_embs, None
    if shared:
        gathered = ad.take_rows(utterance_embs, target_idx)
        if train and model.config.dropout_keep < 1.0:
            gathered = ad.dropout(gathered, model.config.dropout_keep, rng or Rng(0))
        target_embs = model.target_proj(gathered)
    else:
        target_embs = model.embed_target_batch(np.asarray(targets), train=train, rng=rng)
    return context_embs, target_embs


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def checkpoint_id_of(named: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(named):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(named[name]).tobytes())
    return digest.hexdigest()[:16]


@dataclass
class CheckpointBundle:
    model: HierarchicalModel
    vocab: Vocabulary
    objective: str
    checkpoint_id: str
    manifest: dict
    head: object | None = None


def save_checkpoint(
    directory: str | Path,
    model: HierarchicalModel,
    vocab: Vocabulary,
    objective: str = "contrastive",
    head: object | None = None,
    extra: dict | None = None,
) -> str:
    """Write params.npz + manifest.json + vocab.json; returns the checkpoint id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = {name: p.data for name, p in model.named_parameters().items()}
    head_meta = None
    if head is not None:
        head_meta = head.meta()
        for p in head.parameters():
            named[f"head.{p.name}"] = p.data
    checkpoint_id = checkpoint_id_of(named)
    np.savez(directory / "params.npz", **named)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "objective": objective,
        "config": model.config.to_dict(),
        "checkpoint_id": checkpoint_id,
        "head": head_meta,
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    vocab.save(directory / "vocab.json")
    return checkpoint_id


def load_checkpoint(directory: str | Path) -> CheckpointBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest['format_version']}")
    vocab = Vocabulary.load(directory / "vocab.json")
    config = ModelConfig.from_dict(manifest["config"])
    model = HierarchicalModel(config, rng=Rng(0))
    with np.load(directory / "params.npz") as payload:
        arrays = {name: payload[name] for name in payload.files}
    for name, param in model.named_parameters().items():
        param.data = arrays[name]
        param.zero_grad()
    head = None
    if manifest.get("head"):
        from .objectives import build_head  # deferred: objectives imports this module

        head = build_head(manifest["head"], config)
        for p in head.parameters():
            p.data = arrays[f"head.{p.name}"]
            p.zero_grad()
    restored = {name: p.data for name, p in model.named_parameters().items()}
    if head is not None:
        for p in head.parameters():
            restored[f"head.{p.name}"] = p.data
    return CheckpointBundle(
        model=model,
        vocab=vocab,
        objective=manifest["objective"],
        checkpoint_id=checkpoint_id_of(restored),
        manifest=manifest,
        head=head,
    )
