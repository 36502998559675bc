"""Skip-thought-style utterance embedder for curation.

A single-layer LSTM encodes the current utterance; teacher-forced LSTM
decoders reconstruct the two previous and two following utterances from the
encoder's final state. Decoder weights are tied per direction (one parameter
set for both "previous" offsets, one for both "next" offsets). The trained
encoder is the utterance embedding used by clustering and the similarity
classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, Parameter, Rng, Tensor
from .corpus import Dialogue, Vocabulary, encode_utterance_ids
from .model import Linear
from .optim import Optimizer, OptimizerConfig

OFFSETS = (-2, -1, 1, 2)


class WindowTooShort(ValueError):
    pass


@dataclass(frozen=True)
class SkipThoughtConfig:
    vocab_size: int
    word_dim: int = 32
    hidden: int = 64
    utterance_len: int = 16
    pad_token_id: int = 0
    eos_token_id: int = 1  # doubles as the decoder start symbol

    def __post_init__(self) -> None:
        for name in ("vocab_size", "word_dim", "hidden", "utterance_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Window:
    """An agent utterance and its padded neighbor rows keyed by offset."""

    center: list[int]
    neighbors: dict[int, list[int]]


def make_windows(corpus: list[Dialogue], vocab: Vocabulary,
                 utterance_len: int) -> list[Window]:
    """One window per agent utterance; absent neighbors are simply omitted.

    Raises WindowTooShort only if an agent utterance has no neighbors at all,
    which cannot happen for regularized dialogues (always >= 2 turns).
    """
    windows = []
    for dialogue in corpus:
        rows = [encode_utterance_ids(u.text, vocab, utterance_len) for u in dialogue.utterances]
        for index, utt in enumerate(dialogue.utterances):
            if utt.speaker != "agent":
                continue
            neighbors = {
                offset: rows[index + offset]
                for offset in OFFSETS
                if 0 <= index + offset < len(rows)
            }
            if not neighbors:
                raise WindowTooShort(f"agent utterance {dialogue.id}:{index} has no neighbors")
            windows.append(Window(center=rows[index], neighbors=neighbors))
    return windows


class SkipThoughtModel:
    def __init__(self, config: SkipThoughtConfig, rng: Rng | None = None,
                 dtype=ad.DEFAULT_DTYPE):
        self.config = config
        rng = rng or Rng(0)
        table = rng.fork("word").uniform(-0.08, 0.08,
                                         (config.vocab_size, config.word_dim)).astype(dtype)
        self.word_table = Parameter(table, "st.word_table")
        self.encoder = ad.init_lstm_params(config.word_dim, config.hidden,
                                           rng.fork("enc"), "st.enc", dtype=dtype)
        self.decoders: dict[str, LstmParams] = {}
        self.out_proj: dict[str, Linear] = {}
        for direction in ("prev", "next"):
            self.decoders[direction] = ad.init_lstm_params(
                config.word_dim, config.hidden, rng.fork(f"dec.{direction}"),
                f"st.dec.{direction}", dtype=dtype)
            self.out_proj[direction] = Linear(config.hidden, config.vocab_size,
                                              rng.fork(f"out.{direction}"),
                                              f"st.out.{direction}", zero_init=True, dtype=dtype)

    def parameters(self) -> list[Parameter]:
        params = [self.word_table] + self.encoder.parameters()
        for direction in ("prev", "next"):
            params.extend(self.decoders[direction].parameters())
            params.extend(self.out_proj[direction].parameters())
        return params

    def _run_encoder(self, rows: np.ndarray) -> Tensor:
        batch, length = rows.shape
        dtype = str(self.word_table.dtype)
        zeros = ad.constant(np.zeros((batch, self.config.hidden), dtype=dtype))
        h = c = carried = zeros
        for t in range(length):
            x = ad.embedding(self.word_table, rows[:, t])
            mask = ((rows[:, t] != self.config.pad_token_id) | (t == 0)).astype(dtype)[:, None]
            h_new, c_new = ad.lstm_cell(x, h, c, self.encoder)
            h = ad.where(mask, h_new, h)
            c = ad.where(mask, c_new, c)
            carried = h
        return carried

    def encode_rows(self, rows: np.ndarray) -> Tensor:
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise ValueError("expected (batch, utterance_len) token rows")
        return self._run_encoder(rows)

    def embed(self, tokens: list[int]) -> np.ndarray:
        """Embedding of one padded utterance (the encoder's final state)."""
        return self.encode_rows(np.asarray([tokens])).data[0]

    def decoder_loss(self, direction: str, initial: Tensor, target_rows: np.ndarray) -> Tensor:
        """Teacher-forced token cross-entropy, summed over non-padding positions.

        Inputs are the targets shifted right with <eos> as the start symbol;
        the initial hidden state is the encoder output for the center row.
        """
        rows = np.asarray(target_rows)
        batch, length = rows.shape
        dtype = str(self.word_table.dtype)
        params = self.decoders[direction]
        proj = self.out_proj[direction]
        eos = np.full(batch, self.config.eos_token_id, dtype=rows.dtype)
        inputs = np.concatenate([eos[:, None], rows[:, :-1]], axis=1)
        h = initial
        c = ad.constant(np.zeros((batch, self.config.hidden), dtype=dtype))
        total = None
        for t in range(length):
            mask = rows[:, t] != self.config.pad_token_id
            if not mask.any():
                break
            x = ad.embedding(self.word_table, inputs[:, t])
            h, c = ad.lstm_cell(x, h, c, params)
            logits = proj(h)
            log_probs = ad.log_softmax(logits)
            picked = ad.gather_labels(log_probs, rows[:, t])
            masked = ad.mul(picked, ad.constant(mask.astype(dtype)))
            step_loss = ad.mul(ad.tsum(masked), -1.0)
            total = step_loss if total is None else ad.add(total, step_loss)
        if total is None:
            total = ad.tensor(0.0)
        return total


def window_loss(model: SkipThoughtModel, windows: list[Window]) -> Tensor:
    """Sum of the four decoders' losses over a batch of windows.

    Each direction's decoder runs on the subset of windows that actually have
    that neighbor (dialogue starts lose the previous side, ends the next side).
    """
    if not windows:
        raise WindowTooShort("empty window batch")
    centers = np.asarray([w.center for w in windows])
    encoded = model.encode_rows(centers)
    total = None
    for offset in OFFSETS:
        present = [i for i, w in enumerate(windows) if offset in w.neighbors]
        if not present:
            continue
        targets = np.asarray([windows[i].neighbors[offset] for i in present])
        initial = ad.take_rows(encoded, np.asarray(present))
        direction = "prev" if offset < 0 else "next"
        loss = model.decoder_loss(direction, initial, targets)
        total = loss if total is None else ad.add(total, loss)
    return total


def skipthought_train_step(model: SkipThoughtModel, window: Window,
                           optimizer: Optimizer) -> float:
    """One optimization step on a single window; returns the loss value."""
    loss = window_loss(model, [window])
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step()
    return loss.item()


def train_skipthought(
    corpus: list[Dialogue],
    vocab: Vocabulary,
    config: SkipThoughtConfig | None = None,
    epochs: int = 3,
    batch_size: int = 32,
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> tuple[SkipThoughtModel, list[float]]:
    """Batched window training; returns the model and per-epoch mean losses."""
    config = config or SkipThoughtConfig(vocab_size=vocab.size)
    model = SkipThoughtModel(config, rng=Rng(seed))
    windows = make_windows(corpus, vocab, config.utterance_len)
    opt = Optimizer(model.parameters(), optimizer or OptimizerConfig(kind="adam", lr=0.003))
    rng = Rng(seed).fork("shuffle")
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        losses = []
        for start in range(0, len(order), batch_size):
            chosen = [windows[i] for i in order[start : start + batch_size]]
            loss = window_loss(model, chosen)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item() / len(chosen))
        history.append(float(np.mean(losses)))
        if log:
            log(f"skipthought epoch {epoch + 1}: loss/window {history[-1]:.3f}")
    return model, history


def save_skipthought(directory, model: SkipThoughtModel, vocab: Vocabulary,
                     center: np.ndarray | None = None) -> None:
    """Persist the embedder: params.npz + manifest.json + vocab.json."""
    import json
    from dataclasses import asdict
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = {p.name: p.data for p in model.parameters()}
    if center is not None:
        named["__center__"] = np.asarray(center)
    np.savez(directory / "params.npz", **named)
    manifest = {"format_version": 1, "config": asdict(model.config),
                "centered": center is not None}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    vocab.save(directory / "vocab.json")


def load_skipthought(directory) -> tuple[SkipThoughtModel, Vocabulary, np.ndarray | None]:
    import json
    from pathlib import Path

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    vocab = Vocabulary.load(directory / "vocab.json")
    model = SkipThoughtModel(SkipThoughtConfig(**manifest["config"]), rng=Rng(0))
    with np.load(directory / "params.npz") as payload:
        arrays = {name: payload[name] for name in payload.files}
    for p in model.parameters():
        p.data = arrays[p.name]
        p.zero_grad()
    center = arrays.get("__center__")
    return model, vocab, center


def fit_center(model: SkipThoughtModel, vocab: Vocabulary, corpus: list[Dialogue],
               max_texts: int = 2000) -> np.ndarray:
    """Mean embedding over the corpus's distinct utterance texts.

    Subtracting it spreads the encoder's otherwise narrow state cone so cosine
    thresholds (dedup, fuzzy matching) operate on a meaningful scale.
    """
    texts: list[str] = []
    seen: set[str] = set()
    for dialogue in corpus:
        for utt in dialogue.utterances:
            if utt.text not in seen:
                seen.add(utt.text)
                texts.append(utt.text)
            if len(texts) >= max_texts:
                break
        if len(texts) >= max_texts:
            break
    rows = np.asarray([encode_utterance_ids(t, vocab, model.config.utterance_len)
                       for t in texts])
    return model.encode_rows(rows).data.mean(axis=0)


def text_embedder(model: SkipThoughtModel, vocab: Vocabulary,
                  center: np.ndarray | None = None) -> Callable[[str], np.ndarray]:
    """text -> embedding closure for the curation pipeline, with memoization."""
    cache: dict[str, np.ndarray] = {}

    def embed(text: str) -> np.ndarray:
        if text not in cache:
            row = encode_utterance_ids(text, vocab, model.config.utterance_len)
            vector = model.embed(row)
            cache[text] = vector if center is None else vector - center
        return cache[text]

    return embed
