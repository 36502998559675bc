"""Dialogue corpus model: normalization, turn regularization, vocabulary, training pairs.

All downstream stages (training, curation, serving) consume dialogues that went
through `normalize_text` and `regularize_turns`, so the invariants enforced here
(alternating agent/customer turns, digit masking, fixed-length token rows) are
load-bearing for the whole pipeline.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

AGENT = "agent"
CUSTOMER = "customer"
SPEAKERS = (AGENT, CUSTOMER)

EOS = "<eos>"
EMPTY = "<empty>"
UNK = "<unk>"

DEFAULT_GREETING = "hello thanks for reaching out"
DEFAULT_VOCAB_CAP = 5000
DEFAULT_UTTERANCE_LEN = 40
DEFAULT_MAX_CONTEXT = 20


class EmptyDialogue(ValueError):
    """Raised when a dialogue has no usable text after normalization."""


_DIGITS_RE = re.compile(r"\d")
_WS_RE = re.compile(r"\s+")


def normalize_text(raw: str) -> str:
    """Mask digits to '0', lowercase, and collapse whitespace."""
    text = _DIGITS_RE.sub("0", raw.lower())
    return _WS_RE.sub(" ", text).strip()


def word_tokens(text: str) -> list[str]:
    """Whitespace tokens of normalized text (no subwords)."""
    normalized = normalize_text(text)
    return normalized.split(" ") if normalized else []


@dataclass
class Utterance:
    speaker: str
    text: str
    tokens: list[int] | None = None
    # Ground-truth intent id on synthetic agent turns. Test oracle only; no
    # pipeline stage reads it.
    intent_id: int | None = None

    def __post_init__(self) -> None:
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker {self.speaker!r}")


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]

    def agent_turns(self) -> list[tuple[int, Utterance]]:
        return [(i, u) for i, u in enumerate(self.utterances) if u.speaker == AGENT]


def regularize_turns(dialogue: Dialogue, greeting: str = DEFAULT_GREETING) -> Dialogue:
    """Normalize texts, merge consecutive same-speaker turns, force ACAC... order.

    A dialogue that opens with the customer gets an agent greeting placeholder
    prepended. Raises EmptyDialogue when nothing survives normalization or the
    result is shorter than two turns.
    """
    merged: list[Utterance] = []
    for utt in dialogue.utterances:
        text = normalize_text(utt.text)
        if not text:
            continue
        if merged and merged[-1].speaker == utt.speaker:
            prev = merged[-1]
            prev.text = prev.text + " " + text
            if prev.intent_id is None:
                prev.intent_id = utt.intent_id
        else:
            merged.append(Utterance(utt.speaker, text, intent_id=utt.intent_id))
    if not merged:
        raise EmptyDialogue(f"dialogue {dialogue.id} empty after normalization")
    if merged[0].speaker == CUSTOMER:
        merged.insert(0, Utterance(AGENT, normalize_text(greeting)))
    if len(merged) < 2:
        raise EmptyDialogue(f"dialogue {dialogue.id} has a single turn after regularization")
    return Dialogue(dialogue.id, merged)


@dataclass(frozen=True)
class Vocabulary:
    """Frequency-capped word vocabulary with <eos>, <empty>, <unk> specials."""

    token_to_id: dict[str, int]
    eos_id: int
    empty_id: int
    unk_id: int

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def encode(self, text: str) -> list[int]:
        """Token ids of normalized text; unseen words map to <unk>. No padding."""
        return [self.token_to_id.get(tok, self.unk_id) for tok in word_tokens(text)]

    def to_json(self) -> str:
        return json.dumps({"tokens": _ordered_tokens(self.token_to_id)})

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        tokens = json.loads(payload)["tokens"]
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        mapping = {tok: i for i, tok in enumerate(tokens)}
        return cls(
            token_to_id=mapping,
            eos_id=mapping[EOS],
            empty_id=mapping[EMPTY],
            unk_id=mapping[UNK],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


def _ordered_tokens(token_to_id: dict[str, int]) -> list[str]:
    return [tok for tok, _ in sorted(token_to_id.items(), key=lambda kv: kv[1])]


def build_vocab(corpus: Iterable[Dialogue], cap: int = DEFAULT_VOCAB_CAP) -> Vocabulary:
    """Keep the cap-3 most frequent words (ties broken lexicographically) plus specials."""
    if cap < 3:
        raise ValueError("vocab cap must leave room for the 3 special tokens")
    counts: Counter[str] = Counter()
    for dialogue in corpus:
        for utt in dialogue.utterances:
            counts.update(word_tokens(utt.text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: cap - 3]]
    return Vocabulary.from_tokens([EMPTY, EOS, UNK] + kept)


def pad_and_truncate(tokens: list[int], vocab: Vocabulary, utterance_len: int) -> list[int]:
    """First utterance_len-1 tokens, then <eos>, then <empty> padding to length."""
    if utterance_len < 2:
        raise ValueError("utterance_len must be at least 2")
    content = tokens[: utterance_len - 1]
    row = content + [vocab.eos_id]
    row.extend([vocab.empty_id] * (utterance_len - len(row)))
    return row


def encode_utterance_ids(text: str, vocab: Vocabulary, utterance_len: int) -> list[int]:
    return pad_and_truncate(vocab.encode(text), vocab, utterance_len)


@dataclass
class ContextTargetPair:
    """One training unit: the padded context window and its agent target."""

    context: list[list[int]]
    target: list[int]
    dialogue_id: str
    turn_index: int
    intent_id: int | None = None

    def to_record(self) -> dict:
        record = {
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "context": self.context,
            "target": self.target,
        }
        if self.intent_id is not None:
            record["intent_id"] = self.intent_id
        return record

    @classmethod
    def from_record(cls, record: dict) -> "ContextTargetPair":
        return cls(
            context=[list(map(int, row)) for row in record["context"]],
            target=list(map(int, record["target"])),
            dialogue_id=record["dialogue_id"],
            turn_index=int(record["turn_index"]),
            intent_id=record.get("intent_id"),
        )


def make_pairs(
    dialogue: Dialogue,
    vocab: Vocabulary,
    max_context_utterances: int = DEFAULT_MAX_CONTEXT,
    utterance_len: int = DEFAULT_UTTERANCE_LEN,
) -> list[ContextTargetPair]:
    """Sliding-window pairs: one per agent turn with at least one preceding turn.

    The context keeps only the most recent max_context_utterances turns.
    Expects a regularized dialogue.
    """
    encoded = [encode_utterance_ids(u.text, vocab, utterance_len) for u in dialogue.utterances]
    pairs = []
    for index, utt in enumerate(dialogue.utterances):
        if utt.speaker != AGENT or index == 0:
            continue
        context = encoded[max(0, index - max_context_utterances) : index]
        pairs.append(
            ContextTargetPair(
                context=context,
                target=encoded[index],
                dialogue_id=dialogue.id,
                turn_index=index,
                intent_id=utt.intent_id,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Line-delimited file formats
# ---------------------------------------------------------------------------

def dialogue_to_record(dialogue: Dialogue) -> dict:
    utterances = []
    for utt in dialogue.utterances:
        entry: dict = {"speaker": utt.speaker, "text": utt.text}
        if utt.intent_id is not None:
            entry["intent_id"] = utt.intent_id
        utterances.append(entry)
    return {"id": dialogue.id, "utterances": utterances}


def dialogue_from_record(record: dict) -> Dialogue:
    utterances = [
        Utterance(u["speaker"], u["text"], intent_id=u.get("intent_id"))
        for u in record["utterances"]
    ]
    return Dialogue(record["id"], utterances)


def save_corpus(corpus: Iterable[Dialogue], path: str | Path) -> None:
    with open(path, "w") as handle:
        for dialogue in corpus:
            handle.write(json.dumps(dialogue_to_record(dialogue)) + "\n")


def load_corpus(path: str | Path) -> list[Dialogue]:
    return [dialogue_from_record(json.loads(line)) for line in _lines(path)]


def save_pairs(pairs: Iterable[ContextTargetPair], path: str | Path) -> None:
    with open(path, "w") as handle:
        for pair in pairs:
            handle.write(json.dumps(pair.to_record()) + "\n")


def load_pairs(path: str | Path) -> list[ContextTargetPair]:
    return [ContextTargetPair.from_record(json.loads(line)) for line in _lines(path)]


def _lines(path: str | Path) -> Iterator[str]:
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield line


def corpus_stats(corpus: list[Dialogue]) -> dict:
    """High-level corpus statistics: counts and mean words per utterance kind."""
    n_utterances = 0
    words_total = 0
    agent_words: list[int] = []
    customer_words: list[int] = []
    for dialogue in corpus:
        for utt in dialogue.utterances:
            n = len(word_tokens(utt.text))
            n_utterances += 1
            words_total += n
            (agent_words if utt.speaker == AGENT else customer_words).append(n)
    n_dialogues = len(corpus)
    return {
        "n_dialogues": n_dialogues,
        "n_utterances": n_utterances,
        "avg_words_per_dialogue": words_total / n_dialogues if n_dialogues else 0.0,
        "avg_words_per_agent_utterance": _mean(agent_words),
        "avg_words_per_customer_utterance": _mean(customer_words),
    }


def format_stats(stats: dict) -> str:
    rows = [
        ("# dialogues", f"{stats['n_dialogues']}"),
        ("# utterances (in total)", f"{stats['n_utterances']}"),
        ("Avg. # words per dialogue", f"{stats['avg_words_per_dialogue']:.1f}"),
        ("Avg. # words per agent utterance", f"{stats['avg_words_per_agent_utterance']:.1f}"),
        ("Avg. # words per customer utterance", f"{stats['avg_words_per_customer_utterance']:.1f}"),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {value}" for label, value in rows)


def _mean(values: list[int]) -> float:
    return sum(values) / len(values) if values else 0.0
