"""Suggestion service: cached embedding pipeline, threshold gate, usage log.

Requests carry the full conversation; utterance embeddings come from a
two-tier cache (tier 1: normalized text -> embedding, shared; tier 2:
normalized text -> token encoding, per-process LRU). Ranked canned responses
are filtered against the last three agent utterances, gated by a minimum
confidence, and the top three are returned. Every response is persisted to
the usage store before it is returned, and agent usage posts feed back in as
weak labels.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
import time
import uuid
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import AGENT, CUSTOMER, ContextTargetPair, Vocabulary, encode_utterance_ids, normalize_text
from .curation import (
    NEGATIVE,
    POSITIVE,
    SOURCE_USAGE,
    STRATEGY_REJECTED,
    CannedEmbeddings,
    CannedList,
    DuplicateResponse,
    WeakLabel,
    cosine_similarity,
)
from .evaluation import rank_canned
from .model import CheckpointBundle

DEFAULT_RECENT_AGENT_WINDOW = 3
DEFAULT_TOP_POOL = 10
MAX_SUGGESTIONS = 3


class MalformedRequest(ValueError):
    pass


class ModelUnavailable(RuntimeError):
    pass


class UnknownRequestId(KeyError):
    pass


class ObjectiveNotExtensible(RuntimeError):
    pass


@dataclass(frozen=True)
class RequestUtterance:
    speaker: str
    text: str


@dataclass
class SuggestionRequest:
    conversation_id: str
    utterances: list[RequestUtterance]

    @classmethod
    def from_dict(cls, payload: dict) -> "SuggestionRequest":
        utterances = [RequestUtterance(u.get("speaker", ""), u.get("text", ""))
                      for u in payload.get("utterances", [])]
        return cls(conversation_id=str(payload.get("conversation_id", "")), utterances=utterances)


@dataclass(frozen=True)
class Suggestion:
    canned_id: int
    text: str
    confidence: float


@dataclass
class SuggestionResponse:
    suggested: bool
    suggestions: list[Suggestion]
    request_id: str

    def to_dict(self) -> dict:
        return {
            "suggested": self.suggested,
            "suggestions": [
                {"canned_id": s.canned_id, "text": s.text, "confidence": s.confidence}
                for s in self.suggestions
            ],
            "request_id": self.request_id,
        }


class LruCache:
    """Thread-safe LRU map with hit/miss counters."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
            self.misses += 1
            return None

    def put(self, key, value) -> None:
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
            self._data[key] = value
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._data

    def stats(self) -> dict:
        with self._lock:
            total = self.hits + self.misses
            return {
                "size": len(self._data),
                "capacity": self.capacity,
                "hits": self.hits,
                "misses": self.misses,
                "hit_rate": self.hits / total if total else 0.0,
            }


@dataclass
class EmbeddingCache:
    """Tier 1: normalized text -> utterance embedding (shared across workers).
    Tier 2: normalized text -> token encoding (per-process, bounded LRU)."""

    tier1: LruCache
    tier2: LruCache

    @classmethod
    def with_capacities(cls, tier1_cap: int = 100_000, tier2_cap: int = 4096) -> "EmbeddingCache":
        return cls(tier1=LruCache(tier1_cap), tier2=LruCache(tier2_cap))

    def stats(self) -> dict:
        return {"tier1": self.tier1.stats(), "tier2": self.tier2.stats()}


def embed_with_cache(
    text: str,
    cache: EmbeddingCache,
    tokenize: Callable[[str], list[int]],
    embed: Callable[[list[int]], np.ndarray],
) -> np.ndarray:
    """Fetch or compute one utterance embedding through both cache tiers."""
    key = normalize_text(text)
    hit = cache.tier1.get(key)
    if hit is not None:
        return hit
    encoding = cache.tier2.get(key)
    if encoding is None:
        encoding = tuple(tokenize(key))
        cache.tier2.put(key, encoding)
    vector = embed(list(encoding))
    cache.tier1.put(key, vector)
    return vector


# ---------------------------------------------------------------------------
# Usage log
# ---------------------------------------------------------------------------

@dataclass
class UsageLogEntry:
    request_id: str
    conversation_id: str
    timestamp: float
    shown: list[tuple[int, float]]
    used_canned_id: int | None = None
    checkpoint_id: str | None = None

    def to_record(self) -> dict:
        return {
            "type": "usage",
            "request_id": self.request_id,
            "conversation_id": self.conversation_id,
            "timestamp": self.timestamp,
            "shown": [[int(c), float(s)] for c, s in self.shown],
            "used_canned_id": self.used_canned_id,
            "checkpoint_id": self.checkpoint_id,
        }


class UsageStore:
    """Append-only JSONL store with fsync; an interrupted append is ignored on load."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._shown: dict[str, dict] = {}
        self._usage: dict[str, dict] = {}
        self._by_conversation: dict[str, list[str]] = {}
        if self.path.exists():
            self._replay()

    def _replay(self) -> None:
        """Index every complete record; truncate a torn tail left by a crash."""
        good_end = 0
        with open(self.path, "rb") as handle:
            for raw in handle:
                if not raw.endswith(b"\n"):
                    break  # interrupted final write
                line = raw.decode().strip()
                if line:
                    try:
                        self._index(json.loads(line))
                    except json.JSONDecodeError:
                        break
                good_end += len(raw)
        if good_end < self.path.stat().st_size:
            with open(self.path, "r+b") as handle:
                handle.truncate(good_end)

    def _index(self, record: dict) -> None:
        rid = record["request_id"]
        if record.get("type") == "shown":
            self._shown[rid] = record
            self._by_conversation.setdefault(record["conversation_id"], []).append(rid)
        elif record.get("type") == "usage":
            self._usage[rid] = record

    def _append(self, record: dict) -> None:
        line = json.dumps(record)
        with self._lock:
            with open(self.path, "a") as handle:
                handle.write(line + "\n")
                handle.flush()
                os.fsync(handle.fileno())
            self._index(record)

    def record_shown(self, request_id: str, conversation_id: str,
                     shown: list[tuple[int, float]], context: list[dict],
                     checkpoint_id: str | None, suggested: bool) -> None:
        self._append({
            "type": "shown",
            "request_id": request_id,
            "conversation_id": conversation_id,
            "timestamp": time.time(),
            "shown": [[int(c), float(s)] for c, s in shown],
            "suggested": suggested,
            "context": context,
            "checkpoint_id": checkpoint_id,
        })

    def record_usage(self, entry: UsageLogEntry) -> None:
        if entry.request_id not in self._shown:
            raise UnknownRequestId(entry.request_id)
        shown_ids = {int(c) for c, _ in self._shown[entry.request_id]["shown"]}
        if entry.used_canned_id is not None and int(entry.used_canned_id) not in shown_ids:
            raise ValueError(
                f"used_canned_id {entry.used_canned_id} was not among the shown ids {sorted(shown_ids)}")
        self._append(entry.to_record())

    def shown_for(self, request_id: str) -> dict | None:
        return self._shown.get(request_id)

    def by_conversation(self, conversation_id: str) -> list[dict]:
        records = []
        for rid in self._by_conversation.get(conversation_id, []):
            record = dict(self._shown[rid])
            if rid in self._usage:
                record["usage"] = self._usage[rid]
            records.append(record)
        return records

    def export_weak_labels(self, vocab: Vocabulary, utterance_len: int,
                           max_context: int) -> list[WeakLabel]:
        """Usage entries become weak labels: used suggestions are positives,
        shown-but-unused ones become rejected-suggestion negatives."""
        labels: list[WeakLabel] = []
        for rid, usage in self._usage.items():
            shown = self._shown.get(rid)
            if shown is None:
                continue
            context_rows = [
                encode_utterance_ids(u["text"], vocab, utterance_len)
                for u in shown["context"][-max_context:]
            ]
            if not context_rows:
                continue
            used = usage.get("used_canned_id")
            for canned_id, _conf in shown["shown"]:
                canned_id = int(canned_id)
                pair = ContextTargetPair(
                    context=context_rows,
                    target=encode_utterance_ids("", vocab, utterance_len),
                    dialogue_id=shown["conversation_id"],
                    turn_index=-1,
                )
                if used is not None and canned_id == int(used):
                    labels.append(WeakLabel(pair=pair, canned_id=canned_id,
                                            polarity=POSITIVE, source=SOURCE_USAGE))
                else:
                    labels.append(WeakLabel(pair=pair, canned_id=canned_id,
                                            polarity=NEGATIVE,
                                            negative_strategy=STRATEGY_REJECTED))
        return labels


# ---------------------------------------------------------------------------
# The service
# ---------------------------------------------------------------------------

@dataclass
class ServingState:
    """Immutable snapshot swapped atomically on reload or extension."""

    bundle: CheckpointBundle
    canned: CannedList
    canned_embs: CannedEmbeddings


class SuggestionService:
    def __init__(
        self,
        bundle: CheckpointBundle,
        canned: CannedList,
        threshold: float,
        canned_embs: CannedEmbeddings | None = None,
        usage_store: UsageStore | None = None,
        cache: EmbeddingCache | None = None,
        caching_enabled: bool = True,
        recent_agent_window: int = DEFAULT_RECENT_AGENT_WINDOW,
        top_pool: int = DEFAULT_TOP_POOL,
        dedup_threshold: float | str = 0.9,  # or "auto": calibrate per canned list
    ):
        from .evaluation import embed_canned  # local import; evaluation pulls curation

        if canned_embs is None:
            canned_embs = embed_canned(bundle.model, canned, bundle.vocab,
                                       checkpoint_id=bundle.checkpoint_id)
        elif canned_embs.checkpoint_id and canned_embs.checkpoint_id != bundle.checkpoint_id:
            from .evaluation import ChecksumMismatch

            raise ChecksumMismatch(
                f"canned embeddings built by {canned_embs.checkpoint_id}, "
                f"model is {bundle.checkpoint_id}")
        self._state = ServingState(bundle=bundle, canned=canned, canned_embs=canned_embs)
        self._state_lock = threading.Lock()
        self.threshold = float(threshold)
        self.cache = cache or EmbeddingCache.with_capacities()
        self.caching_enabled = caching_enabled
        if usage_store is None:
            handle, path = tempfile.mkstemp(prefix="replykit-usage-", suffix=".jsonl")
            os.close(handle)
            usage_store = UsageStore(path)
        self.usage_store = usage_store
        self.recent_agent_window = recent_agent_window
        self.top_pool = top_pool
        self.dedup_threshold = dedup_threshold
        self.available = True
        self._embed_computations = 0
        self._count_lock = threading.Lock()
        self._latencies: deque[float] = deque(maxlen=2048)
        self._requests = 0
        self._suggested = 0

    # -- embedding plumbing ---------------------------------------------------
    @property
    def embed_computations(self) -> int:
        return self._embed_computations

    def _embed_utterance(self, state: ServingState, text: str) -> np.ndarray:
        bundle = state.bundle
        def tokenize(normalized: str) -> list[int]:
            return encode_utterance_ids(normalized, bundle.vocab,
                                        bundle.model.config.utterance_len)
        def embed(tokens: list[int]) -> np.ndarray:
            with self._count_lock:
                self._embed_computations += 1
            return bundle.model.encode_utterance(tokens)
        if self.caching_enabled:
            return embed_with_cache(text, self.cache, tokenize, embed)
        return embed(tokenize(normalize_text(text)))

    # -- request pipeline -----------------------------------------------------
    def suggest(self, request: SuggestionRequest) -> SuggestionResponse:
        started = time.perf_counter()
        if not self.available:
            raise ModelUnavailable("no model loaded")
        self._validate(request)
        state = self._state
        bundle = state.bundle

        embeddings = [self._embed_utterance(state, u.text) for u in request.utterances]
        context = embeddings[-bundle.model.config.max_context_utterances :]
        context_emb = bundle.model.encode_context(context)
        ranked = rank_canned(bundle.model, context_emb, state.canned_embs,
                             objective=bundle.objective, head=bundle.head,
                             model_checkpoint_id=bundle.checkpoint_id)

        recent_agent = self._recent_agent_texts(request)
        pool = ranked[: self.top_pool]
        filtered = [(cid, conf) for cid, conf in pool
                    if state.canned.by_id(cid).normalized not in recent_agent]
        suggested = bool(filtered) and filtered[0][1] >= self.threshold
        chosen = filtered[:MAX_SUGGESTIONS] if suggested else []
        response = SuggestionResponse(
            suggested=suggested,
            suggestions=[Suggestion(cid, state.canned.by_id(cid).text, conf)
                         for cid, conf in chosen],
            request_id=str(uuid.uuid4()),
        )
        self.usage_store.record_shown(
            response.request_id,
            request.conversation_id,
            [(s.canned_id, s.confidence) for s in response.suggestions],
            [{"speaker": u.speaker, "text": normalize_text(u.text)} for u in request.utterances],
            bundle.checkpoint_id,
            suggested,
        )
        with self._count_lock:
            self._requests += 1
            if suggested:
                self._suggested += 1
            self._latencies.append(time.perf_counter() - started)
        return response

    def _recent_agent_texts(self, request: SuggestionRequest) -> set[str]:
        texts = []
        for utt in reversed(request.utterances):
            if utt.speaker == AGENT:
                texts.append(normalize_text(utt.text))
                if len(texts) >= self.recent_agent_window:
                    break
        return set(texts)

    def _validate(self, request: SuggestionRequest) -> None:
        if not request.conversation_id:
            raise MalformedRequest("conversation_id is required")
        if not request.utterances:
            raise MalformedRequest("utterances must be non-empty")
        for utt in request.utterances:
            if utt.speaker not in (AGENT, CUSTOMER):
                raise MalformedRequest(f"unknown speaker {utt.speaker!r}")
            if not isinstance(utt.text, str):
                raise MalformedRequest("utterance text must be a string")

    # -- usage ------------------------------------------------------------------
    def log_usage(self, entry: UsageLogEntry) -> None:
        self.usage_store.record_usage(entry)

    # -- canned-list management --------------------------------------------------
    def extend_canned_list(self, text: str) -> Suggestion:
        """Hot-add a canned response without retraining; contrastive only."""
        with self._state_lock:
            state = self._state
            bundle = state.bundle
            if bundle.objective != "contrastive":
                raise ObjectiveNotExtensible(
                    f"objective {bundle.objective!r} requires retraining to extend the list")
            normalized = normalize_text(text)
            if not normalized:
                raise MalformedRequest("canned response text is empty")
            rows = encode_utterance_ids(normalized, bundle.vocab,
                                        bundle.model.config.utterance_len)
            vector = bundle.model.embed_target(rows)
            threshold = self._dedup_threshold(state)
            for response, existing in zip(state.canned, state.canned_embs.matrix):
                if response.normalized == normalized:
                    raise DuplicateResponse(f"identical to canned id {response.id}")
                if cosine_similarity(vector, existing) >= threshold:
                    raise DuplicateResponse(
                        f"too similar to canned id {response.id} "
                        f"({cosine_similarity(vector, existing):.3f})")
            new_list, added = state.canned.appended(text)
            new_embs = CannedEmbeddings(
                matrix=np.vstack([state.canned_embs.matrix, vector[None, :]]),
                canned_ids=state.canned_embs.canned_ids + [added.id],
                checkpoint_id=state.canned_embs.checkpoint_id,
            )
            self._state = ServingState(bundle=bundle, canned=new_list, canned_embs=new_embs)
        return Suggestion(added.id, added.text, 0.0)

    def _dedup_threshold(self, state: ServingState) -> float:
        """Duplicate gate; "auto" calibrates to the list's own similarity scale.

        A candidate more similar to an existing response than any two distinct
        canned responses are to each other (midpoint to 1.0) counts as a
        duplicate, which keeps the gate meaningful in anisotropic spaces.
        """
        if self.dedup_threshold != "auto":
            return float(self.dedup_threshold)
        matrix = state.canned_embs.matrix
        if len(matrix) < 2:
            return 0.999
        unit = matrix / np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), 1e-8)
        cosines = unit @ unit.T
        np.fill_diagonal(cosines, -1.0)
        return (float(cosines.max()) + 1.0) / 2.0

    @property
    def canned(self) -> CannedList:
        return self._state.canned

    @property
    def bundle(self) -> CheckpointBundle:
        return self._state.bundle

    # -- observability -----------------------------------------------------------
    def metrics(self) -> dict:
        with self._count_lock:
            latencies = sorted(self._latencies)
            requests = self._requests
            suggested = self._suggested
        def pct(p: float) -> float:
            if not latencies:
                return 0.0
            return latencies[min(len(latencies) - 1, int(p * len(latencies)))]
        return {
            "requests": requests,
            "suggestion_rate": suggested / requests if requests else 0.0,
            "latency_p50_ms": pct(0.50) * 1000,
            "latency_p95_ms": pct(0.95) * 1000,
            "latency_p99_ms": pct(0.99) * 1000,
            "embed_computations": self.embed_computations,
            "cache": self.cache.stats(),
            "threshold": self.threshold,
            "canned_size": len(self._state.canned),
            "checkpoint_id": self._state.bundle.checkpoint_id,
            "objective": self._state.bundle.objective,
        }
