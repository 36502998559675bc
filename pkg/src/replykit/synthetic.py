"""Synthetic support-chat corpus generator for desk-scale experiments.

Every agent utterance is derived from a numbered intent template, and the
intent id rides along as hidden ground truth so tests can score retrieval,
clustering, and weak labels against a known answer key. Intent 0 is the
greeting, intent 1 the wrap-up, and intents >= 2 are topical resolutions whose
topic phrases share words across intents (so a held-out intent stays
expressible in terms the model saw during training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import AGENT, CUSTOMER, Dialogue, Utterance

GREETING_INTENT = 0
CLOSE_INTENT = 1
FIRST_TOPICAL_INTENT = 2


class InvalidSpec(ValueError):
    """Raised when a SyntheticSpec cannot produce a corpus."""


@dataclass(frozen=True)
class SyntheticSpec:
    n_intents: int
    n_dialogues: int
    templates_per_intent: int = 1
    noise_rate: float = 0.0
    paraphrase_rate: float = 0.0
    extra_round_rate: float = 0.5
    close_rate: float = 0.6  # chance the dialogue ends with a thanks/wrap-up exchange
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n_intents < 3:
            raise InvalidSpec("need at least 3 intents (greeting, wrap-up, one topic)")
        if self.n_dialogues < 1:
            raise InvalidSpec("n_dialogues must be positive")
        if self.templates_per_intent < 1:
            raise InvalidSpec("templates_per_intent must be positive")
        for name in ("noise_rate", "paraphrase_rate", "extra_round_rate", "close_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidSpec(f"{name} must be in [0, 1]")


_TOPIC_WORDS = [
    "mobile", "internet", "billing", "router", "sim", "email", "data",
    "account", "phone", "plan", "modem", "roaming", "voicemail", "broadband",
    "payment", "order", "address", "password", "speed", "contract", "invoice",
    "device", "signal", "upgrade", "wifi", "balance", "handset", "coverage",
    "recharge", "bundle", "hotspot", "landline", "streaming", "showtime",
    "gateway", "antenna", "mailbox", "receipt", "warranty", "firmware",
]

_GREETING_TEMPLATES = [
    "hi there thanks for contacting support how can i help you today",
    "hello welcome to support what can i do for you today",
    "good day you have reached support how may i assist you",
]

_CLOSE_TEMPLATES = [
    "glad i could help have a great day",
    "happy to help enjoy the rest of your day",
    "you are welcome take care and goodbye",
]

# 5 x 4 co-prime banks: every topical intent below 22 gets a unique
# prefix/suffix combination while every word stays shared across intents.
_RESOLUTION_PREFIXES = [
    "i have checked",
    "i have reset",
    "i have updated",
    "our team will review",
    "you can manage",
]

_RESOLUTION_SUFFIXES = [
    "and fixed the issue from our side",
    "please give it a moment and try again",
    "so it takes effect right away",
    "from the account page whenever you like",
]

_PROBLEM_PATTERNS = [
    "hi my {t} is not working properly",
    "i have a problem with my {t}",
    "my {t} keeps failing can you help",
    "something is wrong with my {t} since this morning",
]

_THANKS_LINES = [
    "thanks that fixed it",
    "ok great thank you so much",
    "perfect that worked thanks",
    "awesome all good now thanks",
]

_FILLER_WORDS = ["um", "please", "hello", "really", "just", "actually", "again", "sorry"]

_PARAPHRASE_PREFIXES = ["sure", "no worries", "of course", "alright"]
_PARAPHRASE_SUFFIXES = ["is there anything else", "let me know if you need more help"]


def topic_phrase(intent_id: int) -> str:
    """Two-word topic for a topical intent; adjacent intents share a word."""
    offset = intent_id - FIRST_TOPICAL_INTENT
    first = _TOPIC_WORDS[offset % len(_TOPIC_WORDS)]
    second = _TOPIC_WORDS[(offset + 1) % len(_TOPIC_WORDS)]
    return f"{first} {second}"


def synthetic_templates(spec: SyntheticSpec) -> list[list[str]]:
    """Agent templates per intent id; index 0 greeting, 1 wrap-up, rest topical."""
    spec.validate()
    templates: list[list[str]] = []
    for intent in range(spec.n_intents):
        if intent == GREETING_INTENT:
            bank = _GREETING_TEMPLATES
            templates.append([bank[j % len(bank)] for j in range(spec.templates_per_intent)])
        elif intent == CLOSE_INTENT:
            bank = _CLOSE_TEMPLATES
            templates.append([bank[j % len(bank)] for j in range(spec.templates_per_intent)])
        else:
            phrase = topic_phrase(intent)
            rows = []
            for j in range(spec.templates_per_intent):
                offset = intent - FIRST_TOPICAL_INTENT + j
                prefix = _RESOLUTION_PREFIXES[offset % len(_RESOLUTION_PREFIXES)]
                suffix = _RESOLUTION_SUFFIXES[offset % len(_RESOLUTION_SUFFIXES)]
                rows.append(f"{prefix} your {phrase} {suffix}")
            templates.append(rows)
    return templates


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[Dialogue]:
    """Deterministic corpus of regularized (agent-first, alternating) dialogues."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    templates = synthetic_templates(spec)
    topical = list(range(FIRST_TOPICAL_INTENT, spec.n_intents))
    dialogues = []
    for index in range(spec.n_dialogues):
        dialogues.append(_build_dialogue(f"synth-{index:05d}", spec, templates, topical, rng))
    return dialogues


def _build_dialogue(
    dialogue_id: str,
    spec: SyntheticSpec,
    templates: list[list[str]],
    topical: list[int],
    rng: np.random.Generator,
) -> Dialogue:
    utterances = [
        Utterance(AGENT, _pick(rng, templates[GREETING_INTENT]), intent_id=GREETING_INTENT)
    ]
    n_rounds = 1 + (1 if rng.random() < spec.extra_round_rate else 0)
    for _ in range(n_rounds):
        intent = int(rng.choice(topical))
        problem = _pick(rng, _PROBLEM_PATTERNS).format(t=topic_phrase(intent))
        utterances.append(Utterance(CUSTOMER, _add_noise(problem, spec.noise_rate, rng)))
        utterances.append(
            Utterance(AGENT, _agent_text(_pick(rng, templates[intent]), spec, rng), intent_id=intent)
        )
    if rng.random() < spec.close_rate:
        thanks = _pick(rng, _THANKS_LINES)
        utterances.append(Utterance(CUSTOMER, _add_noise(thanks, spec.noise_rate, rng)))
        utterances.append(
            Utterance(AGENT, _agent_text(_pick(rng, templates[CLOSE_INTENT]), spec, rng),
                      intent_id=CLOSE_INTENT)
        )
    return Dialogue(dialogue_id, utterances)


def _pick(rng: np.random.Generator, options: list[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _agent_text(template: str, spec: SyntheticSpec, rng: np.random.Generator) -> str:
    if spec.paraphrase_rate > 0 and rng.random() < spec.paraphrase_rate:
        if rng.random() < 0.5:
            return _pick(rng, _PARAPHRASE_PREFIXES) + " " + template
        return template + " " + _pick(rng, _PARAPHRASE_SUFFIXES)
    return template


def _add_noise(text: str, noise_rate: float, rng: np.random.Generator) -> str:
    if noise_rate <= 0:
        return text
    words = text.split(" ")
    noisy: list[str] = []
    for word in words:
        if rng.random() < noise_rate:
            noisy.append(_pick(rng, _FILLER_WORDS))
        noisy.append(word)
    if rng.random() < noise_rate:
        noisy.append(_pick(rng, _FILLER_WORDS))
    return " ".join(noisy)
