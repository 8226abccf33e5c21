"""Instruction likelihoods given the team's optimal plan.

The generative story for an instruction, given the plan for a goal:

1. roll out the plan at zero temperature,
2. keep the assistant's salient steps (handovers and unlocks),
3. speak with probability ``p_communicate`` if there is anything salient
   to say (``1 - p_communicate`` otherwise), and if speaking, draw the
   words from a language model prompted with the serialized salient steps.

Two scorers implement the last step: an offline template scorer (pure,
deterministic) and an HTTP client for an external language model (see
:mod:`teamgoals.lm_client`).
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Sequence

from .gridworld import Action, Agent, GridMap

SALIENT_VERBS = ("handover", "unlock")
BACKENDS = ("template", "external-lm")


@dataclass(frozen=True)
class SalientAction:
    verb: str
    actor: Agent
    args: tuple[str, ...]
    colors: tuple[tuple[str, str], ...]

    def predicate(self) -> str:
        if self.verb == "handover":
            return f"(handover {self.actor.value} {self.actor.other.value} {self.args[0]})"
        return f"(unlockr {self.actor.value} {self.args[0]} {self.args[1]})"


@dataclass(frozen=True)
class UtteranceObservation:
    communicated: bool
    text: str | None = None

    def __post_init__(self):
        if self.text is not None and not self.communicated:
            raise ValueError("an observed utterance implies communicated=True")

    @classmethod
    def from_text(cls, text: str | None) -> UtteranceObservation:
        return cls(True, text) if text else cls(False, None)


def load_default_examples() -> tuple[tuple[str, str], ...]:
    raw = resources.files("teamgoals").joinpath("data/fewshot.json").read_text(encoding="utf-8")
    return tuple((r["input"], r["output"]) for r in json.loads(raw)["examples"])


@dataclass(frozen=True)
class UtteranceModelConfig:
    p_communicate: float = 0.95
    examples: tuple[tuple[str, str], ...] = field(default_factory=load_default_examples)
    backend: str = "template"

    def __post_init__(self):
        if not 0 < self.p_communicate < 1:
            raise ValueError(f"p_communicate must lie in (0, 1), got {self.p_communicate}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.backend == "external-lm" and not self.examples:
            raise ValueError("the external language model needs few-shot examples")


# ------------------------------------------------------------------ salient steps


def extract_salient(plan: Sequence[tuple[Agent, Action]], gridmap: GridMap) -> list[SalientAction]:
    salient = []
    for agent, action in plan:
        if agent is not Agent.ASSISTANT or action.verb not in SALIENT_VERBS:
            continue
        if action.verb == "handover":
            colored = action.args[0]
        else:
            # the key's color is implied by the door it opens
            colored = action.args[1]
        salient.append(SalientAction(action.verb, agent, action.args, ((colored, gridmap.color(colored)),)))
    return salient


def serialize_salient(salient: Sequence[SalientAction]) -> str:
    if not salient:
        return ""
    colors: dict[str, str] = {}
    for s in salient:
        for item, color in s.colors:
            colors.setdefault(item, color)
    body = " ".join(s.predicate() for s in salient)
    where = " ".join(f"(iscolor {item} {color})" for item, color in colors.items())
    return f"{body} where {where}" if where else body


_PREDICATE = re.compile(r"\((handover|unlockr) (\S+) (\S+) (\S+)\)")
_ISCOLOR = re.compile(r"\(iscolor (\S+) (\S+)\)")


def parse_serialized(text: str) -> list[tuple[str, dict[str, str]]]:
    """Split a serialized salient list into ``(kind, {item: color})`` steps.

    ``kind`` is ``"handover"`` or ``"unlock"``; the item map holds the colored
    item the step refers to (the key for a handover, the door for an unlock).
    """
    body, _, where = text.partition(" where ")
    colors = dict(_ISCOLOR.findall(where))
    steps = []
    for verb, a, b, c in _PREDICATE.findall(body):
        if verb == "handover":
            steps.append(("handover", {c: colors.get(c)}))
        else:
            steps.append(("unlock", {c: colors.get(c)}))
    return steps


# --------------------------------------------------------------- template scorer

COLOR_WORDS = ("red", "blue", "yellow", "green", "purple", "orange", "pink", "white", "black")
HANDOVER_VERBS = ("pass", "hand", "give", "bring", "get", "fetch")
UNLOCK_VERBS = ("unlock", "open")
NOUNS = ("key", "door")
VOCABULARY = COLOR_WORDS + HANDOVER_VERBS + UNLOCK_VERBS + NOUNS
SMOOTHING = 0.1

_PLURALS = {"keys": "key", "doors": "door"}
_WORD = re.compile(r"[a-z]+")
_NOUN_FOR = {"handover": "key", "unlock": "door"}


def content_words(text: str) -> list[str]:
    """Lowercased vocabulary words of ``text`` in order; everything else is ignored."""
    words = (_PLURALS.get(w, w) for w in _WORD.findall(text.lower()))
    return [w for w in words if w in VOCABULARY]


def _phrases(kind: str, colors: list[str]) -> list[str]:
    noun = _NOUN_FOR[kind]
    if kind == "handover":
        heads = [f"{v} me the" for v in HANDOVER_VERBS]
    else:
        heads = [f"{v} the" for v in UNLOCK_VERBS]
    if len(colors) == 1:
        return [f"{head} {colors[0]} {noun}" for head in heads]
    joint = " and the ".join(colors)
    separate = " and the ".join(f"{c} {noun}" for c in colors)
    return [f"{head} {joint} {noun}" for head in heads] + [
        f"{head} {separate}" for head in heads
    ]


def templates(serialized: str) -> list[str]:
    """Canonical request phrasings for a serialized salient list.

    Steps are grouped by kind in order of first appearance; each group is
    phrased with every verb synonym, and mixed plans join one phrase per
    group with "and then".
    """
    steps = parse_serialized(serialized)
    if not steps:
        return [""]
    groups: dict[str, list[str]] = {}
    for kind, items in steps:
        bucket = groups.setdefault(kind, [])
        for color in items.values():
            if color is not None and color not in bucket:
                bucket.append(color)
    options = [_phrases(kind, colors) for kind, colors in groups.items()]
    return [" and then ".join(parts) for parts in itertools.product(*options)]


def _template_log_likelihood(words: list[str], template: str) -> float:
    bag = content_words(template)
    total = len(bag) + SMOOTHING * len(VOCABULARY)
    return math.fsum(math.log((bag.count(w) + SMOOTHING) / total) for w in words)


def score_with_template_backend(u: str, serialized: str) -> float:
    """Smoothed bag-of-content-words log-likelihood of ``u`` under its best-matching template.

    Each template defines an add-0.1 smoothed unigram distribution over the
    closed content vocabulary, so the score is a proper log-probability of
    the content-word sequence. Function words contribute a factor that does
    not depend on the plan.
    """
    words = content_words(u)
    return max(_template_log_likelihood(words, t) for t in templates(serialized))


# ----------------------------------------------------------------- the full model


Scorer = Callable[[str, str], float]


def communicate_log_prob(communicated: bool, k: int, p_communicate: float) -> float:
    p = p_communicate if k > 0 else 1 - p_communicate
    return math.log(p if communicated else 1 - p)


def utterance_likelihood(
    obs: UtteranceObservation,
    salient: Sequence[SalientAction],
    cfg: UtteranceModelConfig,
    scorer: Scorer | None = None,
) -> float:
    """``log P(u, c | salient steps)``.

    ``scorer`` maps ``(u, serialized)`` to ``log P(u | serialized)``; the
    template scorer is used when none is given and the config selects it.
    """
    logp = communicate_log_prob(obs.communicated, len(salient), cfg.p_communicate)
    if not obs.communicated or obs.text is None:
        return logp
    if scorer is None:
        if cfg.backend != "template":
            raise ValueError("an external-lm config needs an explicit scorer")
        scorer = score_with_template_backend
    return logp + scorer(obs.text, serialize_salient(salient))
