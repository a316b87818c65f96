"""Three-step prompting chain: reason, target, attributes.

The chain turns a free-form user query about an image into a short target
name and a description of the target's visual attributes. The token
embeddings behind those two pieces of text are what prompts the segmenter.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import GenerationResult, MllmBackend, slice_embeddings
from .errors import (
    BackendError,
    ChainError,
    CotSegError,
    InvalidInputError,
    ParseError,
    TemplateRenderError,
)

logger = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\[([A-Z][A-Z ]*[A-Z])\]")


class PromptStep(str, Enum):
    REASON = "reason"
    TARGET = "target"
    ATTRIBUTE = "attribute"
    MERGED = "merged_target_attribute"


class ChainMode(str, Enum):
    MERGED = "merged"
    SEPARATE = "separate"


def placeholders(text: str) -> set[str]:
    return set(_PLACEHOLDER_RE.findall(text))


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    step: PromptStep

    def render(self, **fields: str) -> str:
        names = placeholders(self.body)
        values = {n: fields.get(n.lower().replace(" ", "_")) for n in names}
        missing = sorted(n for n, v in values.items() if v is None)
        if missing:
            raise TemplateRenderError(f"{self.template_id}: unfilled placeholders {missing}")
        # single pass so substituted text is never rescanned for placeholders
        return _PLACEHOLDER_RE.sub(lambda m: values.get(m.group(1), m.group(0)), self.body)


_GUIDE_TARGET = (
    "Please analyze the conversation and identify the distinct physical objects or areas "
    "that the user wants from the image."
)
_GUIDE_ATTRIBUTE = (
    "Briefly describe the target entity or part's visual attributes that can discriminate them "
    "from the image. Each visual attribute can be color, shape, and relative position to other "
    "objects in the image."
)

DEFAULT_TEMPLATES: dict[PromptStep, PromptTemplate] = {
    PromptStep.REASON: PromptTemplate(
        "reason", "What is the object or part that is [USER QUERY] in this image?", PromptStep.REASON
    ),
    PromptStep.TARGET: PromptTemplate(
        "target",
        f"Here is the conversation:\nThe question is: [QUESTION]\nThe answer is: [ANSWER]\n{_GUIDE_TARGET}",
        PromptStep.TARGET,
    ),
    PromptStep.ATTRIBUTE: PromptTemplate(
        "attribute", f"Here is the target:\nThe target is: [TARGET]\n{_GUIDE_ATTRIBUTE}", PromptStep.ATTRIBUTE
    ),
    PromptStep.MERGED: PromptTemplate(
        "merged_target_attribute",
        "Here is the conversation:\nThe question is: [QUESTION]\nThe answer is: [ANSWER]\n"
        f"Follow these guidelines strictly:\n(1) {_GUIDE_TARGET}\n(2) {_GUIDE_ATTRIBUTE}",
        PromptStep.MERGED,
    ),
}


def load_templates(path) -> dict[PromptStep, PromptTemplate]:
    """Read a template file.

    Each template starts with a header line ``=== <step> ===``; the body runs
    until the next header. Steps missing from the file keep their defaults.
    """
    templates = dict(DEFAULT_TEMPLATES)
    current, lines = None, []

    def flush():
        if current is not None:
            step = PromptStep(current)
            templates[step] = PromptTemplate(current, "\n".join(lines).strip("\n"), step)

    for line in Path(path).read_text().splitlines():
        m = re.fullmatch(r"===\s*(\w+)\s*===\s*", line)
        if m:
            flush()
            current, lines = m.group(1), []
        elif current is not None:
            lines.append(line)
    flush()
    return templates


def dump_templates(path, templates=DEFAULT_TEMPLATES) -> None:
    chunks = [f"=== {step.value} ===\n{t.body}\n" for step, t in templates.items()]
    Path(path).write_text("\n".join(chunks))


_INTERROGATIVES = ("what", "which", "where", "who", "how")


def is_question(query: str) -> bool:
    q = query.strip()
    if q.endswith("?"):
        return True
    first = q.split(maxsplit=1)[0].lower().strip(",'\"") if q else ""
    return first in _INTERROGATIVES or any(first.startswith(w + "'") for w in _INTERROGATIVES)


def build_reason_prompt(query: str, query_is_question: bool | None = None, templates=DEFAULT_TEMPLATES) -> str:
    if not query or not query.strip():
        raise InvalidInputError("empty user query")
    if query_is_question is None:
        query_is_question = is_question(query)
    if query_is_question:
        return query
    return templates[PromptStep.REASON].render(user_query=query)


def _require(**fields: str | None) -> None:
    for name, value in fields.items():
        if value is None or not str(value).strip():
            raise InvalidInputError(f"missing {name}")


def build_merged_target_attribute_prompt(question: str, answer: str, templates=DEFAULT_TEMPLATES) -> str:
    _require(question=question, answer=answer)
    return templates[PromptStep.MERGED].render(question=question, answer=answer)


def build_separate_prompts(
    question: str, answer: str, target: str | None = None, templates=DEFAULT_TEMPLATES
) -> tuple[str, str | None]:
    """Return ``(target_prompt, attribute_prompt)``; the second is None until
    a target is known."""
    _require(question=question, answer=answer)
    target_prompt = templates[PromptStep.TARGET].render(question=question, answer=answer)
    attribute_prompt = None
    if target is not None:
        _require(target=target)
        attribute_prompt = templates[PromptStep.ATTRIBUTE].render(target=target)
    return target_prompt, attribute_prompt


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_LEAD_FRAMES = (
    re.compile(r"^(?:so,?\s+)?the\s+user\s+(?:wants|is\s+asking\s+for|is\s+looking\s+for|refers\s+to)\s+", re.I),
    re.compile(r"^(?:the\s+)?target\s+(?:is|entity\s+is)\s*:?\s*", re.I),
    re.compile(r"^target\s*:\s*", re.I),
)
_TRAIL_FRAMES = re.compile(r"\s+(?:from|in|of)\s+(?:the|this)\s+(?:image|picture|photo|scene)$", re.I)
_LEAD_STOP = {"it", "is", "this", "that", "there", "are", "was", "these", "those", "here", "i", "think", "answer", "the answer"}
_SPLIT_TARGETS = re.compile(r"\s*(?:,|;|\band\b|\bor\b|\bas\s+well\s+as\b)\s*", re.I)


def first_sentence(text: str) -> str:
    return _SENTENCE_END.split(text.strip(), maxsplit=1)[0]


def parse_targets(response: str) -> list[str]:
    """All target phrases named in a target-step response, first one first."""
    if response is None or not response.strip():
        raise ParseError("empty target response", raw=response or "")
    sent = first_sentence(response).strip()
    framed = False
    for pat in _LEAD_FRAMES:
        new = pat.sub("", sent, count=1)
        if new != sent:
            sent, framed = new, True
            break
    if not framed:
        words = sent.split()
        while words and words[0].lower().strip(",:.!?") in _LEAD_STOP:
            words.pop(0)
        sent = " ".join(words)
    sent = sent.strip().rstrip(".!?:;,").strip()
    sent = _TRAIL_FRAMES.sub("", sent).strip()
    parts = [p.strip(" .,:;\"'").lower() for p in _SPLIT_TARGETS.split(sent)]
    parts = [p for p in parts if p]
    if not parts:
        raise ParseError("no extractable target", raw=response)
    return parts


def parse_target(response: str) -> str:
    targets = parse_targets(response)
    if len(targets) > 1:
        logger.info("target response names %d entities; keeping %r, dropping %r", len(targets), targets[0], targets[1:])
    return targets[0]


@dataclass
class Turn:
    task_prompt: str
    user_query: str = ""
    answer: str | None = None

    @property
    def message(self) -> str:
        """The user-side text for this turn: prompt and query joined."""
        if "[USER QUERY]" in self.task_prompt:
            return self.task_prompt.replace("[USER QUERY]", self.user_query)
        if self.task_prompt and self.user_query:
            return f"{self.task_prompt}\n{self.user_query}"
        return self.task_prompt or self.user_query

    def render(self) -> str:
        if self.answer is None:
            return f"USER: {self.message}\nASSISTANT:"
        return f"USER: {self.message}\nASSISTANT: {self.answer}\n"


@dataclass
class ConversationState:
    """Append-only multi-turn conversation bound to one image."""

    image_ref: object = None
    turns: list[Turn] = field(default_factory=list)

    def ask(self, task_prompt: str, user_query: str = "") -> Turn:
        if self.turns and self.turns[-1].answer is None:
            raise CotSegError("previous turn has no answer yet")
        turn = Turn(task_prompt, user_query)
        self.turns.append(turn)
        return turn

    def answer(self, text: str) -> None:
        if not self.turns or self.turns[-1].answer is not None:
            raise CotSegError("no pending turn to answer")
        self.turns[-1].answer = text

    def render(self) -> str:
        return "".join(t.render() for t in self.turns)


@dataclass
class CoTTrace:
    user_query: str
    reason_prompt: str = ""
    reason_answer: str = ""
    target: str = ""
    attributes: str = ""
    target_token_span: tuple[int, int] = (0, 0)
    attribute_token_spans: list[tuple[int, int]] = field(default_factory=list)
    merged_steps_2_3: bool = True
    step_responses: list[str] = field(default_factory=list)
    extra_targets: list[str] = field(default_factory=list)
    simulated_step1: bool = False
    timing_ms: list[float] = field(default_factory=list)
    completed: bool = False
    reason_result: GenerationResult | None = field(default=None, repr=False, compare=False)
    chain_result: GenerationResult | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "user_query": self.user_query,
            "reason_prompt": self.reason_prompt,
            "reason_answer": self.reason_answer,
            "target": self.target,
            "attributes": self.attributes,
            "target_token_span": list(self.target_token_span),
            "attribute_token_spans": [list(s) for s in self.attribute_token_spans],
            "merged_steps_2_3": self.merged_steps_2_3,
            "step_responses": list(self.step_responses),
            "extra_targets": list(self.extra_targets),
            "simulated_step1": self.simulated_step1,
            "timing_ms": list(self.timing_ms),
            "completed": self.completed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: dict) -> "CoTTrace":
        payload = dict(payload)
        payload["target_token_span"] = tuple(payload["target_token_span"])
        payload["attribute_token_spans"] = [tuple(s) for s in payload["attribute_token_spans"]]
        return cls(**payload)

    def prompt_embeddings(self, arm: str = "full") -> np.ndarray:
        """Raw token embeddings prompting the segmenter.

        ``arm`` selects the prompt-step ablation: ``"reason"`` uses the whole
        step-one answer, ``"name"`` only the target tokens, ``"full"`` the
        target plus attribute tokens.
        """
        if arm == "reason":
            if self.reason_result is None:
                raise CotSegError("trace has no step-one generation result")
            return np.array(self.reason_result.embeddings)
        if self.chain_result is None:
            raise CotSegError("trace has no target/attribute generation result")
        spans = [self.target_token_span]
        if arm == "full":
            spans += list(self.attribute_token_spans)
        elif arm != "name":
            raise ValueError(f"unknown prompt arm {arm!r}")
        return slice_embeddings(self.chain_result, spans)


def append_trace_log(path, trace: CoTTrace) -> None:
    with Path(path).open("a") as fh:
        fh.write(trace.dumps() + "\n")


def read_trace_log(path) -> list[CoTTrace]:
    return [CoTTrace.from_json(json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]


@dataclass(frozen=True)
class ChainConfig:
    max_tokens: int = 512
    retries: int = 1
    attribute_segmentation: str = "whole"

    def __post_init__(self):
        if self.attribute_segmentation not in ("whole", "sentence"):
            raise ValueError("attribute_segmentation must be 'whole' or 'sentence'")


def _char_to_token_span(result: GenerationResult, start: int, end: int) -> tuple[int, int] | None:
    idx = [i for i, (_, s, e) in enumerate(result.tokens) if s >= start and e <= end]
    if not idx:
        return None
    return idx[0], idx[-1] + 1


def _locate(result: GenerationResult, needle: str, lo: int = 0, hi: int | None = None) -> tuple[int, int] | None:
    hi = len(result.text) if hi is None else hi
    pos = result.text.lower().find(needle.lower(), lo, hi)
    if pos < 0:
        return None
    return _char_to_token_span(result, pos, pos + len(needle))


def resolve_spans(
    result: GenerationResult,
    target: str,
    target_region: tuple[int, int],
    attribute_region: tuple[int, int],
    segmentation: str = "whole",
) -> tuple[tuple[int, int], list[tuple[int, int]]]:
    """Token spans of the target phrase and the attribute text.

    Regions are character ranges of ``result.text``. The target is found by
    exact (case-insensitive) match inside its region, falling back to every
    token in the region; attributes cover their whole region or one span per
    sentence.
    """
    t_span = _locate(result, target, *target_region) or _char_to_token_span(result, *target_region) or (0, 0)
    a0, a1 = attribute_region
    attr_text = result.text[a0:a1]
    spans: list[tuple[int, int]] = []
    if segmentation == "sentence":
        cursor = a0
        for sent in _SENTENCE_END.split(attr_text):
            if not sent:
                continue
            pos = result.text.find(sent, cursor, a1)
            sp = _char_to_token_span(result, pos, pos + len(sent)) if pos >= 0 else None
            if sp:
                spans.append(sp)
                cursor = pos + len(sent)
    if not spans:
        whole = _char_to_token_span(result, a0, a1)
        if whole:
            spans = [whole]
    spans = [s for s in spans if s[1] <= t_span[0] or s[0] >= t_span[1]]
    return t_span, spans


def _generate(backend, image, state: ConversationState, config: ChainConfig, step: int, trace: CoTTrace) -> GenerationResult:
    history = state.render()
    for attempt in range(config.retries + 1):
        try:
            return backend.generate(image, history, config.max_tokens)
        except BackendError as exc:
            if attempt == config.retries:
                raise ChainError(f"backend failed at step {step}: {exc}", step, trace) from exc
            logger.warning("step %d: retrying after backend error: %s", step, exc)
        except CotSegError as exc:
            raise ChainError(f"step {step}: {exc}", step, trace) from exc
    raise AssertionError("unreachable")


def run_chain(
    image,
    query: str,
    backend: MllmBackend,
    mode: ChainMode | str = ChainMode.MERGED,
    *,
    templates=DEFAULT_TEMPLATES,
    config: ChainConfig = ChainConfig(),
    query_is_question: bool | None = None,
    simulated_step1: tuple[str, str] | None = None,
) -> CoTTrace:
    """Run the chain for one (image, query) pair.

    ``simulated_step1`` supplies a ready-made (question, answer) exchange for
    datasets without reasoning queries; step one is then not sent to the
    backend.
    """
    mode = ChainMode(mode)
    trace = CoTTrace(user_query=query, merged_steps_2_3=mode is ChainMode.MERGED)
    state = ConversationState(image_ref=image)

    if simulated_step1 is not None:
        question, answer = simulated_step1
        _require(question=question, answer=answer)
        state.ask(question)
        state.answer(answer)
        trace.simulated_step1 = True
        trace.reason_result = None
    else:
        question = build_reason_prompt(query, query_is_question, templates)
        if question == query:
            state.ask("", query)
        else:
            state.ask(templates[PromptStep.REASON].body, query)
        res = _generate(backend, image, state, config, 1, trace)
        answer = res.text
        state.answer(answer)
        trace.reason_result = res
        trace.timing_ms.append(res.latency_ms)
    trace.reason_prompt = question
    trace.reason_answer = answer
    trace.step_responses.append(answer)

    try:
        if mode is ChainMode.MERGED:
            state.ask(build_merged_target_attribute_prompt(question, answer, templates))
            res = _generate(backend, image, state, config, 2, trace)
            state.answer(res.text)
            trace.step_responses.append(res.text)
            trace.timing_ms.append(res.latency_ms)
            targets = parse_targets(res.text)
            trace.target, trace.extra_targets = targets[0], targets[1:]
            first = first_sentence(res.text)
            first_end = res.text.find(first) + len(first)
            rest = res.text[first_end:].strip()
            attr_start = res.text.find(rest, first_end) if rest else 0
            trace.attributes = rest or res.text
            attr_region = (attr_start, len(res.text))
            combined = res
            target_region = (0, first_end)
        else:
            target_prompt, _ = build_separate_prompts(question, answer, None, templates)
            state.ask(target_prompt)
            res2 = _generate(backend, image, state, config, 2, trace)
            state.answer(res2.text)
            trace.step_responses.append(res2.text)
            trace.timing_ms.append(res2.latency_ms)
            targets = parse_targets(res2.text)
            trace.target, trace.extra_targets = targets[0], targets[1:]
            _, attribute_prompt = build_separate_prompts(question, answer, trace.target, templates)
            state.ask(attribute_prompt)
            res3 = _generate(backend, image, state, config, 3, trace)
            state.answer(res3.text)
            trace.step_responses.append(res3.text)
            trace.timing_ms.append(res3.latency_ms)
            if not res3.text.strip():
                raise ChainError("empty attribute response", 3, trace)
            trace.attributes = res3.text
            combined = GenerationResult.concat([res2, res3])
            target_region = (0, len(res2.text))
            attr_region = (len(res2.text) + 1, len(combined.text))
    except ParseError as exc:
        raise ChainError(f"could not parse target: {exc} (raw={exc.raw!r})", 2, trace) from exc

    if trace.extra_targets:
        logger.info("query %r: keeping target %r, dropping %r", query, trace.target, trace.extra_targets)
    t_span, a_spans = resolve_spans(combined, trace.target, target_region, attr_region, config.attribute_segmentation)
    trace.target_token_span = t_span
    trace.attribute_token_spans = a_spans
    trace.chain_result = combined
    trace.completed = True
    return trace
