"""Instruction-evolution prompts, tolerant Q&A parsing and the token filter.

Level I asks for a page description, level II for Q&A grounded in the UI
element list, and level III for the same Q&A conditioned additionally on the
CoaT screen description.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from .prompts import TemplateError
from .trajectories import EvolutionLevel, EvolvedQA, StepRef

PAGE_DESCRIPTION_PROMPT = (
    "I will provide you with a mobile page. Please describe the current page. Your description should "
    "include the content of the page and its general functionality. Please note that the descriptions you "
    "generate should be of moderate length. Your page description should match the actual image."
)

ACTION_THOUGHT_PROMPT = (
    "**QUERY**: {task},\n"
    "**ACTION HISTORY**: To proceed with the query, your past actions include: {action_history},\n"
    "**NEXT ACTION**: This is the next action you need to take: {coat_action},\n"
    "**TASK**: Given the screen and the above information, you have three tasks to do. First, you have to "
    "analyze what you have done. Second, you should analyze the screen for relevant details that might "
    "pertain to the given query. This includes checking for specific applications, icons, or buttons that "
    "are visible and any information or results that are currently displayed on the screen.\n"
    "Tip: If the screen does not have the information you need, you can scroll left or scroll up to try to "
    "get the information.  Don't answer this logic question by saying that because the provided "
    "**NEXT ACTION** is..., therefore, the next action is... You need to think carefully on your own.\n"
    "You must answer the question with suitable lengths and the following format: 'Think: I have done..., "
    "Current screen is..., I need to... So the next action is ...' Your final action should be the same as "
    "the NEXT ACTION above."
)

QA_PROMPT = (
    "Your goal is to draw inspiration from the given images and image description information to create "
    "multiple new questions and answers. This new creation is closely related to the given image and "
    "information, but the answers involved should be directly derived from the given information, because "
    "UI positions and UI text are one-to-one correspondence.\n"
    "Specifically, you should construct the following three types of questions and answers, a total of 15: "
    "1. the function of some elements in the image. 2. Grounding questions and answers (the coordinates and "
    "approximate location of the target in the image). 3. Partial detailed information questions and answers "
    "(the structural relationship between multiple elements, type, style, etc.).\n"
    "Please try to keep your questions and answers diverse and informative, and ignore the message in the "
    "device status bar.\n"
    "Here is the information related to the image:\n"
    "UI positions: {ui_positions},\n"
    "UI text: {ui_text},\n"
    "coat screen desc: {screen_desc},\n"
    "Please provide the following information in JSON format with the key questions and answers, and Don't "
    "add annotation parsing:"
)

DEFAULT_FORBIDDEN = ("Since the next action", "annotation", "**NEXT ACTION**")


@dataclass(frozen=True)
class EvolutionRequest:
    level: EvolutionLevel
    step_ref: StepRef = ("", 0)
    ui_positions: Optional[Sequence] = None
    ui_text: Optional[Sequence[str]] = None
    screen_desc: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "level", EvolutionLevel(self.level))

    @classmethod
    def from_step(cls, level, task_id: str, step) -> "EvolutionRequest":
        return cls(level, (task_id, step.index), step.ui_positions, step.ui_text, step.screen_desc)


def _fmt_positions(positions) -> str:
    # entries are (label, x1, y1, x2, y2)
    return json.dumps([list(p) for p in positions], ensure_ascii=False)


def render_evolution_prompt(req: EvolutionRequest) -> str:
    if req.level is EvolutionLevel.I:
        return PAGE_DESCRIPTION_PROMPT
    if req.ui_positions is None:
        raise TemplateError("ui_positions")
    if req.ui_text is None:
        raise TemplateError("ui_text")
    if req.level is EvolutionLevel.III and not req.screen_desc:
        raise TemplateError("screen_desc")
    return QA_PROMPT.format(
        ui_positions=_fmt_positions(req.ui_positions),
        ui_text=json.dumps(list(req.ui_text), ensure_ascii=False),
        screen_desc=req.screen_desc or "",
    )


def render_action_thought_prompt(task: str, action_history: str, coat_action: str) -> str:
    return ACTION_THOUGHT_PROMPT.format(task=task, action_history=action_history, coat_action=coat_action)


# ----------------------------------------------------------------- parsing

_FENCE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.S)


def _json_candidates(raw: str):
    for m in _FENCE.finditer(raw):
        yield m.group(1)
    yield raw
    dec = json.JSONDecoder()
    for i, ch in enumerate(raw):
        if ch in "[{":
            try:
                obj, _ = dec.raw_decode(raw, i)
            except ValueError:
                continue
            yield obj


def _key(d: dict, *names) -> Optional[str]:
    for k in d:
        if isinstance(k, str) and k.strip().lower() in names:
            return k
    return None


def _pairs_from(obj: Any) -> Optional[list[tuple[str, str]]]:
    if isinstance(obj, list):
        out = []
        for item in obj:
            if not isinstance(item, dict):
                return None
            qk, ak = _key(item, "question", "q"), _key(item, "answer", "a")
            if qk is None or ak is None:
                return None
            out.append((str(item[qk]), str(item[ak])))
        return out
    if isinstance(obj, dict):
        qk, ak = _key(obj, "questions", "question"), _key(obj, "answers", "answer")
        if qk and ak and isinstance(obj[qk], list) and isinstance(obj[ak], list):
            return [(str(q), str(a)) for q, a in zip(obj[qk], obj[ak])]
        if qk and ak and isinstance(obj[qk], str) and isinstance(obj[ak], str):
            return [(obj[qk], obj[ak])]
        for v in obj.values():
            found = _pairs_from(v)
            if found:
                return found
    return None


def parse_qa_with_diagnostics(raw: str, level=EvolutionLevel.III,
                              source_step: StepRef = ("", 0)) -> tuple[list[EvolvedQA], list[dict]]:
    level = EvolutionLevel(level)
    diags: list[dict] = []
    for cand in _json_candidates(raw or ""):
        obj = cand
        if isinstance(cand, str):
            try:
                obj = json.loads(cand)
            except ValueError:
                continue
        pairs = _pairs_from(obj)
        if pairs is not None:
            if isinstance(obj, dict):
                qk, ak = _key(obj, "questions", "question"), _key(obj, "answers", "answer")
                if qk and ak and isinstance(obj[qk], list) and isinstance(obj[ak], list) \
                        and len(obj[qk]) != len(obj[ak]):
                    diags.append({"issue": "length_mismatch", "questions": len(obj[qk]), "answers": len(obj[ak])})
            return [EvolvedQA(level, q, a, source_step) for q, a in pairs], diags
    diags.append({"issue": "no_json", "step_ref": list(source_step), "excerpt": (raw or "")[:120]})
    return [], diags


def parse_qa(raw: str, level=EvolutionLevel.III, source_step: StepRef = ("", 0)) -> list[EvolvedQA]:
    return parse_qa_with_diagnostics(raw, level, source_step)[0]


# ---------------------------------------------------------------- filtering

@dataclass(frozen=True)
class FilterRule:
    forbidden_substrings: tuple[str, ...] = DEFAULT_FORBIDDEN
    min_answer_tokens: int = 3
    case_sensitive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "forbidden_substrings", tuple(self.forbidden_substrings))
        if self.min_answer_tokens < 0:
            raise ValueError("min_answer_tokens must be non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FilterRule":
        return cls(**(d or {}))

    def rejects(self, qa: EvolvedQA) -> Optional[str]:
        answer = qa.answer if self.case_sensitive else qa.answer.lower()
        for s in self.forbidden_substrings:
            if (s if self.case_sensitive else s.lower()) in answer:
                return f"forbidden:{s}"
        if len(qa.answer.split()) < self.min_answer_tokens:
            return "too_short"
        return None


def filter_qa(records: Sequence[EvolvedQA], rule: FilterRule = FilterRule()) -> tuple[list, list]:
    kept, rejected = [], []
    for r in records:
        (rejected if rule.rejects(r) else kept).append(r)
    return kept, rejected
