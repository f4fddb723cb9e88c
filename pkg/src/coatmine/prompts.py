"""The four-turn CoaT dialogue: description, thought, decision, grounding."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .actions import Action, format_action


class Stage(str, Enum):
    DESCRIPTION = "description"
    THOUGHT = "thought"
    DECISION = "decision"
    GROUNDING = "grounding"

    @property
    def depth(self) -> int:
        return STAGES.index(self)


STAGES = (Stage.DESCRIPTION, Stage.THOUGHT, Stage.DECISION, Stage.GROUNDING)


class TemplateError(KeyError):
    def __init__(self, field_name: str, stage=None):
        self.field = field_name
        where = f" for stage {stage.value}" if stage is not None else ""
        super().__init__(f"missing template value {field_name!r}{where}")

    def __str__(self) -> str:
        return self.args[0]


DESCRIPTION_PROMPT = (
    "Based on the mobile screenshot: {screenshot}, identify and describe the key elements visible on "
    "the screen, including any text, buttons, icons, input fields, or other interactive components."
)

THOUGHT_PROMPT = (
    "Given the task: {instruction}, and considering the contextual details from the image alongside the "
    "full history of previous actions: {action_history}, determine the most logical and effective next "
    "step. Focus on providing a clear, actionable, and goal-oriented response to advance the task."
)

DECISION_PROMPT = (
    "Task: Determine the Most Appropriate Next Step. Based on the previous analysis and the objective, "
    "determine the most appropriate next step to achieve the goal. Choose from the following options:\n"
    "- **click**: Select a button or specific UI element by specifying it clearly (e.g., 'click xxx', "
    "where 'xxx' is the button name or identifier).\n"
    "- **scroll**: Perform a scrolling action if the required element is not visible, specifying the "
    "direction (e.g., 'scroll up', 'scroll down').\n"
    "- **type**: Input specific text into a field or search bar, specifying the text clearly "
    '(e.g., type "content").\n'
    "- **press**: Interact with device-level buttons such as Home, Back, or Enter, specifying the button "
    '(e.g., "press Back").\n'
    "- **stop**: Conclude the task, indicating that the objective has been achieved. Provide the chosen "
    "action in the specified format and ensure it aligns with the analysis and the visible UI elements."
)

GROUNDING_PROMPT = (
    "As discussed earlier, your task now is to identify the precise screen region coordinates to tap for "
    "the action {coat_action}. The coordinates must be integers and strictly within the range of 0 to 1000 "
    "for both axes. Please provide your response in the required format: "
    "<|box_start|>(top_x, top_y),(bottom_x, bottom_y)<|box_end|>. Ensure your output adheres to these "
    "constraints and remains concise."
)

TEMPLATES = {
    Stage.DESCRIPTION: DESCRIPTION_PROMPT,
    Stage.THOUGHT: THOUGHT_PROMPT,
    Stage.DECISION: DECISION_PROMPT,
    Stage.GROUNDING: GROUNDING_PROMPT,
}


@dataclass(frozen=True)
class DialogueTurn:
    role: str
    content: str
    attachments: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"role": self.role, "content": self.content}
        if self.attachments is not None:
            d["image"] = self.attachments
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueTurn":
        return cls(d["role"], d["content"], d.get("image"))


@dataclass(frozen=True)
class StepContext:
    task_id: str
    index: int
    instruction: Optional[str]
    screenshot_ref: Optional[str]
    history: tuple[Action, ...] = ()
    # visible to the simulated backend only
    golden: Optional[Action] = field(default=None, compare=False)

    @property
    def step_ref(self) -> tuple[str, int]:
        return self.task_id, self.index


def format_history(history: Sequence[Action]) -> str:
    return "[" + ", ".join(format_action(a) for a in history) + "]"


def _fill(stage: Stage, ctx: StepContext, ancestors: Sequence[str]) -> str:
    if stage is Stage.DESCRIPTION:
        if not ctx.screenshot_ref:
            raise TemplateError("screenshot", stage)
        return DESCRIPTION_PROMPT.format(screenshot=ctx.screenshot_ref)
    if stage is Stage.THOUGHT:
        if ctx.instruction is None:
            raise TemplateError("instruction", stage)
        if ctx.history is None:
            raise TemplateError("action_history", stage)
        return THOUGHT_PROMPT.format(instruction=ctx.instruction, action_history=format_history(ctx.history))
    if stage is Stage.DECISION:
        return DECISION_PROMPT
    if len(ancestors) < 3 or ancestors[2] is None:
        raise TemplateError("coat_action", stage)
    return GROUNDING_PROMPT.format(coat_action=ancestors[2])


def render_prompt(stage: Stage, ctx: StepContext, ancestors: Sequence[str] = ()) -> list[DialogueTurn]:
    """Dialogue up to and including the user prompt for ``stage``.

    ``ancestors`` holds the accepted assistant texts of the earlier stages; they
    are interleaved with the earlier prompts as alternating user/assistant turns.
    """
    stage = Stage(stage)
    depth = stage.depth
    if len(ancestors) < depth:
        raise TemplateError(f"{STAGES[len(ancestors)].value} text", stage)
    turns = []
    for i in range(depth + 1):
        st = STAGES[i]
        turns.append(DialogueTurn("user", _fill(st, ctx, ancestors), ctx.screenshot_ref if i == 0 else None))
        if i < depth:
            turns.append(DialogueTurn("assistant", ancestors[i]))
    return turns


def render_prompt_only(stage: Stage, ctx: StepContext, coat_action: Optional[str] = None) -> list[DialogueTurn]:
    """User prompts for stages up to ``stage`` with no sampled assistant text in between."""
    stage = Stage(stage)
    turns = []
    for i in range(stage.depth + 1):
        text = _fill(STAGES[i], ctx, ("", "", coat_action))
        turns.append(DialogueTurn("user", text, ctx.screenshot_ref if i == 0 else None))
    return turns


def turns_digest(turns: Sequence[DialogueTurn]) -> str:
    payload = json.dumps([t.to_dict() for t in turns], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
