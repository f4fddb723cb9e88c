"""Step-level trajectory datasets and evolved Q&A records.

Canonical format is JSONL, one task per line::

    {"task_id": "t1", "instruction": "open settings",
     "steps": [{"index": 0, "screenshot": "shots/t1_0.png",
                "golden_action": {"kind": "CLICK", "box": [10, 20, 300, 90]},
                "ui_positions": [["Settings", 10, 20, 300, 90]],
                "ui_text": ["Settings"], "screen_desc": "home screen"}]}

The ``step-jsonl`` converter format takes one flat record per step with pixel
coordinates and the screenshot size, and normalises them to 0-1000.
"""
from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .actions import (
    COORD_MAX,
    Action,
    ActionError,
    ActionKind,
    action_from_dict,
    action_to_dict,
    box_problems,
)


class DatasetError(ValueError):
    pass


class TrajectoryParseError(DatasetError):
    def __init__(self, message: str, task_id: Optional[str], line: int):
        self.task_id = task_id
        self.line = line
        super().__init__(f"line {line} (task {task_id!r}): {message}")


class TrajectoryValidationError(DatasetError):
    def __init__(self, message: str, task_id: Optional[str], line: int):
        self.task_id = task_id
        self.line = line
        super().__init__(f"line {line} (task {task_id!r}): {message}")


UIPosition = tuple[str, int, int, int, int]


@dataclass(frozen=True)
class TrajectoryStep:
    index: int
    screenshot_ref: str
    golden_action: Action
    ui_positions: Optional[tuple[UIPosition, ...]] = None
    ui_text: Optional[tuple[str, ...]] = None
    screen_desc: Optional[str] = None


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    instruction: str
    steps: tuple[TrajectoryStep, ...]
    completed: bool = False

    def __len__(self) -> int:
        return len(self.steps)


StepRef = tuple[str, int]


def action_history(traj: Trajectory, upto: int) -> list[Action]:
    """Golden actions of steps ``[0, upto)``."""
    if not 0 <= upto <= len(traj.steps):
        raise IndexError(f"upto={upto} outside [0, {len(traj.steps)}] for task {traj.task_id!r}")
    return [s.golden_action for s in traj.steps[:upto]]


def iter_steps(trajs: Iterable[Trajectory]) -> Iterator[tuple[Trajectory, TrajectoryStep]]:
    for t in trajs:
        for s in t.steps:
            yield t, s


# ------------------------------------------------------------------ parsing

def _parse_step(raw: dict, task_id: str, line: int) -> TrajectoryStep:
    if not isinstance(raw, dict):
        raise TrajectoryParseError(f"step must be an object, got {type(raw).__name__}", task_id, line)
    if "index" not in raw:
        raise TrajectoryParseError("step without 'index'", task_id, line)
    index = raw["index"]
    if not isinstance(index, int) or index < 0:
        raise TrajectoryValidationError(f"step index must be a non-negative integer, got {index!r}", task_id, line)
    shot = raw.get("screenshot") or raw.get("screenshot_ref")
    if not shot:
        raise TrajectoryValidationError(f"step {index} has an empty screenshot reference", task_id, line)
    gold = raw.get("golden_action")
    if gold is None:
        raise TrajectoryValidationError(f"step {index} is missing its golden action", task_id, line)
    try:
        action = action_from_dict(gold).validate()
    except ActionError as e:
        raise TrajectoryValidationError(f"step {index} golden action: {e}", task_id, line) from None

    positions = None
    if raw.get("ui_positions") is not None:
        parsed = []
        for entry in raw["ui_positions"]:
            if not isinstance(entry, (list, tuple)) or len(entry) != 5:
                raise TrajectoryParseError(f"ui_positions entry {entry!r} is not [label, x1, y1, x2, y2]", task_id, line)
            label, *box = entry
            try:
                box = [int(v) for v in box]
            except (TypeError, ValueError):
                raise TrajectoryParseError(f"ui_positions entry {entry!r} has non-integer coordinates", task_id, line) from None
            problems = box_problems(box)
            if problems:
                raise TrajectoryValidationError(f"step {index} ui_positions {label!r}: {problems[0]}", task_id, line)
            parsed.append((str(label), *box))
        positions = tuple(parsed)
    ui_text = tuple(str(t) for t in raw["ui_text"]) if raw.get("ui_text") is not None else None
    return TrajectoryStep(index, str(shot), action, positions, ui_text, raw.get("screen_desc"))


def trajectory_from_dict(rec: dict, line: int = 0) -> Trajectory:
    if not isinstance(rec, dict):
        raise TrajectoryParseError("record is not a JSON object", None, line)
    task_id = rec.get("task_id")
    if task_id is None:
        raise TrajectoryParseError("record without 'task_id'", None, line)
    task_id = str(task_id)
    if not isinstance(rec.get("instruction"), str):
        raise TrajectoryParseError("record without a string 'instruction'", task_id, line)
    raw_steps = rec.get("steps")
    if not isinstance(raw_steps, list):
        raise TrajectoryParseError("record without a 'steps' list", task_id, line)
    if not raw_steps:
        raise TrajectoryValidationError("trajectory has no steps", task_id, line)
    steps = sorted((_parse_step(s, task_id, line) for s in raw_steps), key=lambda s: s.index)
    indices = [s.index for s in steps]
    if indices != list(range(len(steps))):
        raise TrajectoryValidationError(f"step indices {indices} are not contiguous from 0", task_id, line)
    completed = bool(rec.get("completed", False))
    if completed and steps[-1].golden_action.kind is not ActionKind.STOP:
        raise TrajectoryValidationError("completed task must end with STOP", task_id, line)
    return Trajectory(task_id, rec["instruction"], tuple(steps), completed)


def trajectory_to_dict(t: Trajectory) -> dict:
    steps = []
    for s in t.steps:
        d = {"index": s.index, "screenshot": s.screenshot_ref, "golden_action": action_to_dict(s.golden_action)}
        if s.ui_positions is not None:
            d["ui_positions"] = [list(p) for p in s.ui_positions]
        if s.ui_text is not None:
            d["ui_text"] = list(s.ui_text)
        if s.screen_desc is not None:
            d["screen_desc"] = s.screen_desc
        steps.append(d)
    out = {"task_id": t.task_id, "instruction": t.instruction, "steps": steps}
    if t.completed:
        out["completed"] = True
    return out


_TASK_ID = re.compile(r'"task_id"\s*:\s*"?([^",}]*)')


def _read_records(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                m = _TASK_ID.search(line)
                raise TrajectoryParseError(f"invalid JSON: {e.msg}", m.group(1) if m else None, lineno) from None


def load_trajectories(path, format: str = "jsonl") -> list[Trajectory]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "jsonl":
        return [trajectory_from_dict(rec, lineno) for lineno, rec in _read_records(path)]
    if format == "step-jsonl":
        return _load_step_records(path)
    raise ValueError(f"unknown trajectory format {format!r}")


def dump_trajectories(trajs: Iterable[Trajectory], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps(trajectory_to_dict(t), ensure_ascii=False) + "\n")
            n += 1
    return n


# --------------------------------------------------------- step-jsonl converter

def _scale(v: float, size: float) -> int:
    return max(0, min(COORD_MAX, round(v * COORD_MAX / size)))


def _convert_step(rec: dict, lineno: int) -> tuple[str, dict]:
    """Map one flat pixel-space record onto a canonical step object.

    Expected keys: episode_id, step_id, instruction, image_path, image_width,
    image_height, action_type (click/type/scroll/press/stop) plus one of touch
    [x, y], bbox [x1, y1, x2, y2], type_text, direction, button (pixel units).
    """
    task_id = str(rec.get("episode_id", ""))
    try:
        w, h = float(rec["image_width"]), float(rec["image_height"])
        kind = str(rec["action_type"]).upper()
    except (KeyError, TypeError, ValueError) as e:
        raise TrajectoryParseError(f"converter record missing {e}", task_id, lineno) from None
    gold: dict = {"kind": kind}
    if kind == "CLICK":
        if rec.get("bbox") is not None:
            x1, y1, x2, y2 = rec["bbox"]
            gold["box"] = [_scale(x1, w), _scale(y1, h), _scale(x2, w), _scale(y2, h)]
        elif rec.get("touch") is not None:
            x, y = rec["touch"]
            gold["point"] = [_scale(x, w), _scale(y, h)]
    elif kind == "TYPE":
        gold["text"] = rec.get("type_text")
    elif kind == "SCROLL":
        gold["direction"] = rec.get("direction")
    elif kind == "PRESS":
        gold["button"] = rec.get("button")
    step = {"index": rec.get("step_id"), "screenshot": rec.get("image_path"), "golden_action": gold}
    if rec.get("ui_elements") is not None:
        step["ui_positions"] = [
            [e["label"], _scale(e["bbox"][0], w), _scale(e["bbox"][1], h), _scale(e["bbox"][2], w), _scale(e["bbox"][3], h)]
            for e in rec["ui_elements"]
        ]
        step["ui_text"] = [e.get("text", e["label"]) for e in rec["ui_elements"]]
    if rec.get("screen_desc") is not None:
        step["screen_desc"] = rec["screen_desc"]
    return task_id, step


def _load_step_records(path: Path) -> list[Trajectory]:
    grouped: dict[str, dict] = {}
    first_line: dict[str, int] = {}
    steps = defaultdict(list)
    for lineno, rec in _read_records(path):
        task_id, step = _convert_step(rec, lineno)
        if task_id not in grouped:
            grouped[task_id] = {"task_id": task_id, "instruction": rec.get("instruction"), "steps": steps[task_id]}
            first_line[task_id] = lineno
        steps[task_id].append(step)
    return [trajectory_from_dict(rec, first_line[tid]) for tid, rec in grouped.items()]


# ----------------------------------------------------------------- evolved QA

class EvolutionLevel(str, Enum):
    I = "I"
    II = "II"
    III = "III"


@dataclass(frozen=True)
class EvolvedQA:
    level: EvolutionLevel
    question: str
    answer: str
    source_step: StepRef = field(default=("", 0))

    def to_dict(self) -> dict:
        return {
            "level": self.level.value,
            "question": self.question,
            "answer": self.answer,
            "task_id": self.source_step[0],
            "index": self.source_step[1],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvolvedQA":
        return cls(EvolutionLevel(d["level"]), d["question"], d["answer"], (str(d["task_id"]), int(d["index"])))


def load_evolved_qa(path) -> list[EvolvedQA]:
    out = []
    for lineno, rec in _read_records(Path(path)):
        try:
            out.append(EvolvedQA.from_dict(rec))
        except (KeyError, ValueError, TypeError) as e:
            raise TrajectoryParseError(f"bad evolved QA record: {e}", rec.get("task_id"), lineno) from None
    return out


def dump_evolved_qa(records: Iterable[EvolvedQA], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n
