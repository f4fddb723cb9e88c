"""Mobile action algebra and the text grammar used by the decision and grounding turns.

Five action kinds share one 0-1000 integer coordinate space:

    CLICK  point (x, y) or box (top_x, top_y, bottom_x, bottom_y); a decision-turn
           click carries only a ``target`` description until grounding resolves it
    TYPE   text payload
    SCROLL direction in {up, down, left, right}
    PRESS  button in {Back, Home, Enter}
    STOP   no payload
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

COORD_MAX = 1000
BOX_START = "<|box_start|>"
BOX_END = "<|box_end|>"

DIRECTIONS = ("up", "down", "left", "right")
BUTTONS = ("Back", "Home", "Enter")


class ActionKind(str, Enum):
    CLICK = "CLICK"
    TYPE = "TYPE"
    SCROLL = "SCROLL"
    PRESS = "PRESS"
    STOP = "STOP"

    def __str__(self) -> str:
        return self.value


# Table-1 column order
KIND_ORDER = (ActionKind.SCROLL, ActionKind.CLICK, ActionKind.TYPE, ActionKind.PRESS, ActionKind.STOP)


class ActionError(ValueError):
    pass


Point = tuple[int, int]
Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    point: Optional[Point] = None
    box: Optional[Box] = None
    text: Optional[str] = None
    direction: Optional[str] = None
    button: Optional[str] = None
    # element named by a decision-turn click; the reward never compares it
    target: Optional[str] = None

    @classmethod
    def click(cls, x: int, y: int) -> "Action":
        return cls(ActionKind.CLICK, point=(x, y))

    @classmethod
    def click_box(cls, x1: int, y1: int, x2: int, y2: int) -> "Action":
        return cls(ActionKind.CLICK, box=(x1, y1, x2, y2))

    @classmethod
    def type_text(cls, text: str) -> "Action":
        return cls(ActionKind.TYPE, text=text)

    @classmethod
    def scroll(cls, direction: str) -> "Action":
        return cls(ActionKind.SCROLL, direction=direction)

    @classmethod
    def press(cls, button: str) -> "Action":
        return cls(ActionKind.PRESS, button=button)

    @classmethod
    def stop(cls) -> "Action":
        return cls(ActionKind.STOP)

    @property
    def is_grounded(self) -> bool:
        """True unless this is a CLICK still lacking coordinates."""
        return self.kind is not ActionKind.CLICK or self.point is not None or self.box is not None

    def resolved_point(self) -> Optional[Point]:
        if self.point is not None:
            return self.point
        if self.box is not None:
            return box_center(self.box)
        return None

    def problems(self) -> list[str]:
        """List every invariant violation; empty for a valid grounded action."""
        out = []
        k = self.kind
        if k is ActionKind.CLICK:
            if self.point is None and self.box is None:
                out.append("CLICK needs a point or a box")
            if self.point is not None and self.box is not None:
                out.append("CLICK has both point and box")
        elif self.point is not None or self.box is not None:
            out.append(f"{k} carries coordinates")
        if (k is ActionKind.TYPE) != (self.text is not None):
            out.append("text is required for TYPE only")
        if (k is ActionKind.SCROLL) != (self.direction is not None):
            out.append("direction is required for SCROLL only")
        if (k is ActionKind.PRESS) != (self.button is not None):
            out.append("button is required for PRESS only")
        if self.direction is not None and self.direction not in DIRECTIONS:
            out.append(f"unknown direction {self.direction!r}")
        if self.button is not None and self.button not in BUTTONS:
            out.append(f"unknown button {self.button!r}")
        if self.point is not None and not all(0 <= v <= COORD_MAX for v in self.point):
            out.append(f"point {self.point} outside 0-{COORD_MAX}")
        if self.box is not None:
            out.extend(box_problems(self.box))
        return out

    def validate(self) -> "Action":
        problems = self.problems()
        if problems:
            raise ActionError("; ".join(problems))
        return self


def box_problems(box) -> list[str]:
    x1, y1, x2, y2 = box
    if not (0 <= x1 <= x2 <= COORD_MAX and 0 <= y1 <= y2 <= COORD_MAX):
        return [f"box {tuple(box)} violates 0 <= top <= bottom <= {COORD_MAX}"]
    return []


def box_center(box) -> Point:
    """Integer midpoint, rounding half toward zero on each axis."""
    x1, y1, x2, y2 = box
    return _half(x1 + x2), _half(y1 + y2)


def _half(s: int) -> int:
    return s // 2 if s >= 0 else -(-s // 2)


def point_in_box(point, box) -> bool:
    x, y = point
    x1, y1, x2, y2 = box
    return x1 <= x <= x2 and y1 <= y <= y2


@dataclass(frozen=True)
class ParseOutcome:
    action: Optional[Action]
    format_ok: bool
    raw: str


# ---------------------------------------------------------------- formatting

def format_box(box) -> str:
    x1, y1, x2, y2 = box
    return f"{BOX_START}({x1}, {y1}),({x2}, {y2}){BOX_END}"


def format_action(a: Action) -> str:
    """Canonical text; ``parse_action(format_action(a))`` gives back ``a`` with format_ok."""
    k = a.kind
    if k is ActionKind.CLICK:
        if a.box is not None:
            return format_box(a.box)
        if a.point is not None:
            return f"{BOX_START}({a.point[0]}, {a.point[1]}){BOX_END}"
        return f"click {a.target}" if a.target else "click"
    if k is ActionKind.TYPE:
        return f'type "{a.text}"'
    if k is ActionKind.SCROLL:
        return f"scroll {a.direction}"
    if k is ActionKind.PRESS:
        return f"press {a.button}"
    return "stop"


def format_decision(a: Action) -> str:
    """Decision-turn rendering: clicks name their target instead of coordinates."""
    if a.kind is ActionKind.CLICK:
        return f"click {a.target or 'the target element'}"
    return format_action(a)


# ------------------------------------------------------------------- parsing

_EXACT_DECISION = [
    (ActionKind.CLICK, re.compile(r"^click[ \t]+(?P<arg>\S[^\n]*)$", re.I)),
    (ActionKind.SCROLL, re.compile(r"^scroll[ \t]+(?P<arg>up|down|left|right)$", re.I)),
    (ActionKind.TYPE, re.compile(r'^type[ \t]+"(?P<arg>.*)"$', re.I | re.S)),
    (ActionKind.PRESS, re.compile(r"^press[ \t]+(?P<arg>back|home|enter)$", re.I)),
    (ActionKind.STOP, re.compile(r"^stop$", re.I)),
]
_VERB = re.compile(r"\b(click|scroll|type|press|stop)\b", re.I)
_TRIM = " \t\r\n\"'`.,;:!?*"

_PAIR = r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)"
_EXACT_BOX = re.compile(rf"^{re.escape(BOX_START)}\s*{_PAIR}\s*,\s*{_PAIR}\s*{re.escape(BOX_END)}$")
_EXACT_POINT = re.compile(rf"^{re.escape(BOX_START)}\s*{_PAIR}\s*{re.escape(BOX_END)}$")
_SENTINEL_BLOCK = re.compile(rf"{re.escape(BOX_START)}(.*?){re.escape(BOX_END)}", re.S)
_ANY_PAIR = re.compile(_PAIR)


def _as_text(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8", errors="replace")
    return "" if text is None else str(text)


def _build(kind: ActionKind, arg: Optional[str]) -> Optional[Action]:
    if kind is ActionKind.CLICK:
        target = arg.strip(_TRIM) if arg else ""
        return Action(kind, target=target or None)
    if kind is ActionKind.SCROLL:
        return Action(kind, direction=arg.lower())
    if kind is ActionKind.PRESS:
        return Action(kind, button=arg.capitalize())
    if kind is ActionKind.TYPE:
        return Action(kind, text=arg)
    return Action(kind)


def _repair_decision(text: str) -> Optional[Action]:
    for m in _VERB.finditer(text):
        kind = ActionKind(m.group(1).upper())
        rest = text[m.end():]
        line = rest.split("\n", 1)[0]
        if kind is ActionKind.CLICK:
            return _build(kind, line)
        if kind is ActionKind.STOP:
            return Action(kind)
        if kind is ActionKind.TYPE:
            quoted = re.match(r'\s*[:\-]?\s*"([^"]*)"', rest)
            payload = quoted.group(1) if quoted else line.strip(_TRIM)
            if payload:
                return Action(kind, text=payload)
            continue
        word = re.match(r"[\s:\-]*([A-Za-z]+)", line)
        if not word:
            continue
        w = word.group(1)
        if kind is ActionKind.SCROLL and w.lower() in DIRECTIONS:
            return Action(kind, direction=w.lower())
        if kind is ActionKind.PRESS and w.capitalize() in BUTTONS:
            return Action(kind, button=w.capitalize())
    return None


def parse_decision(text) -> ParseOutcome:
    """Parse a decision turn such as ``scroll down`` or ``type "milk"``.

    An exact grammar match gives ``format_ok=True``. A verb buried in prose is
    still recovered, but flagged ``format_ok=False``.
    """
    raw = _as_text(text)
    body = raw.strip()
    for kind, pattern in _EXACT_DECISION:
        m = pattern.match(body)
        if m:
            return ParseOutcome(_build(kind, m.groupdict().get("arg")), True, raw)
    return ParseOutcome(_repair_decision(body), False, raw)


def _coords_ok(values) -> bool:
    return all(0 <= v <= COORD_MAX for v in values)


def _box_outcome(vals, ok: bool, raw: str) -> ParseOutcome:
    x1, y1, x2, y2 = vals
    if x1 > x2 or y1 > y2:
        ok = False
        x1, x2 = min(x1, x2), max(x1, x2)
        y1, y2 = min(y1, y2), max(y1, y2)
    ok = ok and _coords_ok((x1, y1, x2, y2))
    return ParseOutcome(Action(ActionKind.CLICK, box=(x1, y1, x2, y2)), ok, raw)


def _point_outcome(vals, ok: bool, raw: str) -> ParseOutcome:
    return ParseOutcome(Action(ActionKind.CLICK, point=tuple(vals)), ok and _coords_ok(vals), raw)


def parse_grounding(text) -> ParseOutcome:
    """Parse ``<|box_start|>(x1, y1),(x2, y2)<|box_end|>`` into a CLICK box.

    Coordinates outside 0-1000 are kept but clear ``format_ok``. Without the
    sentinels, the first one or two parenthesised pairs are still used (degraded).
    A sentinel-wrapped single point is accepted as a well-formed point click.
    """
    raw = _as_text(text)
    body = raw.strip()
    m = _EXACT_BOX.match(body)
    if m:
        return _box_outcome([int(v) for v in m.groups()], True, raw)
    m = _EXACT_POINT.match(body)
    if m:
        return _point_outcome([int(v) for v in m.groups()], True, raw)
    block = _SENTINEL_BLOCK.search(body)
    pairs = _ANY_PAIR.findall(block.group(1) if block else body)
    if not pairs and block:
        pairs = _ANY_PAIR.findall(body)
    if len(pairs) >= 2:
        return _box_outcome([int(v) for v in pairs[0] + pairs[1]], False, raw)
    if len(pairs) == 1:
        return _point_outcome([int(v) for v in pairs[0]], False, raw)
    return ParseOutcome(None, False, raw)


def parse_action(text) -> ParseOutcome:
    """Parse either turn format, preferring whichever grammar matches exactly."""
    raw = _as_text(text)
    decision = parse_decision(raw)
    if decision.format_ok:
        return decision
    grounding = parse_grounding(raw)
    if grounding.format_ok:
        return grounding
    if BOX_START in raw or (grounding.action is not None and decision.action is None):
        return grounding
    return decision


# ------------------------------------------------------------- JSON objects

def action_to_dict(a: Action) -> dict:
    d: dict = {"kind": a.kind.value}
    if a.point is not None:
        d["point"] = list(a.point)
    if a.box is not None:
        d["box"] = list(a.box)
    if a.text is not None:
        d["text"] = a.text
    if a.direction is not None:
        d["direction"] = a.direction
    if a.button is not None:
        d["button"] = a.button
    if a.target is not None:
        d["target"] = a.target
    return d


def action_from_dict(d: Union[dict, str]) -> Action:
    """Build an action from its canonical JSON object (or canonical text)."""
    if isinstance(d, str):
        out = parse_action(d)
        if out.action is None:
            raise ActionError(f"unparseable action text {d!r}")
        return out.action
    if not isinstance(d, dict) or "kind" not in d:
        raise ActionError(f"action object needs a 'kind': {d!r}")
    try:
        kind = ActionKind(str(d["kind"]).upper())
    except ValueError:
        raise ActionError(f"unknown action kind {d['kind']!r}") from None

    def ints(key, n):
        v = d.get(key)
        if v is None:
            return None
        if not isinstance(v, (list, tuple)) or len(v) != n:
            raise ActionError(f"{key} must have {n} integers, got {v!r}")
        return tuple(int(x) for x in v)

    direction = d.get("direction")
    button = d.get("button")
    return Action(
        kind,
        point=ints("point", 2),
        box=ints("box", 4),
        text=d.get("text"),
        direction=direction.lower() if isinstance(direction, str) else direction,
        button=button.capitalize() if isinstance(button, str) else button,
        target=d.get("target"),
    )
