"""Rule-based leaf reward and benchmark step matching."""
from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import asdict, dataclass
from enum import Enum

from .actions import COORD_MAX, Action, ActionKind, ParseOutcome, box_center, point_in_box

DIAGONAL = COORD_MAX * math.sqrt(2.0)


@dataclass(frozen=True)
class RewardConfig:
    v_type: float = 0.1
    v_format: float = 0.1
    clamp_to_unit: bool = True
    click_match_threshold: float = 0.14

    def __post_init__(self):
        if not 0 < self.v_type < 1 or not 0 < self.v_format < 1:
            raise ValueError("v_type and v_format must lie in (0, 1)")
        if self.v_type + self.v_format >= 1:
            raise ValueError("v_type + v_format must be < 1")
        if not 0 < self.click_match_threshold <= 1:
            raise ValueError("click_match_threshold must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict | None) -> "RewardConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


class Tier(str, Enum):
    EXACT = "exact"
    TYPE_MATCH = "type_match"
    ZERO = "zero"


@dataclass(frozen=True)
class RewardScore:
    value: float
    tier: Tier


ZERO = RewardScore(0.0, Tier.ZERO)
EXACT = RewardScore(1.0, Tier.EXACT)


def _clip(p) -> tuple[int, int]:
    return min(max(p[0], 0), COORD_MAX), min(max(p[1], 0), COORD_MAX)


def click_distance(pred_point, gold: Action) -> float:
    """Normalised distance in [0, 1]; zero whenever the point falls inside the gold box."""
    if gold.kind is not ActionKind.CLICK:
        raise ValueError(f"click_distance needs a CLICK gold action, got {gold.kind}")
    if gold.box is not None:
        if point_in_box(pred_point, gold.box):
            return 0.0
        ref = box_center(gold.box)
    elif gold.point is not None:
        ref = gold.point
    else:
        raise ValueError("gold CLICK has no coordinates")
    d = math.hypot(pred_point[0] - ref[0], pred_point[1] - ref[1]) / DIAGONAL
    return min(d, 1.0)


_PUNCT = string.punctuation + "“”‘’«»…"


def tokenize(text: str) -> list[str]:
    out = []
    for tok in text.lower().split():
        tok = tok.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def token_f1(pred_text: str, gold_text: str) -> float:
    pred, gold = tokenize(pred_text or ""), tokenize(gold_text or "")
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def is_exact(pred: Action, gold: Action) -> bool:
    if pred.kind is not gold.kind:
        return False
    k = gold.kind
    if k is ActionKind.CLICK:
        p = pred.resolved_point()
        if p is None:
            return False
        if gold.box is not None:
            return point_in_box(p, gold.box)
        return p == gold.point
    if k is ActionKind.TYPE:
        return pred.text == gold.text
    if k is ActionKind.SCROLL:
        return pred.direction == gold.direction
    if k is ActionKind.PRESS:
        return pred.button == gold.button
    return True


def leaf_value(pred: ParseOutcome, gold: Action, cfg: RewardConfig = RewardConfig()) -> RewardScore:
    """Score a predicted action against the golden one.

    Exact match scores 1, a kind mismatch or missing action 0. A kind match in
    between earns ``v_type`` plus, for well-formed output, ``v_format``, plus a
    smooth term: click distance for CLICK and token F1 for TYPE.
    """
    a = pred.action
    if a is None or a.kind is not gold.kind:
        return ZERO
    if is_exact(a, gold):
        return EXACT
    vt = cfg.v_type
    vf = cfg.v_format if pred.format_ok else 0.0
    k = gold.kind
    if k is ActionKind.CLICK:
        p = a.resolved_point()
        if p is None:
            return RewardScore(vt + vf, Tier.TYPE_MATCH)
        d = click_distance(_clip(p), gold)
        value = vt + vf + 1.0 * (1 - d) - (vt + vf) * d
        if cfg.clamp_to_unit:
            value = min(max(value, 0.0), 1.0)
        return RewardScore(value, Tier.TYPE_MATCH)
    if k is ActionKind.TYPE:
        f1 = token_f1(a.text or "", gold.text or "")
        if f1 == 1.0:
            return RewardScore(1.0, Tier.TYPE_MATCH)
        return RewardScore(vt + vf + (1 - vt - vf) * f1, Tier.TYPE_MATCH)
    return RewardScore(vt + vf, Tier.TYPE_MATCH)


def step_match(pred: Action | None, gold: Action, cfg: RewardConfig = RewardConfig()) -> tuple[bool, bool]:
    """Return (type_match, full_match) under benchmark Step.Acc rules."""
    if pred is None or pred.kind is not gold.kind:
        return False, False
    k = gold.kind
    if k is ActionKind.CLICK:
        p = pred.resolved_point()
        if p is None:
            return True, False
        if gold.box is not None and point_in_box(p, gold.box):
            return True, True
        return True, click_distance(_clip(p), gold) <= cfg.click_match_threshold
    if k is ActionKind.TYPE:
        return True, token_f1(pred.text or "", gold.text or "") == 1.0
    if k is ActionKind.SCROLL:
        return True, pred.direction == gold.direction
    if k is ActionKind.PRESS:
        return True, pred.button == gold.button
    return True, True
