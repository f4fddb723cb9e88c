"""Seeded stand-in for the sampling policy.

At the decision and grounding turns each sample falls into one outcome class
drawn from the profile: ``exact`` reproduces the golden action, ``type_only``
keeps its kind but perturbs the payload, ``wrong_type`` switches kind (or, at
grounding, taps a random spot) and ``malformed`` breaks the output format.
Description and thought turns are filler text whose vocabulary spread grows
with ``description_noise``.
"""
from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

from .actions import (
    BUTTONS,
    COORD_MAX,
    DIRECTIONS,
    Action,
    ActionKind,
    box_center,
    format_box,
    format_decision,
    point_in_box,
)
from .prompts import Stage

OUTCOMES = ("exact", "type_only", "wrong_type", "malformed")

_DESCRIPTION_BASE = (
    "the screen shows a search bar at the top a list of app icons in the middle and a navigation "
    "bar with back home and recent buttons at the bottom"
).split()
_THOUGHT_BASE = (
    "i have opened the app and the current screen shows the content related to the task so i need "
    "to take the next action that moves the task forward"
).split()
_VOCAB = (
    "button icon menu toolbar banner dialog settings search profile cart checkout wifi bluetooth "
    "keyboard field label header footer tab slider toggle switch image video playlist inbox message "
    "contact calendar reminder map route weather alarm camera gallery album folder download upload "
    "share favorite filter sort notification account login password signup help privacy battery "
    "display volume language update store review rating price order shipping coupon"
).split()


@dataclass(frozen=True)
class SimulatedPolicyProfile:
    seed: int = 0
    p_exact: float = 0.5
    p_type_only: float = 0.3
    p_wrong_type: float = 0.15
    p_malformed: float = 0.05
    description_noise: float = 0.0
    # type_only clicks land at a distance in [jitter_min, jitter_radius] from the gold point
    jitter_min: int = 300
    jitter_radius: int = 600

    def __post_init__(self):
        probs = self.probabilities
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"outcome probabilities must be non-negative and sum to 1, got {probs}")
        if not 0 <= self.description_noise <= 1:
            raise ValueError("description_noise must lie in [0, 1]")
        if not 1 <= self.jitter_min <= self.jitter_radius:
            raise ValueError("need 1 <= jitter_min <= jitter_radius")

    @property
    def probabilities(self) -> tuple[float, float, float, float]:
        return self.p_exact, self.p_type_only, self.p_wrong_type, self.p_malformed

    def with_p_exact(self, p_exact: float) -> "SimulatedPolicyProfile":
        """Move probability mass onto ``exact``, shrinking the other classes proportionally."""
        others = self.probabilities[1:]
        total = sum(others)
        scaled = [q * (1.0 - p_exact) / total for q in others] if total > 0 else [1.0 - p_exact, 0.0, 0.0]
        return replace(self, p_exact=p_exact, p_type_only=scaled[0], p_wrong_type=scaled[1],
                       p_malformed=max(0.0, 1.0 - p_exact - scaled[0] - scaled[1]))

    @classmethod
    def from_dict(cls, d: dict | None) -> "SimulatedPolicyProfile":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


class SimDraw(NamedTuple):
    text: str
    outcome: Optional[str]


def draw_outcome(profile: SimulatedPolicyProfile, rng: random.Random) -> str:
    u = rng.random()
    acc = 0.0
    for name, p in zip(OUTCOMES, profile.probabilities):
        acc += p
        if u < acc:
            return name
    return next(n for n, p in zip(reversed(OUTCOMES), reversed(profile.probabilities)) if p > 0)


def _filler(base: list[str], noise: float, rng: random.Random) -> str:
    if noise <= 0:
        return " ".join(base)
    return " ".join(rng.choice(_VOCAB) if rng.random() < noise else tok for tok in base)


def _perturb(golden: Action, rng: random.Random) -> Action:
    k = golden.kind
    if k is ActionKind.TYPE:
        toks = (golden.text or "").split()
        if len(toks) > 1:
            drop = set(rng.sample(range(len(toks)), rng.randint(1, len(toks) - 1)))
            toks = [t for i, t in enumerate(toks) if i not in drop]
        else:
            toks = toks + [rng.choice(_VOCAB)]
        return Action.type_text(" ".join(toks))
    if k is ActionKind.SCROLL:
        return Action.scroll(rng.choice([d for d in DIRECTIONS if d != golden.direction]))
    if k is ActionKind.PRESS:
        return Action.press(rng.choice([b for b in BUTTONS if b != golden.button]))
    return golden


def _random_of_kind(kind: ActionKind, rng: random.Random) -> Action:
    if kind is ActionKind.CLICK:
        return Action(kind, target=rng.choice(_VOCAB))
    if kind is ActionKind.TYPE:
        return Action.type_text(" ".join(rng.sample(_VOCAB, rng.randint(1, 3))))
    if kind is ActionKind.SCROLL:
        return Action.scroll(rng.choice(DIRECTIONS))
    if kind is ActionKind.PRESS:
        return Action.press(rng.choice(BUTTONS))
    return Action.stop()


def _decision(golden: Action, outcome: str, rng: random.Random) -> str:
    if outcome == "exact":
        return format_decision(golden)
    if outcome == "type_only":
        return format_decision(_perturb(golden, rng))
    if outcome == "wrong_type":
        kind = rng.choice([k for k in ActionKind if k is not golden.kind])
        return format_decision(_random_of_kind(kind, rng))
    if rng.random() < 0.5:
        return f"I think the best option here is to {format_decision(golden)}, probably."
    text = format_decision(golden)
    return text[: max(1, min(3, len(text) - 1))]


def _golden_point(golden: Action) -> tuple[int, int]:
    return golden.point if golden.point is not None else box_center(golden.box)


def _small_box(x: int, y: int, half: int = 12) -> tuple[int, int, int, int]:
    return (max(0, x - half), max(0, y - half), min(COORD_MAX, x + half), min(COORD_MAX, y + half))


def _jitter(golden: Action, r_min: int, r_max: int, rng: random.Random) -> tuple[int, int]:
    cx, cy = _golden_point(golden)
    for _ in range(32):
        ang = rng.uniform(0, 2 * math.pi)
        r = rng.uniform(r_min, r_max)
        x = min(max(int(round(cx + r * math.cos(ang))), 0), COORD_MAX)
        y = min(max(int(round(cy + r * math.sin(ang))), 0), COORD_MAX)
        if (x, y) == (cx, cy):
            continue
        if golden.box is not None and point_in_box((x, y), golden.box):
            continue
        return x, y
    # box covers the whole jitter disc: step just past its right/left edge
    x1, _, x2, _ = golden.box if golden.box is not None else (cx, cy, cx, cy)
    return (x2 + 1, cy) if x2 < COORD_MAX else (max(x1 - 1, 0), cy)


def _grounding(golden: Action, outcome: str, profile: SimulatedPolicyProfile, rng: random.Random) -> str:
    if golden.kind is not ActionKind.CLICK:
        return "No screen region needs to be tapped for this action."
    if outcome == "exact":
        if golden.box is not None:
            return format_box(golden.box)
        return format_box(_small_box(*golden.point, half=0))
    if outcome == "type_only":
        return format_box(_small_box(*_jitter(golden, profile.jitter_min, profile.jitter_radius, rng)))
    if outcome == "wrong_type":
        x, y = rng.randint(0, COORD_MAX), rng.randint(0, COORD_MAX)
        return format_box(_small_box(x, y))
    cx, cy = _golden_point(golden)
    style = rng.randrange(3)
    if style == 0:
        return f"The element is located around ({cx}, {cy}) on the screen."
    if style == 1:
        return "The icon is near the bottom of the screen."
    return f"({cx + COORD_MAX}, {cy}),({cx + COORD_MAX + 40}, {cy + 40})"


def simulate(stage: Stage, golden: Action, profile: SimulatedPolicyProfile, rng: random.Random) -> SimDraw:
    stage = Stage(stage)
    if stage is Stage.DESCRIPTION:
        return SimDraw(_filler(_DESCRIPTION_BASE, profile.description_noise, rng), None)
    if stage is Stage.THOUGHT:
        return SimDraw(_filler(_THOUGHT_BASE, profile.description_noise, rng), None)
    outcome = draw_outcome(profile, rng)
    if stage is Stage.DECISION:
        return SimDraw(_decision(golden, outcome, rng), outcome)
    return SimDraw(_grounding(golden, outcome, profile, rng), outcome)


def sim_sample(stage: Stage, golden: Action, profile: SimulatedPolicyProfile,
               rng: Optional[random.Random] = None) -> str:
    return simulate(stage, golden, profile, rng or random.Random(profile.seed)).text
