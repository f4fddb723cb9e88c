"""Synthetic trajectory datasets for tests, demos and the simulated reference runs."""
from __future__ import annotations

import random
from typing import Optional

from .actions import BUTTONS, COORD_MAX, DIRECTIONS, Action, ActionKind
from .trajectories import Trajectory, TrajectoryStep

_ELEMENTS = (
    "search bar", "settings icon", "add to cart", "profile tab", "back arrow", "menu button", "play button",
    "wifi toggle", "send button", "compose icon", "filter chip", "checkout button", "home tab", "map pin",
)
_INSTRUCTIONS = (
    "Open the settings and turn on wifi", "Search for running shoes and add a pair to the cart",
    "Play the latest episode of my podcast", "Send a message to Alice saying I am running late",
    "Find a nearby coffee shop on the map", "Check the weather forecast for tomorrow",
)
_TYPED = ("running shoes", "coffee near me", "I am running late", "weather tomorrow", "jazz playlist")

# rough action mix of mobile-control datasets
DEFAULT_MIX = {ActionKind.CLICK: 0.55, ActionKind.TYPE: 0.15, ActionKind.SCROLL: 0.15, ActionKind.PRESS: 0.15}


def _box(rng: random.Random) -> tuple[int, int, int, int]:
    w, h = rng.randint(40, 240), rng.randint(30, 120)
    x1, y1 = rng.randint(0, COORD_MAX - w), rng.randint(0, COORD_MAX - h)
    return x1, y1, x1 + w, y1 + h


def random_action(kind: ActionKind, rng: random.Random) -> Action:
    if kind is ActionKind.CLICK:
        return Action(kind, box=_box(rng), target=rng.choice(_ELEMENTS))
    if kind is ActionKind.TYPE:
        return Action.type_text(rng.choice(_TYPED))
    if kind is ActionKind.SCROLL:
        return Action.scroll(rng.choice(DIRECTIONS))
    if kind is ActionKind.PRESS:
        return Action.press(rng.choice(BUTTONS))
    return Action.stop()


def synth_trajectories(n_tasks: int, *, seed: int = 0, min_steps: int = 2, max_steps: int = 6,
                       mix: Optional[dict] = None, completed_ratio: float = 0.5) -> list[Trajectory]:
    """Random but valid trajectories; completed tasks end with STOP."""
    rng = random.Random(seed)
    mix = mix or DEFAULT_MIX
    kinds, weights = list(mix), list(mix.values())
    out = []
    for t in range(n_tasks):
        task_id = f"task{t:05d}"
        n = rng.randint(min_steps, max_steps)
        completed = rng.random() < completed_ratio
        steps = []
        for i in range(n):
            if completed and i == n - 1:
                gold = Action.stop()
            else:
                gold = random_action(rng.choices(kinds, weights)[0], rng)
            labels = rng.sample(_ELEMENTS, rng.randint(2, 5))
            positions = [(lab, *_box(rng)) for lab in labels]
            if gold.box is not None:
                positions.insert(0, (gold.target, *gold.box))
            positions = tuple(positions)
            texts = tuple(p[0] for p in positions)
            steps.append(TrajectoryStep(i, f"shots/{task_id}_{i}.png", gold, positions, texts, None))
        out.append(Trajectory(task_id, rng.choice(_INSTRUCTIONS), tuple(steps), completed))
    return out


def synth_steps(n_steps: int, *, seed: int = 0, **kw) -> list[Trajectory]:
    """Trajectories holding at least ``n_steps`` steps in total, trimmed to exactly that many."""
    trajs = []
    total = 0
    batch = 0
    while total < n_steps:
        more = synth_trajectories(max(1, (n_steps - total) // 3 + 1), seed=seed * 7919 + batch, **kw)
        for t in more:
            t = Trajectory(f"{t.task_id}b{batch}", t.instruction, t.steps, t.completed)
            trajs.append(t)
            total += len(t.steps)
        batch += 1
    excess = total - n_steps
    while excess > 0:
        last = trajs[-1]
        if len(last.steps) <= excess:
            trajs.pop()
            excess -= len(last.steps)
        else:
            trajs[-1] = Trajectory(last.task_id, last.instruction, last.steps[: len(last.steps) - excess], False)
            excess = 0
    return trajs
