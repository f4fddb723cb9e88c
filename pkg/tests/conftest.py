import random

import pytest

from coatmine.actions import Action, ActionKind, format_box, format_decision
from coatmine.prompts import STAGES, Stage, StepContext
from coatmine.sampling import SamplingError
from coatmine.tree import CoatNode, CoatTree

GOLD_BOX = (100, 200, 300, 260)


def make_ctx(golden=None, task_id="t1", index=0, history=()):
    return StepContext(task_id, index, "Open the settings and turn on wifi", f"shots/{task_id}_{index}.png",
                       tuple(history), golden)


class ScriptedSampler:
    """Deterministic sampler: ``script[stage]`` is a list of K texts (or a callable of the salt)."""

    def __init__(self, script=None, fail=None):
        self.script = script or {}
        self.fail = fail or (lambda stage, salt: False)
        self.calls = []

    def sample(self, turns, K, *, stage, ctx=None, salt=""):
        self.calls.append((stage, salt, tuple(turns)))
        if self.fail(stage, salt):
            raise SamplingError(f"scripted failure at {salt}")
        entry = self.script.get(stage)
        if entry is None:
            return [f"{stage.value} sample {k}" for k in range(K)]
        texts = entry(salt) if callable(entry) else entry
        return list(texts[:K])


def gold_click():
    return Action(ActionKind.CLICK, box=GOLD_BOX, target="wifi toggle")


def click_script(grounding_texts):
    return {
        Stage.DECISION: ["click wifi toggle"] * 3,
        Stage.GROUNDING: grounding_texts,
    }


def random_tree(rng: random.Random, K: int, depth: int = 4, c: float = 1.0, values=None, tree_id="rt"):
    """Unsampled tree with leaf values drawn from ``values`` (or uniform [0, 1])."""

    def node(level):
        n = CoatNode(STAGES[level], f"{STAGES[level].value}-{rng.random():.6f}")
        if level + 1 < depth:
            n.children = [node(level + 1) for _ in range(K)]
        else:
            n.value = rng.choice(values) if values is not None else rng.random()
        return n

    return CoatTree(tree_id, ("task", 0), K, c, [node(0) for _ in range(K)])


@pytest.fixture
def ctx():
    return make_ctx(gold_click())


@pytest.fixture
def perfect_grounding():
    return format_box(GOLD_BOX)


@pytest.fixture
def gold():
    return gold_click()


__all__ = ["make_ctx", "ScriptedSampler", "random_tree", "gold_click", "GOLD_BOX", "format_decision"]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, msg = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{msg}]")
