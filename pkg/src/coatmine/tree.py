"""CoaT sampling trees: build, score, back up values, classify, mine pairs.

A tree for one trajectory step has K description roots; every node below the
grounding stage has K sampled children, so a complete depth-4 tree has K**4
leaves. Leaves are scored by the rule-based reward, and each internal node
takes ``c * mean(child values)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional, Sequence

from .actions import Action, ActionKind, ParseOutcome, format_action, format_decision, parse_decision, parse_grounding
from .prompts import STAGES, DialogueTurn, Stage, StepContext, render_prompt, render_prompt_only
from .reward import RewardConfig, leaf_value
from .sampling import SamplingError

StepRef = tuple[str, int]


class TreeClass(str, Enum):
    ALPHA = "alpha"
    BETA = "beta"
    GAMMA = "gamma"


class PairKind(str, Enum):
    BETA = "beta_pair"
    GAMMA = "gamma_pair"


class TreeBuildError(RuntimeError):
    pass


def is_perfect(value: Optional[float]) -> bool:
    return value is not None and value >= 1.0


@dataclass(eq=False)
class CoatNode:
    stage: Stage
    text: str
    children: list["CoatNode"] = field(default_factory=list)
    value: Optional[float] = None
    parse: Optional[ParseOutcome] = None
    failed: bool = False
    # leaf: the decision/grounding pair resolved into one action
    resolved: Optional[ParseOutcome] = None
    # action kind of the best leaf underneath (drives diversity-first selection)
    kind: Optional[ActionKind] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(eq=False)
class CoatTree:
    tree_id: str
    step_ref: StepRef
    K: int
    c: float
    roots: list[CoatNode]
    ctx: Optional[StepContext] = None
    tree_class: Optional[TreeClass] = None

    def nodes(self) -> Iterator[tuple[tuple[int, ...], CoatNode]]:
        stack = [((k,), r) for k, r in reversed(list(enumerate(self.roots)))]
        while stack:
            path, node = stack.pop()
            yield path, node
            for k in range(len(node.children) - 1, -1, -1):
                stack.append((path + (k,), node.children[k]))

    def leaves(self) -> list[CoatNode]:
        return [n for _, n in self.nodes() if n.is_leaf]

    @property
    def root_value(self) -> Optional[float]:
        vals = [r.value for r in self.roots if r.value is not None]
        return sum(vals) / len(vals) if vals else None

    def sibling_groups(self) -> Iterator[tuple[list[str], list[CoatNode]]]:
        """Yield (ancestor texts, children) for the root set and every internal node."""
        stack: list[tuple[list[str], list[CoatNode]]] = [([], self.roots)]
        while stack:
            ancestors, group = stack.pop(0)
            yield ancestors, group
            for node in group:
                if node.children:
                    stack.append((ancestors + [node.text], node.children))


@dataclass(frozen=True)
class PreferencePair:
    prefix: tuple[DialogueTurn, ...]
    stage: Stage
    chosen: str
    rejected: str
    chosen_value: float
    rejected_value: float
    kind: PairKind
    step_ref: StepRef
    tree_id: str
    action_kind: Optional[ActionKind] = None

    @property
    def prefix_hash(self) -> str:
        blob = json.dumps([t.to_dict() for t in self.prefix], ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def identity(self) -> tuple[str, str, str]:
        return self.prefix_hash, self.chosen, self.rejected


# -------------------------------------------------------------------- build

def build_tree(sampler, ctx: StepContext, K: int, depth: int = 4, *, c: float = 1.0,
               tree_id: Optional[str] = None) -> CoatTree:
    """Sample the K-way tree stage by stage, each level conditioned on its ancestors.

    A failed sampling call leaves K failed leaves in place of that subtree;
    siblings elsewhere are unaffected. Only when every root fails is the
    whole build abandoned.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if not 1 <= depth <= len(STAGES):
        raise ValueError(f"depth must lie in [1, {len(STAGES)}]")
    tree_id = tree_id or f"{ctx.task_id}#{ctx.index}"

    def expand(ancestors: list[str], path: str) -> list[CoatNode]:
        stage = STAGES[len(ancestors)]
        turns = render_prompt(stage, ctx, ancestors)
        try:
            texts = sampler.sample(turns, K, stage=stage, ctx=ctx, salt=f"{tree_id}/{path}")
        except SamplingError:
            return [CoatNode(stage, "", failed=True) for _ in range(K)]
        nodes = []
        for k, text in enumerate(texts):
            node = CoatNode(stage, text)
            if len(ancestors) + 1 < depth:
                node.children = expand(ancestors + [text], f"{path}{k}.")
            nodes.append(node)
        return nodes

    roots = expand([], "")
    if all(r.failed for r in roots):
        raise TreeBuildError(f"all {K} root samples failed for step {ctx.step_ref}")
    return CoatTree(tree_id, ctx.step_ref, K, c, roots, ctx)


# ------------------------------------------------------------------ scoring

def resolve_leaf(decision: ParseOutcome, grounding: ParseOutcome) -> ParseOutcome:
    """Merge a decision with its grounding: clicks take their coordinates from grounding."""
    a = decision.action
    if a is None:
        return ParseOutcome(None, False, grounding.raw)
    if a.kind is not ActionKind.CLICK:
        return decision
    g = grounding.action
    if g is None:
        return ParseOutcome(a, False, grounding.raw)
    return ParseOutcome(replace(g, target=a.target), decision.format_ok and grounding.format_ok, grounding.raw)


def score_leaves(tree: CoatTree, gold: Action, cfg: RewardConfig = RewardConfig()) -> None:
    def walk(node: CoatNode, decision: Optional[ParseOutcome]) -> None:
        if node.failed:
            node.value = 0.0
            return
        if node.stage is Stage.DECISION:
            node.parse = parse_decision(node.text)
            decision = node.parse
        elif node.stage is Stage.GROUNDING:
            node.parse = parse_grounding(node.text)
        if node.children:
            for ch in node.children:
                walk(ch, decision)
            return
        if node.stage is not Stage.GROUNDING or decision is None:
            raise RuntimeError(f"unscored leaf at stage {node.stage.value} in tree {tree.tree_id}")
        node.resolved = resolve_leaf(decision, node.parse)
        node.value = leaf_value(node.resolved, gold, cfg).value
        node.kind = node.resolved.action.kind if node.resolved.action is not None else None

    for root in tree.roots:
        walk(root, None)


def backpropagate(tree: CoatTree, c: Optional[float] = None, count_failures_as_zero: bool = True) -> None:
    """Set every internal value to ``c * mean(child values)``, bottom-up."""
    c = tree.c if c is None else c

    def walk(node: CoatNode) -> None:
        if not node.children:
            if node.failed:
                node.value = 0.0
            if node.value is None:
                raise RuntimeError(f"unscored leaf reached in tree {tree.tree_id}")
            return
        for ch in node.children:
            walk(ch)
        present = [ch for ch in node.children if count_failures_as_zero or not ch.failed]
        if not present:
            node.failed = True
            node.value = 0.0
            return
        node.value = c * (sum(ch.value for ch in present) / len(present))
        best = max(present, key=lambda ch: ch.value)
        node.kind = best.kind

    for root in tree.roots:
        walk(root)


def score_and_backprop(tree: CoatTree, gold: Action, cfg: RewardConfig = RewardConfig(),
                       count_failures_as_zero: bool = True) -> CoatTree:
    score_leaves(tree, gold, cfg)
    backpropagate(tree, count_failures_as_zero=count_failures_as_zero)
    return tree


def classify(tree: CoatTree) -> TreeClass:
    values = [leaf.value for leaf in tree.leaves()]
    if any(v is None for v in values):
        raise RuntimeError(f"tree {tree.tree_id} has unscored leaves")
    n_perfect = sum(1 for v in values if is_perfect(v))
    if n_perfect == len(values):
        cls = TreeClass.ALPHA
    elif n_perfect == 0:
        cls = TreeClass.GAMMA
    else:
        cls = TreeClass.BETA
    tree.tree_class = cls
    return cls


# ----------------------------------------------------------- pair extraction

def _prefix(tree: CoatTree, stage: Stage, ancestors: Sequence[str]) -> tuple[DialogueTurn, ...]:
    if tree.ctx is None:
        return tuple(DialogueTurn("assistant", t) for t in ancestors)
    return tuple(render_prompt(stage, tree.ctx, ancestors))


def _dedupe(pairs: list[PreferencePair]) -> list[PreferencePair]:
    seen = set()
    out = []
    for p in pairs:
        if p.identity not in seen:
            seen.add(p.identity)
            out.append(p)
    return out


def _select_diverse(pairs: list[PreferencePair], cap: Optional[int], score) -> list[PreferencePair]:
    """Greedy pick: unseen action kind first, then ``score``; result keeps input order."""
    if cap is None or len(pairs) <= cap:
        return pairs
    remaining = list(range(len(pairs)))
    seen_kinds: set = set()
    chosen = []
    while remaining and len(chosen) < cap:
        best = max(remaining, key=lambda i: (pairs[i].action_kind not in seen_kinds, score(pairs[i]), -i))
        remaining.remove(best)
        chosen.append(best)
        seen_kinds.add(pairs[best].action_kind)
    return [pairs[i] for i in sorted(chosen)]


def beta_candidates(tree: CoatTree) -> list[PreferencePair]:
    """Every same-prefix sibling pair whose value gap exceeds 1/K."""
    threshold = 1.0 / tree.K
    out = []
    for ancestors, group in tree.sibling_groups():
        stage = group[0].stage
        prefix = None
        for hi in group:
            if hi.failed:
                continue
            for lo in group:
                if lo is hi or lo.failed or hi.text == lo.text:
                    continue
                if hi.value - lo.value > threshold:
                    if prefix is None:
                        prefix = _prefix(tree, stage, ancestors)
                    out.append(PreferencePair(prefix, stage, hi.text, lo.text, hi.value, lo.value,
                                              PairKind.BETA, tree.step_ref, tree.tree_id, hi.kind))
    return out


def gamma_candidates(tree: CoatTree, gold: Action, include_grounding: bool = False) -> list[PreferencePair]:
    """Golden action against sampled decisions, under a prompt-only prefix."""
    if tree.ctx is None:
        raise ValueError("gamma pairs need the step context to render the prompt prefix")
    chosen = format_action(gold)
    stages = [Stage.DECISION]
    if include_grounding and gold.kind is ActionKind.CLICK:
        stages.append(Stage.GROUNDING)
    out = []
    for stage in stages:
        coat_action = format_decision(gold) if stage is Stage.GROUNDING else None
        prefix = tuple(render_prompt_only(stage, tree.ctx, coat_action))
        for _, node in tree.nodes():
            if node.stage is not stage or node.failed or node.text == chosen:
                continue
            kind = node.parse.action.kind if node.parse is not None and node.parse.action is not None else None
            out.append(PreferencePair(prefix, stage, chosen, node.text, 1.0, node.value,
                                      PairKind.GAMMA, tree.step_ref, tree.tree_id, kind))
    return out


def extract_pairs(tree: CoatTree, gold: Optional[Action] = None, K: Optional[int] = None, *,
                  cap: Optional[int] = 8, include_grounding_negatives: bool = False) -> list[PreferencePair]:
    """Mine preference pairs from a scored tree according to its class.

    Alpha trees give nothing. Beta trees give sibling pairs with a value gap
    above 1/K. Gamma trees pair the golden action against sampled decisions.
    ``cap`` bounds pairs per tree (None disables it).
    """
    if K is not None and K != tree.K:
        raise ValueError(f"K={K} does not match tree K={tree.K}")
    cls = tree.tree_class or classify(tree)
    if cls is TreeClass.ALPHA:
        return []
    if cls is TreeClass.BETA:
        pairs = _dedupe(beta_candidates(tree))
        return _select_diverse(pairs, cap, lambda p: (is_perfect(p.chosen_value), p.chosen_value,
                                                      p.chosen_value - p.rejected_value))
    if gold is None:
        raise ValueError("gamma trees need the golden action")
    pairs = _dedupe(gamma_candidates(tree, gold, include_grounding_negatives))
    # gamma pairs are tagged by the kind of the rejected sample for diversity, then by the gold kind
    selected = _select_diverse(pairs, cap, lambda p: -p.rejected_value)
    return [replace(p, action_kind=gold.kind) for p in selected]


# --------------------------------------------------------------- dump / load

def _node_to_dict(node: CoatNode) -> dict:
    d = {"stage": node.stage.value, "text": node.text, "value": node.value,
         "children": [_node_to_dict(ch) for ch in node.children]}
    if node.failed:
        d["failed"] = True
    return d


def _node_from_dict(d: dict) -> CoatNode:
    return CoatNode(Stage(d["stage"]), d["text"], [_node_from_dict(ch) for ch in d.get("children", [])],
                    d.get("value"), failed=bool(d.get("failed", False)))


def tree_to_dict(tree: CoatTree) -> dict:
    return {
        "tree_id": tree.tree_id,
        "step_ref": list(tree.step_ref),
        "K": tree.K,
        "c": tree.c,
        "class": tree.tree_class.value if tree.tree_class else None,
        "nodes": [_node_to_dict(r) for r in tree.roots],
    }


def tree_from_dict(d: dict, ctx: Optional[StepContext] = None) -> CoatTree:
    cls = TreeClass(d["class"]) if d.get("class") else None
    return CoatTree(d["tree_id"], (str(d["step_ref"][0]), int(d["step_ref"][1])), int(d["K"]), float(d["c"]),
                    [_node_from_dict(n) for n in d["nodes"]], ctx, cls)


def dump_trees(trees, path, mode: str = "w") -> int:
    n = 0
    with open(path, mode, encoding="utf-8") as fh:
        for t in trees:
            fh.write(json.dumps(tree_to_dict(t), ensure_ascii=False) + "\n")
            n += 1
    return n


def load_trees(path) -> list[CoatTree]:
    with open(path, encoding="utf-8") as fh:
        return [tree_from_dict(json.loads(line)) for line in fh if line.strip()]
