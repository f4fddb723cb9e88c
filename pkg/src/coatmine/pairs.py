"""Preference-pair datasets, the T-DPO loss as a checking function, and JSONL emitters."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .actions import Action, ActionKind, parse_action
from .prompts import STAGES, DialogueTurn, Stage, render_prompt
from .tree import CoatTree, PairKind, PreferencePair, is_perfect

SCHEMA = "ipl-pairs/1"


@dataclass(frozen=True)
class LogProbQuad:
    """Summed token log-probs of chosen/rejected under the policy and the reference."""

    lp_policy_chosen: float
    lp_ref_chosen: float
    lp_policy_rejected: float
    lp_ref_rejected: float

    @property
    def margin(self) -> float:
        return (self.lp_policy_chosen - self.lp_ref_chosen) - (self.lp_policy_rejected - self.lp_ref_rejected)


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def tdpo_loss(q: LogProbQuad, dpo_beta: float = 0.1) -> float:
    """-log sigmoid(beta * margin), evaluated as softplus(-beta * margin)."""
    vals = (q.lp_policy_chosen, q.lp_ref_chosen, q.lp_policy_rejected, q.lp_ref_rejected)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"log-probabilities must be finite, got {vals}")
    if not (dpo_beta > 0 and math.isfinite(dpo_beta)):
        raise ValueError("dpo_beta must be a positive finite number")
    return softplus(-dpo_beta * q.margin)


# ----------------------------------------------------------------- dataset

def pair_problems(p: PreferencePair, K: int, gold: Optional[Action] = None) -> list[str]:
    out = []
    if p.chosen == p.rejected:
        out.append("chosen equals rejected")
    if p.kind is PairKind.BETA:
        if not p.chosen_value - p.rejected_value > 1.0 / K:
            out.append(f"beta gap {p.chosen_value - p.rejected_value} is not above 1/{K}")
    else:
        if p.stage not in (Stage.DECISION, Stage.GROUNDING):
            out.append(f"gamma pair at non-action stage {p.stage.value}")
        if any(t.role != "user" for t in p.prefix):
            out.append("gamma prefix carries sampled assistant text")
        if gold is not None and parse_action(p.chosen).action != _strip_target(gold):
            out.append("gamma chosen text does not parse back to the golden action")
    return out


def _strip_target(a: Action) -> Action:
    # a formatted click carries coordinates only, so the element name never survives
    if a.kind is ActionKind.CLICK and (a.point is not None or a.box is not None):
        return Action(a.kind, point=a.point, box=a.box)
    return a


@dataclass
class PairDataset:
    pairs: list = field(default_factory=list)
    round: int = 0
    config_digest: str = ""
    K: Optional[int] = None

    def __post_init__(self):
        incoming, self.pairs = list(self.pairs), []
        self._seen: set = set()
        self.extend(incoming)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def add(self, pair: PreferencePair) -> bool:
        if self.K is not None:
            probs = pair_problems(pair, self.K)
            if probs:
                raise ValueError(f"invalid pair from {pair.tree_id}: {'; '.join(probs)}")
        key = pair.identity
        if key in self._seen:
            return False
        self._seen.add(key)
        self.pairs.append(pair)
        return True

    def extend(self, pairs: Iterable[PreferencePair]) -> int:
        return sum(self.add(p) for p in pairs)

    def ordered(self) -> list:
        return sorted(self.pairs, key=lambda p: (p.step_ref, p.tree_id, p.stage.depth))


def pair_to_dict(p: PreferencePair) -> dict:
    return {
        "prompt": [t.to_dict() for t in p.prefix],
        "chosen": p.chosen,
        "rejected": p.rejected,
        "stage": p.stage.value,
        "kind": p.kind.value,
        "chosen_value": p.chosen_value,
        "rejected_value": p.rejected_value,
        "tree_id": p.tree_id,
        "step_ref": list(p.step_ref),
        "action_kind": p.action_kind.value if p.action_kind is not None else None,
    }


def pair_from_dict(d: dict) -> PreferencePair:
    ak = d.get("action_kind")
    return PreferencePair(
        prefix=tuple(DialogueTurn.from_dict(t) for t in d["prompt"]),
        stage=Stage(d["stage"]),
        chosen=d["chosen"],
        rejected=d["rejected"],
        chosen_value=float(d["chosen_value"]),
        rejected_value=float(d["rejected_value"]),
        kind=PairKind(d["kind"]),
        step_ref=(str(d["step_ref"][0]), int(d["step_ref"][1])),
        tree_id=d["tree_id"],
        action_kind=ActionKind(ak) if ak else None,
    )


def _header(content: str, **meta) -> str:
    return json.dumps({"schema": SCHEMA, "content": content, **meta}, sort_keys=True) + "\n"


def emit_pairs(dataset: PairDataset, path) -> int:
    """Write a header line then one pair per line; returns the number of pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header("pairs", round=dataset.round, config_digest=dataset.config_digest, K=dataset.K))
        for p in dataset.ordered():
            fh.write(json.dumps(pair_to_dict(p), ensure_ascii=False) + "\n")
    return len(dataset)


def load_pairs(path) -> PairDataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file, expected a schema header")
    head = json.loads(lines[0])
    if head.get("schema") != SCHEMA or head.get("content") != "pairs":
        raise ValueError(f"{path}: not an {SCHEMA} pair file")
    pairs = [pair_from_dict(json.loads(ln)) for ln in lines[1:]]
    return PairDataset(pairs, head.get("round", 0), head.get("config_digest", ""), head.get("K"))


def sft_records(tree: CoatTree) -> list[dict]:
    """One full four-stage dialogue per perfect leaf."""
    if tree.ctx is None:
        raise ValueError(f"tree {tree.tree_id} has no step context to render prompts")
    out = []

    def walk(node, ancestors):
        texts = ancestors + [node.text]
        if node.children:
            for ch in node.children:
                walk(ch, texts)
            return
        if node.failed or not is_perfect(node.value) or len(texts) != len(STAGES):
            return
        turns = render_prompt(STAGES[-1], tree.ctx, texts[:-1]) + [DialogueTurn("assistant", texts[-1])]
        out.append({
            "messages": [t.to_dict() for t in turns],
            "tree_id": tree.tree_id,
            "step_ref": list(tree.step_ref),
            "value": node.value,
        })

    for root in tree.roots:
        walk(root, [])
    return out


def emit_sft_positives(trees: Iterable[CoatTree], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header("sft"))
        for t in trees:
            for rec in sft_records(t):
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
                n += 1
    return n


def load_sft(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    return [json.loads(ln) for ln in lines[1:]]
