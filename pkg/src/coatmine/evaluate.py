"""Step-level type/match accuracy per action kind, laid out like the usual benchmark table."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .actions import KIND_ORDER, Action, ActionKind, action_from_dict, parse_action
from .reward import RewardConfig, step_match
from .trajectories import load_trajectories


@dataclass
class KindTally:
    total: int = 0
    type_ok: int = 0
    match_ok: int = 0


@dataclass
class EvalResult:
    per_kind: dict = field(default_factory=lambda: {k: KindTally() for k in KIND_ORDER})
    missing: int = 0

    @property
    def overall(self) -> KindTally:
        t = KindTally()
        for v in self.per_kind.values():
            t.total += v.total
            t.type_ok += v.type_ok
            t.match_ok += v.match_ok
        return t


def percent(num: int, den: int) -> Optional[str]:
    """Exact percentage rounded half-up to one decimal, e.g. 4/5 -> '80.0%'."""
    if den == 0:
        return None
    tenths = Fraction(1000 * num, den)
    r = (tenths.numerator * 2 + tenths.denominator) // (2 * tenths.denominator)
    return f"{r // 10}.{r % 10}%"


def load_predictions(path) -> dict:
    """JSONL of {"task_id", "index", "action": {...}} or {"task_id", "index", "prediction": "<text>"}."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            ref = (str(rec["task_id"]), int(rec["index"]))
            if "action" in rec and rec["action"] is not None:
                out[ref] = action_from_dict(rec["action"])
            elif "prediction" in rec:
                out[ref] = parse_action(rec["prediction"]).action
            else:
                raise ValueError(f"{path}:{lineno}: record needs 'action' or 'prediction'")
    return out


def evaluate(preds: dict, gold: dict, cfg: RewardConfig = RewardConfig()) -> EvalResult:
    res = EvalResult()
    for ref, g in gold.items():
        tally = res.per_kind[g.kind]
        tally.total += 1
        p: Optional[Action] = preds.get(ref)
        if ref not in preds:
            res.missing += 1
        type_ok, match_ok = step_match(p, g, cfg)
        tally.type_ok += type_ok
        tally.match_ok += match_ok
    return res


def gold_actions(path) -> dict:
    return {(t.task_id, s.index): s.golden_action for t in load_trajectories(path) for s in t.steps}


def format_table(res: EvalResult) -> str:
    cols = [k.value for k in KIND_ORDER] + ["Total"]
    tallies = [res.per_kind[k] for k in KIND_ORDER] + [res.overall]
    width = 8
    lines = ["".ljust(7) + "".join(c.rjust(width) for c in cols)]
    for label, attr in (("Type", "type_ok"), ("Match", "match_ok")):
        cells = [percent(getattr(t, attr), t.total) or "-" for t in tallies]
        lines.append(label.ljust(7) + "".join(c.rjust(width) for c in cells))
    lines.append("N".ljust(7) + "".join(str(t.total).rjust(width) for t in tallies))
    if res.missing:
        lines.append(f"{res.missing} golden steps had no prediction (counted as wrong)")
    return "\n".join(lines)


def eval_files(pred_path, gold_path, cfg: RewardConfig = RewardConfig()) -> EvalResult:
    for p in (pred_path, gold_path):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    return evaluate(load_predictions(pred_path), gold_actions(gold_path), cfg)
