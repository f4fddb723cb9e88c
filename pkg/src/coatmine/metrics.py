"""Seed-policy selection metrics (Acc_S, Div_R) and per-round space ratios."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .prompts import STAGES
from .reward import tokenize
from .tree import CoatTree, TreeClass, classify, is_perfect


class MetricUndefinedError(ValueError):
    """A batch metric was requested over an empty batch."""


class Encoder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashEncoder:
    """Hashed bag-of-tokens, L2-normalised. Stateless, so safe to share across threads."""

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def _bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in tokenize(text or ""):
            v[self._bucket(tok)] += 1.0
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def _need(trees: Sequence, what: str) -> None:
    if len(trees) == 0:
        raise MetricUndefinedError(f"{what} is undefined on an empty batch")


def sampling_accuracy(trees: Sequence[CoatTree]) -> float:
    """Fraction of all leaves in the batch that score exactly 1."""
    _need(trees, "Acc_S")
    total = perfect = 0
    for t in trees:
        for leaf in t.leaves():
            total += 1
            perfect += is_perfect(leaf.value)
    if total == 0:
        raise MetricUndefinedError("Acc_S is undefined for trees without leaves")
    return perfect / total


def set_deviation(vectors: np.ndarray) -> float:
    """Per-dimension population std across the rows, averaged over dimensions."""
    return float(np.mean(np.std(vectors, axis=0)))


def tree_deviation(tree: CoatTree, enc: Optional[Encoder] = None) -> float:
    enc = enc or HashEncoder()
    per_stage: dict = {s: [] for s in STAGES}
    for _, group in tree.sibling_groups():
        texts = [n.text for n in group if not n.failed]
        if len(texts) < 2:
            continue
        vecs = np.stack([enc.embed(t) for t in texts])
        per_stage[group[0].stage].append(set_deviation(vecs))
    stage_means = [float(np.mean(v)) for v in per_stage.values() if v]
    return float(np.mean(stage_means)) if stage_means else 0.0


def diversity(trees: Sequence[CoatTree], enc: Optional[Encoder] = None) -> float:
    _need(trees, "Div_R")
    enc = enc or HashEncoder()
    return float(np.mean([tree_deviation(t, enc) for t in trees]))


def space_ratios(trees: Sequence[CoatTree]) -> dict:
    _need(trees, "space ratios")
    counts = Counter((t.tree_class or classify(t)) for t in trees)
    n = len(trees)
    ra, rb, rg = (counts[TreeClass.ALPHA] / n, counts[TreeClass.BETA] / n, counts[TreeClass.GAMMA] / n)
    return {
        "ratio_alpha": ra,
        "ratio_beta": rb,
        "ratio_gamma": rg,
        "potential_correct_space": ra + rb,
        "valid_sampling_space": rb + rg,
        "class_counts": {c.value: counts[c] for c in TreeClass},
    }


@dataclass
class RoundReport:
    round: int
    acc_s: float
    div_r: float
    ratio_alpha: float
    ratio_beta: float
    ratio_gamma: float
    potential_correct_space: float
    valid_sampling_space: float
    class_counts: dict = field(default_factory=dict)
    pair_counts: dict = field(default_factory=dict)
    steps: int = 0
    failed_steps: int = 0
    pairs: int = 0
    sft_records: int = 0
    model_id: str = ""
    previous_model_id: Optional[str] = None
    config_digest: str = ""

    def __post_init__(self):
        total = self.ratio_alpha + self.ratio_beta + self.ratio_gamma
        if self.steps and abs(total - 1.0) > 1e-9:
            raise ValueError(f"class ratios sum to {total}, not 1")

    @property
    def model_swapped(self) -> bool:
        return self.previous_model_id is not None and self.previous_model_id != self.model_id

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, s: str) -> "RoundReport":
        return cls.from_dict(json.loads(s))


def pair_counts(pairs: Iterable) -> dict:
    counts = Counter(p.action_kind.value if p.action_kind is not None else "UNKNOWN" for p in pairs)
    return dict(sorted(counts.items()))


def build_report(round_idx: int, trees: Sequence[CoatTree], pairs: Sequence = (), *,
                 enc: Optional[Encoder] = None, **extra) -> RoundReport:
    ratios = space_ratios(trees)
    return RoundReport(
        round=round_idx,
        acc_s=sampling_accuracy(trees),
        div_r=diversity(trees, enc),
        pair_counts=pair_counts(pairs),
        steps=len(trees),
        pairs=len(pairs),
        **ratios,
        **extra,
    )
