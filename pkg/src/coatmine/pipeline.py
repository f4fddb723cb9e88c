"""Round-based mining loop: build trees, score, classify, extract pairs, report.

Each round writes to ``<output_dir>/round_<n>/``::

    trees.jsonl   scored trees, appended after every batch (the resume checkpoint)
    pairs.jsonl   preference pairs with a schema header
    sft.jsonl     full dialogues of every perfect leaf
    report.json   the RoundReport
    state.json    processed steps, counts and completion flag
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .actions import Action
from .metrics import HashEncoder, RoundReport, build_report
from .pairs import PairDataset, emit_pairs, emit_sft_positives
from .prompts import StepContext
from .reward import RewardConfig
from .sampling import SampleCache, SamplerConfig, SamplerGateway, make_gateway
from .simulated import SimulatedPolicyProfile
from .trajectories import Trajectory, load_trajectories
from .tree import (
    CoatTree,
    TreeBuildError,
    build_tree,
    classify,
    dump_trees,
    extract_pairs,
    load_trees,
    score_and_backprop,
    TreeClass,
)

logger = logging.getLogger(__name__)

HISTORY_MODES = ("golden", "sampled")


class PipelineAbort(RuntimeError):
    """Sampler failures exceeded the configured ceiling; partial outputs were kept."""


@dataclass
class PipelineConfig:
    dataset: list = field(default_factory=list)
    output_dir: str = "runs"
    dataset_format: str = "jsonl"
    K: int = 3
    c: float = 1.0
    rounds: int = 1
    seed: int = 0
    subsample: float = 1.0
    max_steps: Optional[int] = None
    pair_cap: Optional[int] = 8
    include_grounding_negatives: bool = False
    count_failures_as_zero: bool = True
    skip_alpha: bool = False
    history: str = "golden"
    workers: int = 4
    checkpoint_every: int = 16
    max_failure_rate: float = 0.5
    encoder_dim: int = 256
    improvement_schedule: Optional[list] = None
    model_schedule: Optional[list] = None
    retrain_command: Optional[str] = None
    reward: RewardConfig = field(default_factory=RewardConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulated: SimulatedPolicyProfile = field(default_factory=SimulatedPolicyProfile)

    def __post_init__(self):
        if isinstance(self.dataset, (str, Path)):
            self.dataset = [self.dataset]
        self.dataset = [str(p) for p in self.dataset]
        if isinstance(self.reward, dict):
            self.reward = RewardConfig.from_dict(self.reward)
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig.from_dict(self.sampler)
        if isinstance(self.simulated, dict):
            self.simulated = SimulatedPolicyProfile.from_dict(self.simulated)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not 0 < self.c <= 1:
            raise ValueError("c must lie in (0, 1]")
        if self.history not in HISTORY_MODES:
            raise ValueError(f"history must be one of {HISTORY_MODES}")
        if self.workers < 1 or self.checkpoint_every < 1:
            raise ValueError("workers and checkpoint_every must be >= 1")
        if self.pair_cap is not None and self.pair_cap < 1:
            raise ValueError("pair_cap must be positive or null")
        for name in ("improvement_schedule", "model_schedule"):
            sched = getattr(self, name)
            if sched is not None and len(sched) < self.rounds:
                raise ValueError(f"{name} needs one entry per round")
        if self.sampler.K != self.K:
            self.sampler = replace(self.sampler, K=self.K)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        d = dict(d)
        if base_dir is not None:
            base = Path(base_dir)
            ds = d.get("dataset", [])
            ds = [ds] if isinstance(ds, str) else ds
            d["dataset"] = [str(base / p) for p in ds]
            if "output_dir" in d:
                d["output_dir"] = str(base / d["output_dir"])
            sampler = dict(d.get("sampler") or {})
            if sampler.get("cache"):
                sampler["cache"] = str(base / sampler["cache"])
                d["sampler"] = sampler
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "PipelineConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of the settings that shape the mined data (paths, backend and pool size excluded)."""
        d = self.to_dict()
        for k in ("dataset", "output_dir", "workers", "checkpoint_every", "retrain_command"):
            d.pop(k)
        for k in ("backend", "cache", "endpoint", "api_key_env", "max_in_flight", "timeout", "retry_backoff",
                  "image_transport"):
            d["sampler"].pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def cache_path(self) -> Path:
        return Path(self.sampler.cache) if self.sampler.cache else Path(self.output_dir) / "sample_cache.jsonl"

    def round_dir(self, n: int) -> Path:
        return Path(self.output_dir) / f"round_{n}"


@dataclass
class StepResult:
    step_ref: tuple
    tree: Optional[CoatTree]
    error: Optional[str] = None


class Pipeline:
    def __init__(self, cfg: PipelineConfig, gateway: Optional[SamplerGateway] = None,
                 trajectories: Optional[Sequence[Trajectory]] = None):
        self.cfg = cfg
        if trajectories is None:
            trajectories = [t for p in cfg.dataset for t in load_trajectories(p, cfg.dataset_format)]
        self.trajectories = list(trajectories)
        if not self.trajectories:
            raise ValueError("dataset is empty")
        self.gateway = gateway or make_gateway(cfg.sampler, cfg.simulated, cfg.cache_path())
        self.encoder = HashEncoder(cfg.encoder_dim)
        self.gold = {(t.task_id, s.index): s.golden_action for t in self.trajectories for s in t.steps}
        self._by_task = {t.task_id: t for t in self.trajectories}

    # ------------------------------------------------------------ selection

    def select_steps(self, round_idx: int, skip: frozenset = frozenset()) -> list[tuple]:
        refs = [(t.task_id, s.index) for t in self.trajectories for s in t.steps]
        refs = [r for r in refs if r not in skip]
        if self.cfg.subsample < 1:
            n = max(1, round(len(refs) * self.cfg.subsample))
            rng = random.Random(f"{self.cfg.seed}:{round_idx}")
            picked = set(rng.sample(range(len(refs)), n))
            refs = [r for i, r in enumerate(refs) if i in picked]
        if self.cfg.max_steps is not None:
            refs = refs[: self.cfg.max_steps]
        return refs

    def _alpha_steps(self, round_idx: int) -> frozenset:
        out = set()
        for n in range(1, round_idx):
            state = self.cfg.round_dir(n) / "state.json"
            if state.exists():
                out.update(tuple(r) for r in json.loads(state.read_text())["alpha_steps"])
        return frozenset((str(a), int(b)) for a, b in out)

    # -------------------------------------------------------------- mining

    def _context(self, ref, history: tuple) -> StepContext:
        traj = self._by_task[ref[0]]
        step = traj.steps[ref[1]]
        return StepContext(traj.task_id, step.index, traj.instruction, step.screenshot_ref, history,
                           step.golden_action)

    def _history(self, ref, trees: dict) -> tuple:
        traj = self._by_task[ref[0]]
        hist = []
        for s in traj.steps[: ref[1]]:
            a = s.golden_action
            if self.cfg.history == "sampled":
                t = trees.get((traj.task_id, s.index))
                best = _best_action(t) if t is not None else None
                a = best or a
            hist.append(a)
        return tuple(hist)

    def _tree_id(self, round_idx: int, ref) -> str:
        return f"r{round_idx}-{ref[0]}-{ref[1]}"

    def _finish(self, tree: CoatTree, ref) -> CoatTree:
        score_and_backprop(tree, self.gold[ref], self.cfg.reward, self.cfg.count_failures_as_zero)
        classify(tree)
        return tree

    def _mine_unit(self, round_idx: int, refs: list) -> list[StepResult]:
        done: dict = {}
        out = []
        for ref in refs:
            ctx = self._context(ref, self._history(ref, done))
            try:
                tree = build_tree(self.gateway, ctx, self.cfg.K, c=self.cfg.c, tree_id=self._tree_id(round_idx, ref))
            except TreeBuildError as e:
                out.append(StepResult(ref, None, str(e)))
                continue
            self._finish(tree, ref)
            done[ref] = tree
            out.append(StepResult(ref, tree))
        return out

    def _units(self, refs: list) -> list[list]:
        units: dict = {}
        for r in refs:
            units.setdefault(r[0], []).append(r)
        return list(units.values())

    def _reload(self, path: Path, round_idx: int) -> dict:
        """Trees already checkpointed for this round, rescored from their text."""
        if not path.exists():
            return {}
        out = {}
        for t in load_trees(path):
            ref = t.step_ref
            t.ctx = self._context(ref, self._history(ref, out))
            out[ref] = self._finish(t, ref)
        return out

    def run_round(self, round_idx: int, *, resume: bool = False, previous_model_id: Optional[str] = None):
        cfg = self.cfg
        rdir = cfg.round_dir(round_idx)
        rdir.mkdir(parents=True, exist_ok=True)
        trees_path = rdir / "trees.jsonl"
        skip = self._alpha_steps(round_idx) if cfg.skip_alpha else frozenset()
        refs = self.select_steps(round_idx, skip)
        if not refs:
            raise ValueError(f"round {round_idx} selected no steps")

        trees = self._reload(trees_path, round_idx) if resume else {}
        if not resume and trees_path.exists():
            trees_path.unlink()
        failed: dict = {}
        units = [u for u in self._units(refs) if not all(r in trees for r in u)]
        base_requests = self.gateway.stats["requests"] - self.gateway.stats["cache_hits"]
        base_failures = self.gateway.stats["failures"]

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for start in range(0, len(units), cfg.checkpoint_every):
                batch = units[start: start + cfg.checkpoint_every]
                results = list(pool.map(lambda u: self._mine_unit(round_idx, u), batch))
                new_trees = []
                for unit in results:
                    for res in unit:
                        if res.tree is None:
                            failed[res.step_ref] = res.error
                        else:
                            trees[res.step_ref] = res.tree
                            new_trees.append(res.tree)
                dump_trees(new_trees, trees_path, mode="a")
                calls = self.gateway.stats["requests"] - self.gateway.stats["cache_hits"] - base_requests
                fails = self.gateway.stats["failures"] - base_failures
                if calls and fails / calls > cfg.max_failure_rate:
                    self._write_state(rdir, round_idx, refs, trees, failed, done=False)
                    raise PipelineAbort(
                        f"round {round_idx}: sampler failure rate {fails}/{calls} exceeds {cfg.max_failure_rate}; "
                        f"{len(trees)} trees kept in {trees_path}")

        ordered = [trees[r] for r in refs if r in trees]
        if not ordered:
            raise PipelineAbort(f"round {round_idx}: every step failed")
        dump_trees(ordered, trees_path)

        dataset = PairDataset(round=round_idx, config_digest=cfg.digest(), K=cfg.K)
        for t in ordered:
            dataset.extend(extract_pairs(t, self.gold[t.step_ref], cap=cfg.pair_cap,
                                         include_grounding_negatives=cfg.include_grounding_negatives))
        emit_pairs(dataset, rdir / "pairs.jsonl")
        n_sft = emit_sft_positives(ordered, rdir / "sft.jsonl")
        report = build_report(
            round_idx, ordered, dataset.pairs, enc=self.encoder,
            failed_steps=len(failed), sft_records=n_sft, model_id=self.gateway.model_id,
            previous_model_id=previous_model_id, config_digest=cfg.digest(),
        )
        (rdir / "report.json").write_text(report.to_json(), encoding="utf-8")
        self._write_state(rdir, round_idx, refs, trees, failed, done=True, pairs=len(dataset))
        return dataset, report

    def _write_state(self, rdir: Path, round_idx: int, refs, trees: dict, failed: dict, *, done: bool,
                     pairs: Optional[int] = None) -> None:
        cache = self.gateway.cache
        state = {
            "round": round_idx,
            "done": done,
            "selected": len(refs),
            "processed": sorted([list(r) for r in trees]),
            "failed": sorted([[r[0], r[1], msg] for r, msg in failed.items()]),
            "alpha_steps": sorted([list(r) for r, t in trees.items() if t.tree_class is TreeClass.ALPHA]),
            "pairs": pairs,
            "cache_entries": len(cache),
        }
        (rdir / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # ---------------------------------------------------------- outer loop

    def _prepare_round(self, n: int) -> None:
        cfg = self.cfg
        backend = self.gateway.backend
        if cfg.improvement_schedule is not None and hasattr(backend, "profile"):
            backend.profile = cfg.simulated.with_p_exact(float(cfg.improvement_schedule[n - 1]))
        if cfg.model_schedule is not None:
            self.gateway.set_model(str(cfg.model_schedule[n - 1]))

    def _retrain(self, n: int) -> None:
        """Shell out to the external trainer; the last stdout line names the new model."""
        cmd = self.cfg.retrain_command
        if not cmd:
            return
        env = dict(os.environ, COATMINE_ROUND=str(n), COATMINE_ROUND_DIR=str(self.cfg.round_dir(n)),
                   COATMINE_MODEL=self.gateway.model_id)
        proc = subprocess.run(shlex.split(cmd), env=env, capture_output=True, text=True, check=True)
        lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        if lines:
            self.gateway.set_model(lines[-1])

    def run(self, *, resume: bool = False, rounds: Optional[Sequence[int]] = None) -> list[RoundReport]:
        reports = []
        rounds = list(rounds) if rounds is not None else list(range(1, self.cfg.rounds + 1))
        previous: Optional[str] = None
        for i, n in enumerate(rounds):
            rdir = self.cfg.round_dir(n)
            self._prepare_round(n)
            if resume and _round_done(rdir):
                report = RoundReport.from_json((rdir / "report.json").read_text(encoding="utf-8"))
                state = json.loads((rdir / "state.json").read_text(encoding="utf-8"))
                logger.info("round %d already complete, skipping", n)
                if state.get("next_model_id"):
                    self.gateway.set_model(state["next_model_id"])
            else:
                _, report = self.run_round(n, resume=resume, previous_model_id=previous)
                if i < len(rounds) - 1 and self.cfg.retrain_command:
                    self._retrain(n)
                    _update_state(rdir, next_model_id=self.gateway.model_id)
            reports.append(report)
            previous = report.model_id
        return reports


def _update_state(rdir: Path, **fields) -> None:
    path = rdir / "state.json"
    state = json.loads(path.read_text(encoding="utf-8"))
    state.update(fields)
    path.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _round_done(rdir: Path) -> bool:
    state = rdir / "state.json"
    return state.exists() and json.loads(state.read_text()).get("done", False) and (rdir / "report.json").exists()


def _best_action(tree: CoatTree) -> Optional[Action]:
    best = None
    for leaf in tree.leaves():
        if leaf.resolved is not None and leaf.resolved.action is not None:
            if best is None or leaf.value > best.value:
                best = leaf
    return best.resolved.action if best is not None else None


def run_round(cfg: PipelineConfig, round_idx: int, **kw):
    return Pipeline(cfg).run_round(round_idx, **kw)


def run(cfg: PipelineConfig, **kw) -> list[RoundReport]:
    return Pipeline(cfg).run(**kw)


def load_reports(run_dir) -> list[RoundReport]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return []
    found = []
    for p in run_dir.glob("round_*/report.json"):
        try:
            n = int(p.parent.name.split("_", 1)[1])
        except ValueError:
            continue
        found.append((n, RoundReport.from_json(p.read_text(encoding="utf-8"))))
    return [r for _, r in sorted(found, key=lambda x: x[0])]
