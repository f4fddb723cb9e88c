"""Acceptance gate: ten criteria, each reporting one PASS/FAIL line in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import io
import json
import math
import os
import random
import time
from collections import Counter
from contextlib import contextmanager, redirect_stdout

import pytest

from coatmine.actions import BUTTONS, DIRECTIONS, Action, ActionKind, ParseOutcome, action_to_dict
from coatmine.cli import main as cli_main
from coatmine.metrics import HashEncoder, diversity, sampling_accuracy
from coatmine.pairs import LogProbQuad, load_pairs, pair_problems, tdpo_loss
from coatmine.pipeline import Pipeline, PipelineConfig
from coatmine.prompts import STAGES
from coatmine.reward import RewardConfig, leaf_value
from coatmine.sampling import SamplerConfig
from coatmine.simulated import SimulatedPolicyProfile
from coatmine.synth import synth_steps
from coatmine.trajectories import Trajectory, TrajectoryStep, dump_trajectories
from coatmine.tree import CoatNode, CoatTree, PairKind, TreeClass, backpropagate, classify, extract_pairs, load_trees

RESULTS: dict = {}

MIXED = dict(p_exact=0.5, p_type_only=0.3, p_wrong_type=0.15, p_malformed=0.05)


@contextmanager
def criterion(n: int, title: str):
    detail = {}
    try:
        yield detail
    except BaseException as e:
        RESULTS[n] = (False, title, f"{type(e).__name__}: {e}"[:200])
        raise
    RESULTS[n] = (True, title, detail.get("msg", ""))


# ---------------------------------------------------------------- 1 reward

def _oracle_distance(p, gold):
    x, y = min(max(p[0], 0), 1000), min(max(p[1], 0), 1000)
    if gold.box is not None:
        x1, y1, x2, y2 = gold.box
        if x1 <= x <= x2 and y1 <= y <= y2:
            return 0.0
        gx, gy = int((x1 + x2) / 2), int((y1 + y2) / 2)
    else:
        gx, gy = gold.point
    return min(1.0, math.sqrt((x - gx) ** 2 + (y - gy) ** 2) / (1000 * math.sqrt(2)))


def _oracle_f1(a, b):
    norm = lambda s: [w.strip(".,!?;:'\"") for w in s.lower().split() if w.strip(".,!?;:'\"")]
    pa, pb = norm(a), norm(b)
    if not pa and not pb:
        return 1.0
    common = Counter(pa) & Counter(pb)
    same = sum(common.values())
    if same == 0:
        return 0.0
    prec, rec = same / len(pa), same / len(pb)
    return 2 * prec * rec / (prec + rec)


def _oracle_value(pred: Action, fmt: bool, gold: Action, vt: float, vf_full: float) -> float:
    """The leaf rule written out case by case."""
    if pred is None or pred.kind != gold.kind:
        return 0.0
    k = gold.kind
    vf = vf_full if fmt else 0.0
    if k == ActionKind.CLICK:
        p = pred.point if pred.point is not None else (
            (int((pred.box[0] + pred.box[2]) / 2), int((pred.box[1] + pred.box[3]) / 2)))
        if gold.box is not None and gold.box[0] <= p[0] <= gold.box[2] and gold.box[1] <= p[1] <= gold.box[3]:
            return 1.0
        if gold.point is not None and tuple(p) == tuple(gold.point):
            return 1.0
        d = _oracle_distance(p, gold)
        score_match = vf + 1 * (1 - d) - (vt + vf) * d
        return min(1.0, max(0.0, vt + score_match))
    if k == ActionKind.TYPE:
        if pred.text == gold.text:
            return 1.0
        f1 = _oracle_f1(pred.text, gold.text)
        return 1.0 if f1 == 1.0 else vt + vf + (1 - vt - vf) * f1
    if k == ActionKind.SCROLL:
        return 1.0 if pred.direction == gold.direction else vt + vf
    if k == ActionKind.PRESS:
        return 1.0 if pred.button == gold.button else vt + vf
    return 1.0


_WORDS = ["milk", "eggs", "red", "shoes", "coffee", "near", "me", "jazz", "Milk", "shoes!"]


def _rand_action(rng, kind=None):
    kind = kind or rng.choice(list(ActionKind))
    if kind is ActionKind.CLICK:
        if rng.random() < 0.5:
            return Action(kind, point=(rng.randint(-20, 1020), rng.randint(-20, 1020)))
        x1, y1 = rng.randint(0, 900), rng.randint(0, 900)
        return Action(kind, box=(x1, y1, x1 + rng.randint(0, 100), y1 + rng.randint(0, 100)))
    if kind is ActionKind.TYPE:
        return Action.type_text(" ".join(rng.choice(_WORDS) for _ in range(rng.randint(0, 4))))
    if kind is ActionKind.SCROLL:
        return Action.scroll(rng.choice(DIRECTIONS))
    if kind is ActionKind.PRESS:
        return Action.press(rng.choice(BUTTONS))
    return Action.stop()


def _rand_gold(rng):
    while True:
        g = _rand_action(rng)
        if g.kind is ActionKind.TYPE and not g.text:
            continue
        if g.kind is ActionKind.CLICK and g.point is not None and not all(0 <= v <= 1000 for v in g.point):
            continue
        return g


def test_c1_reward_algebra():
    with criterion(1, "reward algebra vs case-by-case oracle, 10,000 cases, 1e-12, < 5 s") as r:
        rng = random.Random(2024)
        cfgs = [RewardConfig(), RewardConfig(v_type=0.05, v_format=0.2), RewardConfig(v_type=0.3, v_format=0.1)]
        start = time.perf_counter()
        worst = 0.0
        n = 10_000
        for i in range(n):
            cfg = cfgs[i % len(cfgs)]
            gold = _rand_gold(rng)
            # bias toward kind matches so the smooth branches get most of the cases
            pred = _rand_action(rng, gold.kind if rng.random() < 0.8 else None)
            fmt = rng.random() < 0.7
            got = leaf_value(ParseOutcome(pred, fmt, ""), gold, cfg).value
            want = _oracle_value(pred, fmt, gold, cfg.v_type, cfg.v_format)
            worst = max(worst, abs(got - want))
        elapsed = time.perf_counter() - start
        # closed-form endpoints
        vt, vf = 0.1, 0.1
        t_gold = Action.type_text("red shoes")
        assert leaf_value(ParseOutcome(Action.type_text("blue hat"), True, ""), t_gold).value == pytest.approx(vt + vf, abs=1e-12)
        assert leaf_value(ParseOutcome(Action.type_text("Shoes red"), True, ""), t_gold).value == 1.0
        assert leaf_value(ParseOutcome(Action.scroll("up"), True, ""), t_gold).value == 0.0
        c_gold = Action(ActionKind.CLICK, point=(100, 100))
        for _ in range(500):
            p = (rng.randint(0, 1000), rng.randint(0, 1000))
            if p == (100, 100):
                continue
            d = min(1.0, math.hypot(p[0] - 100, p[1] - 100) / (1000 * math.sqrt(2)))
            closed = min(1.0, max(0.0, (1 + vt + vf) * (1 - d)))
            got = leaf_value(ParseOutcome(Action(ActionKind.CLICK, point=p), True, ""), c_gold).value
            worst = max(worst, abs(got - closed))
        r["msg"] = f"max |diff| {worst:.1e}, {elapsed:.2f} s"
        assert worst <= 1e-12 and elapsed < 5.0


# ---------------------------------------------------------------- 2 backprop

def _random_valued_tree(rng, K, c, depth=4):
    def node(level):
        n = CoatNode(STAGES[level], f"n{rng.random()}")
        if level + 1 < depth:
            n.children = [node(level + 1) for _ in range(K)]
        else:
            n.value = rng.random() if rng.random() < 0.7 else rng.choice([0.0, 1.0])
        return n

    return CoatTree("r", ("t", 0), K, c, [node(0) for _ in range(K)])


def _postorder_oracle(tree, c):
    """Iterative post-order recomputation, independent of the library's recursion."""
    expect = {}
    stack = [(r, False) for r in tree.roots]
    while stack:
        n, seen = stack.pop()
        if not n.children:
            expect[id(n)] = n.value
        elif seen:
            expect[id(n)] = c * (sum(expect[id(ch)] for ch in n.children) / len(n.children))
        else:
            stack.append((n, True))
            stack.extend((ch, False) for ch in n.children)
    return expect


def test_c2_backprop_oracle():
    with criterion(2, "backprop equals c * mean(children) on 1,000 random trees, 1e-12") as r:
        rng = random.Random(7)
        worst = 0.0
        for i in range(1000):
            K = (2, 3, 4)[i % 3]
            c = (0.9, 1.0)[(i // 3) % 2]
            tree = _random_valued_tree(rng, K, c)
            backpropagate(tree, c)
            expect = _postorder_oracle(tree, c)
            for _, n in tree.nodes():
                worst = max(worst, abs(n.value - expect[id(n)]))
        r["msg"] = f"max |diff| {worst:.1e}"
        assert worst <= 1e-12


# ---------------------------------------------------------------- 3 1/K drop

def test_c3_one_over_k_drop():
    with criterion(3, "one of three perfect leaves flipped drops the parent by c/3") as r:
        drops = {}
        for c in (1.0, 0.9):
            kids = [CoatNode(STAGES[1], f"t{i}", value=1.0) for i in range(3)]
            tree = CoatTree("x", ("t", 0), 3, c, [CoatNode(STAGES[0], "d", kids)])
            backpropagate(tree)
            before = tree.roots[0].value
            kids[0].value = 0.0
            backpropagate(tree)
            drops[c] = before - tree.roots[0].value
        r["msg"] = f"drop at c=1: {drops[1.0]!r}"
        assert abs(drops[1.0] - 1 / 3) <= 1e-12
        assert abs(drops[0.9] - 0.9 / 3) <= 1e-12


# ---------------------------------------------------------------- 4 classification

def _brute_class(tree):
    vals = []
    stack = list(tree.roots)
    while stack:
        n = stack.pop()
        if n.children:
            stack.extend(n.children)
        else:
            vals.append(n.value)
    ones = [v == 1.0 for v in vals]
    if all(ones):
        return TreeClass.ALPHA
    if not any(ones):
        return TreeClass.GAMMA
    return TreeClass.BETA


def test_c4_classification_partition():
    with criterion(4, "alpha/beta/gamma partition agrees with brute force on 1,000 trees") as r:
        rng = random.Random(99)
        agree = 0
        counts = Counter()
        for i in range(1000):
            K = rng.choice([2, 3])
            depth = rng.choice([2, 3, 4])
            # mixtures chosen so all three classes occur often
            pool = rng.choice([[1.0], [0.0, 0.4, 0.9], [0.0, 1.0, 1.0, 1.0], [1.0] * 30 + [0.5]])
            tree = _random_valued_tree(rng, K, 1.0, depth)
            for leaf in tree.leaves():
                leaf.value = rng.choice(pool)
            backpropagate(tree)
            cls = classify(tree)
            counts[cls] += 1
            agree += cls is _brute_class(tree)
        r["msg"] = f"agreement {agree}/1000, counts " + ", ".join(f"{k.value}={v}" for k, v in sorted(counts.items()))
        assert agree == 1000 and sum(counts.values()) == 1000 and len(counts) == 3


# ---------------------------------------------------------------- 5 pair oracle

GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def _enumerated_trees():
    K = 2
    for a in GRID:
        for b in GRID:
            for c in GRID:
                for d in GRID:
                    leaves = [a, b, c, d]
                    roots = []
                    for r in range(K):
                        kids = [CoatNode(STAGES[1], f"thought-{r}-{j}", value=leaves[r * K + j]) for j in range(K)]
                        roots.append(CoatNode(STAGES[0], f"desc-{r}", kids))
                    yield CoatTree(f"e{a}{b}{c}{d}", ("t", 0), K, 1.0, roots)


def _pair_oracle(tree):
    out = set()
    groups = [tree.roots] + [r.children for r in tree.roots]
    for g in groups:
        for x in g:
            for y in g:
                if x is not y and x.value - y.value > 1 / tree.K:
                    out.add((x.stage, x.text, y.text))
    return out


def test_c5_pair_extraction_oracle():
    with criterion(5, "K=2 depth-2 beta trees: extracted pairs == brute-force gap > 1/K set") as r:
        checked = 0
        for tree in _enumerated_trees():
            backpropagate(tree)
            cls = classify(tree)
            oracle = _pair_oracle(tree)
            if cls is TreeClass.ALPHA:
                assert extract_pairs(tree, cap=None) == [] and oracle == set()
                continue
            if cls is TreeClass.GAMMA:
                # gamma trees pair against the golden action instead, checked elsewhere
                continue
            got = {(p.stage, p.chosen, p.rejected) for p in extract_pairs(tree, cap=None)}
            assert got == oracle, tree.tree_id
            checked += 1
        r["msg"] = f"{checked} beta trees of 625 enumerated, all equal"
        assert checked > 0


# ---------------------------------------------------------------- 6 loss

def test_c6_tdpo_loss():
    with criterion(6, "T-DPO loss: ln 2 at zero margin, monotone, softplus == naive") as r:
        assert abs(tdpo_loss(LogProbQuad(-2.5, -2.5, -2.5, -2.5), 0.1) - math.log(2)) <= 1e-12
        rng = random.Random(6)
        h = 1e-6
        for _ in range(100):
            q = [rng.uniform(-40, 0) for _ in range(4)]
            beta = rng.choice([0.05, 0.1, 0.5])
            base = tdpo_loss(LogProbQuad(*q), beta)
            up = lambda i: tdpo_loss(LogProbQuad(*[v + h if j == i else v for j, v in enumerate(q)]), beta)
            assert up(0) < base  # policy chosen up: loss down
            assert up(2) > base  # policy rejected up: loss up
            assert up(1) > base and up(3) < base
        worst = 0.0
        for _ in range(2000):
            m = rng.uniform(-300, 300)
            beta = rng.uniform(0.01, 2.0)
            z = beta * m
            try:
                naive = -math.log(1.0 / (1.0 + math.exp(-z)))
            except (OverflowError, ValueError):
                continue
            if not math.isfinite(naive):
                continue
            worst = max(worst, abs(tdpo_loss(LogProbQuad(m, 0.0, 0.0, 0.0), beta) - naive))
        r["msg"] = f"max |softplus - naive| {worst:.1e}"
        assert worst <= 1e-9


# ---------------------------------------------------------------- 7 end-to-end

# Frozen from the 10,000-step reference run with the mixed profile (see test_c7_reference_recompute).
REFERENCE = {"ratio_alpha": 0.0011, "ratio_beta": 0.9989, "ratio_gamma": 0.0}
REFERENCE_STEPS = 10_000


def _mixed_run(tmp, steps, seed, workers=4):
    trajs = synth_steps(steps, seed=seed)
    cfg = PipelineConfig(output_dir=str(tmp), seed=seed, K=3, workers=workers, checkpoint_every=64,
                         simulated=SimulatedPolicyProfile(seed=seed, **MIXED))
    pipe = Pipeline(cfg, trajectories=trajs)
    ds, rep = pipe.run_round(1)
    return pipe, cfg, ds, rep


def test_c7_simulated_mining(tmp_path):
    with criterion(7, "200-step simulated mining: < 2 min, ratios within 0.05 of reference, valid pairs") as r:
        start = time.perf_counter()
        pipe, cfg, ds, rep = _mixed_run(tmp_path, 200, seed=0)
        elapsed = time.perf_counter() - start
        bad = [p for p in ds if pair_problems(p, 3, pipe.gold[p.step_ref])]
        beta_gap_ok = all(p.chosen_value - p.rejected_value > 1 / 3 for p in ds if p.kind is PairKind.BETA)
        devs = {k: abs(getattr(rep, k) - REFERENCE[k]) for k in REFERENCE}
        r["msg"] = (f"{elapsed:.1f} s, ratios a/b/g {rep.ratio_alpha:.3f}/{rep.ratio_beta:.3f}/{rep.ratio_gamma:.3f} "
                    f"vs ref {REFERENCE['ratio_alpha']:.3f}/{REFERENCE['ratio_beta']:.3f}/{REFERENCE['ratio_gamma']:.3f}, "
                    f"{len(ds)} pairs, {len(bad)} invalid")
        assert elapsed < 120
        assert rep.steps == 200
        assert max(devs.values()) <= 0.05
        assert not bad and beta_gap_ok


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("COATMINE_SLOW"), reason="set COATMINE_SLOW=1 to recompute the 10k reference")
def test_c7_reference_recompute(tmp_path):
    _, _, _, rep = _mixed_run(tmp_path, REFERENCE_STEPS, seed=12345, workers=8)
    for k, v in REFERENCE.items():
        assert abs(getattr(rep, k) - v) <= 1e-12


# ---------------------------------------------------------------- 8 determinism

def test_c8_determinism(tmp_path):
    with criterion(8, "same seed + replay cache: byte-identical pairs and reports") as r:
        trajs = synth_steps(60, seed=3)
        cache = tmp_path / "cache.jsonl"
        prof = SimulatedPolicyProfile(seed=3, **MIXED)
        runs = {
            "record": PipelineConfig(output_dir=str(tmp_path / "a"), seed=3, simulated=prof, workers=4,
                                     sampler=SamplerConfig(cache=str(cache))),
            "replay": PipelineConfig(output_dir=str(tmp_path / "b"), seed=3, simulated=prof, workers=2,
                                     sampler=SamplerConfig(backend="replay", cache=str(cache))),
            "fresh": PipelineConfig(output_dir=str(tmp_path / "c"), seed=3, simulated=prof, workers=1),
        }
        blobs = {}
        for name, cfg in runs.items():
            Pipeline(cfg, trajectories=trajs).run()
            rdir = cfg.round_dir(1)
            blobs[name] = ((rdir / "pairs.jsonl").read_bytes(), (rdir / "report.json").read_bytes())
        n_pairs = len(load_pairs(runs["record"].round_dir(1) / "pairs.jsonl"))
        r["msg"] = f"{n_pairs} pairs; record == replay == fresh"
        assert blobs["record"] == blobs["replay"] == blobs["fresh"]


# ---------------------------------------------------------------- 9 metrics

def test_c9_metric_sanity(tmp_path):
    with criterion(9, "Acc_S counting oracle; Div_R = 0 on identical trees; Div_R rises with noise") as r:
        trajs = synth_steps(200, seed=9)
        divs = {}
        for noise in (0.0, 0.5):
            cfg = PipelineConfig(output_dir=str(tmp_path / f"n{noise}"), seed=9,
                                 simulated=SimulatedPolicyProfile(seed=9, description_noise=noise, **MIXED))
            Pipeline(cfg, trajectories=trajs).run_round(1)
            trees = load_trees(cfg.round_dir(1) / "trees.jsonl")
            assert len(trees) == 200
            divs[noise] = diversity(trees, HashEncoder())
            leaves = [n.value for t in trees for _, n in t.nodes() if not n.children]
            counted = sum(1 for v in leaves if v == 1.0) / len(leaves)
            assert sampling_accuracy(trees) == counted
        ident = load_trees(tmp_path / "n0.0" / "round_1" / "trees.jsonl")[:20]
        for t in ident:
            for _, n in t.nodes():
                n.text = "identical output"
        zero = diversity(ident)
        r["msg"] = f"Div_R {divs[0.0]:.4f} -> {divs[0.5]:.4f} (noise 0 -> 0.5); identical trees {zero}"
        assert zero == 0.0
        assert divs[0.5] > divs[0.0]


# ---------------------------------------------------------------- 10 eval

def test_c10_eval_command(tmp_path):
    with criterion(10, "eval prints 80.0% CLICK match on an exactly-80% predictions file") as r:
        steps = []
        for i in range(10):
            steps.append(TrajectoryStep(i, f"s{i}.png", Action(ActionKind.CLICK, box=(100, 100, 200, 200))))
        steps.append(TrajectoryStep(10, "s10.png", Action.scroll("down")))
        steps.append(TrajectoryStep(11, "s11.png", Action.type_text("hello world")))
        gold = [Trajectory("g", "do things", tuple(steps))]
        dump_trajectories(gold, tmp_path / "gold.jsonl")
        with open(tmp_path / "pred.jsonl", "w") as fh:
            for s in steps:
                a = s.golden_action
                if a.kind is ActionKind.CLICK and s.index >= 8:
                    a = Action(ActionKind.CLICK, point=(900, 900))
                fh.write(json.dumps({"task_id": "g", "index": s.index, "action": action_to_dict(a)}) + "\n")
        buf = io.StringIO()
        with redirect_stdout(buf):
            code = cli_main(["eval", "--pred", str(tmp_path / "pred.jsonl"), "--gold", str(tmp_path / "gold.jsonl")])
        out = buf.getvalue()
        lines = out.splitlines()
        cols = lines[0].split()
        match = dict(zip(cols, next(ln for ln in lines if ln.startswith("Match")).split()[1:]))
        typ = dict(zip(cols, next(ln for ln in lines if ln.startswith("Type")).split()[1:]))
        r["msg"] = f"CLICK match {match['CLICK']}, CLICK type {typ['CLICK']}"
        assert code == 0 and match["CLICK"] == "80.0%" and typ["CLICK"] == "100.0%"
