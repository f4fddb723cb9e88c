"""Command-line entry point: ``coatmine {mine,eval,report,synth}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .evaluate import eval_files, format_table
from .pipeline import Pipeline, PipelineAbort, PipelineConfig, load_reports
from .sampling import CacheMissError
from .synth import synth_trajectories
from .trajectories import DatasetError, dump_trajectories


def _fmt_report(r) -> str:
    swap = f" (was {r.previous_model_id})" if r.model_swapped else ""
    counts = ", ".join(f"{k}={v}" for k, v in r.pair_counts.items()) or "none"
    return "\n".join([
        f"round {r.round}  model {r.model_id}{swap}  config {r.config_digest}",
        f"  steps {r.steps} (failed {r.failed_steps})  pairs {r.pairs}  sft {r.sft_records}",
        f"  Acc_S {r.acc_s:.4f}  Div_R {r.div_r:.4f}",
        f"  alpha {r.ratio_alpha:.3f}  beta {r.ratio_beta:.3f}  gamma {r.ratio_gamma:.3f}",
        f"  potential correct space {r.potential_correct_space:.3f}  valid sampling space {r.valid_sampling_space:.3f}",
        f"  pairs by kind: {counts}",
    ])


def cmd_mine(args) -> int:
    cfg = PipelineConfig.from_yaml(args.config)
    if args.workers:
        cfg.workers = args.workers
    pipe = Pipeline(cfg)
    rounds = [args.round] if args.round else None
    try:
        reports = pipe.run(resume=args.resume, rounds=rounds)
    except (PipelineAbort, CacheMissError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for r in reports:
        print(_fmt_report(r))
    return 0


def cmd_eval(args) -> int:
    res = eval_files(args.pred, args.gold)
    print(format_table(res))
    return 0


def cmd_report(args) -> int:
    reports = load_reports(args.dir)
    if not reports:
        print(f"no rounds found in {args.dir}")
        return 1
    for r in reports:
        print(_fmt_report(r))
    return 0


def cmd_synth(args) -> int:
    trajs = synth_trajectories(args.tasks, seed=args.seed)
    n = dump_trajectories(trajs, args.out)
    print(f"wrote {n} trajectories ({sum(len(t.steps) for t in trajs)} steps) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coatmine", description="Mine thinking-level preference pairs from CoaT trees.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mine", help="run mining rounds from a YAML config")
    m.add_argument("--config", required=True, type=Path)
    m.add_argument("--round", type=int, help="run only this round")
    m.add_argument("--resume", action="store_true", help="continue from checkpoints and cached samples")
    m.add_argument("--workers", type=int, help="override the worker count")
    m.set_defaults(func=cmd_mine)

    e = sub.add_parser("eval", help="type/match accuracy of predictions against golden trajectories")
    e.add_argument("--pred", required=True, type=Path)
    e.add_argument("--gold", required=True, type=Path)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print the round reports of a run directory")
    r.add_argument("--dir", required=True, type=Path)
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic trajectory dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--tasks", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, DatasetError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
