"""Thinking-level preference-pair mining over CoaT sampling trees for mobile GUI agents."""
from .actions import Action, ActionKind, ParseOutcome, format_action, parse_action, parse_decision, parse_grounding
from .metrics import HashEncoder, RoundReport, diversity, sampling_accuracy, space_ratios, tree_deviation
from .pairs import LogProbQuad, PairDataset, emit_pairs, emit_sft_positives, load_pairs, tdpo_loss
from .pipeline import Pipeline, PipelineConfig, run, run_round
from .prompts import Stage, StepContext, render_prompt
from .reward import RewardConfig, leaf_value, step_match
from .sampling import SamplerConfig, SamplerGateway, make_gateway
from .simulated import SimulatedPolicyProfile
from .trajectories import Trajectory, TrajectoryStep, load_trajectories
from .tree import CoatNode, CoatTree, PreferencePair, TreeClass, build_tree, classify, extract_pairs, score_and_backprop

__version__ = "0.1.0"
