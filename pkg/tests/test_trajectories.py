import json

import pytest

from coatmine.actions import Action, ActionKind
from coatmine.synth import synth_steps, synth_trajectories
from coatmine.trajectories import (
    EvolutionLevel,
    EvolvedQA,
    TrajectoryParseError,
    TrajectoryValidationError,
    action_history,
    dump_evolved_qa,
    dump_trajectories,
    load_evolved_qa,
    load_trajectories,
)


def _write(tmp_path, records, name="data.jsonl"):
    p = tmp_path / name
    p.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n")
    return p


def _task(**over):
    rec = {
        "task_id": "t1",
        "instruction": "open settings",
        "steps": [
            {"index": 0, "screenshot": "a.png", "golden_action": {"kind": "CLICK", "box": [10, 20, 300, 90]},
             "ui_positions": [["Settings", 10, 20, 300, 90]], "ui_text": ["Settings"]},
            {"index": 1, "screenshot": "b.png", "golden_action": {"kind": "STOP"}},
        ],
        "completed": True,
    }
    rec.update(over)
    return rec


def test_load_canonical(tmp_path):
    trajs = load_trajectories(_write(tmp_path, [_task()]))
    assert len(trajs) == 1
    t = trajs[0]
    assert t.steps[0].golden_action == Action(ActionKind.CLICK, box=(10, 20, 300, 90))
    assert t.steps[0].ui_positions == (("Settings", 10, 20, 300, 90),)
    assert action_history(t, 1) == [t.steps[0].golden_action]
    with pytest.raises(IndexError):
        action_history(t, 5)


def test_round_trip(tmp_path):
    trajs = synth_trajectories(10, seed=3)
    p = tmp_path / "rt.jsonl"
    dump_trajectories(trajs, p)
    assert load_trajectories(p) == trajs


def test_bad_json_reports_line_and_task(tmp_path):
    p = _write(tmp_path, [_task(), '{"task_id": "t9", "instruction": oops}'])
    with pytest.raises(TrajectoryParseError) as ei:
        load_trajectories(p)
    assert ei.value.line == 2 and ei.value.task_id == "t9"


@pytest.mark.parametrize("mutate", [
    lambda r: r["steps"][0].pop("screenshot"),
    lambda r: r["steps"][0].update(golden_action={"kind": "CLICK", "box": [300, 20, 10, 90]}),
    lambda r: r["steps"][0].update(golden_action={"kind": "SCROLL", "direction": "sideways"}),
    lambda r: r["steps"][1].update(index=3),
    lambda r: r["steps"][1].update(golden_action={"kind": "PRESS", "button": "Back"}),
    lambda r: r.update(steps=[]),
])
def test_validation_errors(tmp_path, mutate):
    rec = _task()
    mutate(rec)
    with pytest.raises(TrajectoryValidationError):
        load_trajectories(_write(tmp_path, [rec]))


def test_missing_golden_action(tmp_path):
    rec = _task()
    del rec["steps"][0]["golden_action"]
    with pytest.raises(TrajectoryValidationError):
        load_trajectories(_write(tmp_path, [rec]))


def test_step_jsonl_converter(tmp_path):
    base = {"episode_id": "e1", "instruction": "buy milk", "image_width": 1080, "image_height": 2400}
    recs = [
        dict(base, step_id=1, image_path="s1.png", action_type="type", type_text="milk"),
        dict(base, step_id=0, image_path="s0.png", action_type="click", bbox=[108, 240, 540, 480],
             ui_elements=[{"label": "search", "bbox": [108, 240, 540, 480]}]),
        dict(base, step_id=2, image_path="s2.png", action_type="press", button="enter"),
    ]
    (t,) = load_trajectories(_write(tmp_path, recs), format="step-jsonl")
    assert [s.index for s in t.steps] == [0, 1, 2]
    assert t.steps[0].golden_action.box == (100, 100, 500, 200)
    assert t.steps[0].ui_positions == (("search", 100, 100, 500, 200),)
    assert t.steps[2].golden_action == Action.press("Enter")


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        load_trajectories(_write(tmp_path, [_task()]), format="csv")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_trajectories(tmp_path / "nope.jsonl")


def test_evolved_qa_round_trip(tmp_path):
    recs = [EvolvedQA(EvolutionLevel.II, "What does the gear do?", "It opens settings.", ("t1", 0))]
    p = tmp_path / "qa.jsonl"
    dump_evolved_qa(recs, p)
    assert load_evolved_qa(p) == recs


def test_synth_steps_exact_count():
    trajs = synth_steps(37, seed=2)
    assert sum(len(t.steps) for t in trajs) == 37
    assert len({t.task_id for t in trajs}) == len(trajs)
    for t in trajs:
        for s in t.steps:
            s.golden_action.validate()
