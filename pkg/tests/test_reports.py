# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import math

import pytest

from lexguide.lexicon.tokenizer import make_constraint
from lexguide.reports import (
    REPORT_SCHEMA,
    MalformedDump,
    analyze,
    comparison_rows,
    early_auc,
    load_trajectory_dump,
    pattern_usage,
    read_metrics_csv,
    regime_accuracy,
    structure_accuracy,
    svg_bar_chart,
    svg_line_chart,
    usage_over_iterations,
    weight_histogram,
    write_csv,
    write_trajectory_dump,
)
from tests.utils import make_trajectory


def _traj(tokens, reward=0.0, log_weight=0.0, iteration=0):
    traj = make_trajectory([2], tokens, [-1.0] * len(tokens), reward, log_weight)
    traj.iteration = iteration
    return traj


@pytest.fixture
def trajectories():
    return [
        _traj([0, 1, 3], reward=1.0, log_weight=0.0, iteration=0),
        _traj([1, 1, 3], reward=0.0, log_weight=math.log(0.5), iteration=0),
        _traj([2, 0, 1], reward=1.0, log_weight=math.log(1e-3), iteration=1),
        _traj([2, 2, 2], reward=0.0, log_weight=math.log(1e-8), iteration=1),
    ]


def test_dump_write_then_load(tmp_path, trajectories):
    path = tmp_path / "dump.jsonl"
    assert write_trajectory_dump(path, trajectories) == 4
    loaded = load_trajectory_dump(path)
    assert [t.to_dict() for t in loaded] == [t.to_dict() for t in trajectories]


def test_malformed_dump_not_json(tmp_path):
    path = tmp_path / "dump.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(MalformedDump):
        load_trajectory_dump(path)


def test_malformed_dump_missing_fields(tmp_path):
    path = tmp_path / "dump.jsonl"
    path.write_text('{"prompt_id": 0}\n')
    with pytest.raises(MalformedDump):
        load_trajectory_dump(path)


def test_early_auc():
    assert early_auc([0.0, 1.0, 0.5, 1.0], 2) == 0.5
    assert early_auc([0.2], 10) == pytest.approx(0.2)
    assert early_auc([], 5) == 0.0


def test_unit_weights_fall_in_decade_zero():
    rows = weight_histogram([_traj([0]), _traj([1], reward=1.0)])
    assert len(rows) == 1
    assert rows[0]["log10_w_low"] == 0
    assert rows[0]["regime"] == "high"
    assert rows[0]["count"] == 2
    assert rows[0]["accuracy"] == 0.5


def test_weight_histogram_decades(trajectories):
    rows = weight_histogram(trajectories)
    assert [r["log10_w_low"] for r in rows] == [-8, -3, -1, 0]
    assert [r["regime"] for r in rows] == ["low", "mid", "high", "high"]
    assert sum(r["count"] for r in rows) == len(trajectories)


def test_weight_on_the_mid_boundary_is_mid():
    rows = weight_histogram(
        [_traj([0], log_weight=math.log(0.1)), _traj([1], log_weight=math.log(0.5))]
    )
    assert [(r["log10_w_low"], r["regime"], r["count"]) for r in rows] == [
        (-1, "mid", 1),
        (-1, "high", 1),
    ]
    assert regime_accuracy([_traj([0], log_weight=math.log(0.1))])[1]["count"] == 1


def test_regime_accuracy(trajectories):
    rows = {r["regime"]: r for r in regime_accuracy(trajectories)}
    assert rows["low"]["count"] == 1
    assert rows["mid"]["count"] == 1
    assert rows["high"]["count"] == 2
    assert rows["mid"]["accuracy"] == 1.0
    assert rows["high"]["accuracy"] == 0.5


def test_regime_accuracy_without_trajectories():
    rows = regime_accuracy([])
    assert [r["count"] for r in rows] == [0, 0, 0]


def test_pattern_usage(trajectories):
    rows = pattern_usage(trajectories, {"ab": [0, 1], "dd": [3, 3]})
    assert rows[0] == {"pattern": "ab", "usage_rate": 0.5, "accuracy": 1.0}
    assert rows[1]["usage_rate"] == 0.0
    assert rows[1]["accuracy"] == 0.0


def test_usage_and_structure_accuracy(abc_vocab, trajectories):
    constraints = [make_constraint("ab", ["a b"], abc_vocab)]
    usage = usage_over_iterations(trajectories, constraints)
    assert [row["iteration"] for row in usage] == [0, 1]
    assert [row["ab"] for row in usage] == [0.5, 0.5]
    structure = structure_accuracy(trajectories, constraints)
    assert structure == [{"constraint": "ab", "count": 2, "accuracy": 1.0}]


def test_comparison_rows_relative_change():
    summaries = [
        {"baseline": "unguided", "final_eval_key_rate": 0.1},
        {"baseline": "unguided", "final_eval_key_rate": 0.3},
        {"baseline": "ctrl_r", "final_eval_key_rate": 0.5},
    ]
    rows = comparison_rows(summaries)
    assert rows[0]["key_usage_change_pct"] == pytest.approx(-50.0)
    assert rows[2]["key_usage_change_pct"] == pytest.approx(150.0)
    assert "key_usage_change_pct" not in summaries[2]


def test_comparison_rows_zero_base():
    rows = comparison_rows(
        [
            {"baseline": "unguided", "final_eval_key_rate": 0.0},
            {"baseline": "ctrl_r", "final_eval_key_rate": 0.4},
        ]
    )
    assert rows[1]["key_usage_change_pct"] == ""


def test_write_csv_schema_line(tmp_path):
    path = tmp_path / "report.csv"
    write_csv(path, [{"a": 1}, {"a": 2, "b": 3}])
    lines = path.read_text().splitlines()
    assert lines[0] == REPORT_SCHEMA
    assert lines[1] == "a,b"
    assert read_metrics_csv(path) == [{"a": "1", "b": ""}, {"a": "2", "b": "3"}]


def test_write_csv_without_rows(tmp_path):
    path = tmp_path / "report.csv"
    write_csv(path, [])
    assert path.read_text() == REPORT_SCHEMA + "\n"
    with pytest.raises(MalformedDump):
        read_metrics_csv(path)


def test_svg_charts_are_wellformed():
    bar = svg_bar_chart(["x", "y"], [1, 3], "bars")
    line = svg_line_chart({"a": [0.0, 1.0, 0.5], "b": [0.2, 0.2, 0.2]}, "lines")
    for svg in (bar, line):
        assert svg.startswith("<svg")
        assert svg.endswith("</svg>")
    assert bar.count("<rect") == 2
    assert line.count("<polyline") == 2


def test_analyze_dump(tmp_path, abc_vocab, trajectories):
    dump = tmp_path / "dump.jsonl"
    write_trajectory_dump(dump, trajectories)
    constraints = [make_constraint("ab", ["a b"], abc_vocab)]
    written = analyze(dump, tmp_path / "reports", constraints, patterns={"cc": [2, 2]})
    names = {p.name for p in written}
    assert {
        "keyphrase_usage.csv",
        "keyphrase_usage.svg",
        "structure_accuracy.csv",
        "pattern_usage.csv",
        "weight_histogram.csv",
        "weight_histogram.svg",
        "regime_accuracy.csv",
    } == names
    assert all(p.exists() for p in written)


def test_analyze_training_folder(tmp_path, trajectories):
    run = tmp_path / "run"
    run.mkdir()
    write_trajectory_dump(run / "trajectories.jsonl", trajectories)
    write_csv(
        run / "metrics.csv",
        [
            {"iteration": 0, "mean_reward": 0.5, "key_usage": 0.1},
            {"iteration": 1, "mean_reward": 0.7, "key_usage": 0.2},
        ],
    )
    written = analyze(run, tmp_path / "reports")
    names = {p.name for p in written}
    assert "training_curves.csv" in names
    assert "training_curves.svg" in names
    assert "regime_accuracy.csv" in names
    assert "keyphrase_usage.csv" not in names


def test_analyze_missing_source(tmp_path):
    with pytest.raises(MalformedDump):
        analyze(tmp_path / "nothing.jsonl", tmp_path / "reports")
