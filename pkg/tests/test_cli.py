# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

import json
from pathlib import Path

import pytest

from click.testing import CliRunner

from lexguide.cli import SEED_ENV, load_run_config, main
from lexguide.hmm.model import load_hmm
from lexguide.policy import load_policy
from lexguide.reports import load_trajectory_dump, read_metrics_csv
from tests.utils import mark_slow

CONFIGS = Path(__file__).parent.parent / "configs"
SMOKE = str(CONFIGS / "smoke.json")


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = CliRunner().invoke(
        main, ["--quiet", "train", "--config", SMOKE, "--out-dir", str(out)]
    )
    assert result.exit_code == 0, result.output
    return out


def test_load_run_config_defaults(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    config = load_run_config()
    assert config.train.beta == 0.2
    assert config.task.mode == "needle"


def test_load_run_config_file_and_overrides(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    config = load_run_config(SMOKE, {"horizon": 5, "beta": None})
    assert config.train.iterations == 3
    assert config.train.horizon == 5
    assert config.train.beta == 0.2


def test_seed_environment_variable_wins(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "17")
    assert load_run_config(SMOKE, {"seed": 3}).train.seed == 17


def test_invalid_config_exits_nonzero(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"beta": 3.0}}))
    result = runner.invoke(main, ["build-dfa", "--config", str(bad)])
    assert result.exit_code != 0
    assert "Invalid config" in result.output


def test_unknown_config_key_exits_nonzero(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"no_such_key": 1}}))
    result = runner.invoke(main, ["build-dfa", "--config", str(bad)])
    assert result.exit_code != 0


def test_oracle_check(runner):
    result = runner.invoke(
        main, ["oracle-check", "--suite", "dfa", "--instances", "10"]
    )
    assert result.exit_code == 0, result.output
    assert "dfa" in result.output
    assert "ok" in result.output


def test_build_dfa_lists_every_constraint(runner, tmp_path):
    catalog = tmp_path / "catalog.json"
    result = runner.invoke(main, ["build-dfa", "--write", str(catalog)])
    assert result.exit_code == 0, result.output
    lines = [line for line in result.output.splitlines() if "\tstates " in line]
    assert [line.split("\t")[0] for line in lines] == [
        "verification",
        "backtracking",
        "subgoal",
    ]
    assert lines[0].endswith("states 3")
    assert len(json.loads(catalog.read_text())) == 3


def test_build_dfa_reads_a_constraint_file(runner):
    result = runner.invoke(
        main, ["build-dfa", "--constraints", str(CONFIGS / "constraints.json")]
    )
    assert result.exit_code == 0, result.output
    assert result.output.count("\tstates ") == 3


def test_train_writes_the_run_folder(smoke_run):
    names = {p.name for p in smoke_run.iterdir()}
    assert {
        "hmm.pt",
        "constraints.json",
        "metrics.csv",
        "trajectories.jsonl",
        "policy_final.pt",
        "summary.json",
        "manifest.json",
    } <= names
    manifest = json.loads((smoke_run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["train"]["iterations"] == 3
    assert "summary.json" in manifest["artifacts"]
    assert load_hmm(smoke_run / "hmm.pt").num_states == 3


def test_build_dfa_with_hmm(runner, smoke_run):
    result = runner.invoke(
        main, ["build-dfa", "--config", SMOKE, "--hmm", str(smoke_run / "hmm.pt")]
    )
    assert result.exit_code == 0, result.output
    assert "log P(accept)" in result.output


def test_sample_zero_trajectories(runner, smoke_run, tmp_path):
    out = tmp_path / "dump.jsonl"
    args = ["sample", "--config", SMOKE, "--hmm", str(smoke_run / "hmm.pt")]
    result = runner.invoke(main, args + ["--n", "0", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert load_trajectory_dump(out) == []


def test_sample_guided_dump(runner, smoke_run, tmp_path):
    out = tmp_path / "dump.jsonl"
    args = [
        "sample",
        "--config",
        SMOKE,
        "--hmm",
        str(smoke_run / "hmm.pt"),
        "--policy",
        str(smoke_run / "policy_final.pt"),
    ]
    result = runner.invoke(main, args + ["--n", "6", "--out", str(out)])
    assert result.exit_code == 0, result.output
    trajectories = load_trajectory_dump(out)
    assert len(trajectories) == 6
    assert all(1 <= len(t) <= 6 for t in trajectories)


def test_analyze_run_folder(runner, smoke_run, tmp_path):
    out = tmp_path / "reports"
    result = runner.invoke(
        main,
        ["analyze", str(smoke_run), "--out", str(out), "--pattern", "loose=wait"],
    )
    assert result.exit_code == 0, result.output
    names = {p.name for p in out.iterdir()}
    assert "training_curves.csv" in names
    assert "keyphrase_usage.csv" in names
    assert "pattern_usage.csv" in names


def test_analyze_rejects_a_bad_pattern(runner, smoke_run, tmp_path):
    result = runner.invoke(
        main,
        ["analyze", str(smoke_run), "--out", str(tmp_path), "--pattern", "loose"],
    )
    assert result.exit_code != 0


def test_train_reuses_the_hmm_of_the_folder(smoke_run, tmp_path):
    out = tmp_path / "again"
    out.mkdir()
    (out / "hmm.pt").write_bytes((smoke_run / "hmm.pt").read_bytes())
    result = CliRunner().invoke(
        main,
        ["--quiet", "train", "--config", SMOKE, "--iterations", "1", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "summary.json").read_text())
    assert summary["baseline"] == "ctrl_r"


@pytest.fixture
def task_file(tmp_path):
    path = tmp_path / "task.json"
    path.write_text(json.dumps({"key_phrase": "let me check", "mode": "plain"}))
    return path


def test_load_run_config_with_a_task_file(monkeypatch, task_file):
    monkeypatch.delenv(SEED_ENV, raising=False)
    config = load_run_config(SMOKE, {}, task_path=str(task_file))
    assert config.task.key_phrase == "let me check"
    assert config.task.mode == "plain"
    assert config.train.iterations == 3


def test_build_dfa_with_a_task_file(runner, task_file):
    result = runner.invoke(main, ["build-dfa", "--task", str(task_file)])
    assert result.exit_code == 0, result.output
    first = [line for line in result.output.splitlines() if "\tstates " in line][0]
    assert first == "verification\tstates 4"


def test_invalid_task_file_exits_nonzero(runner, tmp_path):
    bad = tmp_path / "task.json"
    bad.write_text(json.dumps({"mode": "haystack"}))
    result = runner.invoke(main, ["build-dfa", "--task", str(bad)])
    assert result.exit_code != 0


def test_train_with_policy_table_flags(tmp_path):
    out = tmp_path / "run"
    args = ["--quiet", "train", "--config", SMOKE, "--iterations", "1"]
    args += ["--ctx-order", "2", "--table-size", "64", "--out-dir", str(out)]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["ctx_order"] == 2
    assert manifest["config"]["train"]["table_size"] == 64
    policy = load_policy(out / "policy_final.pt")
    assert (policy.ctx_order, policy.table_size) == (2, 64)


def test_distill_hmm_on_a_corpus_file(runner, tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("a b wait verify ANSWER 1\n\nc wait 2 d\nlet me check 0\n")
    out = tmp_path / "hmm.pt"
    args = ["distill-hmm", "--config", SMOKE, "--corpus", str(corpus)]
    result = runner.invoke(main, args + ["--states", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "iteration 0\tlog-likelihood" in result.output
    assert load_hmm(out).num_states == 2


def test_distill_hmm_rejects_unknown_pieces(runner, tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("a b zebra\n")
    args = ["distill-hmm", "--corpus", str(corpus), "--out", str(tmp_path / "h.pt")]
    result = runner.invoke(main, args)
    assert result.exit_code != 0
    assert not (tmp_path / "h.pt").exists()


@mark_slow
def test_compare_reports_the_baselines_and_the_power_sweep(monkeypatch, tmp_path):
    monkeypatch.delenv(SEED_ENV, raising=False)
    out = tmp_path / "compare"
    args = ["--quiet", "compare", "--config", SMOKE, "--seeds", "1"]
    args += ["--iterations", "1", "--out-dir", str(out)]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 0, result.output
    rows = read_metrics_csv(out / "comparison.csv")
    assert [r["run"] for r in rows] == [
        "unguided",
        "reward_shaping",
        "ctrl_r_beta0",
        "ctrl_r_beta0.2",
        "ctrl_r_beta1",
    ]
    assert [r["baseline"] for r in rows] == [
        "unguided",
        "reward_shaping",
        "ctrl_r",
        "ctrl_r",
        "ctrl_r",
    ]
    assert [float(r["beta"]) for r in rows[2:]] == [0.0, 0.2, 1.0]
    assert all("key_usage_change_pct" in r for r in rows)
    assert all(r["final_eval_reward"] != "" for r in rows)
    assert (out / "hmm_seed0.pt").exists()
    assert (out / "ctrl_r_beta1_seed0" / "metrics.csv").exists()
