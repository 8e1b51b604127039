"""Analysis reports built from trajectory dumps and metrics files:
csv tables plus small hand written svg plots.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "MalformedDump",
    "REPORT_SCHEMA",
    "load_trajectory_dump",
    "write_trajectory_dump",
    "read_metrics_csv",
    "early_auc",
    "usage_over_iterations",
    "pattern_usage",
    "weight_histogram",
    "regime_accuracy",
    "structure_accuracy",
    "comparison_rows",
    "write_csv",
    "svg_bar_chart",
    "svg_line_chart",
    "analyze",
]

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from lexguide.lexicon.tokenizer import KeyphraseConstraint
from lexguide.metrics import REGIME_NAMES, WeightRegimeHistogram, regime_of
from lexguide.rollout import GuidedTrajectory
from lexguide.toyworld import contains_pattern
from lexguide.utils import read_jsonl, write_jsonl

REPORT_SCHEMA = "# lexguide report v1"
_TRAJECTORY_KEYS = {"prompt_id", "constraint_id", "prompt", "tokens", "log_weight"}


class MalformedDump(ValueError):
    pass


def load_trajectory_dump(path: Union[str, Path]) -> List[GuidedTrajectory]:
    """Read a json-lines trajectory dump.

    Raises:
        MalformedDump: Some line is not json or misses trajectory fields.
    """
    trajectories = []
    try:
        for record in read_jsonl(path):
            if not isinstance(record, dict) or not _TRAJECTORY_KEYS <= set(record):
                raise MalformedDump(f"{path} has a record that is not a trajectory")
            trajectories.append(GuidedTrajectory.from_dict(record))
    except (json.JSONDecodeError, TypeError) as err:
        raise MalformedDump(f"{path} is not a valid trajectory dump") from err
    return trajectories


def write_trajectory_dump(
    path: Union[str, Path], trajectories: Sequence[GuidedTrajectory]
) -> int:
    return write_jsonl(path, (t.to_dict() for t in trajectories))


def read_metrics_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    """Read a metrics or report csv, skipping its schema comment line.

    Raises:
        MalformedDump: The file has no header.
    """
    with open(path, "r", encoding="utf8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    if not lines:
        raise MalformedDump(f"{path} has no csv header")
    return list(csv.DictReader(lines))


def early_auc(rewards: Sequence[float], iterations: int) -> float:
    """Normalized area under the mean reward curve of the first iterations,
    the mean of the first `iterations` values. 0.0 for an empty curve.
    """
    head = list(rewards[:iterations])
    if not head:
        return 0.0
    return math.fsum(head) / len(head)


def _is_correct(traj: GuidedTrajectory) -> bool:
    return traj.reward > 0


def _accuracy(trajectories: Sequence[GuidedTrajectory]) -> float:
    if not trajectories:
        return 0.0
    return sum(_is_correct(t) for t in trajectories) / len(trajectories)


def usage_over_iterations(
    trajectories: Sequence[GuidedTrajectory],
    constraints: Sequence[KeyphraseConstraint],
) -> List[Dict[str, Any]]:
    """Strict usage rate of every constraint's keyphrases per iteration."""
    by_iteration = defaultdict(list)
    for traj in trajectories:
        by_iteration[traj.iteration].append(traj)
    rows = []
    for iteration in sorted(by_iteration):
        batch = by_iteration[iteration]
        row = {"iteration": iteration, "trajectories": len(batch)}
        for constraint in constraints:
            hits = sum(constraint.is_satisfied_by(t.tokens) for t in batch)
            row[constraint.id] = hits / len(batch)
        rows.append(row)
    return rows


def pattern_usage(
    trajectories: Sequence[GuidedTrajectory], patterns: Mapping[str, Sequence[int]]
) -> List[Dict[str, Any]]:
    """Usage rate of user supplied token patterns and the accuracy of the
    trajectories that use them.
    """
    rows = []
    total = max(len(trajectories), 1)
    for name, pattern in patterns.items():
        hits = [t for t in trajectories if contains_pattern(t.tokens, pattern)]
        rows.append(
            {
                "pattern": name,
                "usage_rate": len(hits) / total,
                "accuracy": _accuracy(hits),
            }
        )
    return rows


def weight_histogram(trajectories: Sequence[GuidedTrajectory]) -> List[Dict[str, Any]]:
    """Trajectory counts per decade of the importance weight, with the
    regime and the mean accuracy of its trajectories. Decade d holds the
    weights in [10^d, 10^(d+1)), so unit weights fall in decade 0. A decade
    that straddles a regime boundary gets one row per regime, so w = 0.1 is
    counted as mid next to the high weights of decade -1.
    """
    bins = defaultdict(list)
    for traj in trajectories:
        decade = math.floor(traj.log_weight / math.log(10) + 1e-12)
        bins[decade, regime_of(traj.log_weight)].append(traj)
    rows = []
    for decade, regime in sorted(bins):
        members = bins[decade, regime]
        rows.append(
            {
                "log10_w_low": decade,
                "log10_w_high": decade + 1,
                "regime": REGIME_NAMES[regime],
                "count": len(members),
                "accuracy": _accuracy(members),
            }
        )
    return rows


def regime_accuracy(trajectories: Sequence[GuidedTrajectory]) -> List[Dict[str, Any]]:
    """Accuracy against weight: one row per regime, split at 1e-6 and 1e-1."""
    histogram = WeightRegimeHistogram()
    if trajectories:
        histogram.update(
            [t.log_weight for t in trajectories], [t.reward for t in trajectories]
        )
    counts = histogram.compute().tolist()
    accuracy = histogram.accuracy().tolist()
    mean_reward = histogram.mean_reward().tolist()
    return [
        {
            "regime": name,
            "count": int(counts[i]),
            "accuracy": accuracy[i],
            "mean_reward": mean_reward[i],
        }
        for i, name in enumerate(REGIME_NAMES)
    ]


def structure_accuracy(
    trajectories: Sequence[GuidedTrajectory],
    constraints: Sequence[KeyphraseConstraint],
) -> List[Dict[str, Any]]:
    """Mean accuracy of the trajectories exhibiting each constraint."""
    rows = []
    for constraint in constraints:
        hits = [t for t in trajectories if constraint.is_satisfied_by(t.tokens)]
        rows.append(
            {
                "constraint": constraint.id,
                "count": len(hits),
                "accuracy": _accuracy(hits),
            }
        )
    return rows


def comparison_rows(summaries: Sequence[Mapping[str, Any]]) -> List[Dict[str, Any]]:
    """Add the relative change in key phrase usage of every run against the
    mean usage of the unguided runs. Left empty when that mean is zero.
    """
    base = [s["final_eval_key_rate"] for s in summaries if s["baseline"] == "unguided"]
    base_rate = math.fsum(base) / len(base) if base else 0.0
    rows = []
    for summary in summaries:
        row = dict(summary)
        if base_rate > 0:
            change = 100.0 * (summary["final_eval_key_rate"] - base_rate) / base_rate
            row["key_usage_change_pct"] = change
        else:
            row["key_usage_change_pct"] = ""
        rows.append(row)
    return rows


def write_csv(path: Union[str, Path], rows: Sequence[Mapping[str, Any]]):
    """Write rows under the report schema comment line."""
    with open(path, "w", encoding="utf8", newline="") as f:
        f.write(REPORT_SCHEMA + "\n")
        if not rows:
            return
        columns = list(rows[0].keys())
        for row in rows[1:]:
            columns += [k for k in row if k not in columns]
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


_WIDTH, _HEIGHT, _MARGIN = 480, 320, 40


def _svg(body: List[str], title: str) -> str:
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{_WIDTH}" height="{_HEIGHT}">',
            f'<text x="{_WIDTH // 2}" y="20" text-anchor="middle">{title}</text>',
            f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - _MARGIN}" '
            f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
            f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
            f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
            *body,
            "</svg>",
        ]
    )


def svg_bar_chart(labels: Sequence[str], values: Sequence[float], title: str) -> str:
    """Bar chart with one labelled bar per value."""
    top = max([v for v in values] + [1e-12])
    span = _WIDTH - 2 * _MARGIN
    width = span / max(len(values), 1)
    body = []
    for i, (label, value) in enumerate(zip(labels, values)):
        height = (_HEIGHT - 2 * _MARGIN) * value / top
        x = _MARGIN + i * width
        y = _HEIGHT - _MARGIN - height
        body.append(
            f'<rect x="{x + 2:.1f}" y="{y:.1f}" width="{width - 4:.1f}" '
            f'height="{height:.1f}" fill="steelblue"/>'
        )
        body.append(
            f'<text x="{x + width / 2:.1f}" y="{_HEIGHT - _MARGIN + 15}" '
            f'text-anchor="middle" font-size="10">{label}</text>'
        )
    return _svg(body, title)


def svg_line_chart(series: Mapping[str, Sequence[float]], title: str) -> str:
    """Line chart of several series sharing the x axis (the point index)."""
    colors = ["steelblue", "darkorange", "seagreen", "crimson", "purple", "gray"]
    values = [v for s in series.values() for v in s]
    low, high = (min(values), max(values)) if values else (0.0, 1.0)
    if high - low < 1e-12:
        low, high = low - 0.5, high + 0.5
    longest = max([len(s) for s in series.values()] + [2])
    body = []
    for k, (name, points) in enumerate(series.items()):
        coords = []
        for i, v in enumerate(points):
            x = _MARGIN + (_WIDTH - 2 * _MARGIN) * i / (longest - 1)
            y = _HEIGHT - _MARGIN - (_HEIGHT - 2 * _MARGIN) * (v - low) / (high - low)
            coords.append(f"{x:.1f},{y:.1f}")
        color = colors[k % len(colors)]
        body.append(
            f'<polyline points="{" ".join(coords)}" fill="none" stroke="{color}"/>'
        )
        body.append(
            f'<text x="{_WIDTH - _MARGIN}" y="{_MARGIN + 14 * k}" text-anchor="end" '
            f'font-size="10" fill="{color}">{name}</text>'
        )
    return _svg(body, title)


def analyze(
    source: Union[str, Path],
    out_dir: Union[str, Path],
    constraints: Sequence[KeyphraseConstraint] = (),
    patterns: Optional[Mapping[str, Sequence[int]]] = None,
) -> List[Path]:
    """Build every report derivable from a trajectory dump, or from a
    training output folder (its metrics csv and trajectory dump).

    Args:
        source : Dump file or training output folder
        out_dir : Folder receiving the reports
        constraints : Constraints whose keyphrase usage is reported
        patterns : Extra token patterns by name, for the usage counter

    Raises:
        MalformedDump: The inputs cannot be parsed.

    Returns:
        Written files
    """
    source, out_dir = Path(source), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, rows, svg: Optional[str] = None):
        write_csv(out_dir / f"{name}.csv", rows)
        written.append(out_dir / f"{name}.csv")
        if svg is not None:
            (out_dir / f"{name}.svg").write_text(svg)
            written.append(out_dir / f"{name}.svg")

    dump = source
    if source.is_dir():
        metrics_path = source / "metrics.csv"
        if metrics_path.exists():
            metrics = read_metrics_csv(metrics_path)
            try:
                curves = {
                    "mean_reward": [float(r["mean_reward"]) for r in metrics],
                    "key_usage": [float(r["key_usage"]) for r in metrics],
                }
            except (KeyError, ValueError) as err:
                raise MalformedDump(f"{metrics_path} misses metric columns") from err
            emit("training_curves", metrics, svg_line_chart(curves, "Training curves"))
        dump = source / "trajectories.jsonl"
        if not dump.exists():
            return written
    elif not source.exists():
        raise MalformedDump(f"{source} does not exist")

    trajectories = load_trajectory_dump(dump)
    if constraints:
        usage = usage_over_iterations(trajectories, constraints)
        series = {c.id: [row[c.id] for row in usage] for c in constraints}
        emit("keyphrase_usage", usage, svg_line_chart(series, "Strict keyphrase usage"))
        emit("structure_accuracy", structure_accuracy(trajectories, constraints))
    if patterns:
        emit("pattern_usage", pattern_usage(trajectories, patterns))
    histogram = weight_histogram(trajectories)
    emit(
        "weight_histogram",
        histogram,
        svg_bar_chart(
            [f"{r['log10_w_low']} {r['regime']}" for r in histogram],
            [r["count"] for r in histogram],
            "Trajectories per log10 w decade",
        ),
    )
    emit("regime_accuracy", regime_accuracy(trajectories))
    return written
