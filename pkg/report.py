"""Aggregation of run directories and step-wise charts.

`aggregate` folds the `results.tsv` of several runs (usually seeds) into
mean/std rows. Step curves replay the per-step predictions recorded in the
traces, so accuracy and calibration can be plotted against TTA steps.
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import attr
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

import captioner as cap  # noqa: E402
import experiment  # noqa: E402
import metrics  # noqa: E402

KEY_COLUMNS = ("task", "objective", "variant")
METRIC_COLUMNS = tuple(c for c in metrics.REPORT_COLUMNS if c != "samples")


def lines(header: Sequence[str], rows: Iterable[Sequence[str]]) -> List[str]:
    """Render a table as space-aligned text lines."""
    table = [list(header)] + [list(row) for row in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    return [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in table
    ]


@attr.s(auto_attribs=True, frozen=True)
class AggregateRow:
    key: Tuple[str, ...]
    runs: int
    means: Dict[str, Optional[float]]
    stds: Dict[str, Optional[float]]

    def cells(self) -> List[str]:
        values = []
        for name in METRIC_COLUMNS:
            mean, std = self.means[name], self.stds[name]
            values += ["", ""] if mean is None else [f"{mean:.6f}", f"{std:.6f}"]
        return list(self.key) + [str(self.runs)] + values


AGGREGATE_COLUMNS = list(KEY_COLUMNS) + ["runs"]
for _name in METRIC_COLUMNS:
    AGGREGATE_COLUMNS += [f"{_name}_mean", f"{_name}_std"]


def aggregate(run_dirs: Sequence[Path]) -> List[AggregateRow]:
    """Mean and standard deviation of every metric across runs, per row key."""
    if not run_dirs:
        raise ValueError("Nothing to aggregate")
    groups: Dict[Tuple[str, ...], List[Dict[str, str]]] = {}
    for run_dir in run_dirs:
        path = run_dir / "results.tsv"
        if not path.exists():
            raise FileNotFoundError(f"No results table in {run_dir}")
        for row in experiment.read_table(path):
            groups.setdefault(tuple(row[k] for k in KEY_COLUMNS), []).append(row)

    result = []
    for key, rows in groups.items():
        means: Dict[str, Optional[float]] = {}
        stds: Dict[str, Optional[float]] = {}
        for name in METRIC_COLUMNS:
            values = [float(row[name]) for row in rows if row.get(name)]
            means[name] = float(np.mean(values)) if values else None
            stds[name] = float(np.std(values)) if values else None
        result.append(AggregateRow(key, len(rows), means, stds))
    return result


# Step curves


@attr.s(auto_attribs=True, frozen=True)
class StepPoint:
    step: int
    score: float
    ece: Optional[float]


def read_traces(path: Path) -> List[Dict[str, Any]]:
    with open(path) as trace_file:
        return [json.loads(line) for line in trace_file if line.strip()]


def _step_states(record: Dict[str, Any], steps: int) -> List[Tuple[Any, float]]:
    """(prediction, confidence) after each step; aborted episodes hold their last."""
    states = [(record["zero_shot"], record["zero_shot_confidence"] or 0.0)]
    for step in record["steps"]:
        states.append((step["prediction"], step["confidence"] or 0.0))
    while len(states) < steps + 1:
        states.append(states[-1])
    return states


def step_curve(records: Sequence[Dict[str, Any]]) -> List[StepPoint]:
    """Accuracy (or caption F1) and ECE of the stream after each TTA step.

    Step 0 is the zero-shot prediction.
    """
    if not records:
        return []
    steps = max(len(record["steps"]) for record in records)
    states = [_step_states(record, steps) for record in records]
    captions = isinstance(records[0]["truth"], list)
    points = []
    for step in range(steps + 1):
        predictions = [s[step][0] for s in states]
        confidences = [s[step][1] for s in states]
        if captions:
            score = float(
                np.mean(
                    [
                        metrics.caption_attribute_f1(
                            cap.caption_attributes(p), r["truth"]
                        )
                        for p, r in zip(predictions, records)
                    ]
                )
            )
            points.append(StepPoint(step, score, None))
            continue
        correct = [p == r["truth"] for p, r in zip(predictions, records)]
        points.append(
            StepPoint(step, float(np.mean(correct)), metrics.ece(confidences, correct))
        )
    return points


def mean_curve(curves: Sequence[Sequence[StepPoint]]) -> List[StepPoint]:
    length = min(len(curve) for curve in curves)
    points = []
    for step in range(length):
        eces = [c[step].ece for c in curves if c[step].ece is not None]
        ece = float(np.mean(eces)) if len(eces) == len(curves) else None
        score = float(np.mean([c[step].score for c in curves]))
        points.append(StepPoint(step, score, ece))
    return points


def stream_curves(
    run_dirs: Sequence[Path],
) -> Dict[Tuple[str, str], List[StepPoint]]:
    """Step curves per (task, objective), averaged over the runs that have them."""
    found: Dict[Tuple[str, str], List[List[StepPoint]]] = {}
    for run_dir in run_dirs:
        for path in sorted((run_dir / "traces").glob("*.jsonl")):
            task, _, objective = path.stem.partition("-")
            curve = step_curve(read_traces(path))
            if curve:
                found.setdefault((task, objective), []).append(curve)
    return {key: mean_curve(curves) for key, curves in sorted(found.items())}


def _save(fig: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_charts(
    curves: Dict[Tuple[str, str], List[StepPoint]], out_dir: Path
) -> List[Path]:
    """One accuracy-vs-steps and one ECE-vs-steps chart per task."""
    plt.rcParams["svg.hashsalt"] = "step-curves"
    written = []
    for task in sorted({task for task, _ in curves}):
        series = {obj: pts for (t, obj), pts in curves.items() if t == task}
        label = "attribute F1" if task == "caption" else "accuracy"

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for objective, points in series.items():
            steps = [p.step for p in points]
            ax.plot(steps, [p.score for p in points], marker="o", label=objective)
        ax.set_xlabel("TTA steps")
        ax.set_ylabel(label)
        ax.set_title(task)
        ax.legend()
        path = out_dir / f"{task}-accuracy.svg"
        _save(fig, path)
        written.append(path)

        with_ece = {o: pts for o, pts in series.items() if pts[0].ece is not None}
        if not with_ece:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for objective, points in with_ece.items():
            steps = [p.step for p in points]
            ax.plot(steps, [p.ece for p in points], marker="o", label=objective)
        ax.set_xlabel("TTA steps")
        ax.set_ylabel("ECE")
        ax.set_title(task)
        ax.legend()
        path = out_dir / f"{task}-ece.svg"
        _save(fig, path)
        written.append(path)
    return written


def write_report(
    run_dirs: Sequence[Path], out_dir: Path, charts: bool = True
) -> List[str]:
    """Write `aggregate.tsv` (and charts) and return the table as text lines."""
    rows = aggregate(run_dirs)
    cells = [row.cells() for row in rows]
    experiment.write_table(out_dir / "aggregate.tsv", AGGREGATE_COLUMNS, cells)
    if charts:
        render_charts(stream_curves(run_dirs), out_dir / "charts")
    header = list(KEY_COLUMNS) + ["runs", "top1", "recall1", "ece", "caption_f1"]
    brief = [
        list(row.key)
        + [str(row.runs)]
        + [
            "" if row.means[name] is None else f"{row.means[name]:.4f}"
            for name in ("top1", "recall1", "ece", "caption_f1")
        ]
        for row in rows
    ]
    return lines(header, brief)
