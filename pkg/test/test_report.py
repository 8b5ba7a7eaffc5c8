import json

import pytest

import experiment
import report
from report import StepPoint


def result_cells(task, objective, **values):
    row = {name: "" for name in experiment.RESULT_COLUMNS}
    row.update(task=task, objective=objective, variant="default", samples="4")
    row.update({name: f"{value:.6f}" for name, value in values.items()})
    return [row[name] for name in experiment.RESULT_COLUMNS]


def record(zero_shot, truth, steps, zero_shot_confidence=None):
    return {
        "zero_shot": zero_shot,
        "zero_shot_confidence": zero_shot_confidence,
        "truth": truth,
        "steps": [
            {"prediction": prediction, "confidence": confidence}
            for prediction, confidence in steps
        ],
    }


CLASSIFY_RECORDS = [
    record(0, 1, [(1, 0.7), (1, 0.8)], zero_shot_confidence=0.6),
    # Aborted after one step; the last prediction holds.
    record(2, 2, [(2, 0.95)], zero_shot_confidence=0.9),
]

CAPTION_RECORDS = [record([0, 2, 1], [0, 1], [([0, 2, 3, 1], None)])]


def write_run(directory, rows, traces=None):
    experiment.write_table(directory / "results.tsv", experiment.RESULT_COLUMNS, rows)
    for name, records in (traces or {}).items():
        path = directory / "traces" / f"{name}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return directory


class TestLines:
    def test_columns_are_aligned(self):
        table = report.lines(["a", "metric"], [["long value", "1"], ["x", "22"]])

        assert table == ["a           metric", "long value  1", "x           22"]

    def test_header_only(self):
        assert report.lines(["task"], []) == ["task"]


class TestAggregate:
    def test_mean_and_std_across_runs(self, tmp_path):
        runs = [
            write_run(tmp_path / "seed0", [result_cells("classify", "rlcf", top1=0.5)]),
            write_run(tmp_path / "seed1", [result_cells("classify", "rlcf", top1=0.7)]),
        ]

        (row,) = report.aggregate(runs)

        assert row.key == ("classify", "rlcf", "default")
        assert row.runs == 2
        assert row.means["top1"] == pytest.approx(0.6)
        assert row.stds["top1"] == pytest.approx(0.1)
        assert row.means["recall1"] is None

    def test_cells_leave_absent_metrics_blank(self, tmp_path):
        run = write_run(tmp_path, [result_cells("classify", "none", top1=0.25)])

        (row,) = report.aggregate([run])
        cells = dict(zip(report.AGGREGATE_COLUMNS, row.cells()))

        assert cells["top1_mean"] == "0.250000"
        assert cells["top1_std"] == "0.000000"
        assert cells["recall1_mean"] == ""
        assert cells["runs"] == "1"

    def test_rows_are_grouped_by_key(self, tmp_path):
        run = write_run(
            tmp_path,
            [
                result_cells("classify", "none", top1=0.5),
                result_cells("classify", "rlcf", top1=0.75),
            ],
        )

        rows = report.aggregate([run])

        assert [row.key[1] for row in rows] == ["none", "rlcf"]

    def test_missing_results(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            report.aggregate([tmp_path])

    def test_nothing_to_aggregate(self):
        with pytest.raises(ValueError):
            report.aggregate([])


class TestStepCurves:
    def test_classification_curve(self):
        curve = report.step_curve(CLASSIFY_RECORDS)

        assert [p.step for p in curve] == [0, 1, 2]
        assert [p.score for p in curve] == [0.5, 1.0, 1.0]
        assert curve[0].ece == pytest.approx((0.6 + 0.1) / 2)
        assert curve[2].ece == pytest.approx((0.2 + 0.05) / 2)

    def test_caption_curve_scores_attribute_f1(self):
        curve = report.step_curve(CAPTION_RECORDS)

        assert curve[0].score == pytest.approx(2 / 3)
        assert curve[1].score == 1.0
        assert all(p.ece is None for p in curve)

    def test_no_records(self):
        assert report.step_curve([]) == []

    def test_mean_curve_truncates_to_the_shortest(self):
        a = [StepPoint(0, 0.2, 0.1), StepPoint(1, 0.4, 0.3)]
        b = [StepPoint(0, 0.6, None)]

        (point,) = report.mean_curve([a, b])

        assert point.score == pytest.approx(0.4)
        assert point.ece is None

    def test_stream_curves_average_runs(self, tmp_path):
        rows = [result_cells("classify", "rlcf", top1=1.0)]
        one = write_run(tmp_path / "one", rows, {"classify-rlcf": CLASSIFY_RECORDS})
        two = write_run(
            tmp_path / "two", rows, {"classify-rlcf": CLASSIFY_RECORDS[:1]}
        )

        curves = report.stream_curves([one, two])

        assert list(curves) == [("classify", "rlcf")]
        assert curves["classify", "rlcf"][0].score == pytest.approx(0.25)


class TestReports:
    def test_writes_table_and_charts(self, tmp_path):
        run = write_run(
            tmp_path / "run",
            [
                result_cells("classify", "rlcf", top1=0.5, ece=0.1),
                result_cells("caption", "rlcf", caption_f1=0.75),
            ],
            {"classify-rlcf": CLASSIFY_RECORDS, "caption-rlcf": CAPTION_RECORDS},
        )
        out = tmp_path / "report"

        text = report.write_report([run], out)

        table = experiment.read_table(out / "aggregate.tsv")
        assert len(table) == 2
        assert list(table[0]) == report.AGGREGATE_COLUMNS
        charts = sorted(p.name for p in (out / "charts").iterdir())
        assert charts == [
            "caption-accuracy.svg",
            "classify-accuracy.svg",
            "classify-ece.svg",
        ]
        assert text[0].split() == ["task", "objective", "variant", "runs"] + [
            "top1",
            "recall1",
            "ece",
            "caption_f1",
        ]
        assert "0.5000" in text[1]

    def test_charts_are_reproducible(self, tmp_path):
        run = write_run(
            tmp_path / "run",
            [result_cells("classify", "rlcf", top1=0.5)],
            {"classify-rlcf": CLASSIFY_RECORDS},
        )

        report.write_report([run], tmp_path / "a")
        report.write_report([run], tmp_path / "b")

        for name in ("classify-accuracy.svg", "classify-ece.svg"):
            a = (tmp_path / "a" / "charts" / name).read_bytes()
            assert a == (tmp_path / "b" / "charts" / name).read_bytes()

    def test_charts_can_be_skipped(self, tmp_path):
        run = write_run(
            tmp_path / "run",
            [result_cells("classify", "rlcf", top1=0.5)],
            {"classify-rlcf": CLASSIFY_RECORDS},
        )

        report.write_report([run], tmp_path / "out", charts=False)

        assert not (tmp_path / "out" / "charts").exists()
