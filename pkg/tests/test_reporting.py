"""Tests for CSV/JSON output and trajectory rendering."""

import numpy as np
import pytest

from src.models.schemas import ExperimentKind, ExperimentReport, FlowPathRecord, Verdict
from src.services.plot_service import PlotService, downsample_indices, drawn_segments
from src.services.report_service import ReportService, describe_version, format_cell


def _merging_record():
    # labels 1 and 2 merge at the second recorded time, then all three at the third
    return FlowPathRecord(
        times=np.array([0.0, 0.1, 0.2, 0.3]),
        values=np.array([
            [0.0, 0.5, 1.0],
            [0.1, 0.7, 0.7],
            [0.4, 0.4, 0.4],
            [0.3, 0.3, 0.3],
        ]),
        cluster_ids=np.array([[0, 1, 2], [0, 1, 1], [0, 0, 0], [0, 0, 0]]),
        cluster_counts=np.array([3, 2, 1, 1]),
        dt=0.1,
    )


class TestFormatCell:
    @pytest.mark.parametrize("value,expected", [
        (0.1, "0.1"),
        (1e-05, "1e-05"),
        (np.float64(0.25), "0.25"),
        (np.int64(3), "3"),
        (None, ""),
        (True, "true"),
        ("max", "max"),
    ])
    def test_cells(self, value, expected):
        assert format_cell(value) == expected

    def test_floats_round_trip(self):
        value = 0.1 + 0.2
        assert float(format_cell(value)) == value


class TestReportService:
    def test_csv_layout(self, tmp_path):
        writer = ReportService(tmp_path / "nested")
        path = writer.write_csv("t.csv", ["a", "b"], [(1, 0.5), (2, None)])
        assert path.read_bytes() == b"a,b\n1,0.5\n2,\n"

    def test_row_length_checked(self, tmp_path):
        with pytest.raises(ValueError):
            ReportService(tmp_path).write_csv("t.csv", ["a", "b"], [(1,)])

    def test_report_json(self, tmp_path):
        report = ExperimentReport(
            name="x",
            kind=ExperimentKind.COVARIANCE,
            version="0.1.0",
            seed=1,
            spec={},
            verdicts=[Verdict(name="a", passed=True), Verdict(name="b", passed=False)],
        )
        text = ReportService(tmp_path).write_report(report).read_text()
        assert text.endswith("}\n")
        assert '"passed": false' in text

    def test_version_string(self):
        assert describe_version()


class TestTrajectories:
    def test_downsample_keeps_ends(self):
        keep = downsample_indices(1000, 50)
        assert keep[0] == 0 and keep[-1] == 999
        assert keep.size <= 50
        np.testing.assert_array_equal(downsample_indices(10, 50), np.arange(10))

    def test_merged_labels_stop_one_step_after_joining(self):
        segments = drawn_segments(_merging_record())
        lengths = [x.size for x, _ in segments]
        # label 0 leads throughout, label 1 until time 0.1, label 2 until time 0.0
        assert lengths == [4, 3, 2]

    def test_svg_is_reproducible(self, tmp_path):
        plot = PlotService(max_points=3)
        first = plot.render_trajectories(_merging_record(), tmp_path / "a.svg", title="arratia")
        second = plot.render_trajectories(_merging_record(), tmp_path / "b.svg", title="arratia")
        assert first.read_bytes() == second.read_bytes()
        assert first.read_text().lstrip().startswith("<?xml")
