"""Report plotting: figures from CSVs, with the values passed through
untouched and malformed inputs rejected by column name."""

import csv

import numpy as np
import pytest

from p3d_extractor import plots
from p3d_extractor.errors import ConfigError, PlotError


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


RECALL_HEADER = ["model_id", "block_id", "bin_id", "recall", "n_pairs",
                 "n_excluded"]
REPORT_HEADER = ["model_id", "task_id", "domain_id", "block_id", "bin_id",
                 "metric", "value", "higher_is_better"]


@pytest.fixture()
def recall_csv(tmp_path):
    rows = []
    for model, base in (("crisp", 0.9), ("fuzzy", 0.4)):
        for k, bin_id in enumerate(("0-15", "15-30", "30-60", "60-180")):
            rows.append([model, "3", bin_id, repr(base - 0.1 * k), "25", "0"])
    return write_csv(tmp_path / "recall.csv", RECALL_HEADER, rows)


class TestRecallCurves:
    def test_figure_and_passthrough(self, tmp_path, recall_csv):
        before = recall_csv.read_bytes()
        records = plots.plot_report([recall_csv], tmp_path / "figs")
        assert recall_csv.read_bytes() == before

        assert len(records) == 1
        record = records[0]
        assert record.kind == "recall_curves"
        assert record.figure.is_file()
        assert record.figure.stat().st_size > 0
        assert record.labels == ("0-15", "15-30", "30-60", "60-180")

        series = dict(record.series)
        assert set(series) == {"crisp / block 3", "fuzzy / block 3"}
        # Values equal an independent parse of the CSV.
        with open(recall_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for model in ("crisp", "fuzzy"):
            expected = [float(r["recall"]) for r in rows
                        if r["model_id"] == model]
            got = series[f"{model} / block 3"]
            assert np.array_equal(got, np.asarray(expected))

    def test_empty_recall_cell_becomes_a_gap(self, tmp_path):
        rows = [["m", "0", "0-15", "0.5", "4", "0"],
                ["m", "0", "15-30", "", "0", "0"]]
        path = write_csv(tmp_path / "recall.csv", RECALL_HEADER, rows)
        (record,) = plots.plot_report([path], tmp_path / "figs")
        values = dict(record.series)["m / block 0"]
        assert values[0] == 0.5
        assert np.isnan(values[1])

    def test_non_numeric_recall_names_column_and_row(self, tmp_path):
        rows = [["m", "0", "0-15", "fast", "4", "0"]]
        path = write_csv(tmp_path / "recall.csv", RECALL_HEADER, rows)
        with pytest.raises(PlotError, match="recall") as exc:
            plots.plot_report([path], tmp_path / "figs")
        assert "row 2" in str(exc.value)

    def test_missing_column_is_named(self, tmp_path):
        header = [c for c in RECALL_HEADER if c != "recall"]
        path = write_csv(tmp_path / "recall.csv", header,
                         [["m", "0", "0-15", "4", "0"]])
        with pytest.raises(PlotError, match="recall"):
            plots.plot_report([path], tmp_path / "figs")


class TestMetricCurves:
    def test_one_figure_per_binned_metric(self, tmp_path):
        rows = [
            ["a", "corr", "scene", "3", "0-15", "recall@10px", "0.9", "true"],
            ["a", "corr", "scene", "3", "15-30", "recall@10px", "0.7", "true"],
            ["b", "corr", "scene", "3", "0-15", "recall@10px", "0.5", "true"],
            ["b", "corr", "scene", "3", "15-30", "recall@10px", "0.3", "true"],
            ["a", "depth", "scene", "3", "", "rmse", "0.2", "false"],
        ]
        path = write_csv(tmp_path / "report.csv", REPORT_HEADER, rows)
        records = plots.plot_report([path], tmp_path / "figs")
        assert len(records) == 1  # the scalar rmse row has no bins to plot
        record = records[0]
        assert record.kind == "metric_curves"
        assert "recall-10px" in record.figure.name
        series = dict(record.series)
        assert np.array_equal(series["a / scene / block 3"],
                              np.asarray([0.9, 0.7]))
        assert np.array_equal(series["b / scene / block 3"],
                              np.asarray([0.5, 0.3]))

    def test_report_missing_value_column_is_named(self, tmp_path):
        header = [c for c in REPORT_HEADER if c != "value"]
        path = write_csv(tmp_path / "report.csv", header,
                         [["a", "t", "d", "0", "0-15", "m", "true"]])
        with pytest.raises(PlotError, match="value"):
            plots.plot_report([path], tmp_path / "figs")

    def test_report_with_no_binned_rows_is_an_error(self, tmp_path):
        rows = [["a", "depth", "scene", "3", "", "rmse", "0.2", "false"]]
        path = write_csv(tmp_path / "report.csv", REPORT_HEADER, rows)
        with pytest.raises(PlotError, match="bin"):
            plots.plot_report([path], tmp_path / "figs")


class TestCorrelationHeatmap:
    def test_square_matrix_renders_and_passes_through(self, tmp_path):
        header = ["task", "depth", "normals", "corr"]
        rows = [["depth", "1.0", "0.8", "0.3"],
                ["normals", "0.8", "1.0", "0.5"],
                ["corr", "0.3", "0.5", "1.0"]]
        path = write_csv(tmp_path / "correlation.csv", header, rows)
        before = path.read_bytes()
        (record,) = plots.plot_report([path], tmp_path / "figs")
        assert path.read_bytes() == before
        assert record.kind == "correlation_heatmap"
        assert record.labels == ("depth", "normals", "corr")
        matrix = np.asarray([values for _, values in record.series])
        expected = np.asarray([[1.0, 0.8, 0.3], [0.8, 1.0, 0.5],
                               [0.3, 0.5, 1.0]])
        assert np.array_equal(matrix, expected)

    def test_row_and_column_labels_must_agree(self, tmp_path):
        header = ["task", "depth", "normals"]
        rows = [["depth", "1.0", "0.8"], ["semantic", "0.8", "1.0"]]
        path = write_csv(tmp_path / "correlation.csv", header, rows)
        with pytest.raises(PlotError, match="semantic"):
            plots.plot_report([path], tmp_path / "figs")

    def test_bad_cell_names_the_column(self, tmp_path):
        header = ["task", "depth", "normals"]
        rows = [["depth", "1.0", "oops"], ["normals", "0.8", "1.0"]]
        path = write_csv(tmp_path / "correlation.csv", header, rows)
        with pytest.raises(PlotError, match="normals"):
            plots.plot_report([path], tmp_path / "figs")


class TestConfusionHeatmap:
    def test_counts_render_row_normalized_but_pass_through_raw(
        self, tmp_path
    ):
        header = ["name", "leg", "seat", "back"]
        rows = [["leg", "8", "1", "1"],
                ["seat", "0", "10", "0"],
                ["back", "2", "0", "6"]]
        path = write_csv(tmp_path / "confusion_chair_d0.csv", header, rows)
        (record,) = plots.plot_report([path], tmp_path / "figs")
        assert record.kind == "confusion_heatmap"
        assert record.labels == ("leg", "seat", "back")
        matrix = np.asarray([values for _, values in record.series])
        assert np.array_equal(
            matrix, np.asarray([[8, 1, 1], [0, 10, 0], [2, 0, 6]]))

    def test_non_numeric_count_names_the_column(self, tmp_path):
        header = ["name", "leg", "seat"]
        rows = [["leg", "8", "x"], ["seat", "0", "10"]]
        path = write_csv(tmp_path / "confusion.csv", header, rows)
        with pytest.raises(PlotError, match="seat"):
            plots.plot_report([path], tmp_path / "figs")


class TestRatingsAndDispatch:
    def test_ratings_bar_chart(self, tmp_path):
        path = write_csv(tmp_path / "ratings.csv", ["model_id", "rating"],
                         [["alpha", "1.0"], ["beta", "0.5"],
                          ["gamma", "0.0"]])
        (record,) = plots.plot_report([path], tmp_path / "figs")
        assert record.kind == "rating_bars"
        assert record.labels == ("alpha", "beta", "gamma")
        assert np.array_equal(dict(record.series)["rating"],
                              np.asarray([1.0, 0.5, 0.0]))

    def test_unrecognized_header_names_first_column(self, tmp_path):
        path = write_csv(tmp_path / "other.csv", ["foo", "bar"],
                         [["1", "2"]])
        with pytest.raises(PlotError, match="foo"):
            plots.plot_report([path], tmp_path / "figs")

    def test_header_only_csv_is_an_error(self, tmp_path):
        path = write_csv(tmp_path / "recall.csv", RECALL_HEADER, [])
        with pytest.raises(PlotError, match="no data rows"):
            plots.plot_report([path], tmp_path / "figs")

    def test_missing_file_is_an_error(self, tmp_path):
        with pytest.raises(PlotError, match="ghost.csv"):
            plots.plot_report([tmp_path / "ghost.csv"], tmp_path / "figs")

    def test_two_inputs_with_identical_stems_collide_loudly(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        a_dir.mkdir()
        b_dir.mkdir()
        rows = [["m", "0", "0-15", "0.5", "4", "0"]]
        one = write_csv(a_dir / "recall.csv", RECALL_HEADER, rows)
        two = write_csv(b_dir / "recall.csv", RECALL_HEADER, rows)
        with pytest.raises(ConfigError, match="recall"):
            plots.plot_report([one, two], tmp_path / "figs")

    def test_multiple_inputs_in_one_call(self, tmp_path, recall_csv):
        ratings = write_csv(tmp_path / "ratings.csv",
                            ["model_id", "rating"], [["m", "0.5"]])
        records = plots.plot_report([recall_csv, ratings], tmp_path / "figs")
        assert [r.kind for r in records] == ["recall_curves", "rating_bars"]
        names = {r.figure.name for r in records}
        assert len(names) == 2
