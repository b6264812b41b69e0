import numpy as np
import pytest

from plotting import aggregate_curves, load_runs, plot_runs
from runtime import init_log, log_append, log_fields

FIELDS = log_fields("dqn")


def write_run(directory, steps, returns):
    directory.mkdir(parents=True, exist_ok=True)
    path = str(directory / "log.csv")
    init_log(path, FIELDS)
    for s, r in zip(steps, returns):
        log_append(path, {"actor_steps": s, "learner_steps": s // 2, "learner_walltime_s": s / 100.0,
                          "eval_return": r}, FIELDS)
    return str(directory)


@pytest.fixture
def two_runs(tmp_path):
    return [write_run(tmp_path / "seed0", [100, 200, 300], [0.0, 1.0, 2.0]),
            write_run(tmp_path / "seed1", [100, 250], [2.0, 3.0])]


class TestAggregate:
    def test_union_grid_with_partial_coverage(self, two_runs):
        curves = aggregate_curves(load_runs(two_runs))
        np.testing.assert_array_equal(curves["actor_steps"], [100, 200, 250, 300])
        np.testing.assert_allclose(curves["mean"], [1.0, (1.0 + 2.0 + 2.0 / 3.0) / 2.0, 2.25, 2.0])
        np.testing.assert_allclose(curves["min"], [0.0, 1.0, 1.5, 2.0])
        np.testing.assert_allclose(curves["max"], [2.0, 2.0 + 2.0 / 3.0, 3.0, 2.0])
        assert list(curves["runs"]) == [2, 2, 2, 1]

    def test_walltime_axis(self, two_runs):
        curves = aggregate_curves(load_runs(two_runs), x_axis="learner_walltime")
        np.testing.assert_allclose(curves["learner_walltime"], [1.0, 2.0, 2.5, 3.0])

    def test_unknown_axis(self, two_runs):
        with pytest.raises(ValueError):
            aggregate_curves(load_runs(two_runs), x_axis="episodes")

    def test_runs_without_evaluation_are_skipped(self, tmp_path, two_runs):
        empty = tmp_path / "empty"
        empty.mkdir()
        init_log(str(empty / "log.csv"), FIELDS)
        log_append(str(empty / "log.csv"), {"actor_steps": 100}, FIELDS)
        assert len(load_runs(two_runs + [str(empty)])) == 2
        assert aggregate_curves([]).empty


def test_plot_runs_writes_csv_and_svg(tmp_path, two_runs):
    output = tmp_path / "plots" / "curve.svg"
    curves = plot_runs(two_runs + [str(tmp_path / "seed0" / "log.csv")], str(output))
    assert (tmp_path / "plots" / "curve.csv").exists()
    svg = output.read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "polyline" in svg
    assert list(curves["runs"]) == [3, 3, 3, 2]
