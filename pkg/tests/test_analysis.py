import math

import numpy as np
import pandas as pd
import pytest

from ageatlas.analysis import (
    BiasModel,
    MetricsTable,
    apply_bias,
    correct_records,
    fit_bias,
    fit_bias_records,
    gap_table,
    localization_row,
    localization_score,
    metrics,
    ols_slope,
    scatter_export,
    top_gap_examples,
)
from ageatlas.errors import DegenerateInputError, MissingArtifactError, ShapeError
from ageatlas.manifest import SubjectRecord
from ageatlas.phantom import GroundTruth
from ageatlas.volume import Volume3


def record(id, age, split="test", sex="F", bmi="healthy", **kw):
    return SubjectRecord(
        id=id, age=age, sex=sex, bmi_group=bmi, split=split, image_path=f"{id}.vol", **kw
    )


@pytest.fixture
def ground_truth():
    """4x4x4 body; aging region = x in {0, 1} (spine x=0, heart x=1); muscle x=3."""

    def mask(xs):
        data = np.zeros((4, 4, 4))
        data[list(xs)] = 1.0
        return Volume3(data)

    return GroundTruth(mask([0, 1]), mask(range(4)), mask([0]), mask([1]), mask([3]))


class TestBias:
    def test_inverse_recovers_age(self):
        ages = np.arange(46, 82, dtype=float)
        model = fit_bias(ages, 0.5 * ages + 30.0)
        assert model.slope == pytest.approx(0.5)
        assert model.intercept == pytest.approx(30.0)
        assert apply_bias(model, 65.0) == pytest.approx(70.0)
        np.testing.assert_allclose(apply_bias(model, 0.5 * ages + 30.0), ages)

    def test_residual_variant(self):
        model = BiasModel(0.5, 30.0, "residual")
        assert apply_bias(model, 66.0, 70.0) == pytest.approx(71.0)
        with pytest.raises(ValueError):
            apply_bias(model, 66.0)

    @pytest.mark.parametrize("variant", ["inverse", "residual"])
    def test_corrected_slope_on_held_out(self, variant):
        rng = np.random.default_rng(3)

        def law(a):
            return 0.6 * a + 25.0 + rng.normal(0.0, 2.0, size=a.shape)

        val_ages = rng.integers(46, 82, size=60).astype(float)
        model = fit_bias(val_ages, law(val_ages), variant)
        test_ages = rng.integers(46, 82, size=200).astype(float)
        corrected = apply_bias(model, law(test_ages), test_ages)
        assert ols_slope(test_ages, corrected) == pytest.approx(1.0, abs=0.1)

    def test_degenerate_fits(self):
        with pytest.raises(DegenerateInputError):
            fit_bias([50, 60], [55, 58])
        with pytest.raises(DegenerateInputError):
            fit_bias([60, 60, 60], [55, 58, 61])
        with pytest.raises(DegenerateInputError):
            fit_bias([50, 60, 70], [63, 63, 63])

    def test_records(self):
        val = [
            record(i, age, "val", predicted_age=0.5 * age + 30)
            for i, age in enumerate((50, 60, 70))
        ]
        model = fit_bias_records(val)
        test = [record(10, 64, predicted_age=62.0), record(11, 70)]
        corrected = correct_records(model, test)
        assert corrected[0].corrected_age == pytest.approx(64.0)
        assert corrected[1].corrected_age is None
        with pytest.raises(MissingArtifactError):
            fit_bias_records(test)

    def test_alternate_fields(self):
        model = BiasModel(0.5, 30.0)
        out = correct_records(
            model, [record(0, 60, predicted_age_25d=61.0)], "predicted_age_25d", "corrected_age_25d"
        )
        assert out[0].corrected_age_25d == pytest.approx(62.0)
        assert out[0].corrected_age is None


class TestMetrics:
    def test_cell_and_overall(self):
        train = [record(0, 50, "train"), record(1, 70, "train"), record(2, 60, "train", sex="M")]
        test = [record(10, 50, corrected_age=52.0), record(11, 60, corrected_age=57.0)]
        table = metrics(test, train)
        frame = table.frame
        assert list(frame["category"]) == [
            "Healthy",
            "Healthy",
            "Overweight",
            "Overweight",
            "Obese",
            "Obese",
            "Overall",
        ]
        first = frame.iloc[0]
        assert (first.sex, first.n, first.mean_pred, first.model) == ("F", 2, 5.0, 2.5)
        assert math.isnan(frame.iloc[1].model)
        assert table.overall() == 2.5

    def test_requires_corrected_age(self):
        with pytest.raises(MissingArtifactError):
            metrics([record(0, 60)], [record(1, 60, "train")])

    def test_render_reference_table(self):
        rows = list(zip(
            ["Healthy", "Healthy", "Overweight", "Overweight", "Obese", "Obese", "Overall"],
            ["F", "M", "F", "M", "F", "M", "M+F"],
            [20, 20, 20, 20, 20, 20, 120],
            [7.190, 7.672, 7.485, 8.036, 7.045, 7.550, 7.499],
            [2.485, 2.614, 2.661, 2.327, 2.863, 2.669, 2.613],
            [2.460, 2.425, 2.525, 2.623, 2.651, 2.720, 2.565],
        ))
        frame = pd.DataFrame(
            rows, columns=["category", "sex", "n", "mean_pred", "model_25d", "model"]
        )
        text = MetricsTable(frame, {"mean_pred": None, "model_25d": 18384, "model": 1536}).render()
        lines = text.splitlines()
        assert lines[0].split()[-3:] == ["Pred.", "2.5D", "Ours"]
        assert lines[2].split() == ["Healthy", "F", "20", "7.190", "2.485", "2.460"]
        assert lines[8].split() == ["Overall", "M+F", "120", "7.499", "2.613", "2.565"]
        assert lines[-1].split()[-3:] == ["N/A", "18,384", "1,536"]

    def test_csv(self, tmp_path):
        train = [record(0, 50, "train")]
        table = metrics([record(1, 50, corrected_age=51.0)], train)
        path = table.to_csv(tmp_path / "m.csv")
        assert path.read_text().splitlines()[0] == "category,sex,n,mean_pred,model"


class TestGaps:
    def records(self):
        return [
            record(0, 60, predicted_age=60.0, corrected_age=60.2),
            record(1, 60, predicted_age=70.0, corrected_age=67.0),
            record(2, 60, predicted_age=60.0, corrected_age=62.0),
            record(3, 60, predicted_age=50.0, corrected_age=51.0),
            record(4, 60, predicted_age=65.0, corrected_age=65.0),
        ]

    def test_bands(self):
        table = gap_table(self.records())
        assert list(table["band"]) == [
            "aligned",
            "accelerated",
            "unassigned",
            "decelerated",
            "accelerated",
        ]
        assert table["delta"].iloc[3] == pytest.approx(-9.0)

    def test_scatter_file(self, tmp_path):
        path = scatter_export(self.records(), tmp_path / "scatter.csv")
        assert pd.read_csv(path).shape == (5, 8)

    def test_top_examples(self):
        top = top_gap_examples(self.records(), k=2)
        assert [r.id for r in top["accelerated"]] == [1, 4]
        assert [r.id for r in top["decelerated"]] == [3, 0]
        assert [r.id for r in top["aligned"]] == [0, 2]

    def test_gap_needs_correction(self):
        with pytest.raises(MissingArtifactError):
            gap_table([record(0, 60)])


class TestLocalization:
    def test_uniform_map_scores_one(self, ground_truth):
        assert localization_score(np.ones((4, 4, 4)), ground_truth) == pytest.approx(1.0)

    def test_concentrated_map(self, ground_truth):
        assert localization_score(ground_truth.aging_mask, ground_truth) == math.inf

    def test_zero_map(self, ground_truth):
        assert localization_score(np.zeros((4, 4, 4)), ground_truth) == 0.0

    def test_ratio(self, ground_truth):
        cam = np.full((4, 4, 4), 0.2)
        cam[:2] = 0.8
        assert localization_score(Volume3(cam), ground_truth) == pytest.approx(4.0)

    def test_dims_mismatch(self, ground_truth):
        with pytest.raises(ShapeError):
            localization_score(np.ones((4, 4, 3)), ground_truth)

    def test_row(self, ground_truth):
        cam = np.zeros((4, 4, 4))
        cam[0], cam[1], cam[3] = 1.0, 0.5, 0.25
        row = localization_row("F_healthy", Volume3(cam), ground_truth, kind="cell")
        assert row["atlas"] == "F_healthy"
        assert row["kind"] == "cell"
        assert row["aging_fraction"] == pytest.approx(0.5)
        assert (row["spine_mean"], row["heart_mean"], row["muscle_mean"]) == (1.0, 0.5, 0.25)
        assert row["score"] == pytest.approx(0.75 / 0.125)
