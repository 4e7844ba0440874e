import json

import pandas as pd
import pytest

from ageatlas.analysis import ols_slope
from ageatlas.atlas import AGE_BANDS
from ageatlas.cli_pipeline import STAGE_HELP, build_parser, main
from ageatlas.config import OUTPUT_ROOT_ENV
from ageatlas.errors import (
    AgeAtlasError,
    ConfigError,
    MissingArtifactError,
    NumericalError,
    RegistrationError,
    SubjectFailureError,
)
from ageatlas.manifest import Manifest


def overrides(small_run):
    args = []
    for item in small_run:
        args += ["--set", item]
    return args


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "run"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(root))
    return root


@pytest.mark.parametrize("stage", sorted(STAGE_HELP))
def test_help(stage, capsys):
    with pytest.raises(SystemExit) as exit_info:
        main([stage, "--help"])
    assert exit_info.value.code == 0
    assert "--set" in capsys.readouterr().out


def test_stage_is_required():
    with pytest.raises(SystemExit) as exit_info:
        build_parser().parse_args([])
    assert exit_info.value.code == 2


def test_config_error(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["phantom", "--set", "train.epochz=1"])
    assert exit_info.value.code == 2
    assert "Configuration Error" in capsys.readouterr().err


def test_bad_jobs(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["phantom", "-j", "0"])
    assert exit_info.value.code == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(SystemExit) as exit_info:
        main(["phantom", "-c", str(tmp_path / "absent.json")])
    assert exit_info.value.code == 2


def test_atlas_before_cam(small_run, capsys):
    assert main(["phantom"] + overrides(small_run)) == 0
    with pytest.raises(SystemExit) as exit_info:
        main(["atlas"] + overrides(small_run))
    assert exit_info.value.code == 3
    err = capsys.readouterr().err
    assert "Missing Artifact" in err
    assert "cam_path" in err


def test_train_without_cohort(small_run, capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["train"] + overrides(small_run))
    assert exit_info.value.code == 3


def test_phantom_then_skip(small_run, output_root, capsys):
    assert main(["phantom"] + overrides(small_run)) == 0
    first = (output_root / "receipts" / "phantom" / "stage.json").read_text()
    assert "[phantom] subjects=30" in capsys.readouterr().out
    assert main(["phantom"] + overrides(small_run)) == 0
    assert (output_root / "receipts" / "phantom" / "stage.json").read_text() == first
    assert main(["phantom", "--force"] + overrides(small_run)) == 0
    assert (output_root / "receipts" / "phantom" / "stage.json").read_text() != first


def test_unreadable_test_image_fails_cam(small_run, output_root, capsys):
    args = overrides(small_run)
    assert main(["phantom"] + args) == 0
    assert main(["train"] + args) == 0
    manifest = Manifest.load(output_root / "cohort" / "manifest.jsonl")
    broken = next(r for r in manifest if r.split == "test")
    manifest.resolve(broken.image_path).write_bytes(b"not a volume")

    with pytest.raises(SystemExit) as exit_info:
        main(["cam"] + args)
    assert exit_info.value.code == 5
    err = capsys.readouterr().err
    assert "Partial Failure" in err
    assert "1 subject(s) failed" in err
    receipt = json.loads((output_root / "receipts" / "cam" / "stage.json").read_text())
    assert receipt["summary"] == {"extracted": 11, "failed": 1}

    # a receipt with failures is never treated as up to date
    with pytest.raises(SystemExit) as exit_info:
        main(["cam"] + args)
    assert exit_info.value.code == 5


@pytest.mark.parametrize(
    "error, code",
    [
        (AgeAtlasError("x"), 1),
        (ConfigError("x"), 2),
        (MissingArtifactError("bias", "predictions"), 3),
        (NumericalError("x"), 4),
        (RegistrationError("x", det=-1.0), 4),
        (SubjectFailureError("cam", 2), 5),
    ],
)
def test_exit_codes(error, code):
    assert error.exit_code == code
    assert isinstance(error, AgeAtlasError)


def test_run_all_prints_table(small_run, output_root, capsys):
    assert main(["run-all", "-j", "2"] + overrides(small_run)) == 0
    out = capsys.readouterr().out
    assert "Mean Pred." in out
    assert "Overall" in out
    assert (output_root / "reports" / "metrics.csv").exists()


@pytest.mark.slow
def test_default_run_all(output_root):
    assert main(["run-all", "-j", "4"]) == 0
    metrics = pd.read_csv(output_root / "reports" / "metrics.csv")
    overall = metrics[metrics["category"] == "Overall"].iloc[0]
    assert overall["model"] < 0.5 * overall["mean_pred"]
    localization = pd.read_csv(output_root / "reports" / "localization.csv")
    cells = localization[localization["kind"] == "cell"]
    assert len(cells) == 6
    assert (cells["score"] >= 3.0).all()
    assert (cells["aging_fraction"] < 0.1).all()
    predictions = pd.read_csv(output_root / "reports" / "predictions.csv")
    test = predictions[predictions["split"] == "test"]
    raw_slope = ols_slope(test["age"], test["predicted_age"] - test["age"])
    corrected_slope = ols_slope(test["age"], test["corrected_age"] - test["age"])
    assert raw_slope < -0.1
    assert -0.1 <= corrected_slope <= 0.1
    trend = pd.read_csv(output_root / "reports" / "spine_trend.csv")
    assert trend["age_band"].tolist() == list(AGE_BANDS)
    assert trend["spine_mean"].is_monotonic_increasing
