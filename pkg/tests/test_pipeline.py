import json
from pathlib import Path

import pandas as pd
import pytest

from ageatlas.config import load_config
from ageatlas.errors import MissingArtifactError
from ageatlas.manifest import Manifest
from ageatlas.pipeline import (
    RUN_ALL,
    STAGE_DEFS,
    Layout,
    StageReceipt,
    _sections_digest,
    run_all,
    run_stage,
    spine_trend,
    tree_digest,
)


def small_config(small_run, root):
    return load_config(overrides=list(small_run) + [f"output_root={root}"], environ={})


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, small_run):
    cfg = small_config(small_run, tmp_path_factory.mktemp("run"))
    receipts = run_all(cfg)
    return cfg, Layout(Path(cfg.output_root)), receipts


class TestRunAll:
    def test_receipts(self, finished_run):
        cfg, layout, receipts = finished_run
        assert [r.stage for r in receipts] == list(RUN_ALL)
        for stage in RUN_ALL:
            saved = StageReceipt.load(layout.receipt(stage))
            assert saved is not None
            assert saved.outputs_digest
            assert saved.timings["seconds"] >= 0

    def test_manifest_carries_every_artifact(self, finished_run):
        _, layout, _ = finished_run
        manifest = Manifest.load(layout.manifest)
        test = [r for r in manifest if r.split == "test"]
        assert len(test) == 12
        assert all(r.predicted_age is not None and r.corrected_age is not None for r in manifest)
        assert all(r.cam_path and r.registration_target is not None for r in test)
        assert all(r.cam_path is None for r in manifest if r.split != "test")

    def test_atlas_index(self, finished_run):
        _, layout, _ = finished_run
        entries = json.loads(layout.atlas_index.read_text())["atlases"]
        cells = [e for e in entries if e["kind"] == "cell"]
        assert len(cells) == 6
        assert all(e["n_contributors"] >= 1 for e in entries)
        assert {e["kind"] for e in entries} <= {"cell", "age", "gap"}
        for e in entries:
            assert (layout.atlases / e["path"] / "mean_cam.vol").exists()

    def test_reports(self, finished_run):
        _, layout, _ = finished_run
        frame = pd.read_csv(layout.reports / "metrics.csv")
        assert list(frame.columns) == ["category", "sex", "n", "mean_pred", "model"]
        assert list(frame["n"]) == [2, 2, 2, 2, 2, 2, 12]
        assert "Nr. training samples" in (layout.reports / "metrics.txt").read_text()
        localization = pd.read_csv(layout.reports / "localization.csv")
        assert {"atlas", "kind", "score", "spine_mean"} <= set(localization.columns)
        for name in (
            "bias_correction.png",
            "group_scatter.png",
            "training_curve.png",
            "atlas_sheet.png",
        ):
            assert (layout.reports / "figures" / name).exists()
        assert len(list((layout.reports / "overlays").glob("*_[0-9][0-9][0-9].ppm"))) == 6 * 6
        assert len(list((layout.reports / "overlays").glob("*_grid.ppm"))) == 6

    def test_second_run_skips(self, finished_run):
        cfg, _, receipts = finished_run
        again = run_stage(cfg, "report")
        assert again.timestamp == receipts[-1].timestamp

    def test_force_reruns(self, finished_run):
        cfg, _, receipts = finished_run
        again = run_stage(cfg, "bias", force=True)
        assert again.timestamp != receipts[3].timestamp
        assert again.outputs_digest != ""

    def test_same_seed_same_metrics(self, finished_run, tmp_path, small_run):
        _, layout, _ = finished_run
        other = small_config(small_run, tmp_path / "again")
        run_all(other)
        again = Layout(tmp_path / "again")
        assert (again.reports / "metrics.csv").read_bytes() == (
            layout.reports / "metrics.csv"
        ).read_bytes()
        for base, pattern in (
            (layout.atlases, "**/mean_cam.vol"),
            (layout.atlases, "**/mean_image.vol"),
            (layout.transforms, "**/*.dfield"),
        ):
            files = sorted(base.glob(pattern))
            assert files, pattern
            for path in files:
                twin = again.root / path.relative_to(layout.root)
                assert twin.read_bytes() == path.read_bytes(), path


class TestStageChecks:
    def test_unknown_stage(self, tmp_path, small_run):
        with pytest.raises(ValueError):
            run_stage(small_config(small_run, tmp_path), "plot")

    def test_needs_cohort(self, tmp_path, small_run):
        with pytest.raises(MissingArtifactError, match="phantom"):
            run_stage(small_config(small_run, tmp_path), "train")

    def test_atlas_before_cam(self, tmp_path, small_run):
        cfg = small_config(small_run, tmp_path)
        run_stage(cfg, "phantom")
        with pytest.raises(MissingArtifactError, match="cam_path"):
            run_stage(cfg, "atlas")

    def test_sections_digest(self, small_run, tmp_path):
        cfg = small_config(small_run, tmp_path)
        analysis = cfg.analysis.model_copy(update={"aligned": 1.0})
        changed = cfg.model_copy(update={"analysis": analysis})
        assert _sections_digest(cfg, ("analysis",)) != _sections_digest(changed, ("analysis",))
        same = _sections_digest(changed, ("registration",))
        assert _sections_digest(cfg, ("registration",)) == same

    def test_target_rule_invalidates_register(self, small_run, tmp_path):
        cfg = small_config(small_run, tmp_path)
        sections = STAGE_DEFS["register"].sections
        rule = cfg.model_copy(
            update={"atlas": cfg.atlas.model_copy(update={"target_rule": "lowest_id"})}
        )
        assert _sections_digest(cfg, sections) != _sections_digest(rule, sections)
        slices = cfg.model_copy(
            update={"atlas": cfg.atlas.model_copy(update={"slices": {"axial": [1]}})}
        )
        assert _sections_digest(cfg, sections) == _sections_digest(slices, sections)


class TestHelpers:
    def test_tree_digest(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "x.txt").write_text("1")
        first = tree_digest([tmp_path / "a"])
        (tmp_path / "a" / "x.txt").write_text("2")
        assert tree_digest([tmp_path / "a"]) != first

    def test_unreadable_receipt(self, tmp_path):
        path = tmp_path / "stage.json"
        path.write_text("{")
        assert StageReceipt.load(path) is None
        assert StageReceipt.load(tmp_path / "absent.json") is None

    def test_spine_trend(self):
        frame = pd.DataFrame(
            {
                "kind": ["cell", "age", "age", "age", "gap"],
                "age_band": [None, "ge70", "lt60", "lt60", None],
                "spine_mean": [9.0, 0.2, 0.6, 0.4, 9.0],
            }
        )
        assert spine_trend(frame) == {"lt60": pytest.approx(0.5), "ge70": pytest.approx(0.2)}
        assert list(spine_trend(frame)) == ["lt60", "ge70"]
        assert spine_trend(pd.DataFrame()) == {}
